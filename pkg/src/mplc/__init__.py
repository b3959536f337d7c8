"""Multi-plane light converter design as physical-neural-network training."""

__version__ = "0.1.0"

from .errors import ConfigurationError, GridMismatchError, MPLCError  # noqa: E402
from .grid import (  # noqa: E402
    ComplexField,
    GridSpec,
    ModeSet,
    build_linear_array_modeset,
    gaussian_spot,
    hermite_gaussian,
    inner_product,
    normalize,
    similarity,
)
from .model import MPLCModel, backward_trace, forward, forward_trace  # noqa: E402
from .propagation import SpectralPropagator  # noqa: E402
from .gradients import aggregate_gradients, loss_and_grads  # noqa: E402
from .macro import MacroProgram, Stage, builtin_program, parse_macro, run_program  # noqa: E402
from .evaluation import crosstalk_matrix, evaluate, insertion_loss  # noqa: E402
