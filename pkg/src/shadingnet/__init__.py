"""Fine-grained intrinsic image decomposition on a small numpy autodiff engine."""

from .autograd import Tape, Tensor
from .model import ArchConfig, build, forward

__all__ = ["ArchConfig", "Tape", "Tensor", "build", "forward"]
__version__ = "0.1.0"
