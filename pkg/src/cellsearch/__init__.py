"""cellsearch: differentiable cell-based CNN architecture search with an
entropy-monitored bi-level optimizer, discrete genotype derivation, derived
network training, and EER-based multilingual speaker-verification evaluation,
all on a minimal float64 reverse-mode tensor core."""

from . import _threads  # must precede numpy import for BLAS thread bounds

from .tensor import Tensor, Tape, backward
from .optim import AdamState, adam_step
from .gradcheck import grad_check

__version__ = "0.1.0"
NUM_THREADS = _threads.NUM_THREADS
