"""Multimodal multitask clinical prediction at desk scale.

Core pieces: combination-masked attention over a token sequence assembled
from per-modality embeddings, token-level covariance decorrelation of the
combination tokens, a task-conditioned top-k mixture-of-experts, and
temperature-softmax fusion into a patient-level representation, trained by
alternating single-task mini-batches.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
