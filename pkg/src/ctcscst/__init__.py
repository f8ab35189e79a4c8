"""CTC maximum-likelihood training combined with self-critical policy gradient."""
from .alphabet import Alphabet, collapse, inverse_image_size
from .ctc import LossGrad, ctc_brute_force, ctc_forward, ctc_grad, log_softmax
from .decoder import beam_search, exhaustive_decode
from .metrics import EditStats, edit_distance, error_rate, reward
from .policy import MixedLossConfig, PolicyEstimate, mixed_loss, reinforce_grad, scst_grad
from .sampler import SampleDraw, greedy_decode, sample_path

__version__ = "0.1.0"

__all__ = [
    "Alphabet",
    "EditStats",
    "LossGrad",
    "MixedLossConfig",
    "PolicyEstimate",
    "SampleDraw",
    "beam_search",
    "collapse",
    "ctc_brute_force",
    "ctc_forward",
    "ctc_grad",
    "edit_distance",
    "error_rate",
    "exhaustive_decode",
    "greedy_decode",
    "inverse_image_size",
    "log_softmax",
    "mixed_loss",
    "reinforce_grad",
    "reward",
    "sample_path",
    "scst_grad",
]
