"""Illumination-gated mixture of chiral transformer experts for infrared/visible image fusion.

Everything runs on a small numpy autodiff engine (:mod:`moctefuse.tensor`);
hot loops are numba-compiled unless ``MOCTEFUSE_DISABLE_NUMBA=1``.
"""
from .attention import CTFB, HI, LI, aca, ctfb_forward
from .fusion import FusionConfig, FusionOutput, MoCTEFuse, moctefuse_forward
from .gate import GateConfig, GateProbs, IllumGate, gate_forward
from .losses import LossTerms, LossWeights, competitive_loss, total_loss
from .metrics import entropy, mutual_information, std_dev, vif
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CTFB", "HI", "LI", "aca", "ctfb_forward",
    "FusionConfig", "FusionOutput", "MoCTEFuse", "moctefuse_forward",
    "GateConfig", "GateProbs", "IllumGate", "gate_forward",
    "LossTerms", "LossWeights", "competitive_loss", "total_loss",
    "entropy", "mutual_information", "std_dev", "vif",
    "Tensor", "no_grad",
]
