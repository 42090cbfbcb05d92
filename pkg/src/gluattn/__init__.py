"""GLU multi-head attention next to baseline MHA, on a small numpy autodiff core."""

from .attention import (AttentionConfig, causal_mask, glu_mha_forward, matched_dims, mha_forward,
                        param_count)
from .model import ModelConfig, TransformerModel, classifier_forward, init_model, lm_forward
from .nn import glu, glu_packed
from .tensor import Tape, Tensor, backward, zero_grads
from .train import TrainConfig, cross_entropy, evaluate, fit

__version__ = "0.1.0"
