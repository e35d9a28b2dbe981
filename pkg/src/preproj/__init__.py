"""Pre-projection and content-skip attention blocks with a frozen-probe trainer."""

from .analyze import count_params, evaluate, kv_cache_footprint, perplexity, skip_norms
from .blocks import BlockConfig, block_forward, causal_attention, lora_apply, pre_projection, rope, skip_apply
from .model import KVCache, ModelConfig, decode_step, desk_config, init_params, model_forward, partition_params
from .tensor import Tape, Tensor, backward, check_gradient
from .train import TrainConfig, cosine_lr, probe_train, synthetic_corpus

__version__ = "0.1.0"
