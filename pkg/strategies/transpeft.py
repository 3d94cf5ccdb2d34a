"""
Trans-PEFT strategies
Intra-layer knowledge masking (m ~ Bernoulli(1-p_i) on the FFN intermediate
activation) and cross-layer knowledge dropping (z ~ Bernoulli(1-p_c) on the
whole FFN output), resampled on every training forward pass.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from autograd import functional as F
from autograd.tensor import Tensor
from core.errors import ShapeError
from core.models import Granularity, TransPeftConfig

logger = logging.getLogger(__name__)


@dataclass
class LayerSample:
    """Realized strategy draws for one transformer layer"""
    ffn_mask: np.ndarray          # (d_ff,) or (tokens, d_ff), binary
    ffn_keep: bool                # z
    attention_mask: np.ndarray    # (d,) or (tokens, d), binary
    attention_keep: bool


@dataclass
class MaskSample:
    layers: List[LayerSample]
    mask_ffn: bool
    drop_ffn: bool
    mask_attention: bool
    drop_attention: bool
    mask_scale: float = 1.0
    keep_scale: float = 1.0
    draw_index: int = 0

    @property
    def kept_layers(self) -> List[bool]:
        return [layer.ffn_keep for layer in self.layers]


def _scales(config: TransPeftConfig) -> tuple:
    if not config.rescale:
        return 1.0, 1.0
    return 1.0 / (1.0 - config.p_i), 1.0 / (1.0 - config.p_c)


class StrategySampler:
    """
    Owns the strategy RNG stream for one training worker.

    The stream is seeded from (strategy_seed, worker_id) and is independent
    of data order and initialization, so switching strategies off leaves
    every other random stream untouched.
    """

    def __init__(self, config: TransPeftConfig, worker_id: int = 0):
        self.config = config
        self.worker_id = worker_id
        self.rng = np.random.default_rng(np.random.SeedSequence([config.strategy_seed, worker_id]))
        self.draws = 0

    def _bits(self, rate: float, shape) -> np.ndarray:
        if rate == 0.0:
            return np.ones(shape, dtype=bool)
        return self.rng.random(shape) >= rate

    def sample(self, n_layers: int, d_ff: int, d_model: int, n_tokens: int = 1) -> MaskSample:
        cfg = self.config
        per_token = cfg.granularity == Granularity.PER_TOKEN
        ffn_shape = (n_tokens, d_ff) if per_token else (d_ff,)
        attn_shape = (n_tokens, d_model) if per_token else (d_model,)

        layers = []
        for _ in range(n_layers):
            layers.append(LayerSample(
                ffn_mask=self._bits(cfg.p_i if cfg.on_ffn else 0.0, ffn_shape),
                ffn_keep=bool(self._bits(cfg.p_c if cfg.on_ffn else 0.0, ())),
                attention_mask=self._bits(cfg.p_i if cfg.on_attention else 0.0, attn_shape),
                attention_keep=bool(self._bits(cfg.p_c if cfg.on_attention else 0.0, ())),
            ))
        self.draws += 1
        mask_scale, keep_scale = _scales(cfg)
        return MaskSample(
            layers=layers,
            mask_ffn=cfg.on_ffn and cfg.p_i > 0.0,
            drop_ffn=cfg.on_ffn and cfg.p_c > 0.0,
            mask_attention=cfg.on_attention and cfg.p_i > 0.0,
            drop_attention=cfg.on_attention and cfg.p_c > 0.0,
            mask_scale=mask_scale,
            keep_scale=keep_scale,
            draw_index=self.draws,
        )


def sample(config: TransPeftConfig, n_layers: int, d_ff: int, rng: np.random.Generator,
           d_model: Optional[int] = None, n_tokens: int = 1) -> MaskSample:
    """One-off draw from an external generator (analysis and tests)."""
    sampler = StrategySampler(config)
    sampler.rng = rng
    return sampler.sample(n_layers, d_ff, d_model or d_ff, n_tokens)


# ========== Application ==========

def apply_mask(intermediate: Tensor, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """intermediate ⊙ m (kept entries divided by 1-p_i when rescaling)."""
    rows, width = intermediate.shape
    if mask.shape[-1] != width or (mask.ndim == 2 and mask.shape[0] != rows) or mask.ndim > 2:
        raise ShapeError(f"mask shape {mask.shape} does not fit activation {intermediate.shape}")
    factor = np.broadcast_to(mask.astype(intermediate.data.dtype) * scale, (rows, width))
    return F.mul(intermediate, Tensor.wrap(np.ascontiguousarray(factor)))


def apply_drop(output: Tensor, keep: bool, scale: float = 1.0) -> Optional[Tensor]:
    """z · FFN(X). Returns None for z = 0 so callers add nothing at all."""
    if not keep:
        return None
    return output if scale == 1.0 else F.scale(output, scale)


def forced_drop_sample(n_layers: int, d_ff: int, d_model: int, dropped: frozenset) -> MaskSample:
    """Diagnostic sample: z = 0 on the listed layers, everything else kept."""
    layers = [
        LayerSample(
            ffn_mask=np.ones(d_ff, dtype=bool),
            ffn_keep=index not in dropped,
            attention_mask=np.ones(d_model, dtype=bool),
            attention_keep=True,
        )
        for index in range(n_layers)
    ]
    return MaskSample(layers=layers, mask_ffn=False, drop_ffn=True, mask_attention=False, drop_attention=False)
