"""
Optimizers
AdamW (decoupled weight decay) and SGD over Tensor parameters, with
per-group learning-rate factors, global-norm clipping and linear warmup.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from autograd.tensor import Tensor
from core.models import OptimizerConfig, OptimizerKind

logger = logging.getLogger(__name__)


@dataclass
class ParamGroup:
    params: List[Tensor]
    lr_scale: float = 1.0


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype, copy=False)
    return total


class Optimizer:
    """
    One optimizer for every training loop. Parameters whose gradient is
    absent after a backward pass are left untouched for that step.
    """

    def __init__(self, groups: Sequence[ParamGroup], config: OptimizerConfig):
        self.groups = list(groups)
        self.config = config
        self.step_count = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    @classmethod
    def for_params(cls, params: Sequence[Tensor], config: OptimizerConfig) -> "Optimizer":
        return cls([ParamGroup(list(params))], config)

    @property
    def params(self) -> List[Tensor]:
        return [p for group in self.groups for p in group.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def learning_rate(self) -> float:
        """Constant after a linear warmup over `warmup_steps`."""
        warmup = self.config.warmup_steps
        if warmup and self.step_count < warmup:
            return self.config.lr * (self.step_count + 1) / warmup
        return self.config.lr

    def step(self) -> float:
        cfg = self.config
        grad_norm = clip_grad_norm(self.params, cfg.grad_clip) if cfg.grad_clip else 0.0
        base_lr = self.learning_rate()
        self.step_count += 1
        t = self.step_count
        beta1, beta2 = cfg.betas

        for group in self.groups:
            lr = base_lr * group.lr_scale
            for p in group.params:
                if p.grad is None:
                    continue
                g = p.grad
                decay = cfg.weight_decay if p.data.ndim >= 2 else 0.0
                if cfg.algorithm == OptimizerKind.SGD:
                    update = g + decay * p.data
                else:
                    key = id(p)
                    m = self._m.get(key, np.zeros_like(p.data))
                    v = self._v.get(key, np.zeros_like(p.data))
                    m = beta1 * m + (1.0 - beta1) * g
                    v = beta2 * v + (1.0 - beta2) * g * g
                    self._m[key], self._v[key] = m, v
                    m_hat = m / (1.0 - beta1 ** t)
                    v_hat = v / (1.0 - beta2 ** t)
                    if decay:
                        p.data -= (lr * decay * p.data).astype(p.data.dtype, copy=False)
                    update = m_hat / (np.sqrt(v_hat) + cfg.eps)
                p.data -= (lr * update).astype(p.data.dtype, copy=False)
        return grad_norm
