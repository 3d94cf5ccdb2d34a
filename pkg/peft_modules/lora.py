"""
LoRA
h = XW + (α/r)·X W_down W_up, with W_up zero-initialized.
"""
from dataclasses import dataclass

from autograd import functional as F
from autograd.tensor import Tensor
from core.errors import ShapeError


@dataclass
class LowRankPair:
    """W_down (in × r) and W_up (r × out); used by LoRA and Adapter alike"""
    down: Tensor
    up: Tensor

    @property
    def rank(self) -> int:
        return self.down.shape[1]


def lora_forward(x: Tensor, weight: Tensor, delta: LowRankPair, alpha: float) -> Tensor:
    d_in, d_out = weight.shape
    if delta.down.shape != (d_in, delta.rank) or delta.up.shape != (delta.rank, d_out):
        raise ShapeError(
            f"LoRA chain {d_in}->{delta.rank}->{d_out} does not fit "
            f"W_down {delta.down.shape}, W_up {delta.up.shape}"
        )
    base = F.matmul(x, weight)
    low_rank = F.matmul(F.matmul(x, delta.down), delta.up)
    return F.add(base, F.scale(low_rank, alpha / delta.rank))
