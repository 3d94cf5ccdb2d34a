"""
Adapter
Bottleneck with internal residual: h + f(h W_down) W_up.
"""
from autograd import functional as F
from autograd.tensor import Tensor
from core.errors import ShapeError
from core.models import Activation
from peft_modules.lora import LowRankPair


def adapter_forward(h: Tensor, module: LowRankPair, f: Activation) -> Tensor:
    width = h.shape[1]
    if module.down.shape != (width, module.rank) or module.up.shape != (module.rank, width):
        raise ShapeError(
            f"adapter {module.down.shape}/{module.up.shape} does not fit hidden width {width}"
        )
    bottleneck = F.activation(F.matmul(h, module.down), f)
    return F.add(h, F.matmul(bottleneck, module.up))
