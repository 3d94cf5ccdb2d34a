# PEFT package
from .lora import LowRankPair, lora_forward
from .adapter import adapter_forward
from .state import (
    PeftState, BoundModel, init_peft, attach, detach, transfer,
    save_peft, load_peft, site_shape
)

__all__ = [
    'LowRankPair', 'lora_forward', 'adapter_forward',
    'PeftState', 'BoundModel', 'init_peft', 'attach', 'detach', 'transfer',
    'save_peft', 'load_peft', 'site_shape'
]
