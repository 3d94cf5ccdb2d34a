# Model package
from .transformer import (
    TransformerModel, Mode, TokenBatch, ForwardTrace, pack, causal_mask, parameter_names
)
from .checkpoint import save_checkpoint, load_checkpoint
from .container import fingerprint_arrays, write_container, read_container

__all__ = [
    'TransformerModel', 'Mode', 'TokenBatch', 'ForwardTrace', 'pack', 'causal_mask',
    'parameter_names', 'save_checkpoint', 'load_checkpoint',
    'fingerprint_arrays', 'write_container', 'read_container'
]
