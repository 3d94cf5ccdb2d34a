# Strategies package
# perturbation statistics live in strategies.perturbation (imports the model)
from .transpeft import (
    StrategySampler, MaskSample, LayerSample, sample, apply_mask, apply_drop, forced_drop_sample
)

__all__ = [
    'StrategySampler', 'MaskSample', 'LayerSample', 'sample', 'apply_mask', 'apply_drop',
    'forced_drop_sample'
]
