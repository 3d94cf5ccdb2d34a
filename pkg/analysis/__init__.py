# Analysis package
# bound terms live in analysis.bound (imports the training loops)
from .shift import spectral_norm, weight_shift
from .activations import (
    ActivationTrace, record_activations, compare_distributions,
    layer_influence, sign_agreement, profile_similarity
)

__all__ = [
    'spectral_norm', 'weight_shift',
    'ActivationTrace', 'record_activations', 'compare_distributions',
    'layer_influence', 'sign_agreement', 'profile_similarity'
]
