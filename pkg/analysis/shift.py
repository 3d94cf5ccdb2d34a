"""
Weight shift between base-model versions
ε_att and ρ: the largest per-layer spectral shift of the attention and FFN
weights. Each sub-layer's matrices are laid side by side, d rows each, so one
norm covers the whole sub-layer.
"""
import logging

import numpy as np

from core.errors import ArchitectureMismatchError
from core.models import LayerShift, WeightShiftReport
from model.transformer import TransformerModel

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 30
POWER_TOLERANCE = 1e-6


def spectral_norm(matrix: np.ndarray, iterations: int = POWER_ITERATIONS, tol: float = POWER_TOLERANCE) -> float:
    """
    Largest singular value by power iteration on the Gram matrix G = AᵀA.

    Each iteration squares the normalized power of G, so after k steps it holds
    G^(2^k); close top singular values still separate within the iteration cap.
    Stops once the normalized power moves by less than `tol` (Frobenius).
    """
    a = np.asarray(matrix, dtype=np.float64)
    if not a.any():
        return 0.0
    b = a if a.shape[0] >= a.shape[1] else a.T
    power = b.T @ b
    power /= np.linalg.norm(power)
    for _ in range(iterations):
        squared = power @ power
        squared /= np.linalg.norm(squared)
        change = float(np.linalg.norm(squared - power))
        power = squared
        if change <= tol:
            break
    column = power[:, int(np.argmax(np.linalg.norm(power, axis=0)))]
    v = column / np.linalg.norm(column)
    return float(np.linalg.norm(b @ v))


def _attention_block(model: TransformerModel, layer: int) -> np.ndarray:
    w = model.attention_weights(layer)
    return np.hstack([w["q"], w["k"], w["v"], w["o"]]).astype(np.float64)


def _ffn_block(model: TransformerModel, layer: int) -> np.ndarray:
    w = model.ffn_weights(layer)
    parts = [w["fc1"], w["fc2"].T]
    if "gate" in w:
        parts.append(w["gate"])
    return np.hstack(parts).astype(np.float64)


def weight_shift(m0: TransformerModel, m1: TransformerModel) -> WeightShiftReport:
    if m0.config.architecture_tag() != m1.config.architecture_tag():
        raise ArchitectureMismatchError(
            f"cannot compare {m0.config.architecture_tag()} with {m1.config.architecture_tag()}"
        )
    layers = []
    for layer in range(m0.config.n_layers):
        d_att = _attention_block(m1, layer) - _attention_block(m0, layer)
        d_ffn = _ffn_block(m1, layer) - _ffn_block(m0, layer)
        layers.append(LayerShift(
            layer=layer,
            attention_spectral=spectral_norm(d_att),
            attention_frobenius=float(np.linalg.norm(d_att)),
            ffn_spectral=spectral_norm(d_ffn),
            ffn_frobenius=float(np.linalg.norm(d_ffn)),
        ))
    report = WeightShiftReport(
        layers=layers,
        epsilon_att=max(s.attention_spectral for s in layers),
        rho=max(s.ffn_spectral for s in layers),
    )
    logger.info(f"Weight shift: ε_att={report.epsilon_att:.4g}, ρ={report.rho:.4g}")
    return report
