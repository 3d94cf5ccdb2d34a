"""
Perturbation statistics
Monte-Carlo estimates of δ(m, z) = perturbed − clean FFN sub-layer output.
δ is measured layer-locally: every FFN sub-layer sees its clean input, so the
estimate isolates what the strategies do to that sub-layer alone. The
logits-space δ of a full perturbed forward is co-reported.
"""
import logging
from typing import List

import numpy as np

from core.errors import ConfigError
from core.models import PerturbationStats, PerturbationSummary, TransPeftConfig
from model.transformer import ForwardTrace, Mode, TokensLike, TransformerModel, as_batch
from strategies.transpeft import StrategySampler

logger = logging.getLogger(__name__)

MIN_DRAWS = 1000


def _chi2(total: np.ndarray, total_sq: np.ndarray, draws: int) -> float:
    """Mean squared z-score of the per-component means; ≈1 when δ is zero-mean."""
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    live = var > 1e-20
    if not live.any():
        return 0.0
    return float(np.mean(mean[live] ** 2 / (var[live] / draws)))


def perturbation_summary(
    model: TransformerModel,
    peft,
    config: TransPeftConfig,
    tokens: TokensLike,
    draws: int = MIN_DRAWS,
    mode: Mode = Mode.TRAIN,
) -> PerturbationSummary:
    if mode != Mode.TRAIN:
        raise ConfigError("perturbation statistics need the training-mode stochastic path")
    if draws < MIN_DRAWS:
        raise ConfigError(f"draws={draws} below the minimum of {MIN_DRAWS}")

    batch = as_batch(tokens)
    cfg = model.config
    trace = ForwardTrace()
    clean_logits = model.forward(batch, Mode.EVAL, peft=peft, trace=trace).data
    normed = [model.ffn_input(trace.pre_ffn[layer], layer) for layer in range(cfg.n_layers)]
    clean: List[np.ndarray] = trace.ffn_out

    sampler = StrategySampler(config)
    width = sum(out.size for out in clean)
    total = np.zeros(width)
    total_sq = np.zeros(width)
    sq_norms = 0.0
    output_sq_norms = 0.0

    for _ in range(draws):
        sample = sampler.sample(cfg.n_layers, cfg.d_ff, cfg.d_model, batch.n_tokens)
        parts = []
        for layer, drawn in enumerate(sample.layers):
            if sample.drop_ffn and not drawn.ffn_keep:
                parts.append(-clean[layer].reshape(-1))
                continue
            mask = drawn.ffn_mask if sample.mask_ffn else None
            out = model.ffn_forward(normed[layer], layer, peft, mask=mask, mask_scale=sample.mask_scale).data
            if sample.drop_ffn:
                out = out * sample.keep_scale
            parts.append((out - clean[layer]).reshape(-1))
        delta = np.concatenate(parts).astype(np.float64)
        total += delta
        total_sq += delta * delta
        sq_norms += float(delta @ delta)

        perturbed = model.forward(batch, Mode.TRAIN, peft=peft, sample=sample).data
        diff = (perturbed - clean_logits).astype(np.float64).reshape(-1)
        output_sq_norms += float(diff @ diff)

    summary = PerturbationSummary(
        p_i=config.p_i,
        p_c=config.p_c,
        rescale=config.rescale,
        draws=draws,
        mean_delta_norm=float(np.linalg.norm(total / draws)),
        mean_delta_chi2=_chi2(total, total_sq, draws),
        mean_sq_norm=sq_norms / draws,
        output_mean_sq_norm=output_sq_norms / draws,
    )
    logger.debug(
        f"δ over {draws} draws (p_i={config.p_i}, p_c={config.p_c}, rescale={config.rescale}): "
        f"‖E δ‖={summary.mean_delta_norm:.3e}, E‖δ‖²={summary.mean_sq_norm:.3e}"
    )
    return summary


def perturbation_stats(
    model: TransformerModel,
    peft,
    config: TransPeftConfig,
    tokens: TokensLike,
    draws: int = MIN_DRAWS,
    mode: Mode = Mode.TRAIN,
) -> PerturbationStats:
    """Combined strategies plus the masking-only and dropping-only splits."""
    return PerturbationStats(
        combined=perturbation_summary(model, peft, config, tokens, draws, mode),
        masking_only=perturbation_summary(model, peft, config.model_copy(update={"p_c": 0.0}), tokens, draws, mode),
        dropping_only=perturbation_summary(model, peft, config.model_copy(update={"p_i": 0.0}), tokens, draws, mode),
    )
