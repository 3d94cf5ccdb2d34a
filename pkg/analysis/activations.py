"""
Activation analysis
Per-dimension activation statistics at the attention output and the FFN
intermediate, their comparison across model versions, and FFN layer
influence (growth of the residual-stream norm across each FFN sub-layer).
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import stats

from core.errors import ArchitectureMismatchError, ConfigError, ShapeError
from core.models import DistributionComparison, LayerInfluence, SiteSimilarity
from model.container import fingerprint_arrays
from model.transformer import ForwardTrace, Mode, TransformerModel, pack
from strategies.transpeft import forced_drop_sample
from tasks.synthetic import Example

logger = logging.getLogger(__name__)

PROBE_CHUNK = 64
TOPK_DIVISOR = 16


@dataclass
class SiteStats:
    mean_abs: np.ndarray
    variance: np.ndarray


@dataclass
class ActivationTrace:
    architecture_tag: str
    probe_fingerprint: str
    n_tokens: int
    attention: List[SiteStats]
    ffn: List[SiteStats]


def probe_fingerprint(probe: Sequence[Example]) -> str:
    ids = np.asarray([t for example in probe for t in example.tokens], dtype=np.int64)
    lengths = np.asarray([len(example.tokens) for example in probe], dtype=np.int64)
    return fingerprint_arrays({"ids": ids, "lengths": lengths})


def _traced_chunks(model: TransformerModel, peft, probe: Sequence[Example], **forward_kwargs):
    if not probe:
        raise ConfigError("probe set is empty")
    for start in range(0, len(probe), PROBE_CHUNK):
        trace = ForwardTrace()
        batch = pack([example.tokens for example in probe[start:start + PROBE_CHUNK]])
        model.forward(batch, peft=peft, trace=trace, **forward_kwargs)
        yield trace


def _site_stats(chunks: List[np.ndarray]) -> SiteStats:
    stacked = np.concatenate(chunks, axis=0).astype(np.float64)
    return SiteStats(mean_abs=np.abs(stacked).mean(axis=0), variance=stacked.var(axis=0))


def record_activations(model: TransformerModel, peft, probe: Sequence[Example]) -> ActivationTrace:
    """Evaluation-mode statistics for every layer at both sites."""
    n_layers = model.config.n_layers
    attention: List[List[np.ndarray]] = [[] for _ in range(n_layers)]
    ffn: List[List[np.ndarray]] = [[] for _ in range(n_layers)]
    n_tokens = 0
    for trace in _traced_chunks(model, peft, probe):
        for layer in range(n_layers):
            attention[layer].append(trace.attention_out[layer])
            ffn[layer].append(trace.ffn_intermediate[layer])
        n_tokens += trace.attention_out[0].shape[0]
    return ActivationTrace(
        architecture_tag=model.config.architecture_tag(),
        probe_fingerprint=probe_fingerprint(probe),
        n_tokens=n_tokens,
        attention=[_site_stats(chunks) for chunks in attention],
        ffn=[_site_stats(chunks) for chunks in ffn],
    )


def profile_similarity(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """(Pearson correlation, top-k overlap) of two mean-|activation| profiles."""
    if a.shape != b.shape:
        raise ShapeError(f"profile shapes differ: {a.shape} vs {b.shape}")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        pearson = 1.0 if np.array_equal(a, b) else 0.0
    else:
        pearson = float(stats.pearsonr(a, b)[0])
    k = max(1, a.size // TOPK_DIVISOR)
    top_a = set(np.argsort(-a, kind="stable")[:k].tolist())
    top_b = set(np.argsort(-b, kind="stable")[:k].tolist())
    return pearson, len(top_a & top_b) / k


def compare_distributions(a: ActivationTrace, b: ActivationTrace) -> DistributionComparison:
    if a.architecture_tag != b.architecture_tag:
        raise ArchitectureMismatchError(f"traces from {a.architecture_tag} and {b.architecture_tag}")
    if a.probe_fingerprint != b.probe_fingerprint:
        raise ConfigError("traces were recorded on different probe sets")
    if len(a.attention) != len(b.attention):
        raise ShapeError("traces cover different layer counts")

    sites: List[SiteSimilarity] = []
    for layer in range(len(a.attention)):
        for name, sa, sb in (("attention", a.attention[layer], b.attention[layer]), ("ffn", a.ffn[layer], b.ffn[layer])):
            pearson, overlap = profile_similarity(sa.mean_abs, sb.mean_abs)
            sites.append(SiteSimilarity(layer=layer, site=name, pearson=pearson, topk_overlap=overlap))

    def mean(site: str, key: str) -> float:
        return float(np.mean([getattr(s, key) for s in sites if s.site == site]))

    result = DistributionComparison(
        sites=sites,
        mean_attention_pearson=mean("attention", "pearson"),
        mean_ffn_pearson=mean("ffn", "pearson"),
        mean_attention_overlap=mean("attention", "topk_overlap"),
        mean_ffn_overlap=mean("ffn", "topk_overlap"),
    )
    logger.info(
        f"Activation similarity: attention r={result.mean_attention_pearson:.3f}, "
        f"ffn r={result.mean_ffn_pearson:.3f}"
    )
    return result


def layer_influence(
    model: TransformerModel,
    peft,
    probe: Sequence[Example],
    dropped_layers: frozenset = frozenset(),
) -> LayerInfluence:
    """
    Mean over probe tokens of ‖post-FFN‖ − ‖pre-FFN‖ per layer. Layers in
    `dropped_layers` run with z forced to 0 (diagnostic).
    """
    cfg = model.config
    kwargs = {"mode": Mode.EVAL}
    if dropped_layers:
        kwargs = {
            "mode": Mode.TRAIN,
            "sample": forced_drop_sample(cfg.n_layers, cfg.d_ff, cfg.d_model, frozenset(dropped_layers)),
        }
    sums = np.zeros(cfg.n_layers)
    count = 0
    for trace in _traced_chunks(model, peft, probe, **kwargs):
        for layer in range(cfg.n_layers):
            post = np.linalg.norm(trace.post_ffn[layer].astype(np.float64), axis=1)
            pre = np.linalg.norm(trace.pre_ffn[layer].astype(np.float64), axis=1)
            sums[layer] += float((post - pre).sum())
        count += trace.pre_ffn[0].shape[0]
    return LayerInfluence(values=(sums / count).tolist())


def sign_agreement(a: LayerInfluence, b: LayerInfluence) -> float:
    if len(a.values) != len(b.values):
        raise ShapeError(f"influence profiles of {len(a.values)} and {len(b.values)} layers")
    if not a.values:
        return 1.0
    return float(np.mean(np.sign(a.values) == np.sign(b.values)))
