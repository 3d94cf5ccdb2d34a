"""
Transfer-bound terms
Measured quantities of the loss-discrepancy bound: the discrepancy itself,
the weight shift (ε_att, ρ), the FFN parameter deviation and the strategy
perturbation statistics. Lipschitz constants and curvature are not estimated.
"""
import logging
from typing import Sequence

import numpy as np

from analysis.shift import weight_shift
from core.errors import ArchitectureMismatchError, ConfigError
from core.models import ATTENTION_SITES, FFN_SITES, BoundReport, DeviationReport, DiscrepancyReport, TransPeftConfig
from model.transformer import TransformerModel, pack
from peft_modules.state import PeftState, attach
from strategies.perturbation import MIN_DRAWS, perturbation_stats
from tasks.synthetic import Example
from training.trainer import evaluate_task

logger = logging.getLogger(__name__)


def loss_discrepancy(peft: PeftState, m0: TransformerModel, m1: TransformerModel, eval_set: Sequence[Example]) -> DiscrepancyReport:
    """|L(θ; M1) − L(θ; M0)| on one evaluation set."""
    if m0.config.architecture_tag() != m1.config.architecture_tag():
        raise ArchitectureMismatchError("loss discrepancy needs architecture-identical models")
    attach(m0, peft)
    attach(m1, peft)
    loss_m0 = evaluate_task(m0, peft, eval_set).loss
    loss_m1 = evaluate_task(m1, peft, eval_set).loss
    return DiscrepancyReport(loss_m0=loss_m0, loss_m1=loss_m1, discrepancy=abs(loss_m1 - loss_m0))


def parameter_deviation(a: PeftState, b: PeftState) -> DeviationReport:
    """Euclidean distance between the θ_ffn blocks (θ_att reported alongside)."""
    if a.config != b.config or a.architecture_tag != b.architecture_tag:
        raise ConfigError("parameter deviation needs identically configured PEFT states")
    if set(a.blocks) != set(b.blocks):
        raise ConfigError("PEFT states cover different (layer, site) blocks")
    return DeviationReport(
        ffn=float(np.linalg.norm(a.flat(FFN_SITES) - b.flat(FFN_SITES))),
        attention=float(np.linalg.norm(a.flat(ATTENTION_SITES) - b.flat(ATTENTION_SITES))),
    )


def build_bound_report(
    peft: PeftState,
    reference: PeftState,
    m0: TransformerModel,
    m1: TransformerModel,
    eval_set: Sequence[Example],
    transpeft: TransPeftConfig,
    probe: Sequence[Example],
    draws: int = MIN_DRAWS,
) -> BoundReport:
    """
    `peft` is θ trained on M0; `reference` stands in for the optimum on M1
    (the Fine-tune_n state). Perturbation statistics are taken on M0.
    """
    shift = weight_shift(m0, m1)
    report = BoundReport(
        discrepancy=loss_discrepancy(peft, m0, m1, eval_set),
        epsilon_att=shift.epsilon_att,
        rho=shift.rho,
        parameter_deviation=parameter_deviation(peft, reference),
        perturbation=perturbation_stats(m0, peft, transpeft, pack([e.tokens for e in probe]), draws),
        p_i=transpeft.p_i,
        p_c=transpeft.p_c,
    )
    logger.info(
        f"Bound terms: discrepancy={report.discrepancy.discrepancy:.4g}, "
        f"ε_att={report.epsilon_att:.4g}, ρ={report.rho:.4g}, deviation={report.parameter_deviation.ffn:.4g}"
    )
    return report
