"""
Training loops
Pretraining M0, continual updating to M1, PEFT fine-tuning (with or
without Trans-PEFT strategies) and task evaluation.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from analysis.shift import weight_shift
from autograd import functional as F
from autograd.tensor import Tape, Tensor
from core.errors import FrozenBaseViolation, NonFiniteError, TrainingDivergedError
from core.models import (
    ModelConfig, OptimizerConfig, PeftConfig, TaskMetrics, TransPeftConfig,
    UpdateConfig, UpdateMode, UpdatePair, WeightShiftReport
)
from model.checkpoint import save_checkpoint
from model.transformer import Mode, TransformerModel, pack
from peft_modules.state import PeftState, init_peft, save_peft
from strategies.transpeft import StrategySampler
from tasks.synthetic import Example
from training.optim import Optimizer, ParamGroup

logger = logging.getLogger(__name__)

DUMP_NAME = "divergence_dump.ckpt"
EVAL_BATCH = 128


@dataclass
class TrainingHistory:
    steps: int = 0
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None


# ========== Batches ==========

def lm_targets(examples: Sequence[Example], answer_only: bool) -> Tuple[list, np.ndarray, np.ndarray]:
    """
    Inputs are tokens[:-1], targets tokens[1:]. With `answer_only`, only the
    predictions of answer-region tokens carry weight.
    """
    inputs, targets, weights = [], [], []
    for example in examples:
        tokens = example.tokens
        inputs.append(tokens[:-1])
        targets.extend(tokens[1:])
        start = example.answer_start if answer_only else 1
        weights.extend(1.0 if i + 1 >= start else 0.0 for i in range(len(tokens) - 1))
    return inputs, np.asarray(targets, dtype=np.int64), np.asarray(weights)


def batch_loss(
    model: TransformerModel,
    examples: Sequence[Example],
    answer_only: bool,
    mode: Mode = Mode.TRAIN,
    peft: Optional[PeftState] = None,
    sampler: Optional[StrategySampler] = None,
) -> Tensor:
    inputs, targets, weights = lm_targets(examples, answer_only)
    logits = model.forward(pack(inputs), mode=mode, peft=peft, sampler=sampler)
    return F.cross_entropy(logits, targets, weights)


# ========== Shared loop ==========

def _run_epochs(
    examples: Sequence[Example],
    optimizer: Optimizer,
    opt_config: OptimizerConfig,
    step_loss: Callable[[Sequence[Example]], Tensor],
    dump: Callable[[], Optional[str]],
    after_backward: Optional[Callable[[], None]] = None,
    label: str = "train",
) -> TrainingHistory:
    history = TrainingHistory()
    if not examples:
        return history
    # data order depends only on the optimizer seed
    order_rng = np.random.default_rng(np.random.SeedSequence([opt_config.seed, 0x0DA7A]))
    budget = opt_config.max_steps

    for epoch in range(opt_config.epochs):
        if budget is not None and history.steps >= budget:
            break
        order = order_rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), opt_config.batch_size):
            if budget is not None and history.steps >= budget:
                break
            batch = [examples[i] for i in order[start:start + opt_config.batch_size]]
            optimizer.zero_grad()
            try:
                with Tape() as tape:
                    loss = step_loss(batch)
                if loss.requires_grad:
                    tape.backward(loss)
            except NonFiniteError as e:
                path = dump()
                logger.error(f"{label} diverged at step {history.steps}: {e}")
                raise TrainingDivergedError(f"{label} diverged at step {history.steps}: {e}", path) from e
            if after_backward is not None:
                after_backward()
            optimizer.step()
            history.steps += 1
            losses.append(loss.item())
            logger.debug(f"{label} step {history.steps}: loss {losses[-1]:.4f}")
        if losses:
            history.epoch_losses.append(float(np.mean(losses)))
            logger.info(f"{label} epoch {epoch + 1}/{opt_config.epochs}: loss {history.epoch_losses[-1]:.4f}")
    return history


def _model_dump(model: TransformerModel, dump_dir: Optional[Path]) -> Callable[[], Optional[str]]:
    def dump() -> Optional[str]:
        if dump_dir is None:
            return None
        path = Path(dump_dir) / DUMP_NAME
        save_checkpoint(model, path)
        return str(path)
    return dump


# ========== Base-model stages ==========

def pretrain(
    config: ModelConfig,
    corpus: Sequence[Example],
    optimizer: OptimizerConfig,
    dump_dir: Optional[Path] = None,
) -> Tuple[TransformerModel, TrainingHistory]:
    """Train M0 from initialization (seeded by optimizer.seed) on the full causal-LM objective."""
    model = TransformerModel.initialize(config, optimizer.seed)
    model.set_trainable(True)
    opt = Optimizer.for_params(model.parameters(), optimizer)
    logger.info(f"Pretraining {config.architecture_tag()} on {len(corpus)} sequences")
    history = _run_epochs(
        corpus, opt, optimizer,
        lambda batch: batch_loss(model, batch, answer_only=False),
        _model_dump(model, dump_dir), label="pretrain",
    )
    model.freeze()
    logger.info(f"Pretraining done: {history.steps} steps, final loss {history.final_loss}")
    return model, history


def attention_parameter_names(model: TransformerModel) -> List[str]:
    return [name for name in model.params if ".attn." in name]


def continual_update(
    m0: TransformerModel,
    update: UpdateConfig,
    corpus: Sequence[Example],
    dump_dir: Optional[Path] = None,
) -> Tuple[TransformerModel, TrainingHistory, WeightShiftReport]:
    """
    M1 from M0 by continued causal-LM training on a shifted corpus. In
    controlled mode the attention projections train at κ·lr. M0 is not modified.
    """
    m1 = m0.copy()
    m1.set_trainable(True)
    attention = set(attention_parameter_names(m1))
    attn_scale = update.kappa if update.mode == UpdateMode.CONTROLLED else 1.0
    groups = [
        ParamGroup([p for n, p in m1.params.items() if n in attention], lr_scale=attn_scale),
        ParamGroup([p for n, p in m1.params.items() if n not in attention]),
    ]
    opt = Optimizer(groups, update.optimizer)
    logger.info(f"Updating M0 ({update.mode.value}, κ={attn_scale}) on {len(corpus)} sequences")
    history = _run_epochs(
        corpus, opt, update.optimizer,
        lambda batch: batch_loss(m1, batch, answer_only=False),
        _model_dump(m1, dump_dir), label="update",
    )
    m1.freeze()
    return m1, history, weight_shift(m0, m1)


def make_update_pair(
    m0: TransformerModel,
    m1: TransformerModel,
    update: UpdateConfig,
    history: TrainingHistory,
    shift: WeightShiftReport,
    m0_path: Path,
    m1_path: Path,
) -> UpdatePair:
    return UpdatePair(
        m0_path=str(m0_path),
        m1_path=str(m1_path),
        m0_fingerprint=m0.fingerprint(),
        m1_fingerprint=m1.fingerprint(),
        architecture_tag=m0.config.architecture_tag(),
        mode=update.mode,
        kappa=update.kappa,
        corpus=update.corpus,
        steps=history.steps,
        epsilon_att=shift.epsilon_att,
        rho=shift.rho,
    )


# ========== PEFT fine-tuning ==========

def finetune_peft(
    model: TransformerModel,
    train: Sequence[Example],
    peft_config: PeftConfig,
    optimizer: OptimizerConfig,
    transpeft: Optional[TransPeftConfig] = None,
    init_seed: Optional[int] = None,
    worker_id: int = 0,
    dump_dir: Optional[Path] = None,
) -> Tuple[PeftState, TrainingHistory]:
    """
    Train a fresh PEFT state on a frozen base. Strategies, when configured,
    perturb every training forward; the base never receives a gradient.
    """
    model.freeze()
    base_fingerprint = model.fingerprint()
    seed = optimizer.seed if init_seed is None else init_seed
    peft = init_peft(peft_config, model.config, seed, source_fingerprint=base_fingerprint)
    peft.set_trainable(True)
    sampler = StrategySampler(transpeft, worker_id=worker_id) if transpeft is not None else None
    opt = Optimizer.for_params(peft.parameters(), optimizer)

    def check_frozen() -> None:
        touched = [name for name, p in model.params.items() if p.grad is not None]
        if touched:
            raise FrozenBaseViolation(f"base weights received gradients: {touched[:3]}")

    def dump() -> Optional[str]:
        if dump_dir is None:
            return None
        path = Path(dump_dir) / DUMP_NAME
        save_peft(peft, path)
        return str(path)

    label = "trans-peft" if transpeft is not None and transpeft.enabled else "finetune"
    history = _run_epochs(
        train, opt, optimizer,
        lambda batch: batch_loss(model, batch, answer_only=True, peft=peft, sampler=sampler),
        dump, after_backward=check_frozen, label=label,
    )
    peft.set_trainable(False)
    if model.fingerprint() != base_fingerprint:
        raise FrozenBaseViolation("base fingerprint changed during fine-tuning")
    if sampler is not None:
        logger.debug(f"{label}: {sampler.draws} strategy draws")
    return peft, history


# ========== Evaluation ==========

def evaluate_task(
    model: TransformerModel,
    peft: Optional[PeftState],
    examples: Sequence[Example],
    batch_size: int = EVAL_BATCH,
) -> TaskMetrics:
    """
    Mean answer-token loss and exact-match accuracy. Greedy exact match equals
    every teacher-forced argmax on the answer region being correct, which one
    evaluation forward decides.
    """
    total_loss = 0.0
    total_tokens = 0
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        inputs, targets, weights = lm_targets(chunk, answer_only=True)
        logits = model.forward(pack(inputs), mode=Mode.EVAL, peft=peft).data.astype(np.float64)
        log_probs = log_softmax(logits, axis=1)
        rows = np.arange(len(targets))
        answer = weights > 0
        total_loss -= float(log_probs[rows[answer], targets[answer]].sum())
        total_tokens += int(answer.sum())
        hits = logits.argmax(axis=1) == targets

        offset = 0
        for example in chunk:
            n = len(example.tokens) - 1
            span = answer[offset:offset + n]
            correct += bool(hits[offset:offset + n][span].all())
            offset += n

    n = len(examples)
    return TaskMetrics(
        loss=total_loss / max(total_tokens, 1),
        accuracy=correct / n if n else 0.0,
        n_examples=n,
    )
