"""
Core Models - Pydantic schemas
Configurations, manifests and reports shared by every stage of the lab.
"""
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import config


def _split_csv(value: Any) -> Any:
    """Comma-separated text (config-file form) to a list; other values pass through."""
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


# ========== Model ==========

class Activation(str, Enum):
    """Nonlinearities selectable for FFN (σ) and adapters (f)"""
    RELU = "relu"
    GELU = "gelu"
    SILU = "silu"
    IDENTITY = "identity"  # test-only, makes FFN traces linear


class FfnStyle(str, Enum):
    PLAIN = "plain"
    GATED = "gated"


class ModelConfig(_Schema):
    """Shape of the toy transformer"""
    n_layers: int = Field(default=4, gt=0)
    d_model: int = Field(default=64, gt=0)
    d_ff: int = Field(default=256, gt=0)
    n_heads: int = Field(default=4, gt=0)
    vocab_size: int = Field(default=64, gt=0)
    max_seq_len: int = Field(default=64, gt=0)
    activation: Activation = Activation.GELU
    ffn_style: FfnStyle = FfnStyle.PLAIN
    arch_version: str = "toy-transformer/1"
    init_std: float = Field(default=0.02, gt=0)

    @model_validator(mode="after")
    def check_extents(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < self.d_model:
            raise ValueError(f"d_ff={self.d_ff} must be >= d_model={self.d_model}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def architecture_tag(self) -> str:
        """Everything that must match for two models to exchange PEFT modules."""
        return (
            f"{self.arch_version}|L{self.n_layers}|d{self.d_model}|ff{self.d_ff}"
            f"|h{self.n_heads}|V{self.vocab_size}|T{self.max_seq_len}"
            f"|{self.activation.value}|{self.ffn_style.value}"
        )


# ========== PEFT ==========

class PeftKind(str, Enum):
    LORA = "lora"
    ADAPTER = "adapter"


class PeftSite(str, Enum):
    QUERY = "query"
    VALUE = "value"
    FC1 = "fc1"
    FC2 = "fc2"
    AFTER_ATTENTION = "after_attention"
    AFTER_FFN = "after_ffn"


ATTENTION_SITES = frozenset({PeftSite.QUERY, PeftSite.VALUE, PeftSite.AFTER_ATTENTION})
FFN_SITES = frozenset({PeftSite.FC1, PeftSite.FC2, PeftSite.AFTER_FFN})

SITES_BY_KIND = {
    PeftKind.LORA: (PeftSite.QUERY, PeftSite.VALUE, PeftSite.FC1, PeftSite.FC2),
    PeftKind.ADAPTER: (PeftSite.AFTER_ATTENTION, PeftSite.AFTER_FFN),
}


class PeftConfig(_Schema):
    """LoRA / Adapter hyper-parameters"""
    kind: PeftKind = PeftKind.LORA
    rank: int = Field(default=8, ge=1)
    alpha: Optional[float] = Field(default=None, description="LoRA scale numerator; defaults to 2r")
    targets: List[PeftSite] = Field(default_factory=list)
    adapter_activation: Activation = Activation.RELU

    @model_validator(mode="before")
    @classmethod
    def fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        kind = PeftKind(data.get("kind", PeftKind.LORA))
        if kind == PeftKind.LORA and data.get("alpha") is None:
            data["alpha"] = 2.0 * int(data.get("rank", 8))
        if not data.get("targets"):
            data["targets"] = list(SITES_BY_KIND[kind])
        return data

    @field_validator("targets", mode="before")
    @classmethod
    def split_targets(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_targets(self) -> "PeftConfig":
        allowed = SITES_BY_KIND[self.kind]
        bad = [s.value for s in self.targets if s not in allowed]
        if bad:
            raise ValueError(f"sites {bad} are not valid for {self.kind.value}")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("duplicate target sites")
        return self

    @property
    def scaling(self) -> float:
        return (self.alpha or 0.0) / self.rank


# ========== Trans-PEFT strategies ==========

class ApplySite(str, Enum):
    FFN = "ffn"
    ATTENTION = "attention"
    BOTH = "both"


class Granularity(str, Enum):
    PER_FORWARD = "per_forward"
    PER_TOKEN = "per_token"


class TransPeftConfig(_Schema):
    """Intra-layer masking rate p_i and cross-layer dropping rate p_c"""
    p_i: float = Field(default=0.0, ge=0.0, lt=1.0)
    p_c: float = Field(default=0.0, ge=0.0, lt=1.0)
    apply_site: ApplySite = ApplySite.FFN
    rescale: bool = False
    granularity: Granularity = Granularity.PER_FORWARD
    strategy_seed: int = 42

    @property
    def enabled(self) -> bool:
        return self.p_i > 0.0 or self.p_c > 0.0

    @property
    def on_ffn(self) -> bool:
        return self.apply_site in (ApplySite.FFN, ApplySite.BOTH)

    @property
    def on_attention(self) -> bool:
        return self.apply_site in (ApplySite.ATTENTION, ApplySite.BOTH)


# ========== Training ==========

class OptimizerKind(str, Enum):
    ADAMW = "adamw"
    SGD = "sgd"


class OptimizerConfig(_Schema):
    algorithm: OptimizerKind = OptimizerKind.ADAMW
    lr: float = Field(default=1e-3, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=3, ge=0)
    max_steps: Optional[int] = Field(default=None, ge=0)
    warmup_steps: int = Field(default=0, ge=0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0.0)
    seed: int = 42

    @field_validator("betas", mode="before")
    @classmethod
    def split_betas(cls, value: Any) -> Any:
        return _split_csv(value)


class TaskKind(str, Enum):
    CHAR_LM = "char_lm"
    MOD_ADD = "mod_add"
    COPY = "copy"
    REVERSE = "reverse"
    SORT = "sort"


class TaskSpec(_Schema):
    """One synthetic task family"""
    kind: TaskKind = TaskKind.MOD_ADD
    modulus: int = Field(default=61, ge=2)
    length: int = Field(default=8, ge=1)
    alphabet: int = Field(default=16, ge=2)
    num_examples: Optional[int] = Field(default=None, ge=2, description="None = every pair for mod_add, 2000 otherwise")
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    vocab_size: int = Field(default=64, gt=0)
    split_seed: int = 42


class MixtureSpec(_Schema):
    """Weighted interleaving of task families into a pretraining stream"""
    weights: Dict[TaskKind, float]
    num_sequences: int = Field(default=4000, ge=1)
    length: int = Field(default=8, ge=1)
    alphabet: int = Field(default=16, ge=2)
    modulus: int = Field(default=61, ge=2)
    split_seed: int = 42

    @field_validator("weights", mode="before")
    @classmethod
    def parse_weights(cls, value: Any) -> Any:
        if isinstance(value, str):
            pairs = [item.split(":") for item in _split_csv(value)]
            return {kind.strip(): float(weight) for kind, weight in pairs}
        return value

    @model_validator(mode="after")
    def check_weights(self) -> "MixtureSpec":
        if not self.weights:
            raise ValueError("mixture needs at least one task family")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("mixture weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {sum(self.weights.values())}, expected 1")
        return self

    def task_specs(self, vocab_size: int) -> List[TaskSpec]:
        return [
            TaskSpec(kind=kind, modulus=self.modulus, length=self.length,
                     alphabet=self.alphabet, vocab_size=vocab_size, split_seed=self.split_seed)
            for kind in self.weights
        ]


class UpdateMode(str, Enum):
    NATURAL = "natural"
    CONTROLLED = "controlled"


def _pretrain_corpus() -> MixtureSpec:
    return MixtureSpec(weights={TaskKind.CHAR_LM: 0.4, TaskKind.MOD_ADD: 0.3, TaskKind.COPY: 0.3})


def _update_corpus() -> MixtureSpec:
    return MixtureSpec(weights={TaskKind.CHAR_LM: 0.2, TaskKind.REVERSE: 0.4, TaskKind.SORT: 0.4})


class PretrainConfig(_Schema):
    corpus: MixtureSpec = Field(default_factory=_pretrain_corpus)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(epochs=4, batch_size=32))


class UpdateConfig(_Schema):
    """How M1 is produced from M0"""
    mode: UpdateMode = UpdateMode.CONTROLLED
    kappa: float = Field(default=0.05, gt=0.0, le=1.0, description="attention lr factor in controlled mode")
    corpus: MixtureSpec = Field(default_factory=_update_corpus)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(epochs=2, batch_size=32))


class ExperimentConfig(_Schema):
    """Everything a run needs besides the code version"""
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    update: UpdateConfig = Field(default_factory=UpdateConfig)
    task: TaskSpec = Field(default_factory=TaskSpec)
    finetune: OptimizerConfig = Field(default_factory=OptimizerConfig)
    peft: PeftConfig = Field(default_factory=PeftConfig)
    transpeft: TransPeftConfig = Field(default_factory=lambda: TransPeftConfig(p_i=0.05, p_c=0.2))
    seeds: List[int] = Field(default_factory=lambda: [42, 1, 99], min_length=1)
    output_dir: Optional[str] = None
    precision: Literal["float32", "float64"] = Field(default_factory=lambda: config.PRECISION)

    @field_validator("seeds", mode="before")
    @classmethod
    def split_seeds(cls, value: Any) -> Any:
        return _split_csv(value)


# ========== Results ==========

class Arm(str, Enum):
    FINETUNE_O = "finetune_o"
    FINETUNE_N = "finetune_n"
    DIRECT_TRANSFER = "direct_transfer"
    TRANS_PEFT = "trans_peft"


class TaskMetrics(_Schema):
    loss: float
    accuracy: float = Field(ge=0.0, le=1.0)
    n_examples: int


class TransferRecord(_Schema):
    """Fingerprints around one transfer of a PEFT state onto a base model"""
    peft_fingerprint: str
    source_fingerprint: str
    target_fingerprint: str


class UpdatePair(_Schema):
    m0_path: str
    m1_path: str
    m0_fingerprint: str
    m1_fingerprint: str
    architecture_tag: str
    mode: UpdateMode
    kappa: float
    corpus: MixtureSpec
    steps: int
    epsilon_att: float
    rho: float


class ArmRun(_Schema):
    arm: Arm
    seed: int
    task: TaskKind
    metrics: TaskMetrics
    peft_fingerprint: str
    base_fingerprints: Dict[str, str] = Field(default_factory=dict)


class ArmSummary(_Schema):
    arm: Arm
    mean_accuracy: float
    std_accuracy: float
    mean_loss: float
    n_seeds: int


class PairedTest(_Schema):
    """Paired t-test across seeds, a vs b"""
    arm_a: Arm
    arm_b: Arm
    mean_difference: float
    statistic: Optional[float] = None
    p_value: Optional[float] = None


class ProtocolResult(_Schema):
    runs: List[ArmRun]
    summaries: List[ArmSummary]
    tests: List[PairedTest] = Field(default_factory=list)
    gap_recovery: Optional[float] = None


class SweepPoint(_Schema):
    p_i: float
    p_c: float
    apply_site: ApplySite
    seed: int
    loss: float
    accuracy: float


class RunManifest(_Schema):
    """Enough to re-execute a run bit-identically"""
    command: str
    config: Dict[str, Any]
    seeds: List[int]
    precision: str
    data: Dict[str, Any] = Field(default_factory=dict)
    fingerprints: Dict[str, str] = Field(default_factory=dict)
    metrics_files: List[str] = Field(default_factory=list)
    wall_clock_seconds: float = 0.0
    code_version: str = "trans-peft-lab/1"


# ========== Analysis ==========

class LayerShift(_Schema):
    layer: int
    attention_spectral: float = Field(ge=0.0)
    attention_frobenius: float = Field(ge=0.0)
    ffn_spectral: float = Field(ge=0.0)
    ffn_frobenius: float = Field(ge=0.0)


class WeightShiftReport(_Schema):
    layers: List[LayerShift]
    epsilon_att: float = Field(ge=0.0)
    rho: float = Field(ge=0.0)


class SiteSimilarity(_Schema):
    layer: int
    site: Literal["attention", "ffn"]
    pearson: float
    topk_overlap: float


class DistributionComparison(_Schema):
    sites: List[SiteSimilarity]
    mean_attention_pearson: float
    mean_ffn_pearson: float
    mean_attention_overlap: float
    mean_ffn_overlap: float


class LayerInfluence(_Schema):
    """Per FFN sub-layer: mean(‖post-FFN‖ − ‖pre-FFN‖) over probe tokens"""
    values: List[float]


class PerturbationSummary(_Schema):
    p_i: float
    p_c: float
    rescale: bool
    draws: int
    mean_delta_norm: float = Field(ge=0.0)
    mean_delta_chi2: float = Field(ge=0.0, description="≈1 when δ is zero-mean")
    mean_sq_norm: float = Field(ge=0.0)
    output_mean_sq_norm: float = Field(ge=0.0)


class PerturbationStats(_Schema):
    combined: PerturbationSummary
    masking_only: PerturbationSummary
    dropping_only: PerturbationSummary


class DiscrepancyReport(_Schema):
    loss_m0: float
    loss_m1: float
    discrepancy: float = Field(ge=0.0)


class DeviationReport(_Schema):
    ffn: float = Field(ge=0.0)
    attention: float = Field(ge=0.0)


class BoundReport(_Schema):
    """Measured terms of the transfer loss-discrepancy bound"""
    discrepancy: DiscrepancyReport
    epsilon_att: float = Field(ge=0.0)
    rho: float = Field(ge=0.0)
    parameter_deviation: DeviationReport
    perturbation: PerturbationStats
    p_i: float
    p_c: float
    unestimated: List[str] = Field(default_factory=lambda: ["L", "beta", "lambda_max", "C", "C1", "C2"])
