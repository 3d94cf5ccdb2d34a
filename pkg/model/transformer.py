"""
Toy transformer
Token + position embeddings, a stack of pre-norm layers
(attention sub-layer then FFN sub-layer) and a normalized output head.
PEFT modules and Trans-PEFT strategies plug in at fixed seams.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from autograd import functional as F
from autograd.tensor import Tensor, get_dtype
from core.errors import ShapeError
from core.models import FfnStyle, ModelConfig, PeftKind, PeftSite
from model.container import fingerprint_arrays
from peft_modules.adapter import adapter_forward
from peft_modules.lora import lora_forward
from strategies.transpeft import MaskSample, StrategySampler, apply_drop, apply_mask

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


# ========== Token batches ==========

@dataclass
class TokenBatch:
    """
    Several sequences flattened into one (N,) row axis.
    `allowed[i, j]` is true when row i may attend to row j: same sequence
    and not in the future.
    """
    ids: np.ndarray
    positions: np.ndarray
    segments: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.ids.shape[0])

    @property
    def allowed(self) -> np.ndarray:
        same = self.segments[:, None] == self.segments[None, :]
        return same & (self.positions[None, :] <= self.positions[:, None])


def pack(sequences: Sequence[Sequence[int]]) -> TokenBatch:
    ids, positions, segments = [], [], []
    for index, seq in enumerate(sequences):
        ids.extend(int(t) for t in seq)
        positions.extend(range(len(seq)))
        segments.extend([index] * len(seq))
    return TokenBatch(
        ids=np.asarray(ids, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.int64),
        segments=np.asarray(segments, dtype=np.int64),
    )


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


TokensLike = Union[TokenBatch, Sequence[int], np.ndarray]


def as_batch(tokens: TokensLike) -> TokenBatch:
    if isinstance(tokens, TokenBatch):
        return tokens
    return pack([list(np.asarray(tokens).reshape(-1))])


# ========== Forward trace ==========

@dataclass
class ForwardTrace:
    """Per-layer sub-layer activations captured during a forward pass"""
    attention_out: List[np.ndarray] = field(default_factory=list)
    ffn_intermediate: List[np.ndarray] = field(default_factory=list)
    pre_ffn: List[np.ndarray] = field(default_factory=list)
    post_ffn: List[np.ndarray] = field(default_factory=list)
    ffn_out: List[np.ndarray] = field(default_factory=list)


# ========== Model ==========

def _layer_names(i: int, style: FfnStyle) -> List[str]:
    names = [
        f"layers.{i}.norm1.gamma", f"layers.{i}.norm1.beta",
        f"layers.{i}.attn.q", f"layers.{i}.attn.k", f"layers.{i}.attn.v", f"layers.{i}.attn.o",
        f"layers.{i}.norm2.gamma", f"layers.{i}.norm2.beta",
        f"layers.{i}.ffn.fc1", f"layers.{i}.ffn.fc2",
    ]
    if style == FfnStyle.GATED:
        names.append(f"layers.{i}.ffn.gate")
    return names


def parameter_names(cfg: ModelConfig) -> List[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        names.extend(_layer_names(i, cfg.ffn_style))
    names.extend(["head.norm.gamma", "head.norm.beta", "head.weight"])
    return names


ATTENTION_MATRICES = ("q", "k", "v", "o")
FFN_MATRICES = ("fc1", "fc2", "gate")


class TransformerModel:
    """
    Base model M. Parameters live in one name -> Tensor map; the forward
    pass never mutates them.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        expected = parameter_names(config)
        missing = [n for n in expected if n not in params]
        if missing or len(params) != len(expected):
            raise ShapeError(f"parameter set does not match {config.architecture_tag()}: missing {missing}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        dtype = get_dtype()
        d, d_ff, std = config.d_model, config.d_ff, config.init_std
        residual_std = std / np.sqrt(2.0 * config.n_layers)

        shapes = {
            "tok_emb": (config.vocab_size, d), "pos_emb": (config.max_seq_len, d),
            "head.weight": (d, config.vocab_size),
        }
        for i in range(config.n_layers):
            for m in ATTENTION_MATRICES:
                shapes[f"layers.{i}.attn.{m}"] = (d, d)
            shapes[f"layers.{i}.ffn.fc1"] = (d, d_ff)
            shapes[f"layers.{i}.ffn.fc2"] = (d_ff, d)
            shapes[f"layers.{i}.ffn.gate"] = (d, d_ff)

        params: Dict[str, Tensor] = {}
        for name in parameter_names(config):
            if name.endswith(".gamma"):
                data = np.ones(d, dtype=dtype)
            elif name.endswith(".beta"):
                data = np.zeros(d, dtype=dtype)
            else:
                scale = residual_std if name.endswith((".attn.o", ".ffn.fc2")) else std
                data = rng.normal(0.0, scale, size=shapes[name]).astype(dtype)
            params[name] = Tensor.wrap(data, name=name)
        logger.debug(f"Initialized {config.architecture_tag()} from seed {seed}")
        return cls(config, params)

    # ----- parameter access -----

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.named_arrays())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.zero_grad()

    def freeze(self) -> None:
        self.set_trainable(False)

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config,
            {name: Tensor.wrap(p.data.copy(), name=name) for name, p in self.params.items()},
        )

    def attention_weights(self, layer: int) -> Dict[str, np.ndarray]:
        return {m: self.params[f"layers.{layer}.attn.{m}"].data for m in ATTENTION_MATRICES}

    def ffn_weights(self, layer: int) -> Dict[str, np.ndarray]:
        return {
            m: self.params[f"layers.{layer}.ffn.{m}"].data
            for m in FFN_MATRICES if f"layers.{layer}.ffn.{m}" in self.params
        }

    # ----- sub-layers -----

    def _project(self, x: Tensor, layer: int, name: str, site: Optional[PeftSite], peft) -> Tensor:
        weight = self.params[name]
        if peft is not None and site is not None and peft.config.kind == PeftKind.LORA:
            delta = peft.block(layer, site)
            if delta is not None:
                return lora_forward(x, weight, delta, peft.config.alpha)
        return F.matmul(x, weight)

    def _adapter(self, h: Tensor, layer: int, site: PeftSite, peft) -> Tensor:
        if peft is None or peft.config.kind != PeftKind.ADAPTER:
            return h
        module = peft.block(layer, site)
        return h if module is None else adapter_forward(h, module, peft.config.adapter_activation)

    def norm(self, x: Tensor, layer: int, which: int) -> Tensor:
        prefix = f"layers.{layer}.norm{which}"
        return F.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def ffn_input(self, pre_ffn: np.ndarray, layer: int) -> Tensor:
        """LN2(A) for a recorded residual stream A."""
        return self.norm(Tensor.wrap(pre_ffn), layer, 2)

    def attention_forward(
        self,
        x: Tensor,
        layer: int,
        peft=None,
        allowed: Optional[np.ndarray] = None,
        mask: Optional[np.ndarray] = None,
        mask_scale: float = 1.0,
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """Causal multi-head attention; the residual is added by the caller."""
        n, d = x.shape
        if d != self.config.d_model:
            raise ShapeError(f"attention input width {d} != d_model {self.config.d_model}")
        if allowed is None:
            allowed = causal_mask(n)
        prefix = f"layers.{layer}.attn"
        q = self._project(x, layer, f"{prefix}.q", PeftSite.QUERY, peft)
        k = self._project(x, layer, f"{prefix}.k", None, peft)
        v = self._project(x, layer, f"{prefix}.v", PeftSite.VALUE, peft)

        hd = self.config.head_dim
        heads = []
        for h in range(self.config.n_heads):
            lo, hi = h * hd, (h + 1) * hd
            scores = F.scale(F.matmul(F.columns(q, lo, hi), F.transpose(F.columns(k, lo, hi))), 1.0 / np.sqrt(hd))
            weights = F.softmax(scores, allowed)
            heads.append(F.matmul(weights, F.columns(v, lo, hi)))
        merged = heads[0] if len(heads) == 1 else F.concat_columns(heads)
        if mask is not None:
            merged = apply_mask(merged, mask, mask_scale)

        out = self._adapter(F.matmul(merged, self.params[f"{prefix}.o"]), layer, PeftSite.AFTER_ATTENTION, peft)
        if trace is not None:
            trace.attention_out.append(out.data)
        return out

    def ffn_forward(
        self,
        x: Tensor,
        layer: int,
        peft=None,
        mask: Optional[np.ndarray] = None,
        mask_scale: float = 1.0,
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """σ(X(W_fc1+ΔW_fc1)) [⊙ m] (W_fc2+ΔW_fc2); gated style masks act(gate)⊙up."""
        prefix = f"layers.{layer}.ffn"
        up = self._project(x, layer, f"{prefix}.fc1", PeftSite.FC1, peft)
        if self.config.ffn_style == FfnStyle.GATED:
            gate = F.activation(F.matmul(x, self.params[f"{prefix}.gate"]), self.config.activation)
            hidden = F.mul(gate, up)
        else:
            hidden = F.activation(up, self.config.activation)
        if trace is not None:
            trace.ffn_intermediate.append(hidden.data)
        if mask is not None:
            if mask.shape[-1] != self.config.d_ff:
                raise ShapeError(f"mask length {mask.shape[-1]} != d_ff {self.config.d_ff}")
            hidden = apply_mask(hidden, mask, mask_scale)
        out = self._project(hidden, layer, f"{prefix}.fc2", PeftSite.FC2, peft)
        return self._adapter(out, layer, PeftSite.AFTER_FFN, peft)

    def layer_forward(
        self,
        x: Tensor,
        layer: int,
        peft=None,
        sample: Optional[MaskSample] = None,
        allowed: Optional[np.ndarray] = None,
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """A = X + z_a·Attn(LN1(X)); y = A + z·FFN(LN2(A)). Without a sample z = 1 and m = 1."""
        drawn = sample.layers[layer] if sample is not None else None

        attn_mask = drawn.attention_mask if drawn is not None and sample.mask_attention else None
        attn = self.attention_forward(
            self.norm(x, layer, 1), layer, peft, allowed,
            mask=attn_mask, mask_scale=sample.mask_scale if sample else 1.0, trace=trace,
        )
        if drawn is not None and sample.drop_attention:
            attn = apply_drop(attn, drawn.attention_keep, sample.keep_scale)
        a = x if attn is None else F.add(x, attn)
        if trace is not None:
            trace.pre_ffn.append(a.data)

        ffn_mask = drawn.ffn_mask if drawn is not None and sample.mask_ffn else None
        if drawn is not None and sample.drop_ffn and not drawn.ffn_keep:
            # z = 0: the FFN sub-layer and its PEFT delta contribute nothing
            y = a
        else:
            ffn = self.ffn_forward(
                self.norm(a, layer, 2), layer, peft,
                mask=ffn_mask, mask_scale=sample.mask_scale if sample else 1.0, trace=trace,
            )
            if trace is not None:
                trace.ffn_out.append(ffn.data)
            if drawn is not None and sample.drop_ffn:
                ffn = apply_drop(ffn, True, sample.keep_scale)
            y = F.add(a, ffn)
        if trace is not None:
            trace.post_ffn.append(y.data)
        return y

    def embed(self, batch: TokenBatch) -> Tensor:
        if batch.n_tokens and batch.positions.max() >= self.config.max_seq_len:
            raise ShapeError(
                f"sequence of length {int(batch.positions.max()) + 1} exceeds max_seq_len {self.config.max_seq_len}"
            )
        return F.add(F.embedding(self.params["tok_emb"], batch.ids), F.embedding(self.params["pos_emb"], batch.positions))

    def forward(
        self,
        tokens: TokensLike,
        mode: Mode = Mode.EVAL,
        peft=None,
        sampler: Optional[StrategySampler] = None,
        sample: Optional[MaskSample] = None,
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """
        Logits (N × vocab). Strategies act only in training mode: a sampler
        draws a fresh MaskSample per call, or a pre-drawn `sample` is used.
        Evaluation mode never touches either.
        """
        batch = as_batch(tokens)
        if mode == Mode.TRAIN:
            if sample is None and sampler is not None and sampler.config.enabled:
                sample = sampler.sample(
                    self.config.n_layers, self.config.d_ff, self.config.d_model, batch.n_tokens
                )
        else:
            sample = None

        allowed = batch.allowed
        x = self.embed(batch)
        for layer in range(self.config.n_layers):
            x = self.layer_forward(x, layer, peft, sample, allowed, trace)
        h = F.layer_norm(x, self.params["head.norm.gamma"], self.params["head.norm.beta"])
        return F.matmul(h, self.params["head.weight"])
