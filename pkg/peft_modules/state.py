"""
PEFT state
Trainable delta parameters θ = {θ_att, θ_ffn}, their initialization,
attachment to a base model and transfer across base-model versions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from autograd.tensor import Tensor, get_dtype
from core.errors import ArchitectureMismatchError, CheckpointError, ConfigError
from core.models import (
    ATTENTION_SITES, FFN_SITES, ModelConfig, PeftConfig, PeftSite, TransferRecord
)
from model.container import fingerprint_arrays, read_container, write_container
from peft_modules.lora import LowRankPair

if TYPE_CHECKING:
    from model.transformer import Mode, TransformerModel

logger = logging.getLogger(__name__)

BlockKey = Tuple[int, PeftSite]


def site_shape(site: PeftSite, cfg: ModelConfig) -> Tuple[int, int]:
    """(in, out) extents of the weight a site adapts."""
    if site == PeftSite.FC1:
        return cfg.d_model, cfg.d_ff
    if site == PeftSite.FC2:
        return cfg.d_ff, cfg.d_model
    return cfg.d_model, cfg.d_model


def block_name(layer: int, site: PeftSite, part: str) -> str:
    return f"layers.{layer}.{site.value}.{part}"


class PeftState:
    """
    Map (layer, site) -> {W_down, W_up}, plus the config that shaped it and
    the fingerprint of the base model it was trained on.
    """

    def __init__(
        self,
        config: PeftConfig,
        architecture_tag: str,
        blocks: Dict[BlockKey, LowRankPair],
        source_fingerprint: Optional[str] = None,
    ):
        self.config = config
        self.architecture_tag = architecture_tag
        self.blocks = blocks
        self.source_fingerprint = source_fingerprint

    def block(self, layer: int, site: PeftSite) -> Optional[LowRankPair]:
        return self.blocks.get((layer, site))

    @property
    def attention_blocks(self) -> Dict[BlockKey, LowRankPair]:
        return {k: v for k, v in self.blocks.items() if k[1] in ATTENTION_SITES}

    @property
    def ffn_blocks(self) -> Dict[BlockKey, LowRankPair]:
        return {k: v for k, v in self.blocks.items() if k[1] in FFN_SITES}

    def parameters(self) -> List[Tensor]:
        params = []
        for key in sorted(self.blocks, key=lambda k: (k[0], k[1].value)):
            params.extend([self.blocks[key].down, self.blocks[key].up])
        return params

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.zero_grad()

    def named_arrays(self, sites: Optional[frozenset] = None) -> Dict[str, np.ndarray]:
        arrays = {}
        for (layer, site), pair in self.blocks.items():
            if sites is not None and site not in sites:
                continue
            arrays[block_name(layer, site, "down")] = pair.down.data
            arrays[block_name(layer, site, "up")] = pair.up.data
        return arrays

    def flat(self, sites: Optional[frozenset] = None) -> np.ndarray:
        """Concatenation of the selected blocks in name order."""
        arrays = self.named_arrays(sites)
        if not arrays:
            return np.zeros(0)
        return np.concatenate([arrays[name].reshape(-1) for name in sorted(arrays)])

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.named_arrays())

    def copy(self) -> "PeftState":
        blocks = {
            key: LowRankPair(
                down=Tensor.wrap(pair.down.data.copy(), name=pair.down.name),
                up=Tensor.wrap(pair.up.data.copy(), name=pair.up.name),
            )
            for key, pair in self.blocks.items()
        }
        return PeftState(self.config, self.architecture_tag, blocks, self.source_fingerprint)


def init_peft(config: PeftConfig, model_config: ModelConfig, seed: int,
              source_fingerprint: Optional[str] = None) -> PeftState:
    """W_down ~ N(0, 1/r), W_up = 0: the initial delta is exactly zero."""
    if config.rank > model_config.d_model // 2:
        raise ConfigError(f"rank {config.rank} exceeds d/2 = {model_config.d_model // 2}")
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    std = np.sqrt(1.0 / config.rank)
    blocks: Dict[BlockKey, LowRankPair] = {}
    for layer in range(model_config.n_layers):
        for site in config.targets:
            d_in, d_out = site_shape(site, model_config)
            down = rng.normal(0.0, std, size=(d_in, config.rank)).astype(dtype)
            up = np.zeros((config.rank, d_out), dtype=dtype)
            blocks[(layer, site)] = LowRankPair(
                down=Tensor.wrap(down, name=block_name(layer, site, "down")),
                up=Tensor.wrap(up, name=block_name(layer, site, "up")),
            )
    logger.debug(f"Initialized {config.kind.value} state: {len(blocks)} blocks, rank {config.rank}")
    return PeftState(config, model_config.architecture_tag(), blocks, source_fingerprint)


# ========== Binding ==========

@dataclass
class BoundModel:
    """A base model with a PEFT state attached. Neither is copied or mutated."""
    model: "TransformerModel"
    peft: PeftState
    transfer: Optional[TransferRecord] = None

    def forward(self, tokens, mode: Optional["Mode"] = None, **kwargs) -> Tensor:
        from model.transformer import Mode
        return self.model.forward(tokens, mode=mode or Mode.EVAL, peft=self.peft, **kwargs)


def _check_compatible(model: "TransformerModel", peft: PeftState) -> None:
    tag = model.config.architecture_tag()
    if peft.architecture_tag != tag:
        raise ArchitectureMismatchError(f"PEFT built for {peft.architecture_tag}, model is {tag}")
    for (layer, site), pair in peft.blocks.items():
        if layer >= model.config.n_layers:
            raise ArchitectureMismatchError(f"site {site.value} on absent layer {layer}")
        d_in, d_out = site_shape(site, model.config)
        if pair.down.shape != (d_in, pair.rank) or pair.up.shape != (pair.rank, d_out):
            raise ArchitectureMismatchError(f"block ({layer}, {site.value}) does not fit {d_in}x{d_out}")


def attach(model: "TransformerModel", peft: PeftState) -> BoundModel:
    _check_compatible(model, peft)
    return BoundModel(model=model, peft=peft)


def detach(handle: BoundModel) -> PeftState:
    return handle.peft


def transfer(peft: PeftState, target: "TransformerModel") -> BoundModel:
    """Attach a state trained on one base version to another, without re-tuning."""
    handle = attach(target, peft)
    handle.transfer = TransferRecord(
        peft_fingerprint=peft.fingerprint(),
        source_fingerprint=peft.source_fingerprint or "",
        target_fingerprint=target.fingerprint(),
    )
    logger.info(
        f"Transferred PEFT {handle.transfer.peft_fingerprint[:12]} "
        f"from {handle.transfer.source_fingerprint[:12]} to {handle.transfer.target_fingerprint[:12]}"
    )
    return handle


# ========== Persistence ==========

def save_peft(state: PeftState, path: Path) -> str:
    header = {
        "architecture_tag": state.architecture_tag,
        "config": state.config.model_dump(mode="json"),
        "source_fingerprint": state.source_fingerprint,
    }
    return write_container(path, "peft", header, state.named_arrays())


def load_peft(path: Path) -> PeftState:
    header, arrays = read_container(path, "peft")
    try:
        config = PeftConfig.model_validate(header.get("config"))
        tag = header["architecture_tag"]
        blocks: Dict[BlockKey, LowRankPair] = {}
        for layer_str in sorted({name.split(".")[1] for name in arrays}, key=int):
            layer = int(layer_str)
            for site in config.targets:
                down = block_name(layer, site, "down")
                up = block_name(layer, site, "up")
                if down in arrays:
                    blocks[(layer, site)] = LowRankPair(
                        down=Tensor.wrap(arrays[down], name=down),
                        up=Tensor.wrap(arrays[up], name=up),
                    )
    except (ValidationError, KeyError, IndexError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed PEFT checkpoint ({e})") from e
    return PeftState(config, tag, blocks, header.get("source_fingerprint"))
