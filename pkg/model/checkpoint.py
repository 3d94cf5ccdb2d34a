"""
Base-model checkpoints
"""
import logging
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from autograd.tensor import Tensor
from core.errors import ArchitectureMismatchError, CheckpointError
from core.models import ModelConfig
from model.container import read_container, write_container
from model.transformer import TransformerModel, parameter_names

logger = logging.getLogger(__name__)


def save_checkpoint(model: TransformerModel, path: Path) -> str:
    header = {
        "architecture_tag": model.config.architecture_tag(),
        "config": model.config.model_dump(mode="json"),
    }
    fingerprint = write_container(path, "model", header, model.named_arrays())
    logger.info(f"Saved model checkpoint {path} ({fingerprint[:12]})")
    return fingerprint


def load_checkpoint(path: Path, expected_tag: Optional[str] = None) -> TransformerModel:
    header, arrays = read_container(path, "model")
    tag = header.get("architecture_tag")
    if expected_tag is not None and tag != expected_tag:
        raise ArchitectureMismatchError(f"{path}: architecture {tag} != expected {expected_tag}")
    try:
        config = ModelConfig.model_validate(header.get("config"))
    except ValidationError as e:
        raise CheckpointError(f"{path}: malformed model config in header") from e
    if config.architecture_tag() != tag:
        raise CheckpointError(f"{path}: header tag {tag} disagrees with its config")
    if set(arrays) != set(parameter_names(config)):
        raise CheckpointError(f"{path}: tensor index does not match {tag}")
    return TransformerModel(config, {name: Tensor.wrap(arrays[name], name=name) for name in arrays})
