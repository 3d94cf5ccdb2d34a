from typing import Dict

import numpy as np
import pytest

from autograd.tensor import Tensor, precision
from core.experiment_file import load_experiment_config
from core.models import Activation, ExperimentConfig, ModelConfig, PeftConfig
from model.transformer import TransformerModel


@pytest.fixture(autouse=True)
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=8, d_ff=16, n_heads=2, vocab_size=16, max_seq_len=16, init_std=0.3)


@pytest.fixture
def one_layer_config() -> ModelConfig:
    return ModelConfig(n_layers=1, d_model=8, d_ff=16, n_heads=2, vocab_size=16, max_seq_len=16, init_std=0.3)


@pytest.fixture
def tiny_model(tiny_config) -> TransformerModel:
    return TransformerModel.initialize(tiny_config, seed=0)


@pytest.fixture
def lora_config() -> PeftConfig:
    return PeftConfig(rank=2)


@pytest.fixture
def relu_oracle_model() -> TransformerModel:
    """d=1, d_ff=2, one head; W_fc1=[[1,-1]], W_fc2=[[1],[1]]"""
    cfg = ModelConfig(n_layers=1, d_model=1, d_ff=2, n_heads=1, vocab_size=4, max_seq_len=4,
                      activation=Activation.RELU)
    model = TransformerModel.initialize(cfg, seed=0)
    model.params["layers.0.ffn.fc1"] = Tensor([[1.0, -1.0]], name="layers.0.ffn.fc1")
    model.params["layers.0.ffn.fc2"] = Tensor([[1.0], [1.0]], name="layers.0.ffn.fc2")
    return model


@pytest.fixture
def randomize_peft():
    """Give every W_up a nonzero value so the delta path is exercised."""
    def randomize(peft, seed: int = 1, scale: float = 0.3) -> None:
        rng = np.random.default_rng(seed)
        for pair in peft.blocks.values():
            pair.up.data[...] = rng.normal(0.0, scale, size=pair.up.shape)
    return randomize


@pytest.fixture
def small_run() -> Dict[str, str]:
    """Config overrides for an experiment that runs end to end in seconds."""
    return {
        "model.n_layers": "1", "model.d_model": "8", "model.d_ff": "16", "model.n_heads": "2",
        "model.vocab_size": "16", "model.max_seq_len": "16",
        "pretrain.corpus.weights": "copy:0.5,char_lm:0.5", "pretrain.corpus.num_sequences": "32",
        "pretrain.corpus.alphabet": "8", "pretrain.corpus.length": "3",
        "pretrain.optimizer.max_steps": "2", "pretrain.optimizer.batch_size": "8",
        "update.corpus.weights": "reverse:1.0", "update.corpus.num_sequences": "32",
        "update.corpus.alphabet": "8", "update.corpus.length": "3",
        "update.optimizer.max_steps": "2", "update.optimizer.batch_size": "8",
        "task.modulus": "7", "task.vocab_size": "16",
        "finetune.max_steps": "2", "finetune.batch_size": "8",
        "peft.rank": "2", "seeds": "42,1", "precision": "float64",
    }


@pytest.fixture
def small_experiment(small_run):
    def build(output_dir, **extra) -> ExperimentConfig:
        return load_experiment_config(overrides={**small_run, "output_dir": str(output_dir), **extra})
    return build
