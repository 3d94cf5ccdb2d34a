import numpy as np
import pytest

from autograd.tensor import Tensor
from core.errors import ArchitectureMismatchError, ConfigError, ShapeError
from core.models import Activation, ModelConfig, OptimizerConfig, PeftConfig, PeftKind, PeftSite, TaskKind
from model.transformer import TransformerModel
from peft_modules.adapter import adapter_forward
from peft_modules.lora import LowRankPair, lora_forward
from peft_modules.state import attach, detach, init_peft, load_peft, save_peft, site_shape, transfer
from tasks.synthetic import Example
from training.trainer import evaluate_task, finetune_peft


def pair(down, up) -> LowRankPair:
    return LowRankPair(down=Tensor(down), up=Tensor(up))


# ========== LoRA ==========

def test_lora_hand_oracle():
    out = lora_forward(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), pair([[1.0], [2.0]], [[1.0, 0.0]]), alpha=1.0)
    assert out.data.tolist() == [[4.0, 1.0]]


def test_lora_zero_up_is_base_projection():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    out = lora_forward(Tensor(x), Tensor(w), pair(rng.normal(size=(4, 2)), np.zeros((2, 5))), alpha=4.0)
    assert np.array_equal(out.data, x @ w)


def test_lora_pure_delta_identity():
    x = np.array([[0.3, -1.2]])
    out = lora_forward(Tensor(x), Tensor(np.zeros((2, 2))), pair(np.eye(2), np.eye(2)), alpha=2.0)
    assert np.allclose(out.data, x)


def test_lora_chain_must_fit_weight():
    with pytest.raises(ShapeError):
        lora_forward(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), pair(np.ones((3, 1)), np.ones((1, 2))), alpha=1.0)


def test_lora_alpha_defaults_to_twice_rank():
    assert PeftConfig(rank=4).alpha == 8.0
    assert PeftConfig(rank=4, alpha=1.0).alpha == 1.0


# ========== Adapter ==========

def test_adapter_hand_oracle():
    out = adapter_forward(Tensor([[1.0, -1.0]]), pair([[1.0], [-1.0]], [[2.0, 0.0]]), Activation.RELU)
    assert out.data.tolist() == [[5.0, -1.0]]


def test_adapter_with_zero_delta_is_identity():
    h = np.random.default_rng(1).normal(size=(2, 3))
    zero_up = adapter_forward(Tensor(h), pair(np.ones((3, 1)), np.zeros((1, 3))), Activation.GELU)
    zero_product = adapter_forward(Tensor(h), pair(np.zeros((3, 1)), np.ones((1, 3))), Activation.IDENTITY)
    assert np.array_equal(zero_up.data, h)
    assert np.array_equal(zero_product.data, h)


def test_adapter_targets_are_validated():
    assert PeftConfig(kind=PeftKind.ADAPTER).targets == [PeftSite.AFTER_ATTENTION, PeftSite.AFTER_FFN]
    with pytest.raises(ValueError):
        PeftConfig(kind=PeftKind.ADAPTER, targets=["query"])


# ========== State ==========

def test_init_shapes_and_zero_up(tiny_config, lora_config):
    peft = init_peft(lora_config, tiny_config, seed=0)
    assert len(peft.blocks) == tiny_config.n_layers * len(lora_config.targets)
    for (_, site), block in peft.blocks.items():
        d_in, d_out = site_shape(site, tiny_config)
        assert block.down.shape == (d_in, lora_config.rank)
        assert block.up.shape == (lora_config.rank, d_out)
        assert not block.up.data.any()
    assert init_peft(lora_config, tiny_config, seed=0).fingerprint() == peft.fingerprint()


def test_rank_above_half_width(tiny_config):
    with pytest.raises(ConfigError):
        init_peft(PeftConfig(rank=tiny_config.d_model // 2 + 1), tiny_config, seed=0)


def test_attach_detach_is_byte_identical(tiny_model, lora_config):
    peft = init_peft(lora_config, tiny_model.config, seed=0)
    before = peft.fingerprint()
    assert detach(attach(tiny_model, peft)).fingerprint() == before


def test_attach_to_mismatched_width(tiny_model, lora_config):
    peft = init_peft(lora_config, tiny_model.config, seed=0)
    wider = ModelConfig(n_layers=2, d_model=16, d_ff=16, n_heads=2, vocab_size=16, max_seq_len=16)
    with pytest.raises(ArchitectureMismatchError):
        attach(TransformerModel.initialize(wider, seed=0), peft)


def _micro_task():
    return [Example((15, i, 13, i, 14, (2 * i) % 7), 5, TaskKind.MOD_ADD) for i in range(6)]


def test_transfer_leaves_both_bases_untouched(tiny_model, lora_config):
    m0 = tiny_model
    m1 = TransformerModel.initialize(tiny_model.config, seed=5)
    fp0, fp1 = m0.fingerprint(), m1.fingerprint()
    peft, history = finetune_peft(m0, _micro_task(), lora_config, OptimizerConfig(max_steps=1, batch_size=6))
    assert history.steps == 1
    assert peft.source_fingerprint == fp0

    trained = peft.fingerprint()
    handle = transfer(peft, m1)
    evaluate_task(handle.model, handle.peft, _micro_task())
    assert m0.fingerprint() == fp0
    assert m1.fingerprint() == fp1
    assert peft.fingerprint() == trained
    assert handle.transfer.source_fingerprint == fp0
    assert handle.transfer.target_fingerprint == fp1


def test_transfer_to_source_matches_attach(tiny_model, lora_config, randomize_peft):
    peft = init_peft(lora_config, tiny_model.config, seed=0, source_fingerprint=tiny_model.fingerprint())
    randomize_peft(peft)
    attached = attach(tiny_model, peft).forward([1, 2, 3]).data
    transferred = transfer(peft, tiny_model).forward([1, 2, 3]).data
    assert np.array_equal(attached, transferred)


def test_peft_save_load(tmp_path, tiny_model, randomize_peft):
    for kind in PeftKind:
        peft = init_peft(PeftConfig(kind=kind, rank=2), tiny_model.config, seed=0, source_fingerprint="abc")
        randomize_peft(peft)
        path = tmp_path / f"{kind.value}.ckpt"
        fingerprint = save_peft(peft, path)
        loaded = load_peft(path)
        assert loaded.fingerprint() == fingerprint == peft.fingerprint()
        assert loaded.config == peft.config
        assert loaded.source_fingerprint == "abc"
        assert np.array_equal(
            tiny_model.forward([1, 2, 3], peft=loaded).data, tiny_model.forward([1, 2, 3], peft=peft).data
        )
