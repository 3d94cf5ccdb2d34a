import json

import numpy as np
import pytest
from safetensors import safe_open
from safetensors.numpy import save_file

from autograd.gradcheck import grad_check
from autograd.tensor import Tensor
from core.errors import ArchitectureMismatchError, CheckpointError, MissingArtifactError, ShapeError
from core.models import FfnStyle, ModelConfig, PeftConfig, PeftKind, TransPeftConfig
from autograd import functional as F
from model.checkpoint import load_checkpoint, save_checkpoint
from model.container import FORMAT_VERSION, HEADER_KEY, fingerprint_arrays
from model.transformer import ForwardTrace, Mode, TransformerModel, pack
from peft_modules.state import init_peft
from strategies.transpeft import StrategySampler, forced_drop_sample

TOKENS = [3, 1, 4, 1, 5, 9]


def test_initialization_is_deterministic(tiny_config):
    a = TransformerModel.initialize(tiny_config, seed=7)
    b = TransformerModel.initialize(tiny_config, seed=7)
    c = TransformerModel.initialize(tiny_config, seed=8)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_eval_forward_is_pure(tiny_model):
    before = tiny_model.fingerprint()
    first = tiny_model.forward(TOKENS).data
    second = tiny_model.forward(TOKENS).data
    assert first.shape == (len(TOKENS), tiny_model.config.vocab_size)
    assert np.array_equal(first, second)
    assert tiny_model.fingerprint() == before


def test_zero_initialized_peft_is_neutral(tiny_model):
    plain = tiny_model.forward(TOKENS).data
    for kind in PeftKind:
        peft = init_peft(PeftConfig(kind=kind, rank=2), tiny_model.config, seed=3)
        assert np.array_equal(tiny_model.forward(TOKENS, peft=peft).data, plain)


def test_packed_sequences_do_not_attend_across(tiny_model):
    a, b = [1, 2, 3], [4, 5, 6, 7]
    packed = tiny_model.forward(pack([a, b])).data
    assert np.allclose(packed[:3], tiny_model.forward(a).data, atol=1e-12)
    assert np.allclose(packed[3:], tiny_model.forward(b).data, atol=1e-12)


def test_sequence_longer_than_context(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.forward(list(range(tiny_model.config.max_seq_len + 1)))


def test_single_token_with_zero_query_key(tiny_model):
    model = tiny_model.copy()
    d = model.config.d_model
    model.params["layers.0.attn.q"].data[...] = 0.0
    model.params["layers.0.attn.k"].data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(1, d))
    out = model.attention_forward(Tensor(x), 0).data
    expected = x @ model.params["layers.0.attn.v"].data @ model.params["layers.0.attn.o"].data
    assert np.allclose(out, expected, atol=1e-12)


def test_two_token_attention_matches_dense_oracle():
    cfg = ModelConfig(n_layers=1, d_model=2, d_ff=2, n_heads=1, vocab_size=4, max_seq_len=4)
    model = TransformerModel.initialize(cfg, seed=0)
    wq = np.array([[1.0, 0.5], [0.0, 1.0]])
    wk = np.array([[0.5, 0.0], [1.0, -1.0]])
    wv = np.array([[2.0, 0.0], [0.0, 3.0]])
    wo = np.array([[1.0, 1.0], [0.0, 1.0]])
    for name, w in (("q", wq), ("k", wk), ("v", wv), ("o", wo)):
        model.params[f"layers.0.attn.{name}"].data[...] = w
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / np.sqrt(2.0)
    scores[0, 1] = -np.inf
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    expected = weights @ v @ wo

    assert np.allclose(model.attention_forward(Tensor(x), 0).data, expected, atol=1e-12)


# ========== FFN and strategies ==========

def test_masked_ffn_hand_oracle(relu_oracle_model):
    x = Tensor([[2.0]])
    out = relu_oracle_model.ffn_forward(x, 0, mask=np.array([True, False]))
    assert out.data.tolist() == [[2.0]]


def test_full_mask_and_no_mask(relu_oracle_model, tiny_model):
    x = Tensor([[2.0]])
    assert relu_oracle_model.ffn_forward(x, 0, mask=np.zeros(2, dtype=bool)).data.tolist() == [[0.0]]

    h = Tensor(np.random.default_rng(1).normal(size=(3, tiny_model.config.d_model)))
    plain = tiny_model.ffn_forward(h, 0).data
    ones = tiny_model.ffn_forward(h, 0, mask=np.ones(tiny_model.config.d_ff, dtype=bool)).data
    assert np.array_equal(plain, ones)


def test_mask_of_wrong_length(tiny_model):
    h = Tensor(np.ones((2, tiny_model.config.d_model)))
    with pytest.raises(ShapeError):
        tiny_model.ffn_forward(h, 0, mask=np.ones(tiny_model.config.d_ff - 1, dtype=bool))


def test_dropped_layer_keeps_attention_residual(tiny_model):
    cfg = tiny_model.config
    sample = forced_drop_sample(cfg.n_layers, cfg.d_ff, cfg.d_model, frozenset({1}))
    trace = ForwardTrace()
    tiny_model.forward(TOKENS, mode=Mode.TRAIN, sample=sample, trace=trace)
    assert np.array_equal(trace.post_ffn[1], trace.pre_ffn[1])
    assert not np.array_equal(trace.post_ffn[0], trace.pre_ffn[0])


def test_layer_dropping_expectation(tiny_model):
    cfg = tiny_model.config
    x = Tensor(np.random.default_rng(6).normal(size=(3, cfg.d_model)))
    trace = ForwardTrace()
    tiny_model.layer_forward(x, 0, trace=trace)
    a, ffn = trace.pre_ffn[0], trace.ffn_out[0]

    draws = 4000
    sampler = StrategySampler(TransPeftConfig(p_c=0.5, strategy_seed=3))
    total = np.zeros_like(a)
    for _ in range(draws):
        sample = sampler.sample(cfg.n_layers, cfg.d_ff, cfg.d_model, x.shape[0])
        y = tiny_model.layer_forward(x, 0, sample=sample).data
        assert np.allclose(y, a) or np.allclose(y, a + ffn)
        total += y
    bound = 4 * 0.5 / np.sqrt(draws) * np.abs(ffn) + 1e-12
    assert (np.abs(total / draws - (a + 0.5 * ffn)) <= bound).all()


def test_strategies_off_match_vanilla(tiny_model):
    sampler = StrategySampler(TransPeftConfig())
    cfg = tiny_model.config
    sample = sampler.sample(cfg.n_layers, cfg.d_ff, cfg.d_model)
    vanilla = tiny_model.forward(TOKENS).data
    assert np.array_equal(tiny_model.forward(TOKENS, mode=Mode.TRAIN, sample=sample).data, vanilla)
    assert np.array_equal(tiny_model.forward(TOKENS, mode=Mode.TRAIN, sampler=sampler).data, vanilla)


def test_eval_mode_ignores_sampler(tiny_model):
    sampler = StrategySampler(TransPeftConfig(p_i=0.5, p_c=0.5))
    vanilla = tiny_model.forward(TOKENS).data
    assert np.array_equal(tiny_model.forward(TOKENS, mode=Mode.EVAL, sampler=sampler).data, vanilla)
    assert sampler.draws == 0


def test_training_mode_is_stochastic_across_strategy_seeds(tiny_model):
    a = StrategySampler(TransPeftConfig(p_i=0.5, p_c=0.5, strategy_seed=1))
    b = StrategySampler(TransPeftConfig(p_i=0.5, p_c=0.5, strategy_seed=2))
    out_a = tiny_model.forward(TOKENS, mode=Mode.TRAIN, sampler=a).data
    out_b = tiny_model.forward(TOKENS, mode=Mode.TRAIN, sampler=b).data
    assert not np.array_equal(out_a, out_b)
    assert a.draws == b.draws == 1


def test_gated_ffn_forward(tiny_config):
    cfg = tiny_config.model_copy(update={"ffn_style": FfnStyle.GATED})
    model = TransformerModel.initialize(cfg, seed=0)
    assert "layers.0.ffn.gate" in model.params
    trace = ForwardTrace()
    logits = model.forward(TOKENS, trace=trace)
    assert logits.shape == (len(TOKENS), cfg.vocab_size)
    assert trace.ffn_intermediate[0].shape == (len(TOKENS), cfg.d_ff)


def test_grad_check_through_lora_path(one_layer_config, randomize_peft):
    model = TransformerModel.initialize(one_layer_config, seed=0)
    peft = init_peft(PeftConfig(rank=2), one_layer_config, seed=1)
    randomize_peft(peft)
    peft.set_trainable(True)
    targets = np.array(TOKENS[1:] + [2])

    def loss():
        return F.cross_entropy(model.forward(TOKENS, peft=peft), targets)

    report = grad_check(loss, peft.parameters())
    assert report.passed, report.max_rel_error


# ========== Checkpoints ==========

def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    fingerprint = save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path, expected_tag=tiny_model.config.architecture_tag())
    assert fingerprint == tiny_model.fingerprint() == loaded.fingerprint()
    assert np.array_equal(loaded.forward(TOKENS).data, tiny_model.forward(TOKENS).data)


def test_corrupted_checkpoint_is_refused(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    payload = bytearray(path.read_bytes())
    payload[-3] ^= 0x01
    path.write_bytes(bytes(payload))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_checkpoint_is_refused(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_architecture_guard(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    other = tiny_model.config.model_copy(update={"n_layers": 3})
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(path, expected_tag=other.architecture_tag())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_checkpoint_is_safetensors(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    fingerprint = save_checkpoint(tiny_model, path)
    with safe_open(str(path), framework="numpy") as handle:
        header = json.loads(handle.metadata()[HEADER_KEY])
        assert set(handle.keys()) == set(tiny_model.named_arrays())
    assert header["fingerprint"] == fingerprint
    assert header["format_version"] == FORMAT_VERSION
    assert header["kind"] == "model"
    assert header["architecture_tag"] == tiny_model.config.architecture_tag()
    assert ModelConfig.model_validate(header["config"]) == tiny_model.config


def test_checkpoint_files_are_reproducible(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "a.ckpt")
    save_checkpoint(tiny_model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("metadata", [
    None,
    {HEADER_KEY: "not json"},
    {HEADER_KEY: json.dumps({"kind": "model", "format_version": FORMAT_VERSION})},
    {HEADER_KEY: json.dumps({"kind": "model", "format_version": 99, "fingerprint": "x"})},
])
def test_malformed_header_is_refused(tmp_path, tiny_model, metadata):
    path = tmp_path / "m.ckpt"
    save_file(tiny_model.named_arrays(), str(path), metadata=metadata)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_header_with_bad_config_is_refused(tmp_path, tiny_model):
    arrays = tiny_model.named_arrays()
    header = {
        "kind": "model", "format_version": FORMAT_VERSION, "fingerprint": fingerprint_arrays(arrays),
        "architecture_tag": tiny_model.config.architecture_tag(), "config": {"n_layers": "many"},
    }
    path = tmp_path / "m.ckpt"
    save_file(arrays, str(path), metadata={HEADER_KEY: json.dumps(header)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_garbage_file_is_refused(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
