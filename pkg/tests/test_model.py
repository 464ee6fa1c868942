import numpy as np
import pytest

from moeprune import numerics as nx
from moeprune.corpus import EOS
from moeprune.model import (
    Checkpoint, CheckpointHeaderError, CheckpointShapeError, CheckpointTruncatedError, ModelConfig,
    as_tensors, forward, forward_many, greedy_decode, greedy_decode_many, init_model, load_checkpoint,
    moe_forward, param_count, position_ids, save_checkpoint,
)
from moeprune.numerics import ContractError, Tensor


def _hand_count(L, E, d, f, V, T):
    # embed + head + two position tables + final norm
    fixed = V * d + d * V + 2 * T * d + d
    per_layer = 2 * d + 4 * d * d + E * d + E + E * (d * f + f + f * d + d)
    return fixed + L * per_layer


def test_default_param_count_closed_form():
    cfg = ModelConfig()
    ck = init_model(cfg)
    assert ck.n_params() == param_count(cfg) == _hand_count(6, 16, 64, 128, 524, 64) == 1_771_936


def test_expert_parameter_share():
    ck = init_model(ModelConfig())
    share = ck.n_expert_params() / ck.n_params()
    assert share == pytest.approx(6 * 16 * (2 * 64 * 128 + 128 + 64) / 1_771_936)
    assert share > 0.70


def test_init_deterministic_and_scaled():
    cfg = ModelConfig.uniform(2, 4, d_model=8, d_ff=16, vocab_size=40, max_seq_len=16)
    a, b = init_model(cfg, 1), init_model(cfg, 1)
    assert a.equals(b) and not a.equals(init_model(cfg, 2))
    assert np.abs(a.params["layers.0.experts.up"]).max() <= 1 / np.sqrt(8)
    assert not a.params["layers.0.router.bias"].any()


def test_config_rejects_too_few_experts():
    with pytest.raises(ContractError):
        ModelConfig(experts_per_layer=(4, 1), top_k=2)


def _layer_params(E=4, d=4, f=6, seed=0):
    cfg = ModelConfig.uniform(1, E, top_k=2, d_model=d, d_ff=f, vocab_size=20, max_seq_len=8)
    ck = init_model(cfg, seed)
    return cfg, ck


def test_equal_logits_pick_lowest_indices():
    cfg, ck = _layer_params()
    ck.params["layers.0.router.weight"][:] = 0
    params = as_tensors(ck)
    h = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    _, _, disp = moe_forward(h, 0, params, cfg)
    assert disp.indices.tolist() == [[0, 1]] * 3
    assert np.allclose(disp.weights, 0.5)


def test_k_equal_e_is_full_softmax():
    cfg = ModelConfig.uniform(1, 3, top_k=3, d_model=4, d_ff=5, vocab_size=20, max_seq_len=8)
    ck = init_model(cfg, 4)
    ck.params["layers.0.router.bias"][:] = [0.3, -1.0, 0.7]
    h = Tensor(np.random.default_rng(1).standard_normal((2, 4)))
    _, logits, disp = moe_forward(h, 0, as_tensors(ck), cfg)
    assert np.allclose(disp.weights, nx.softmax_np(logits.data), atol=1e-6)


def test_saturated_logit_gives_single_expert_output():
    cfg, ck = _layer_params(seed=2)
    ck.params["layers.0.router.weight"][:] = 0
    ck.params["layers.0.router.bias"][:] = [0, 0, 1000, 0]
    params = as_tensors(ck)
    h = np.random.default_rng(3).standard_normal((2, 4)).astype(np.float32)
    out, _, disp = moe_forward(Tensor(h), 0, params, cfg)
    assert disp.weights[:, list(disp.indices[0]).index(2)] == pytest.approx(1.0)
    up, bu = ck.params["layers.0.experts.up"][2], ck.params["layers.0.experts.up_bias"][2]
    down, bd = ck.params["layers.0.experts.down"][2], ck.params["layers.0.experts.down_bias"][2]
    ref = nx._gelu(h @ up + bu)[0] @ down + bd
    assert np.allclose(out.data, ref, atol=1e-5)


def test_forward_causal(tiny_model):
    a = [1, 4, 20, 21, 22, 3, 5, 30]
    b = a[:5] + [3, 6, 31]
    la, _ = forward(tiny_model, a)
    lb, _ = forward(tiny_model, b)
    assert np.array_equal(la[:5], lb[:5])


def test_capture_is_observation_only(tiny_model):
    toks = [1, 4, 20, 21, 3, 5, 30, 31]
    l1, tr = forward(tiny_model, toks, capture=True)
    l2, none = forward(tiny_model, toks)
    assert none is None and np.array_equal(l1, l2)
    for layer in tr.layers:
        assert layer.indices.shape == (len(toks), 2)
        assert np.all(layer.weights > 0)
        assert np.allclose(layer.weights.sum(axis=1), 1, atol=1e-6)


def test_batched_forward_matches_single(tiny_model):
    seqs = [[1, 4, 20, 3, 5, 30], [1, 5, 33, 34, 35, 36, 3, 4]]
    many, _ = forward_many(tiny_model, seqs)
    for s, l in zip(seqs, many):
        assert np.allclose(forward(tiny_model, s)[0], l, atol=1e-5)


def test_over_length_rejected(tiny_model):
    with pytest.raises(ContractError):
        forward(tiny_model, [1] * (tiny_model.config.max_seq_len + 1))
    with pytest.raises(ContractError):
        forward(tiny_model, [tiny_model.config.vocab_size])


def test_position_ids_are_prefix_functions():
    toks = np.array([[1, 5, 10, 11, 12, 3, 6, 20, 21, 22, 2]])
    fwd, back = position_ids(toks)
    assert fwd.tolist() == [[0, 1, 2, 3, 4, 5, 1, 2, 3, 4, 5]]
    assert back.tolist() == [[0, 0, 0, 0, 0, 0, 5, 4, 3, 2, 1]]
    f2, b2 = position_ids(toks[:, :7])
    assert np.array_equal(f2, fwd[:, :7]) and np.array_equal(b2, back[:, :7])


def test_greedy_decode_caps_and_eos(tiny_model):
    assert greedy_decode(tiny_model, [1, 4, 20, 3, 5], 0) == []
    out = greedy_decode(tiny_model, [1, 4, 20, 3, 5], 4)
    assert 1 <= len(out) <= 4
    prompts = [[1, 4, 20, 3, 5], [1, 5, 33, 34, 3, 4]]
    many = greedy_decode_many(tiny_model, prompts, 6)
    assert many == [greedy_decode(tiny_model, p, 6) for p in prompts]
    for out in many:
        assert EOS not in out[:-1]


def test_checkpoint_round_trip(tmp_path, tiny_model):
    p = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    back = load_checkpoint(p)
    assert back.equals(tiny_model)
    raw = p.read_bytes()
    assert raw[:8] == b"MOECKPT1" and (16 + int.from_bytes(raw[8:16], "little")) % 64 == 0


def test_pruned_counts_load_and_run(tmp_path):
    cfg = ModelConfig(experts_per_layer=(16, 12, 8, 8, 12, 16), d_model=16, d_ff=16, vocab_size=40, max_seq_len=16)
    ck = init_model(cfg)
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "p.ckpt"))
    assert back.config.experts_per_layer == (16, 12, 8, 8, 12, 16)
    logits, _ = forward(back, [1, 4, 20, 3])
    assert logits.shape == (4, 40)


def test_checkpoint_errors(tmp_path, tiny_model):
    p = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    raw = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTCKPT!" + raw[8:])
    with pytest.raises(CheckpointHeaderError):
        load_checkpoint(tmp_path / "magic.ckpt")
    bad = raw.replace(b'"shape": [6, 16, 24]', b'"shape": [6, 24, 16]', 1)
    assert bad != raw
    (tmp_path / "shape.ckpt").write_bytes(bad)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "shape.ckpt")
