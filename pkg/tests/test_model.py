import numpy as np
import pytest

from odp.autodiff import Tape, backward
from odp.model import (ModelConfig, RnnTransducer, count_params, dequantize_int8,
                       frozen_prefix_layers, group_param_names, init_params,
                       joint_param_count, load_checkpoint, lstm_param_count,
                       param_breakdown, quantize_int8, save_checkpoint,
                       select_trainable)
from odp.rnnt_loss import rnnt_loss_node
from odp.tensor import Tensor

# rounded reference counts for the full-scale configuration
FULL_SCALE_ROWS = {
    "Joint": 901_000,
    "LM": 19_000_000,
    "Decoder": 20_000_000,
    "Encoder 7": 12_000_000,
    "Encoder 6-7": 24_000_000,
    "Encoder 5-7": 35_000_000,
    "Encoder 4-7": 47_000_000,
    "Encoder 3-7": 59_000_000,
    "Encoder 2-7": 76_000_000,
    "Encoder 1-7": 88_000_000,
    "Encoder 0-7": 96_000_000,
    "All": 117_000_000,
}
FULL_SCALE_PCTS = {
    "Joint": 0.8, "LM": 16.6, "Decoder": 17.4, "Encoder 7": 10.1,
    "Encoder 6-7": 20.2, "Encoder 5-7": 30.3, "Encoder 4-7": 40.5,
    "Encoder 3-7": 50.6, "Encoder 2-7": 65.2, "Encoder 1-7": 75.3,
    "Encoder 0-7": 82.6, "All": 100.0,
}
# per-layer increments implied by the rounded cumulative rows, layers 0..7
FULL_SCALE_LAYER_DIFFS_M = [8, 12, 17, 12, 12, 11, 12, 12]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(mid_stack_layer=8, enc_layers=8)
    with pytest.raises(ValueError):
        ModelConfig(input_dim=241)  # not divisible by stacking factor


def test_full_scale_rows_within_rounding():
    cfg = ModelConfig.paper_scale()
    for name, expected in FULL_SCALE_ROWS.items():
        got = count_params(cfg, name)
        tol = 0.05 if name == "Joint" else 0.02  # joint hidden width is a guess
        assert abs(got - expected) / expected <= tol, (name, got)


def test_full_scale_percentages():
    cfg = ModelConfig.paper_scale()
    for name, _count, pct in param_breakdown(cfg):
        assert abs(pct - FULL_SCALE_PCTS[name]) <= 1.0, name


def test_full_scale_per_layer_diffs():
    cfg = ModelConfig.paper_scale()
    cum = [count_params(cfg, f"Encoder {k}-7") for k in range(8)] + [0]
    rounded = [round(c / 1e6) for c in cum]
    diffs = [rounded[k] - rounded[k + 1] for k in range(8)]
    assert diffs == FULL_SCALE_LAYER_DIFFS_M


def test_layer2_sees_stacked_input():
    cfg = ModelConfig.paper_scale()
    assert cfg.enc_input_dim(2) == 1280
    assert cfg.enc_input_dim(0) == 240
    assert cfg.enc_input_dim(1) == 640
    layer2 = count_params(cfg, "Encoder 2-7") - count_params(cfg, "Encoder 3-7")
    assert layer2 == lstm_param_count(1280, 2048, 640)


def test_analytic_counts_match_materialized_params():
    for cfg in (ModelConfig.tiny(), ModelConfig.tiny_wide()):
        params = init_params(cfg, seed=0)
        for group in ("All", "Joint", "LM", "Decoder", "Encoder 1-end"):
            names = group_param_names(cfg, group)
            actual = sum(params[n].data.size for n in names)
            assert actual == count_params(cfg, group), group


def test_partition_identity():
    for cfg in (ModelConfig.tiny(), ModelConfig.paper_scale()):
        assert count_params(cfg, "All") == (count_params(cfg, "Decoder")
                                            + count_params(cfg, "Encoder 0-end"))
        assert count_params(cfg, "Decoder") == (count_params(cfg, "LM")
                                                + count_params(cfg, "Joint"))
        assert joint_param_count(cfg) == count_params(cfg, "Joint")


def test_group_containment_and_disjointness():
    cfg = ModelConfig.tiny()
    last = cfg.enc_layers - 1
    prev = None
    for k in range(last, -1, -1):
        cur = set(group_param_names(cfg, f"Encoder {k}-{last}"))
        if prev is not None:
            assert prev < cur
        prev = cur
    dec = set(group_param_names(cfg, "Decoder"))
    enc = set(group_param_names(cfg, f"Encoder 0-{last}"))
    assert not dec & enc
    assert dec | enc == set(group_param_names(cfg, "All"))


def test_group_aliases_and_errors():
    cfg = ModelConfig.tiny()
    a = group_param_names(cfg, "Encoder 1..end")
    b = group_param_names(cfg, "Encoder 1-3")
    c = group_param_names(cfg, "Encoder 1–3")  # en dash
    assert a == b == c
    assert group_param_names(cfg, "Encoder 3") == group_param_names(cfg, "Encoder 3-3")
    with pytest.raises(ValueError, match="unknown parameter group"):
        select_trainable(cfg, "Everything")
    with pytest.raises(ValueError, match="outside layers"):
        select_trainable(cfg, "Encoder 2-9")


def test_frozen_prefix_rules():
    cfg = ModelConfig.tiny()
    assert frozen_prefix_layers(cfg, "Encoder 1-end") == 1
    assert frozen_prefix_layers(cfg, "Encoder 3") == 3
    assert frozen_prefix_layers(cfg, "Decoder") == cfg.enc_layers
    with pytest.raises(ValueError, match="no frozen prefix"):
        frozen_prefix_layers(cfg, "All")
    with pytest.raises(ValueError, match="no frozen prefix"):
        frozen_prefix_layers(cfg, "Encoder 0-end")


def zero_model(cfg=None):
    cfg = cfg or ModelConfig.tiny()
    params = {n: Tensor(np.zeros_like(p.data), is_param=True)
              for n, p in init_params(cfg, 0).items()}
    return RnnTransducer(cfg, params)


def test_zero_weights_zero_states():
    m = zero_model()
    feats = Tensor(np.random.default_rng(0).normal(size=(9, 4)).astype(np.float32))
    enc = m.acoustic_states(feats)
    assert np.array_equal(enc.data, np.zeros_like(enc.data))
    lms = m.label_states([1, 2])
    assert lms.shape == (3, 16)
    assert np.array_equal(lms.data, np.zeros_like(lms.data))


def test_zero_weights_uniform_joint():
    m = zero_model()
    feats = Tensor(np.zeros((6, 4), dtype=np.float32))
    lat = m.lattice_from_boundary(feats, 0, [1])
    assert np.allclose(lat.data, -np.log(m.config.n_outputs), atol=1e-6)


def test_label_states_empty_sequence():
    m = RnnTransducer(ModelConfig.tiny(), seed=1)
    states = m.label_states([])
    assert states.shape == (1, m.config.lstm_proj)  # start symbol only


def test_label_out_of_range():
    m = RnnTransducer(ModelConfig.tiny(), seed=1)
    with pytest.raises(ValueError, match="vocab"):
        m.label_states([8])


def test_encoder_lengths():
    # stride-2 mid stack halves (with padding) after the configured layer
    m = RnnTransducer(ModelConfig.tiny(), seed=1)
    rng = np.random.default_rng(0)
    for t_raw, t_out in [(21, 4), (18, 3), (3, 1)]:
        enc = m.acoustic_states(Tensor(rng.normal(size=(t_raw, 4)).astype(np.float32)))
        assert enc.shape == (t_out, 16), t_raw


def test_lattice_rows_normalized():
    m = RnnTransducer(ModelConfig.tiny(), seed=2)
    feats = Tensor(np.random.default_rng(1).normal(size=(12, 4)).astype(np.float32))
    lat = m.lattice_from_boundary(feats, 0, [0, 3])
    sums = np.exp(lat.data).sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-5)


def test_quantize_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(scale=rng.uniform(0.01, 10), size=rng.integers(1, 40))
        q, scale = quantize_int8(x)
        back = dequantize_int8(q, scale, "f64")
        assert np.max(np.abs(back - x)) <= scale / 2 + 1e-12
    q, scale = quantize_int8(np.zeros(7))
    assert scale == 0.0 and not q.any()
    x = np.array([0.3, -1.7, 0.9])
    q, scale = quantize_int8(x)
    assert q[np.argmax(np.abs(x))] in (-127, 127)


def test_frozen_params_bit_identical_after_training():
    from odp.trainer import OptimizerConfig, train_basic
    from odp.trainer import SyntheticTaskSpec, synth_generate
    m = RnnTransducer(ModelConfig.tiny(), seed=4)
    group = select_trainable(m.config, "Encoder 2-end")
    frozen = {n: p.data.tobytes() for n, p in m.params.items()
              if n not in group.param_names}
    data = synth_generate(SyntheticTaskSpec(seed=5), 8)
    train_basic(m, data, epochs=2, batch_size=4, group_name="Encoder 2-end",
                optimizer=OptimizerConfig(lr=0.05, momentum=0.9))
    for n, blob in frozen.items():
        assert m.params[n].data.tobytes() == blob, n


def exhaustive_best_path(model, feats, max_total_symbols=4):
    """Highest-probability complete decode path by explicit enumeration."""
    enc = model.acoustic_states(feats)
    t_len = enc.shape[0]
    cfg = model.config
    from odp.autodiff import add, matmul, row

    def lm_tail(states, symbol):
        vec_arr = np.zeros(cfg.n_outputs, dtype=np.float32)
        vec_arr[symbol] = 1.0
        vec = Tensor(vec_arr)
        new_states = []
        for l in range(cfg.lm_layers):
            gates = add(matmul(vec, model.params[f"lm.{l}.wx"]), model.params[f"lm.{l}.b"])
            c, h = model.lstm_cell(f"lm.{l}", gates, *states[l])
            new_states.append((c, h))
            vec = h
        return new_states, vec

    init = [(Tensor(np.zeros(cfg.lstm_hidden, dtype=np.float32)),
             Tensor(np.zeros(cfg.lstm_proj, dtype=np.float32)))
            for _ in range(cfg.lm_layers)]
    start_states, start_vec = lm_tail(init, cfg.blank)
    best = [-np.inf, ()]

    def walk(t, states, lm_vec, emitted, score, n_sym):
        if t == t_len:
            if score > best[0]:
                best[0], best[1] = score, tuple(emitted)
            return
        logits = model.joint_logits(row(enc, t), lm_vec).data
        logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        walk(t + 1, states, lm_vec, emitted, score + logp[cfg.blank], n_sym)
        if n_sym < max_total_symbols:
            for sym in range(cfg.vocab):
                ns, nv = lm_tail(states, sym)
                walk(t, ns, nv, emitted + [sym], score + logp[sym], n_sym + 1)

    walk(0, start_states, start_vec, [], 0.0, 0)
    return best[1]


def sharpened_model(seed):
    """Random tiny model with near-deterministic output distributions."""
    cfg = ModelConfig(input_dim=12, enc_layers=2, lm_layers=1, lstm_hidden=16,
                      lstm_proj=8, mid_stack_layer=1, mid_stack_stride=2,
                      vocab=3, joint_hidden=8)
    m = RnnTransducer(cfg, seed=seed)
    for name in ("joint.w_out", "joint.b_out"):
        m.params[name] = Tensor(6.0 * m.params[name].data, is_param=True)
    return m


def test_greedy_decode_forced_blank():
    m = RnnTransducer(ModelConfig.tiny(), seed=5)
    boosted = m.params["joint.b_out"].data.copy()
    boosted[m.config.blank] += 50.0
    m.params["joint.b_out"] = Tensor(boosted, is_param=True)
    hyp = m.greedy_decode(np.random.default_rng(2).normal(size=(9, 4)).astype(np.float32))
    assert hyp == []


def test_greedy_decode_respects_symbol_cap():
    m = RnnTransducer(ModelConfig.tiny(), seed=5)
    boosted = m.params["joint.b_out"].data.copy()
    boosted[0] += 50.0  # always prefer symbol 0
    m.params["joint.b_out"] = Tensor(boosted, is_param=True)
    feats = np.random.default_rng(2).normal(size=(9, 4)).astype(np.float32)
    hyp = m.greedy_decode(feats, max_symbols_per_frame=2)
    t_out = m.acoustic_states(Tensor(feats)).shape[0]
    assert hyp == [0] * (2 * t_out)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5])
def test_greedy_matches_exhaustive_best_path_when_peaked(seed):
    m = sharpened_model(seed)
    feats = Tensor(np.random.default_rng(100 + seed).normal(size=(6, 4)).astype(np.float32))
    greedy = tuple(m.greedy_decode(feats, max_symbols_per_frame=2))
    best = exhaustive_best_path(m, feats, max_total_symbols=4)
    assert greedy == best


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    m = RnnTransducer(ModelConfig.tiny(), seed=6)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(m, p1)
    m2 = load_checkpoint(p1)
    save_checkpoint(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert list(m2.params) == list(m.params)
    for n in m.params:
        assert m.params[n].data.tobytes() == m2.params[n].data.tobytes()
    assert m2.config == m.config


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_loss_node_differentiable_end_to_end():
    m = RnnTransducer(ModelConfig.tiny(), seed=7)
    feats = Tensor(np.random.default_rng(8).normal(size=(12, 4)).astype(np.float32))
    with Tape() as tape:
        lat = m.lattice_from_boundary(feats, 0, [1, 2])
        loss = rnnt_loss_node(lat, [1, 2], m.config.blank)
    wrt = [m.params["joint.w_out"], m.params["enc.0.wx"]]
    grads = backward(tape, loss, wrt=wrt)
    assert all(np.isfinite(g.data).all() for g in grads.values())
    assert any(np.abs(g.data).sum() > 0 for g in grads.values())
