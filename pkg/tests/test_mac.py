import numpy as np
import pytest

from macnet import tensor as T
from macnet.gridworld import Scene, SceneError, SceneObject, generate_scene
from macnet.mac import (
    ConfigError,
    MacCell,
    MacConfig,
    MacNetwork,
    control_unit,
    read_unit,
    scene_features,
    write_unit,
)
from macnet.tensor import ContractError, Tape, Tensor

from checks import end_to_end_gradient_errors, randomize
from oracles import central_difference, control_oracle, read_oracle, relative_error, write_oracle


def random_cell(cfg, seed):
    rng = np.random.default_rng(seed)
    cell = MacCell(cfg, rng)
    randomize(cell, rng)
    return cell, rng


def small_scene(rng, grid=3, n=3):
    return generate_scene(rng, n, grid)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        MacConfig(d=7)
    with pytest.raises(ConfigError):
        MacConfig(p=0)
    with pytest.raises(ConfigError):
        MacConfig(control_variant="bogus")


# ---------------------------------------------------------------- control unit

@pytest.mark.parametrize("seed", range(100))
def test_control_matches_scalar_oracle(seed):
    cfg = MacConfig(d=6)
    cell, rng = random_cell(cfg, seed)
    B, S = 3, int(rng.integers(1, 7))
    lengths = rng.integers(1, S + 1, size=B)
    mask = np.arange(S)[None, :] < lengths[:, None]
    c_prev, q_i = rng.normal(size=(B, 6)), rng.normal(size=(B, 6))
    cw = rng.normal(size=(B, S, 6))
    c, cv = control_unit(cell, Tensor(c_prev), Tensor(q_i), Tensor(cw), mask)
    for b in range(B):
        c_ref, cv_ref = control_oracle(cell, c_prev[b], q_i[b], cw[b].tolist(), int(lengths[b]))
        np.testing.assert_allclose(c.data[b], c_ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(cv.data[b], cv_ref, atol=1e-10, rtol=0)


def test_control_single_word_copies_it():
    cell, rng = random_cell(MacConfig(d=4), 1)
    cw = rng.normal(size=(1, 1, 4))
    c, cv = control_unit(cell, Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(cw))
    assert cv.data.tolist() == [[1.0]]
    assert np.array_equal(c.data[0], cw[0, 0])


def test_control_identical_words_uniform():
    cell, rng = random_cell(MacConfig(d=4), 2)
    cw = np.repeat(rng.normal(size=(1, 1, 4)), 5, axis=1)
    c, cv = control_unit(cell, Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(cw))
    np.testing.assert_allclose(cv.data, np.full((1, 5), 0.2), atol=1e-15)
    np.testing.assert_allclose(c.data[0], cw[0, 0], atol=1e-14)


def test_control_empty_question_rejected():
    cell, _ = random_cell(MacConfig(d=4), 3)
    with pytest.raises(ContractError):
        control_unit(cell, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 0, 4))))


# ---------------------------------------------------------------- read unit

@pytest.mark.parametrize("direct", [True, False])
@pytest.mark.parametrize("seed", range(50))
def test_read_matches_scalar_oracle(seed, direct):
    cfg = MacConfig(d=6, direct_kb_in_read=direct)
    cell, rng = random_cell(cfg, seed)
    B, N = 2, int(rng.integers(1, 10))
    m, c, K = rng.normal(size=(B, 6)), rng.normal(size=(B, 6)), rng.normal(size=(B, N, 6))
    r, rv = read_unit(cell, Tensor(m), Tensor(K), Tensor(c), cfg)
    for b in range(B):
        r_ref, rv_ref = read_oracle(cell, m[b], K[b].tolist(), c[b], direct)
        np.testing.assert_allclose(r.data[b], r_ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(rv.data[b], rv_ref, atol=1e-10, rtol=0)


def test_read_identical_locations_uniform():
    cfg = MacConfig(d=4)
    cell, rng = random_cell(cfg, 4)
    K = np.repeat(rng.normal(size=(1, 1, 4)), 9, axis=1)
    r, rv = read_unit(cell, Tensor(rng.normal(size=(1, 4))), Tensor(K), Tensor(rng.normal(size=(1, 4))), cfg)
    np.testing.assert_allclose(rv.data, np.full((1, 9), 1 / 9), atol=1e-15)
    np.testing.assert_allclose(r.data[0], K[0, 0], atol=1e-14)


def test_read_single_location():
    cfg = MacConfig(d=4)
    cell, rng = random_cell(cfg, 5)
    K = rng.normal(size=(1, 1, 4))
    r, rv = read_unit(cell, Tensor(rng.normal(size=(1, 4))), Tensor(K), Tensor(rng.normal(size=(1, 4))), cfg)
    assert rv.data.tolist() == [[1.0]]
    assert np.array_equal(r.data[0], K[0, 0])


def test_read_unit_signature_has_no_question_input():
    import inspect

    assert list(inspect.signature(read_unit).parameters) == ["cell", "m_prev", "K", "c_i", "cfg", "kb_terms"]


# ---------------------------------------------------------------- write unit

WRITE_CONFIGS = [
    dict(),
    dict(use_self_attention=True),
    dict(use_memory_gate=True),
    dict(use_self_attention=True, use_memory_gate=True, gate_bias=1.0),
    dict(write_variant="retrieved_direct"),
    dict(write_variant="retrieved_affine"),
    dict(write_variant="gate_only", gate_bias=-1.0),
]


@pytest.mark.parametrize("opts", WRITE_CONFIGS, ids=lambda o: ",".join(f"{k}={v}" for k, v in o.items()) or "default")
@pytest.mark.parametrize("seed", range(15))
def test_write_matches_scalar_oracle(seed, opts):
    cfg = MacConfig(d=6, **opts)
    cell, rng = random_cell(cfg, seed)
    B, step = 2, int(rng.integers(1, 5))
    r, m, c = rng.normal(size=(B, 6)), rng.normal(size=(B, 6)), rng.normal(size=(B, 6))
    hist = [(rng.normal(size=(B, 6)), rng.normal(size=(B, 6))) for _ in range(step - 1)]
    m_i, gate, sa, _ = write_unit(cell, Tensor(r), Tensor(m), Tensor(c),
                                  [(Tensor(a), Tensor(b)) for a, b in hist], cfg, step=step)
    for b in range(B):
        ref, g_ref, sa_ref = write_oracle(cell, r[b], m[b], c[b], [(x[b], y[b]) for x, y in hist], cfg)
        np.testing.assert_allclose(m_i.data[b], ref, atol=1e-10, rtol=0)
        if g_ref is not None:
            assert abs(gate.data[b] - g_ref) < 1e-12
        if sa_ref is not None:
            np.testing.assert_allclose(sa.data[b], sa_ref, atol=1e-12, rtol=0)


def test_write_gate_zero_logit_averages():
    cfg = MacConfig(d=4, use_memory_gate=True)
    cell, rng = random_cell(cfg, 6)
    cell.write_gate.W.data[:] = 0.0
    cell.write_gate.b.data[:] = 0.0
    r, m, c = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
    m_i, gate, _, cand = write_unit(cell, r, m, c, [], cfg)
    assert gate.data.tolist() == [0.5]
    np.testing.assert_allclose(m_i.data, 0.5 * m.data + 0.5 * cand.data, atol=1e-15)


def test_write_gate_bias_initialises_logit():
    rng = np.random.default_rng(0)
    cell = MacCell(MacConfig(d=4, use_memory_gate=True, gate_bias=1.0), rng)
    assert cell.write_gate.b.data.tolist() == [1.0]


def test_write_self_attention_empty_history():
    cfg = MacConfig(d=4, use_self_attention=True)
    cell, rng = random_cell(cfg, 7)
    r, m, c = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
    m_i, _, sa, _ = write_unit(cell, r, m, c, [], cfg, step=1)
    assert sa is None
    m_info = cell.write_info(T.concat([r, m]))
    W_p = cell.write_sa_combine.W.data[:, 4:]
    np.testing.assert_allclose(m_i.data, m_info.data @ W_p.T + cell.write_sa_combine.b.data, atol=1e-14)


def test_write_history_length_checked():
    cfg = MacConfig(d=4)
    cell, rng = random_cell(cfg, 8)
    x = Tensor(rng.normal(size=(1, 4)))
    with pytest.raises(ContractError):
        write_unit(cell, x, x, x, [], cfg, step=3)


# ---------------------------------------------------------------- network

def make_net(seed=0, **opts):
    cfg = MacConfig(**{"d": 8, "p": 3, "grid_size": 3, **opts})
    net = MacNetwork(cfg, n_words=7, n_answers=5, seed=seed)
    return net


def run(net, seed=0, B=4, S=5, record=True):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, net.n_words, size=(B, S))
    lengths = rng.integers(1, S + 1, size=B)
    tokens[np.arange(S)[None, :] >= lengths[:, None]] = 0
    scenes = [small_scene(rng, net.cfg.grid_size, int(rng.integers(2, 6))) for _ in range(B)]
    return net(tokens, scenes, lengths, record=record), tokens, lengths, scenes


@pytest.mark.parametrize("opts", [dict(), dict(use_self_attention=True, use_memory_gate=True),
                                  dict(control_variant="word_vectors")])
def test_trace_invariants(opts):
    net = make_net(**opts)
    for seed in range(20):
        (_, trace), *_ = run(net, seed)
        for i in range(net.cfg.p):
            cv, rv = trace.cv[i], trace.rv[i].reshape(trace.rv[i].shape[0], -1)
            for dist in (cv, rv, trace.sa[i]):
                if dist is None:
                    continue
                assert dist.min() >= 0
                assert np.abs(dist.sum(axis=1) - 1).max() <= 1e-6
            recon = np.einsum("bs,bsd->bd", cv, trace.cw)
            np.testing.assert_allclose(recon, trace.c[i], atol=1e-9, rtol=0)


def test_gate_identity_in_trace():
    net = make_net(use_memory_gate=True, use_self_attention=True)
    randomize(net, np.random.default_rng(3))
    for seed in range(10):
        (_, trace), *_ = run(net, seed)
        for i in range(net.cfg.p):
            g = trace.gate[i][:, None]
            lhs = trace.m[i] - trace.m_prev[i]
            rhs = (1 - g) * (trace.m_candidate[i] - trace.m_prev[i])
            assert np.abs(lhs - rhs).max() <= 1e-12


@pytest.mark.parametrize("opts", [dict(), dict(use_self_attention=True, use_memory_gate=True),
                                  dict(direct_kb_in_read=False, control_variant="word_vectors")])
def test_sharing_parameter_accounting(opts):
    counts = {}
    for share in (True, False):
        for p in (1, 4, 8):
            net = MacNetwork(MacConfig(d=8, p=p, share_weights=share, **opts), 7, 5)
            counts[share, p] = net.cell_parameter_count()
    assert counts[True, 1] == counts[True, 4] == counts[True, 8]
    for p in (1, 4, 8):
        assert counts[False, p] == p * counts[True, 1]


def test_sharing_leaves_other_parameters_alone():
    shared = dict(MacNetwork(MacConfig(d=8, p=3), 7, 5).named_parameters())
    unshared = dict(MacNetwork(MacConfig(d=8, p=3, share_weights=False), 7, 5).named_parameters())
    rest = lambda ps: {k: v.shape for k, v in ps.items() if not k.startswith("cells.")}
    assert rest(shared) == rest(unshared)


def test_position_aware_question_examples():
    net = make_net()
    q = Tensor(np.arange(8.0))
    proj = net.q_proj[0]
    proj.W.data = np.eye(8)
    proj.b.data = np.zeros(8)
    assert np.array_equal(net.position_aware_question(q, 1).data, q.data)
    proj.W.data[:] = 0.0
    assert not net.position_aware_question(q, 1).data.any()
    with pytest.raises(ContractError):
        net.position_aware_question(q, 0)
    with pytest.raises(ContractError):
        net.position_aware_question(q, 4)


def test_position_aware_question_not_shared():
    net = make_net()
    assert len({id(p.W) for p in net.q_proj}) == net.cfg.p


def test_position_aware_question_gradient():
    net = make_net()
    rng = np.random.default_rng(2)
    q = T.parameter(rng.normal(size=(2, 8)))
    probe = rng.normal(size=(2, 8))
    proj = net.q_proj[1]
    arrays = [q, proj.W, proj.b]

    def value():
        return float(np.sum(net.position_aware_question(q, 2).data * probe))

    with Tape() as tape:
        loss = T.tsum(T.hadamard(net.position_aware_question(q, 2), Tensor(probe)))
    grads = tape.backward(loss)
    for p, n in zip(arrays, central_difference(value, [a.data for a in arrays], h=1e-6)):
        assert relative_error(grads.of(p), n) < 1e-6


def test_knowledge_base_shape_and_locality():
    cfg = MacConfig()
    net = MacNetwork(cfg, 7, 5)
    rng = np.random.default_rng(0)
    scene = generate_scene(rng, 5, 5)
    K = net.build_knowledge_base([scene]).data[0]
    assert K.shape == (5, 5, 64)
    o = scene.objects[2]
    other = "red" if o.color != "red" else "blue"
    changed = Scene(5, tuple(SceneObject(x.row, x.col, x.shape, other, x.size, x.material) if x is o else x
                             for x in scene.objects))
    K2 = net.build_knowledge_base([changed]).data[0]
    diff = np.abs(K - K2).max(axis=2) > 0
    assert diff[o.row, o.col] and diff.sum() == 1


def test_empty_cells_share_flag_channel():
    feats = scene_features(Scene(3, (SceneObject(1, 1, "cube", "red", "small", "metal"),)), 3)
    assert feats[0, 0, 13] == 1.0 and feats[1, 1, 13] == 0.0
    assert not feats[0, 0, :13].any()
    assert feats[0, 0, 14] == -1.0 and feats[2, 2, 15] == 1.0


def test_scene_grid_mismatch():
    with pytest.raises(SceneError):
        scene_features(Scene(3, ()), 5)


def test_output_unit_zero_weights_uniform():
    net = make_net()
    for p in net.out_hidden.parameters() + net.out_logits.parameters():
        p.data[:] = 0.0
    rng = np.random.default_rng(0)
    logits = net.output_unit(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8))))
    np.testing.assert_allclose(T.softmax(logits).data, np.full((3, 5), 0.2), atol=1e-15)


def test_output_unit_without_question():
    net = make_net(predict_with_question=False)
    assert net.out_hidden.W.shape == (8, 8)


def test_output_unit_gradient():
    net = make_net()
    randomize(net, np.random.default_rng(5))
    rng = np.random.default_rng(1)
    q, m = T.parameter(rng.normal(size=(2, 8))), T.parameter(rng.normal(size=(2, 8)))
    arrays = [q, m, *net.out_hidden.parameters(), *net.out_logits.parameters()]

    def value():
        return T.cross_entropy(net.output_unit(q, m), [1, 4]).item()

    with Tape() as tape:
        loss = T.cross_entropy(net.output_unit(q, m), [1, 4])
    grads = tape.backward(loss)
    for p, n in zip(arrays, central_difference(value, [a.data for a in arrays])):
        assert relative_error(grads.of(p), n) < 1e-4


def test_end_to_end_gradient_with_self_attention_and_gate():
    errs = end_to_end_gradient_errors(share_weights=False, use_self_attention=True, use_memory_gate=True)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad


def test_padding_is_bitwise_neutral():
    net = make_net()
    randomize(net, np.random.default_rng(1), scale=0.3)
    rng = np.random.default_rng(4)
    scene = [small_scene(rng)]
    tokens = np.array([[3, 1, 4]])
    logits, trace = net(tokens, scene, record=True)
    padded = np.array([[3, 1, 4, 0, 0, 0]])
    logits_p, trace_p = net(padded, scene, lengths=[3], record=True)
    assert np.array_equal(logits.data, logits_p.data)
    for i in range(net.cfg.p):
        assert np.array_equal(trace.cv[i], trace_p.cv[i][:, :3])
        assert not trace_p.cv[i][:, 3:].any()


def test_forward_is_deterministic():
    a, b = make_net(seed=3), make_net(seed=3)
    (la, _), *_ = run(a, 5)
    (lb, _), *_ = run(b, 5)
    assert np.array_equal(la.data, lb.data)


def test_training_forward_needs_rng():
    net = make_net()
    with pytest.raises(ContractError):
        net(np.array([[1]]), [small_scene(np.random.default_rng(0))], training=True)


def test_dropout_off_in_eval_on_in_training():
    net = make_net()
    rng = np.random.default_rng(0)
    tokens, scenes = np.array([[1, 2, 3]]), [small_scene(rng)]
    e1, _ = net(tokens, scenes)
    e2, _ = net(tokens, scenes)
    assert np.array_equal(e1.data, e2.data)
    t1, _ = net(tokens, scenes, training=True, rng=np.random.default_rng(1))
    t2, _ = net(tokens, scenes, training=True, rng=np.random.default_rng(2))
    assert not np.array_equal(t1.data, t2.data)


def test_single_step_network():
    net = make_net(p=1)
    (logits, trace), *_ = run(net)
    assert logits.shape == (4, 5) and len(trace.rv) == 1


@pytest.mark.parametrize("variant", ["question_vector", "none"])
def test_control_variants(variant):
    net = make_net(control_variant=variant)
    (_, trace), *_ = run(net)
    assert not hasattr(net.cells[0], "control_cq")
    assert all(cv is None for cv in trace.cv)
    if variant == "none":
        assert all(not c.any() for c in trace.c)


def test_trace_tags_parameter_source():
    net = make_net()
    shadow = net.with_weights(net.state_dict(), "ema")
    (_, t_raw), *_ = run(net)
    (_, t_ema), *_ = run(shadow)
    assert t_raw.param_source == "raw" and t_ema.param_source == "ema"


def test_state_dict_round_trip():
    a, b = make_net(seed=1), make_net(seed=2)
    b.load_state_dict(a.state_dict())
    (la, _), *_ = run(a)
    (lb, _), *_ = run(b)
    assert np.array_equal(la.data, lb.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})

