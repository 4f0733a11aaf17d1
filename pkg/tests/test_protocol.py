import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedalign.data import ConfigError, synth_noniid_clients
from fedalign.nn import AdamState, FreezeMask, ShapeError, accuracy, init_params, train_online
from fedalign.protocol import (
    ClientUpdate,
    RoundConfig,
    RoundError,
    aggregate_fedavg,
    aggregate_similarity_aware,
    client_local_round,
    cosine_alignment,
    fedprox_local_objective,
    history_jsonl,
    phase0_pretrain,
    phase1_serial_meta_init,
    query_score,
    run_phase2,
    visit_orders,
)


def model(n=4):
    # a 1-layer net with n-1 weights + 1 bias gives exactly n parameters
    return init_params((n - 1, 1), 0)


def upd(cid, delta, s=1.0, n=10):
    return ClientUpdate(cid, np.asarray(delta, dtype=np.float64), s, n)


# -- examples --------------------------------------------------------------------


def test_identical_deltas_equal_weights():
    g = model(2)
    g = g.with_flat(np.zeros(2))
    out = aggregate_similarity_aware(g, [upd("a", [1, 0], 0.5), upd("b", [1, 0], 0.5)], alpha=1.0, c=0.1)
    assert [cw.norm_weight for cw in out.clients] == [0.5, 0.5]
    assert [cw.theta for cw in out.clients] == [1.0, 1.0]
    np.testing.assert_allclose(out.new_global.flat, [1.0, 0.0])


def test_opposite_deltas_hit_the_floor():
    g = model(2).with_flat(np.zeros(2))
    out = aggregate_similarity_aware(g, [upd("a", [1, 0], 0.8), upd("b", [-1, 0], 0.2)], c=0.1)
    # mean delta is zero: both cosines are defined as 0, both weights floored
    assert [cw.theta for cw in out.clients] == [0.0, 0.0]
    assert out.clients[0].weight == pytest.approx(0.08)
    assert out.clients[1].weight == pytest.approx(0.02)
    np.testing.assert_allclose([cw.norm_weight for cw in out.clients], [0.8, 0.2])
    np.testing.assert_allclose(out.new_global.flat, [0.6, 0.0])


def test_query_score_examples():
    assert query_score(0.0) == 1.0
    assert query_score(1.0) == 0.5


def test_cosine_zero_vector():
    assert cosine_alignment([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine_alignment([1.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ShapeError):
        cosine_alignment([1.0], [1.0, 2.0])


def test_alpha_scales_step():
    g = model(2).with_flat(np.array([1.0, 1.0]))
    out = aggregate_similarity_aware(g, [upd("a", [2, 0])], alpha=0.5)
    np.testing.assert_allclose(out.new_global.flat, [2.0, 1.0])


def test_non_finite_client_dropped():
    g = model(2).with_flat(np.zeros(2))
    out = aggregate_similarity_aware(g, [upd("a", [1, 1]), upd("b", [np.nan, 0])])
    assert out.dropped == ["b"]
    assert [cw.client_id for cw in out.clients] == ["a"]
    with pytest.raises(RoundError):
        aggregate_similarity_aware(g, [upd("b", [np.inf, 0])])


def test_delta_length_mismatch():
    with pytest.raises(ShapeError):
        aggregate_similarity_aware(model(3), [upd("a", [1, 2])])


def test_fedavg_size_weighted():
    g = model(2).with_flat(np.zeros(2))
    out = aggregate_fedavg(g, [upd("a", [1, 0], n=30), upd("b", [0, 1], n=10)])
    np.testing.assert_allclose(out.new_global.flat, [0.75, 0.25])


def test_fedavg_equal_sizes_is_mean():
    g = model(3).with_flat(np.array([1.0, 2.0, 3.0]))
    out = aggregate_fedavg(g, [upd("a", [1, 1, 1]), upd("b", [-1, 3, 0])])
    np.testing.assert_allclose(out.new_global.flat, [1.0, 4.0, 3.5])


def test_fedprox_objective_zero_mu_and_at_anchor():
    p = init_params((3, 4, 1), 1)
    x, y = np.array([0.1, -0.2, 0.3]), 1.0
    l0, g0 = fedprox_local_objective(p, p, x, y, 0.0)
    l1, g1 = fedprox_local_objective(p, p, x, y, 0.5)
    assert l0 == l1
    np.testing.assert_array_equal(g0, g1)
    shifted = p.with_flat(p.flat + 0.1)
    l2, g2 = fedprox_local_objective(shifted, p, x, y, 1.0)
    l3, g3 = fedprox_local_objective(shifted, p, x, y, 0.0)
    assert l2 - l3 == pytest.approx(0.5 * 0.01 * p.size)
    np.testing.assert_allclose(g2 - g3, 0.1)


def test_fedprox_objective_respects_mask():
    p = init_params((3, 4, 1), 1)
    mask = FreezeMask.freeze_first_half(2)
    _, g = fedprox_local_objective(p.with_flat(p.flat + 1.0), p, np.ones(3), 0.0, 1.0, mask)
    assert np.all(g[~mask.coordinate_mask(p)] == 0.0)


def test_fedprox_negative_mu():
    p = init_params((3, 1), 0)
    with pytest.raises(ConfigError):
        fedprox_local_objective(p, p, np.ones(3), 1.0, -1.0)


def test_round_config_validation():
    RoundConfig().validate()
    for bad in (dict(c=0.0), dict(c=1.0), dict(alpha=0.0), dict(mu=-1.0), dict(local_epochs=0)):
        with pytest.raises(ConfigError):
            RoundConfig(**bad).validate()


def test_visit_orders_permutations_and_determinism():
    orders = visit_orders(["b", "a", "c"], 5, 7)
    assert all(sorted(o) == ["a", "b", "c"] for o in orders)
    assert orders == visit_orders(["c", "b", "a"], 5, 7)


# -- phases ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def clients():
    return synth_noniid_clients(2, 300, 0.8, 3)


def test_phase0_zero_epochs_is_init():
    X = np.zeros((5, 9))
    p = phase0_pretrain(X, np.zeros(5), (9, 4, 1), 0, 1e-3, 2)
    np.testing.assert_array_equal(p.flat, init_params((9, 4, 1), 2).flat)
    with pytest.raises(ShapeError):
        phase0_pretrain(np.zeros((5, 3)), np.zeros(5), (9, 4, 1), 1, 1e-3, 0)
    with pytest.raises(ConfigError):
        phase0_pretrain(np.zeros((0, 9)), np.zeros(0), (9, 4, 1), 1, 1e-3, 0)


def test_phase1_zero_rounds_identity(clients):
    w = init_params((9, 4, 1), 0)
    out, diag = phase1_serial_meta_init(w, clients, 0, 1, 0)
    np.testing.assert_array_equal(out.flat, w.flat)
    assert diag == []


def test_phase1_single_client_single_round_matches_online_pass(clients):
    w = init_params((9, 4, 1), 0)
    out, diag = phase1_serial_meta_init(w, clients[:1], 1, 1, 0, lr=1e-3)
    ref, _ = train_online(w, AdamState.zeros(w.size, lr=1e-3), clients[0].rows("p1_support"))
    np.testing.assert_array_equal(out.flat, ref.flat)
    assert len(diag) == 1 and math.isfinite(diag[0]["query_loss"])


def test_phase1_deterministic(clients):
    w = init_params((9, 4, 1), 0)
    a, _ = phase1_serial_meta_init(w, clients, 2, 1, 0, lr=1e-3)
    b, _ = phase1_serial_meta_init(w, clients, 2, 1, 0, lr=1e-3)
    np.testing.assert_array_equal(a.flat, b.flat)


def test_local_round_and_phase2_zero_rounds(clients):
    w = init_params((9, 4, 1), 0)
    u = client_local_round(w, clients[0], 1e-3)
    assert u.sample_count == len(clients[0].partitions["p2_support"])
    assert 0 < u.query_score <= 1
    out, hist = run_phase2(w, clients, RoundConfig(r_parallel=0))
    np.testing.assert_array_equal(out.flat, w.flat)
    assert hist == []


def test_phase2_history_records(clients):
    w = init_params((9, 4, 1), 0)
    _, hist = run_phase2(w, clients, RoundConfig(r_parallel=2, local_lr=1e-3))
    lines = history_jsonl(hist).splitlines()
    assert len(lines) == 2
    for h in hist:
        assert math.fsum(cw.norm_weight for cw in h.clients) == pytest.approx(1.0, abs=1e-12)
        assert {"s_t", "theta_t", "w_t", "w_hat_t"} <= set(h.record()["clients"][0])


def test_phase2_unknown_strategy(clients):
    with pytest.raises(ConfigError):
        run_phase2(init_params((9, 1), 0), clients, RoundConfig(), "fedsgd")


def test_iid_strategies_agree():
    iid = synth_noniid_clients(2, 600, 0.0, 5)
    w = init_params((9, 8, 1), 0)
    rc = RoundConfig(r_parallel=3, local_lr=1e-3)
    accs = {}
    for s in ("meta_align", "fedavg"):
        g, _ = run_phase2(w, iid, rc, s)
        accs[s] = np.mean([accuracy(g, *c.rows("test")) for c in iid])
    assert abs(accs["meta_align"] - accs["fedavg"]) < 2.0


# -- invariants ------------------------------------------------------------------


def update_sets(min_clients=1, max_clients=6, dim=5):
    vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=dim, max_size=dim)
    client = st.tuples(vec, st.floats(0.01, 1.0), st.integers(1, 1000))
    return st.lists(client, min_size=min_clients, max_size=max_clients)


def build(raw, dim=5):
    return [upd(f"c{i}", d, s, n) for i, (d, s, n) in enumerate(raw)]


@settings(max_examples=300, deadline=None)
@given(update_sets(), st.floats(0.01, 0.99))
def test_weights_normalized_and_floored(raw, c):
    g = model(5)
    out = aggregate_similarity_aware(g, build(raw), c=c)
    assert abs(math.fsum(cw.norm_weight for cw in out.clients) - 1.0) <= 1e-9
    for cw in out.clients:
        assert cw.weight >= cw.query_score * c
        if cw.theta <= c:
            assert cw.weight == cw.query_score * c


@settings(max_examples=200, deadline=None)
@given(update_sets(), st.floats(0.01, 100.0))
def test_cosine_scale_invariant(raw, k):
    g = model(5)
    ups = build(raw)
    scaled = [upd(u.client_id, u.delta * k, u.query_score, u.sample_count) for u in ups]
    a = aggregate_similarity_aware(g, ups)
    b = aggregate_similarity_aware(g, scaled)
    for x, y in zip(a.clients, b.clients):
        assert x.norm_weight == pytest.approx(y.norm_weight, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(update_sets(min_clients=2), st.randoms())
def test_permutation_bit_identical(raw, rnd):
    g = model(5)
    ups = build(raw)
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    a = aggregate_similarity_aware(g, ups)
    b = aggregate_similarity_aware(g, shuffled)
    assert a.new_global.flat.tobytes() == b.new_global.flat.tobytes()
    c1 = aggregate_fedavg(g, ups)
    c2 = aggregate_fedavg(g, shuffled)
    assert c1.new_global.flat.tobytes() == c2.new_global.flat.tobytes()


@settings(max_examples=100, deadline=None)
@given(update_sets(max_clients=1), st.floats(0.1, 2.0))
def test_single_client_reduction(raw, alpha):
    g = model(5)
    (u,) = build(raw)
    out = aggregate_similarity_aware(g, [u], alpha=alpha)
    np.testing.assert_allclose(out.new_global.flat, g.flat + alpha * u.delta, rtol=0, atol=1e-12)


def oracle(global_flat, updates, alpha, c):
    """Straight-line aggregation at 50 significant digits."""
    with mpmath.workdps(50):
        deltas = [[mpmath.mpf(float(v)) for v in u.delta] for u in updates]
        k, d = len(deltas), len(deltas[0])
        mean = [mpmath.fsum(dl[j] for dl in deltas) / k for j in range(d)]
        nm = mpmath.sqrt(mpmath.fsum(v * v for v in mean))
        weights = []
        for u, dl in zip(updates, deltas):
            nd = mpmath.sqrt(mpmath.fsum(v * v for v in dl))
            if nd < mpmath.mpf("1e-12") or nm < mpmath.mpf("1e-12"):
                theta = mpmath.mpf(0)
            else:
                theta = mpmath.fsum(a * b for a, b in zip(dl, mean)) / (nd * nm)
            weights.append(mpmath.mpf(u.query_score) * max(mpmath.mpf(c), theta))
        total = mpmath.fsum(weights)
        return [
            float(mpmath.mpf(float(global_flat[j]))
                  + alpha * mpmath.fsum(w / total * dl[j] for w, dl in zip(weights, deltas)))
            for j in range(d)
        ]


@settings(max_examples=200, deadline=None)
@given(update_sets(), st.floats(0.01, 0.99), st.floats(0.1, 2.0))
def test_matches_extended_precision_oracle(raw, c, alpha):
    g = model(5)
    ups = build(raw)
    ups = sorted(ups, key=lambda u: u.client_id)
    out = aggregate_similarity_aware(g, ups, alpha=alpha, c=c)
    np.testing.assert_allclose(out.new_global.flat, oracle(g.flat, ups, alpha, c), rtol=0, atol=1e-9)
