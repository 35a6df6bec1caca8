import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gratt import tensor as T
from gratt.gating import (
    DEFAULT_TAU,
    FixedNoise,
    GateHead,
    GateMode,
    GumbelNoise,
    StreamNoise,
    gate_logit,
    gumbel_from_uniform,
    gumbel_softmax,
    harden,
    sample_gates,
    sample_gumbel_pair,
    trace_rows,
)
from gratt.tensor import Tensor


def head(w, b=0.0, tau=DEFAULT_TAU):
    return GateHead(Tensor(np.asarray(w, float).reshape(-1, 1)), Tensor([b]), tau)


def soft_oracle(logit, g0, g1, tau):
    """Two-way tempered softmax over log(pi_k) + g_k at 50 digits."""
    mpmath.mp.dps = 50
    x = mpmath.mpf(logit)
    pi1 = 1 / (1 + mpmath.e ** (-x))
    a = (mpmath.log(pi1) + g1) / tau
    b = (mpmath.log(1 - pi1) + g0) / tau
    return float(mpmath.e**a / (mpmath.e**a + mpmath.e**b))


# ---------------------------------------------------------------- gate head

def test_default_temperature():
    assert DEFAULT_TAU == pytest.approx(2 / 3)


def test_non_positive_temperature_rejected():
    with pytest.raises(ValueError):
        head(np.zeros(4), tau=0.0)
    with pytest.raises(ValueError):
        gumbel_softmax(Tensor(0.0), 0.0, 0.0, -1.0)


def test_zero_head_gives_zero_logit():
    assert gate_logit(Tensor(np.random.default_rng(0).normal(size=5)), head(np.zeros(5))).item() == 0.0


def test_unit_row_picks_coordinate():
    q = np.zeros(4)
    q[2] = 3.2
    assert gate_logit(Tensor(q), head(np.eye(4)[2])).item() == 3.2


def test_logit_matches_naive_dot_product():
    rng = np.random.default_rng(1)
    w, b, q = rng.normal(size=6), 0.37, rng.normal(size=(5, 6))
    got = gate_logit(Tensor(q), head(w, b)).data
    want = [sum(q[i, c] * w[c] for c in range(6)) + b for i in range(5)]
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_logit_width_mismatch():
    with pytest.raises(ValueError):
        gate_logit(Tensor(np.zeros(3)), head(np.zeros(4)))


# ---------------------------------------------------------------- Gumbel noise

def test_gumbel_fixed_point():
    assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)


def test_uniform_clamped():
    g = gumbel_from_uniform([0.0, 1.0])
    assert np.isfinite(g).all()


def test_gumbel_moments():
    g0, g1 = sample_gumbel_pair(np.random.default_rng(2), 50_000)
    g = np.concatenate([g0, g1])
    assert abs(g.mean() - 0.5772156649) < 0.02
    assert abs((g < 0).mean() - math.exp(-1)) < 0.01


def test_keyed_noise_replays_and_separates():
    a = GumbelNoise(3, prefix=(1,)).pair((0, 2), 5)
    b = GumbelNoise(3, prefix=(1,)).pair((0, 2), 5)
    c = GumbelNoise(3, prefix=(1,)).pair((0, 1), 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_stream_noise_advances():
    s = StreamNoise(np.random.default_rng(0))
    assert not np.array_equal(s.pair((), 3)[0], s.pair((), 3)[0])


# ---------------------------------------------------------------- soft gate

def test_soft_gate_symmetry():
    assert gumbel_softmax(Tensor(0.0), 0.0, 0.0, 2 / 3).item() == 0.5


def test_soft_gate_saturates():
    assert gumbel_softmax(Tensor(60.0), 3.0, -3.0, 2 / 3).item() == pytest.approx(1.0, abs=1e-12)


def test_soft_gate_high_precision_value():
    want = soft_oracle(1.0, -0.2, 0.3, mpmath.mpf(2) / 3)
    assert gumbel_softmax(Tensor(1.0), -0.2, 0.3, 2 / 3).item() == pytest.approx(want, abs=1e-14)


@settings(max_examples=80, deadline=None)
@given(
    st.floats(-30, 30), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([2 / 3, 0.1, 1.0, 3.0])
)
def test_soft_gate_matches_direct_formula(logit, g0, g1, tau):
    got = gumbel_softmax(Tensor(logit), g0, g1, tau).item()
    assert got == pytest.approx(soft_oracle(logit, g0, g1, tau), abs=1e-12)
    if abs((logit + g1 - g0) / tau) < 30:
        assert 0.0 < got < 1.0


def test_soft_gate_gradient_with_frozen_noise():
    err = T.grad_check(lambda g: gumbel_softmax(g, -0.4, 0.9, 2 / 3), [Tensor(0.3)])
    assert err < 1e-5


# ---------------------------------------------------------------- hard gate

def test_hard_gate_examples():
    assert harden(0.0, 0.0, 2.0) == 1
    assert harden(-0.3, mode="deterministic") == 0
    assert harden(0.3, mode=GateMode.DETERMINISTIC) == 1


def test_tie_goes_to_one():
    assert harden(0.0, 0.5, 0.5)


def test_stochastic_harden_needs_noise():
    with pytest.raises(ValueError):
        harden(0.2, mode="straight-through")


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-6, 6), st.floats(-6, 6))
def test_hard_bit_is_argmax_and_soft_side_agrees(logit, g0, g1):
    x = mpmath.mpf(logit)
    pi1 = 1 / (1 + mpmath.e ** (-x))
    s1, s0 = mpmath.log(pi1) + g1, mpmath.log(1 - pi1) + g0
    if abs(s1 - s0) < 1e-9:
        return
    bit = bool(harden(logit, g0, g1))
    assert bit == (s1 > s0)
    # every temperature places the soft value on the side of the hard bit
    for tau in (2 / 3, 0.1, 0.01):
        assert (gumbel_softmax(Tensor(logit), g0, g1, tau).item() > 0.5) == bit


def test_soft_approaches_hard_as_temperature_drops():
    rng = np.random.default_rng(4)
    for _ in range(50):
        logit, g0, g1 = rng.normal(), *rng.gumbel(size=2)
        bit = float(harden(logit, g0, g1))
        dist = [abs(gumbel_softmax(Tensor(logit), g0, g1, t).item() - bit) for t in (2 / 3, 0.1, 0.01, 0.001)]
        assert all(a >= b for a, b in zip(dist, dist[1:]))


def test_empirical_rate_at_logit_1_5():
    n = 100_000
    g0, g1 = sample_gumbel_pair(np.random.default_rng(5), n)
    p = 1 / (1 + math.exp(-1.5))
    rate = harden(np.full(n, 1.5), g0, g1).mean()
    assert abs(rate - p) < 3 * math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------- samples and traces

def test_deterministic_sampling_draws_no_noise():
    class Boom:
        def pair(self, key, n):
            raise AssertionError("noise drawn")

    s = sample_gates(Tensor([0.4, -1.0]), 2 / 3, "deterministic", Boom())
    assert s.g0 is None and s.hard.tolist() == [True, False] and s.active == 1


def test_straight_through_sample_is_replayable():
    a = sample_gates(Tensor([0.1, -0.2, 0.3]), 2 / 3, "straight-through", GumbelNoise(1), (0, 0))
    b = sample_gates(Tensor([0.1, -0.2, 0.3]), 2 / 3, "straight-through", GumbelNoise(1), (0, 0))
    assert np.array_equal(a.hard, b.hard) and np.array_equal(a.soft, b.soft)


def test_straight_through_gradient_is_soft_gradient():
    g0, g1 = np.array([0.2, -0.5]), np.array([-0.1, 0.7])
    logits = Tensor([0.4, -0.3], requires_grad=True)
    with T.Tape() as tape:
        s = sample_gates(logits, 0.5, "straight-through", FixedNoise(g0, g1))
        cur, prev = Tensor([[2.0], [1.0]]), Tensor([[0.0], [4.0]])
        loss = T.total(T.select_rows(cur, prev, s.hard, s.soft_tensor))
    tape.backward(loss)
    soft = s.soft
    dsoft = soft * (1 - soft) / 0.5
    np.testing.assert_allclose(logits.grad, dsoft * np.array([2.0, -3.0]), rtol=1e-12)


def test_trace_rows_are_json():
    s = sample_gates(Tensor([0.5, -0.5]), 2 / 3, "deterministic")
    rows = trace_rows(3, 1, s)
    assert [r["hard"] for r in rows] == [1, 0]
    assert set(rows[0]) == {"frame", "layer", "query", "logit", "soft", "hard"}
    json.dumps(rows, allow_nan=False)
    s.logit[0] = np.nan
    assert trace_rows(0, 0, s)[0]["logit"] is None
