import math

import numpy as np
import pytest

from odp.autodiff import finite_difference, max_relative_error
from odp.rnnt_loss import (alignment_path_count, brute_force_loss,
                           enumerate_path_logprobs, rnnt_forward_backward,
                           rnnt_loss)


def random_log_probs(rng, t_len, u_len, vocab):
    return np.log(rng.dirichlet(np.ones(vocab + 1), size=(t_len, u_len + 1)))


def test_all_blank_path():
    rng = np.random.default_rng(0)
    lp = random_log_probs(rng, 4, 0, 3)
    nll, _ = rnnt_loss(lp, [])
    assert nll == pytest.approx(-lp[:, 0, 3].sum(), rel=1e-12)


def test_single_path_t1_u1():
    rng = np.random.default_rng(1)
    lp = random_log_probs(rng, 1, 1, 2)
    labels = [1]
    paths = enumerate_path_logprobs(lp, labels)
    assert len(paths) == 1  # emit then blank
    nll = brute_force_loss(lp, labels)
    assert nll == pytest.approx(-(lp[0, 0, 1] + lp[0, 1, 2]), rel=1e-12)


def test_path_counts():
    # complete alignments of U labels against T frames: C(T+U-1, U)
    rng = np.random.default_rng(2)
    for t_len, u_len in [(3, 2), (2, 1), (4, 3), (1, 3), (5, 0)]:
        lp = random_log_probs(rng, t_len, u_len, 3)
        labels = list(rng.integers(0, 3, size=u_len))
        n = len(enumerate_path_logprobs(lp, labels))
        assert n == alignment_path_count(t_len, u_len)
    assert alignment_path_count(3, 2) == 6


def test_uniform_closed_form():
    # verified against the enumeration oracle; per-path mass (V+1)^-(T+U)
    for t_len, u_len, vocab in [(3, 2, 4), (2, 1, 1), (4, 3, 5), (3, 0, 2)]:
        lp = np.full((t_len, u_len + 1, vocab + 1), -math.log(vocab + 1))
        labels = [i % vocab for i in range(u_len)]
        nll, _ = rnnt_loss(lp, labels)
        expected = (t_len + u_len) * math.log(vocab + 1) \
            - math.log(alignment_path_count(t_len, u_len))
        assert nll == pytest.approx(expected, abs=1e-9)
        assert nll == pytest.approx(brute_force_loss(lp, labels), abs=1e-9)


def test_matches_brute_force_randomized():
    rng = np.random.default_rng(3)
    for _ in range(300):
        t_len = int(rng.integers(1, 5))
        u_len = int(rng.integers(0, 4))
        vocab = int(rng.integers(1, 6))
        lp = random_log_probs(rng, t_len, u_len, vocab)
        labels = [int(y) for y in rng.integers(0, vocab, size=u_len)]
        nll, _ = rnnt_loss(lp, labels)
        ref = brute_force_loss(lp, labels)
        assert abs(nll - ref) / max(abs(ref), 1e-9) < 1e-9


def test_alpha_beta_agree():
    rng = np.random.default_rng(4)
    lat = rnnt_forward_backward(random_log_probs(rng, 4, 2, 3), [0, 2])
    assert lat.log_alpha[0, 0] == 0.0
    assert lat.loglik == pytest.approx(lat.log_beta[0, 0], rel=1e-12)


def test_occupancy_mass_equals_path_length():
    rng = np.random.default_rng(5)
    for _ in range(50):
        t_len = int(rng.integers(1, 5))
        u_len = int(rng.integers(0, 4))
        lp = random_log_probs(rng, t_len, u_len, 4)
        labels = [int(y) for y in rng.integers(0, 4, size=u_len)]
        _, grad = rnnt_loss(lp, labels)
        assert -grad.sum() == pytest.approx(t_len + u_len, abs=1e-8)


def test_gradient_vs_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(25):
        t_len = int(rng.integers(1, 4))
        u_len = int(rng.integers(0, 4))
        vocab = int(rng.integers(1, 5))
        lp = random_log_probs(rng, t_len, u_len, vocab)
        labels = [int(y) for y in rng.integers(0, vocab, size=u_len)]
        _, grad = rnnt_loss(lp, labels)
        fd = finite_difference(lambda a: rnnt_loss(a[0], labels)[0], [lp])
        assert max_relative_error(grad, fd[0]) <= 1e-4


def test_on_path_mass_never_hurts():
    rng = np.random.default_rng(7)
    for trial in range(20):
        t_len, u_len = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        vocab = 3
        lp = random_log_probs(rng, t_len, u_len, vocab)
        labels = [int(y) for y in rng.integers(0, vocab, size=u_len)]
        nll, _ = rnnt_loss(lp, labels)
        t = int(rng.integers(0, t_len))
        u = int(rng.integers(0, u_len + 1))
        sym = labels[u] if u < u_len and rng.integers(0, 2) else vocab  # on-path symbol
        bumped = lp.copy()
        bumped[t, u, sym] += 0.1
        nll2, _ = rnnt_loss(bumped, labels)
        assert nll2 <= nll + 1e-12


def test_input_validation():
    rng = np.random.default_rng(8)
    lp = random_log_probs(rng, 2, 1, 3)
    with pytest.raises(ValueError, match="blank"):
        rnnt_loss(lp, [3])  # blank id used as label
    with pytest.raises(ValueError):
        rnnt_loss(lp, [9])
    with pytest.raises(ValueError, match="T >= 1"):
        rnnt_loss(np.zeros((0, 1, 4)), [])
    with pytest.raises(ValueError, match="label rows"):
        rnnt_loss(lp, [0, 1, 2])
    with pytest.raises(ValueError, match="too large"):
        brute_force_loss(np.zeros((9, 5, 3)), [0, 1, 0, 1])
