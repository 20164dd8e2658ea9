import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dslab.difficulty import (
    Ensemble,
    build_ensemble,
    correlate,
    correlation_report,
    ema_smooth,
    gradn_score,
    sample_difficulty,
)
from dslab.distill import blobs
from dslab.toymodel import ClassSet

# a sample on the first axis; members pointing either way
X0 = np.array([1.0, 0.0])
RIGHT = np.array([[1.0, 0.0], [-1.0, 0.0]])
WRONG = -RIGHT


def test_sample_difficulty_counts():
    assert sample_difficulty((X0, 0), Ensemble([RIGHT] * 3)) == 0.0
    assert sample_difficulty((X0, 0), Ensemble([WRONG] * 3)) == 1.0
    assert sample_difficulty((X0, 0), Ensemble([RIGHT, RIGHT, WRONG, RIGHT])) == 0.25


def test_difficulty_invariant_under_duplication_and_permutation():
    rng = np.random.default_rng(0)
    members = [rng.standard_normal((3, 4)) for _ in range(5)]
    x, y = rng.standard_normal(4), 1
    base = sample_difficulty((x, y), Ensemble(members))
    assert sample_difficulty((x, y), Ensemble(members[::-1])) == base
    assert sample_difficulty((x, y), Ensemble(members * 2)) == base
    g = gradn_score((x, y), Ensemble(members))
    assert gradn_score((x, y), Ensemble(members * 3)) == pytest.approx(g, rel=1e-14)


def test_gradn_examples():
    confident = Ensemble([80.0 * RIGHT] * 2)
    assert gradn_score((X0, 0), confident) < 1e-30
    single = Ensemble([np.zeros((2, 3))])
    x = np.array([2.0, 0.0, 0.0])
    assert gradn_score((x, 1), single) == pytest.approx(math.sqrt(0.5) * 2.0, rel=1e-12)


def test_gradn_homogeneous_at_fixed_probabilities():
    # with zero weights the probabilities stay uniform, so the norm scales with |x|
    member = Ensemble([np.zeros((3, 4))])
    x = np.array([0.3, -1.0, 0.5, 2.0])
    assert gradn_score((2.5 * x, 1), member) == pytest.approx(2.5 * gradn_score((x, 1), member), rel=1e-14)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble([])
    with pytest.raises(ValueError):
        Ensemble([np.zeros((2, 3)), np.zeros((3, 3))])


def test_correlation_edge_cases():
    a = np.arange(10.0)
    assert correlate(a, a**3).spearman == pytest.approx(1.0)
    assert correlate(a, -a).spearman == pytest.approx(-1.0)
    c = correlate(a, np.ones(10))
    assert not c.defined and c.spearman is None and "constant" in c.reason
    assert not correlate(a[:2], a[:2]).defined


def test_report_on_blobs():
    data = blobs(150, 16, seed=3)
    ens = build_ensemble(data, 20, seed=0)
    rep = correlation_report(data, ens)
    assert rep.chi.min() >= 0 and rep.chi.max() <= 1 and rep.gradn.min() >= 0
    assert rep.chi_vs_gradn.spearman > 0.5 and rep.chi_vs_loss.spearman > 0.5
    assert len(rep.rows()) == 300 and rep.rows()[0][0] == 0
    again = build_ensemble(data, 20, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(ens.models, again.models))


def test_constant_scores_flagged_in_report():
    data = ClassSet(np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]), np.array([0, 0, 0]), 2)
    rep = correlation_report(data, Ensemble([RIGHT, RIGHT]))
    assert not rep.chi_vs_gradn.defined


def test_ema_examples():
    assert ema_smooth([3.0] * 5, 0.7) == [3.0] * 5
    s = [1.0, 5.0, -2.0]
    assert ema_smooth(s, 0.0) == s
    assert ema_smooth([0.0, 1.0], 0.5) == [0.0, 0.5]
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            ema_smooth(s, bad)
    with pytest.raises(ValueError):
        ema_smooth([], 0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.0, 0.999))
@settings(max_examples=100, deadline=None)
def test_ema_stays_within_running_range(series, decay):
    out = ema_smooth(series, decay)
    for t, v in enumerate(out):
        lo, hi = min(series[: t + 1]), max(series[: t + 1])
        assert lo - 1e-6 <= v <= hi + 1e-6
