import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wfnet.data import Dataset, synth_dataset
from wfnet.metrics import (
    ClassMetrics,
    Curve,
    MetricsReport,
    accuracy,
    activation_distance,
    deletion_curve,
    evaluate,
    forget_accuracy,
    insertion_curve,
    js_divergence,
    mean_js,
    other_class_curve,
    other_rows,
    probs,
    relevance_order,
    retain_accuracy,
    zrf,
)
from wfnet.models import SmallCNN
from wfnet.wf import wf_wrap

mpmath.mp.dps = 50


def js_oracle(p, q):
    """Direct summation in 50-digit arithmetic."""
    total = mpmath.mpf(0)
    for a, b in zip(p, q):
        a, b = mpmath.mpf(float(a)), mpmath.mpf(float(b))
        m = (a + b) / 2
        if a > 0:
            total += a * mpmath.log(a / m, 2) / 2
        if b > 0:
            total += b * mpmath.log(b / m, 2) / 2
    return float(total)


def random_simplex(rng, n, k):
    x = rng.exponential(size=(n, k)) ** rng.uniform(0.2, 4)
    # sprinkle exact zeros
    x[rng.uniform(size=x.shape) < 0.1] = 0.0
    x[x.sum(1) == 0, 0] = 1.0
    return x / x.sum(1, keepdims=True)


# ---------------------------------------------------------------- JS divergence


def test_js_matches_oracle_on_1000_pairs():
    rng = np.random.default_rng(0)
    p = random_simplex(rng, 1000, 5)
    q = random_simplex(rng, 1000, 5)
    got = js_divergence(p, q)
    want = np.array([js_oracle(a, b) for a, b in zip(p, q)])
    assert np.max(np.abs(got - want)) < 1e-10


def test_js_fixed_values():
    assert js_divergence([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert js_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(js_oracle([0.5, 0.5], [1, 0]), abs=1e-15)
    # closed form 3/2 - (3/4) log2 3
    assert js_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(1.5 - 0.75 * math.log2(3), abs=1e-15)


def test_js_rejects_unnormalized():
    with pytest.raises(ValueError):
        js_divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        js_divergence([1.5, -0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        js_divergence([1.0], [0.5, 0.5])


prob_rows = arrays(np.float64, st.integers(2, 8), elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3)


@settings(max_examples=200, deadline=None)
@given(prob_rows, st.data())
def test_js_properties(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(0, 1)).filter(lambda x: x.sum() > 1e-3))
    p, q = a / a.sum(), b / b.sum()
    d = js_divergence(p, q)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(js_divergence(q, p), abs=1e-15)
    assert js_divergence(p, p) == 0.0
    if not np.allclose(p, q, atol=1e-6):
        assert d > 0


# ---------------------------------------------------------------- model-level metrics


class Fixed:
    """Stand-in model whose logits are a fixed function of the image."""

    n_classes = 10

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x, rows=None):
        from wfnet.autodiff import Tensor

        return Tensor(self.fn(x.data))


def flat_images(n):
    return Dataset(np.zeros((n, 1, 4, 4)), np.zeros(n, dtype=int), "test", 10)


def test_activation_distance_closed_form():
    uniform = Fixed(lambda x: np.zeros((len(x), 10)))
    onehot = Fixed(lambda x: np.tile(np.r_[1000.0, np.zeros(9)], (len(x), 1)))
    d = activation_distance(uniform, onehot, flat_images(3), 0)
    assert d == pytest.approx(math.sqrt(0.9**2 + 9 * 0.1**2), abs=1e-12)
    assert d == pytest.approx(0.9487, abs=1e-4)
    assert activation_distance(uniform, uniform, flat_images(3), 0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_activation_distance_bounded(seed):
    rng = np.random.default_rng(seed)
    a = Fixed(lambda x: rng.normal(0, 30, (len(x), 10)))
    b = Fixed(lambda x: rng.normal(0, 30, (len(x), 10)))
    assert 0 <= activation_distance(a, b, flat_images(4), 0) <= math.sqrt(2)


def test_activation_distance_needs_oracle():
    with pytest.raises(ValueError, match="oracle"):
        activation_distance(Fixed(lambda x: np.zeros((len(x), 10))), None, flat_images(2), 0)


def test_zrf_values():
    m = Fixed(lambda x: np.zeros((len(x), 10)) + np.arange(10))
    assert zrf(m, m, flat_images(5), 0) == 1.0
    a = Fixed(lambda x: np.tile(np.r_[1e4, np.zeros(9)], (len(x), 1)))
    b = Fixed(lambda x: np.tile(np.r_[0.0, 1e4, np.zeros(8)], (len(x), 1)))
    assert zrf(a, b, flat_images(5), 0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        zrf(m, m, flat_images(0), 0)


@pytest.fixture(scope="module")
def small():
    d = synth_dataset(5, per_class=(2, 2, 20), seed=3)
    return SmallCNN(5, seed=4), d["test"]


def test_accuracy_requires_selector_for_wf(small):
    base, test = small
    wf = wf_wrap(base)
    with pytest.raises(ValueError, match="selector"):
        accuracy(wf, test)
    wf.masking_enabled = False
    assert accuracy(wf, test) == accuracy(base, test)


def test_forget_and_retain_partition_test_set(small):
    base, test = small
    wf = wf_wrap(base)
    for c in range(5):
        f, r = forget_accuracy(wf, test, c), retain_accuracy(wf, test, c)
        total = (f * 20 + r * 80) / 100
        assert total == pytest.approx(accuracy(wf, test, c), abs=1e-12)


def test_zrf_in_unit_interval_for_real_models(small):
    base, test = small
    wf = wf_wrap(base)
    v = zrf(wf, SmallCNN(5, seed=99), test.of_class(1), 1)
    assert 0 <= v <= 1
    assert zrf(wf, wf, test.of_class(1), 1) == 1.0
    assert mean_js(wf, wf, test, 2) == 0.0


# ---------------------------------------------------------------- insertion / deletion


def gated(base, seed=0):
    wf = wf_wrap(base)
    rng = np.random.default_rng(seed)
    for a in wf.alphas():
        a.raw.data[:] = np.round(rng.uniform(-3, 3, a.raw.shape), 1)
    return wf


def test_relevance_order_matches_sort_oracle(small):
    wf = gated(small[0])
    for c in range(5):
        pooled, index = [], []
        for li, (_, layer) in enumerate(wf.layers):
            for gi, g in enumerate(layer.gates):
                pooled.append(g.mask(c))
                index += [(li, gi, k) for k in range(g.k)]
        flat = np.concatenate(pooled)
        want = [index[i] for i in np.argsort(flat, kind="stable")]
        assert relevance_order(wf, c) == want


def test_curve_shape_and_endpoints(small):
    base, test = small
    wf = gated(base)
    snapshot = wf.get_alpha_state()
    ins = insertion_curve(wf, base, test, 2)
    dele = deletion_curve(wf, base, test, 2)
    assert len(ins.fractions) == len(dele.fractions) == 21
    np.testing.assert_allclose(ins.fractions, np.linspace(0, 1, 21), atol=1e-15)
    # full reactivation and zero deletion both leave every row-c gate at +3
    assert ins.values[-1] == pytest.approx(dele.values[0], abs=1e-12)
    # the sweep works on a copy
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, wf.get_alpha_state()))


def test_insertion_start_reflects_untrained_state(small):
    base, test = small
    wf = wf_wrap(base)
    forget = test.of_class(1)
    ref = probs(base, forget.images)[:, 1].mean()
    got = probs(wf, forget.images, 1)[:, 1].mean() / ref
    assert insertion_curve(wf, base, test, 1).values[0] == pytest.approx(got, abs=1e-12)


def test_auc_is_trapezoid():
    c = Curve(np.array([0.0, 0.5, 1.0]), np.array([0.0, 1.0, 1.0]))
    assert c.auc == pytest.approx(0.75)
    assert c.to_csv().splitlines()[0] == "fraction,normalized_confidence"
    assert len(c.to_csv().splitlines()) == 4


def test_other_class_curve_row_locality(small):
    base, test = small
    wf = gated(base)
    curve = other_class_curve(wf, base, test, 0, step_fraction=0.25)
    assert len(curve.values) == 5
    # other-class images never pass through row 0, so the sweep cannot move them
    assert np.all(curve.values == curve.values[0])
    ins = other_class_curve(wf, base, test, 0, step_fraction=0.25, mode="insertion")
    assert np.all(ins.values == ins.values[0])
    # row 0 manipulation never changes predictions under other selectors
    before = probs(wf, test.images, 3)
    insertion_curve(wf, base, test, 0, step_fraction=0.25)
    assert np.array_equal(before, probs(wf, test.images, 3))


def test_other_rows_avoid_manipulated_and_own_class():
    labels = np.array([0, 1, 2, 3, 4, 1, 2])
    for c in range(5):
        rows = other_rows(labels, c, 5)
        assert np.all(rows != c) and np.all(rows != labels)
        assert np.all((rows >= 0) & (rows < 5))


def test_deletion_starts_from_non_untrained_model(small):
    base, test = small
    wf = gated(base)
    fresh = wf_wrap(base)
    # other rows of the untrained model do not leak into the sweep
    a = other_class_curve(wf, base, test, 1, step_fraction=0.5)
    b = other_class_curve(fresh, base, test, 1, step_fraction=0.5)
    np.testing.assert_array_equal(a.values, b.values)
    # the same gates everywhere keep other-class confidence near the baseline
    assert np.all(np.abs(a.values - 1.0) < 0.5)


# ---------------------------------------------------------------- report


def test_report_round_trip_and_oracle_columns(small):
    base, test = small
    wf = gated(base)
    rnd = SmallCNN(5, seed=77)
    rep = evaluate(wf, base, test, rnd, classes=[0, 1], step_fraction=0.5)
    d = rep.to_dict()
    assert set(d["per_class"]) == {"0", "1"}
    assert "activation_distance" not in d["per_class"]["0"]
    assert "activation_distance" not in rep.table()
    assert MetricsReport.from_dict(json.loads(rep.to_json())).to_json() == rep.to_json()
    rep2 = evaluate(wf, base, test, rnd, classes=[0], oracles={0: SmallCNN(5, seed=5)}, step_fraction=0.5)
    m = rep2.per_class[0]
    assert m.activation_distance is not None and m.js_divergence_original is not None
    assert "js_divergence" in rep2.table()
    assert 0 <= m.acc_forget <= 1 and 0 <= m.zrf <= 1


def test_report_averages():
    rep = MetricsReport("a", "d", {}, 1.0)
    rep.per_class[0] = ClassMetrics(1.0, 0.0, 0.5, 0.2, 0.8, 0.1)
    rep.per_class[1] = ClassMetrics(0.5, 0.2, 0.7, 0.4, 0.6, 0.3)
    avg = rep.averages()
    assert avg["acc_retain"] == 0.75 and avg["zrf"] == pytest.approx(0.6)
    assert "activation_distance" not in avg
