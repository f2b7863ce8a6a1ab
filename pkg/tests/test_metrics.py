import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moctefuse.errors import DimensionError
from moctefuse.metrics import (aggregate, entropy, evaluate_image, mutual_information, quantize,
                               read_report, std_dev, vif, vif_scales, vifp, write_report)
from oracles import entropy_loop, mi_loop, std_two_pass, vifp_loop


def uniform_histogram_image():
    return (np.arange(256 * 16) % 256).reshape(64, 64) / 255.0


def test_quantize_rule():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5 / 255, 0.49 / 255, 1.0])), [0, 1, 0, 255])


def test_entropy_examples(rng):
    assert entropy(np.full((8, 8), 0.3)) == 0.0
    assert entropy(uniform_histogram_image()) == 8.0
    x = rng.uniform(0, 1, (64, 64))
    assert abs(entropy(x) - entropy_loop(x)) <= 1e-12


def test_std_examples(rng):
    assert std_dev(np.full((4, 4), 0.7)) == 0.0
    half = np.zeros((8, 8))
    half[:4] = 1.0
    assert std_dev(half) == 127.5
    x = rng.uniform(0, 1, (64, 64))
    assert abs(std_dev(x) - std_two_pass(x)) <= 1e-9


def test_mi_examples(rng):
    x = rng.uniform(0, 1, (64, 64))
    assert abs(mutual_information(x, x, x) - 2 * entropy(x)) <= 1e-9
    f, ir, vi = rng.uniform(0, 1, (3, 64, 64))
    assert abs(mutual_information(f, ir, vi) - (mi_loop(f, ir) + mi_loop(f, vi))) <= 1e-12
    with pytest.raises(DimensionError):
        mutual_information(x, x[:32], x)


def test_mi_independent_patterns():
    yy, xx = np.mgrid[0:64, 0:64]
    checker = ((yy // 2 + xx // 2) % 2).astype(float)
    stripes = ((xx // 4) % 2).astype(float)
    # checker is balanced inside every stripe, so the joint histogram factorises
    assert mutual_information(checker, stripes, stripes) < 0.05


def test_vif_self_fidelity(rng):
    x = rng.uniform(0, 1, (64, 64))
    assert abs(vif(x, x, x) - 1.0) <= 1e-6


def test_vif_noise_degrades(rng):
    yy, xx = np.mgrid[0:64, 0:64]
    src = 0.5 + 0.3 * np.sin(xx / 5.0) * np.cos(yy / 7.0)
    noisy = np.clip(src + rng.normal(0, 0.2, src.shape), 0, 1)
    assert 0 <= vif(noisy, src, src) < vif(src, src, src)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_vif_nonnegative(seed):
    rng = np.random.default_rng(seed)
    f, ir, vi = rng.uniform(0, 1, (3, 48, 48))
    assert vif(f, ir, vi) >= 0


def test_vifp_matches_loop_oracle(rng):
    a, b = rng.uniform(0, 255, (2, 64, 64))
    assert abs(vifp(a, b, 4) - vifp_loop(a, b, 4)) <= 1e-12


def test_vif_scale_reduction(rng):
    assert vif_scales((64, 64)) == 4
    assert vif_scales((48, 48)) == 4
    assert vif_scales((32, 32)) == 2
    x = rng.uniform(0, 1, (32, 32))
    with pytest.warns(UserWarning, match="2"):
        vif(x, x, x)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        vif(*rng.uniform(0, 1, (3, 48, 48)))


def test_metric_invariances(rng):
    x = rng.uniform(0, 1, (32, 32))
    perm = rng.permutation(x.size)
    y = x.ravel()[perm].reshape(x.shape)
    assert entropy(x) == entropy(y)
    assert std_dev(x) == pytest.approx(std_dev(y), rel=1e-13)
    f, ir, vi = rng.uniform(0, 1, (3, 32, 32))
    p = lambda a: a.ravel()[perm].reshape(a.shape)  # noqa: E731
    assert mutual_information(p(f), p(ir), p(vi)) == pytest.approx(mutual_information(f, ir, vi), abs=1e-12)


def test_contrast_stretch_raises_entropy(rng):
    low = 0.45 + 0.1 * rng.uniform(0, 1, (64, 64))
    stretched = (low - low.min()) / (low.max() - low.min())
    assert entropy(stretched) >= entropy(low)


def test_metric_ranges(rng):
    r = evaluate_image(*rng.uniform(0, 1, (3, 48, 48)))
    assert 0 <= r["en"] <= 8 and r["sd"] >= 0 and r["mi"] >= 0 and r["vif"] >= 0


def test_aggregate_examples(rng):
    one = {"en": 1.0, "sd": 2.0, "mi": 3.0, "vif": 0.5}
    rep = aggregate([one])
    assert rep.mean == one and rep.median == one and all(v == 0 for v in rep.std.values())
    two = {"en": 3.0, "sd": 4.0, "mi": 5.0, "vif": 1.5}
    assert aggregate([one, two]).mean == {"en": 2.0, "sd": 3.0, "mi": 4.0, "vif": 1.0}
    rows = [dict(zip(("en", "sd", "mi", "vif"), rng.uniform(0, 10, 4))) for _ in range(10)]
    rep = aggregate(rows)
    for m in ("en", "sd", "mi", "vif"):
        s = sorted(r[m] for r in rows)
        assert rep.median[m] == (s[4] + s[5]) / 2
    with pytest.raises(ValueError):
        aggregate([])


def test_report_round_trip(tmp_path, rng):
    rows = [evaluate_image(*rng.uniform(0, 1, (3, 48, 48))) for _ in range(3)]
    rep = aggregate(rows, ["a", "b", "c"])
    write_report(rep, tmp_path / "r.csv", tmp_path / "r.json")
    back = read_report(tmp_path / "r.csv")
    assert [i for i, _ in back.rows] == ["a", "b", "c"]
    for (_, a), (_, b) in zip(rep.rows, back.rows):
        assert a == b
    import json
    summary = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
    assert "±" in summary["metrics"]["en"]["display"]
    assert "VIFP" in summary["vif_variant"]
