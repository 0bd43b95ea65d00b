import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddspo_lab import data as D


def test_ring_k4():
    s = D.build_ring_mixture(4, 1.0, 0.1)
    np.testing.assert_allclose(s.centers, [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-12)


def test_ring_k6_center_one():
    np.testing.assert_allclose(D.build_ring_mixture(6, 2.0, 0.1).centers[1], [1, np.sqrt(3)], atol=1e-12)


@given(K=st.integers(2, 40), r=st.floats(0.1, 10))
def test_ring_centers_on_circle(K, r):
    s = D.build_ring_mixture(K, r, 0.1)
    np.testing.assert_allclose(np.linalg.norm(s.centers, axis=1), r, rtol=1e-12)


@pytest.mark.parametrize("args", [(1, 1.0, 0.1), (3, 0.0, 0.1), (3, 1.0, 0.0)])
def test_ring_rejects(args):
    with pytest.raises(ValueError):
        D.build_ring_mixture(*args)


def test_mixture_rejects_duplicate_centers():
    with pytest.raises(ValueError):
        D.MixtureSpec(np.array([[0.0, 0.0], [0.0, 0.0]]), 0.1)


def test_sample_clean_counts_and_determinism():
    s = D.build_ring_mixture()
    a, b = D.sample_clean(s, 7, 1), D.sample_clean(s, 7, 1)
    assert len(a) == 42
    np.testing.assert_array_equal(a.x0, b.x0)
    np.testing.assert_array_equal(np.bincount(a.c), [7] * 6)


def test_sample_clean_tiny_std_sits_on_centers():
    s = D.build_ring_mixture(6, 2.0, 1e-300)
    ds = D.sample_clean(s, 3, 0)
    np.testing.assert_allclose(ds.x0, s.centers[ds.c], atol=1e-250)


def test_sample_clean_class_means():
    s = D.build_ring_mixture()
    ds = D.sample_clean(s, 10_000, 2)
    for k in range(6):
        m = ds.x0[ds.c == k].mean(axis=0)
        assert np.all(np.abs(m - s.centers[k]) < 4 * s.std / np.sqrt(10_000))


def test_corrupt_identity():
    s = D.build_ring_mixture()
    ds = D.sample_clean(s, 20, 0)
    out = D.corrupt_dataset(ds, s, 0.0, 0.0, 5)
    np.testing.assert_array_equal(out.x0, ds.x0)
    np.testing.assert_array_equal(out.c, ds.c)


def test_corrupt_full_flip_two_classes():
    s = D.build_ring_mixture(2, 1.0, 0.1)
    ds = D.sample_clean(s, 50, 0)
    out = D.corrupt_dataset(ds, s, 0.0, 1.0, 1)
    np.testing.assert_array_equal(out.c, 1 - ds.c)
    np.testing.assert_array_equal(out.x0, ds.x0)


def test_corrupt_variance_inflation():
    s = D.build_ring_mixture(6, 2.0, 0.18)
    ds = D.sample_clean(s, 10_000, 0)
    out = D.corrupt_dataset(ds, s, 0.12, 0.0, 1)
    resid = out.x0 - s.centers[ds.c]
    expected = 0.18**2 + 0.12**2
    se = expected * np.sqrt(2 / len(resid))
    assert np.all(np.abs(resid.var(axis=0) - expected) < 4 * se)


@pytest.mark.parametrize("rate", [0.1, 0.5])
def test_contamination_rate_statistics(rate):
    s = D.build_ring_mixture()
    ds = D.sample_clean(s, 2000, 0)
    out = D.corrupt_dataset(ds, s, 0.0, rate, 3)
    frac = np.mean(out.c != ds.c)
    n = len(ds)
    assert abs(frac - rate) < 3 * np.sqrt(rate * (1 - rate) / n)
    # relabelled classes are spread over the other classes
    moved = (out.c - ds.c)[out.c != ds.c] % 6
    assert set(np.unique(moved)) == {1, 2, 3, 4, 5}


def test_corrupt_rejects_bad_rates():
    s = D.build_ring_mixture()
    ds = D.sample_clean(s, 2, 0)
    with pytest.raises(ValueError):
        D.corrupt_dataset(ds, s, 0.0, 1.5, 0)
    with pytest.raises(ValueError):
        D.corrupt_dataset(ds, s, -0.1, 0.0, 0)


def _pairs(n=2, offset=1, seed=0, K=6):
    s = D.build_ring_mixture(K)
    g = D.clean_sampler(s)
    return D.build_preference_pairs(g, g, K, n, offset, seed)


def test_pairs_smallest_sweep_point():
    p = _pairs(2)
    assert len(p) == 12 and p.mode == "paired"
    assert np.all(p.c != p.c_neg)


def test_pairs_modular_wrap():
    p = _pairs(1, 1)
    assert p.c_neg[p.c == 5][0] == 0
    np.testing.assert_array_equal(p.c_neg, (p.c + 1) % 6)


def test_pairs_alternating_offsets():
    p = _pairs(4, (1, -1))
    for k in range(6):
        assert sorted(p.c_neg[p.c == k]) == sorted([(k + 1) % 6, (k + 1) % 6, (k - 1) % 6, (k - 1) % 6])


def test_pairs_draw_from_the_right_classes():
    s = D.build_ring_mixture(6, 2.0, 1e-9)
    g = D.clean_sampler(s)
    p = D.build_preference_pairs(g, g, 6, 3, (1, -1), 0)
    np.testing.assert_allclose(p.x0_w, s.centers[p.c], atol=1e-6)
    np.testing.assert_allclose(p.x0_l, s.centers[p.c_neg], atol=1e-6)


@given(K=st.integers(2, 12), n=st.integers(1, 6), seed=st.integers(0, 1000))
def test_pair_count_arithmetic(K, n, seed):
    p = _pairs(n, 1, seed, K)
    assert len(p) == K * n
    assert np.all(p.c != p.c_neg)


@pytest.mark.parametrize("off", [0, 6, -6, (1, 0)])
def test_pairs_reject_bad_offsets(off):
    with pytest.raises(ValueError):
        _pairs(2, off)


def test_pairs_determinism():
    a, b = _pairs(3, (1, -1), 9), _pairs(3, (1, -1), 9)
    np.testing.assert_array_equal(a.x0_l, b.x0_l)


def test_unpaired_two_records_swap():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    p = D.build_unpaired_negatives(x, [0, 1], 1, 0, num_classes=2)
    np.testing.assert_array_equal(p.x0_l, x[::-1])
    assert p.mode == "unpaired" and len(p) == 2
    np.testing.assert_array_equal(p.c_neg, [1, 0])


@given(seed=st.integers(0, 10_000))
def test_unpaired_borrows_other_class(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 4, 30)
    c[:2] = [0, 1]
    x = rng.standard_normal((30, 2))
    p = D.build_unpaired_negatives(x, c, 1, seed, num_classes=4)
    lookup = {tuple(r): k for r, k in zip(x, c)}
    assert all(lookup[tuple(r)] != k for r, k in zip(p.x0_l, p.c))
    assert len(p) == 30


def test_unpaired_rejects_single_class():
    with pytest.raises(ValueError):
        D.build_unpaired_negatives(np.zeros((3, 2)), [2, 2, 2], 1, 0)


def test_paired_set_rejects_equal_conditions():
    with pytest.raises(ValueError):
        D.PreferencePairSet(np.zeros((1, 2)), np.zeros((1, 2)), [1], [1], "paired")


# -- CSV ---------------------------------------------------------------------------

@given(seed=st.integers(0, 10_000), n=st.integers(0, 20))
def test_pairs_csv_round_trip(tmp_path_factory, seed, n):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 6, n)
    p = D.PreferencePairSet(rng.standard_normal((n, 2)) * 10 ** rng.uniform(-8, 8), rng.standard_normal((n, 2)),
                            c, (c + 1) % 6, "paired")
    path = tmp_path_factory.mktemp("pairs") / "p.csv"
    D.save_pairs_csv(p, path)
    r = D.load_pairs_csv(path, 6)
    for f in ("x0_w", "x0_l", "c", "c_neg"):
        np.testing.assert_array_equal(getattr(r, f), getattr(p, f))
    assert r.mode == p.mode


def test_pairs_csv_header_and_empty(tmp_path):
    path = tmp_path / "p.csv"
    D.save_pairs_csv(D.PreferencePairSet(np.zeros((0, 2)), np.zeros((0, 2)), [], []), path)
    assert path.read_text() == "x0w_x,x0w_y,x0l_x,x0l_y,c,c_neg,mode\n"
    assert len(D.load_pairs_csv(path)) == 0


def test_unpaired_csv_round_trip(tmp_path):
    p = D.build_unpaired_negatives(np.array([[1.0, 2.0], [3.0, 4.0]]), [0, 1], 1, 0, 3)
    D.save_pairs_csv(p, tmp_path / "u.csv")
    assert D.load_pairs_csv(tmp_path / "u.csv", 3).mode == "unpaired"


@pytest.mark.parametrize("row,msg", [
    ("0.1,0.2,0.3,0.4,7,1,paired", "class id 7"),
    ("0.1,0.2,0.3,0.4,1,1,paired", "c == c_neg"),
    ("0.1,abc,0.3,0.4,0,1,paired", "not a number"),
    ("0.1,0.2,0.3,0.4,0,1", "expected 7 fields"),
    ("0.1,0.2,0.3,nan,0,1,paired", "non-finite"),
    ("0.1,0.2,0.3,0.4,0,1,sideways", "unknown mode"),
])
def test_pairs_csv_malformed_rows_report_line(tmp_path, row, msg):
    path = tmp_path / "bad.csv"
    path.write_text("x0w_x,x0w_y,x0l_x,x0l_y,c,c_neg,mode\n0,0,1,1,0,1,paired\n" + row + "\n")
    with pytest.raises(D.DataFormatError, match=rf":3: .*{msg}"):
        D.load_pairs_csv(path, 6)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(D.DataFormatError):
        D.load_dataset_csv(path)


def test_dataset_csv_round_trip(tmp_path):
    ds = D.sample_clean(D.build_ring_mixture(), 5, 0)
    D.save_dataset_csv(ds, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().startswith("x,y,c\n")
    r = D.load_dataset_csv(tmp_path / "d.csv", 6)
    np.testing.assert_array_equal(r.x0, ds.x0)
    np.testing.assert_array_equal(r.c, ds.c)
