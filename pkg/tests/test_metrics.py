import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from msnet import imageio
from msnet import metrics as mt

FIXTURES = oracles.fixtures_8x8()
unit_maps = arrays(np.float64, (6, 6), elements=st.floats(0, 1))
binary_maps = arrays(np.int64, (6, 6), elements=st.integers(0, 1))


class TestBinarize:
    def test_levels(self):
        assert mt.binarize(np.full((2, 2), 0.6)).all()
        assert not mt.binarize(np.full((2, 2), 0.4)).any()
        assert mt.binarize(np.array([[0.5, 0.49], [0.51, 0.0]])).tolist() == [[1, 0], [1, 0]]


class TestDiceIoU:
    def test_identical(self):
        m = np.zeros((4, 4), int)
        m[1:3, 1:3] = 1
        assert mt.dice(m, m) == 1.0 and mt.iou(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), int), np.zeros((4, 4), int)
        a[0, :2] = 1
        b[3, :2] = 1
        assert mt.dice(a, b) == 0.0 and mt.iou(a, b) == 0.0

    def test_half_overlap(self):
        a, b = np.zeros((4, 4), int), np.zeros((4, 4), int)
        a[0, :] = 1
        b[0, :2] = 1
        b[1, :2] = 1
        assert mt.dice(a, b) == 0.5 and mt.iou(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_both_empty(self):
        z = np.zeros((4, 4), int)
        assert mt.dice(z, z) == 1.0 and mt.iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mt.dice(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_counting_oracle_500_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p = rng.integers(0, 2, (4, 4))
            g = rng.integers(0, 2, (4, 4))
            d, i = oracles.count_dice_iou(p.tolist(), g.tolist())
            assert mt.dice(p, g) == d and mt.iou(p, g) == i

    @given(binary_maps, binary_maps)
    def test_dice_at_least_iou(self, p, g):
        d, i = mt.dice(p, g), mt.iou(p, g)
        assert d >= i
        assert (d == i) == (i in (0.0, 1.0))


class TestMAE:
    def test_values(self):
        g = np.zeros((4, 4))
        g[:2] = 1
        assert mt.mae(g, g) == 0.0
        assert mt.mae(1 - g, g) == 1.0
        assert mt.mae(np.full((4, 4), 0.25), np.zeros((4, 4))) == 0.25

    @given(unit_maps, binary_maps)
    def test_complement(self, p, g):
        assert abs(mt.mae(p, g) + mt.mae(1 - p, g) - 1.0) < 1e-12


class TestNearestForeground:
    @pytest.mark.parametrize("k", [k for k, (_, g) in enumerate(FIXTURES) if np.any(g)])
    def test_matches_bruteforce(self, k):
        gt = np.array(FIXTURES[k][1], bool)
        dist, idx = mt.nearest_foreground(gt)
        ref = oracles.nearest_fg_bruteforce(gt.astype(int).tolist())
        for (r, c), (d, (fr, fc)) in ref.items():
            assert dist[r, c] == pytest.approx(d, abs=1e-12)
            assert idx[r, c] == fr * 8 + fc

    def test_large_random_masks(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            gt = rng.uniform(size=(12, 9)) < 0.08
            gt[0, 0] = True
            dist, idx = mt.nearest_foreground(gt)
            ref = oracles.nearest_fg_bruteforce(gt.astype(int).tolist())
            for (r, c), (d, (fr, fc)) in ref.items():
                assert idx[r, c] == fr * 9 + fc


class TestReferenceTranscriptions:
    def test_gaussian_kernel(self):
        ref = np.array(oracles.gaussian(7, 5.0))
        assert np.allclose(mt.gaussian_kernel(7, 5.0), ref, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("k", range(len(FIXTURES)))
    def test_wfm(self, k):
        p, g = FIXTURES[k]
        assert abs(mt.weighted_fmeasure(np.array(p), np.array(g)) - oracles.wfm(p, g)) <= 1e-6

    @pytest.mark.parametrize("k", range(len(FIXTURES)))
    def test_s_measure(self, k):
        p, g = FIXTURES[k]
        assert abs(mt.s_measure(np.array(p), np.array(g)) - oracles.s_measure(p, g)) <= 1e-6

    @pytest.mark.parametrize("k", range(len(FIXTURES)))
    def test_e_measure(self, k):
        p, g = FIXTURES[k]
        assert abs(mt.e_measure(np.array(p), np.array(g)) - oracles.e_measure(p, g)) <= 1e-6

    def test_fixtures_are_not_trivial(self):
        values = [mt.weighted_fmeasure(np.array(p), np.array(g)) for p, g in FIXTURES]
        assert len(FIXTURES) == 20
        assert len({round(v, 6) for v in values}) > 10


class TestPerfectAndDegenerate:
    @pytest.mark.parametrize("seed", range(5))
    def test_identical_masks(self, seed):
        g = (np.random.default_rng(seed).uniform(size=(16, 16)) < 0.3).astype(float)
        m = mt.image_metrics(g, g)
        for name in ("mdice", "miou", "wfm", "s_measure", "e_measure"):
            assert abs(m[name] - 1.0) <= 1e-9, name
        assert m["mae"] == 0.0

    def test_inverse_prediction(self):
        # the object keeps 3 px from the border, so the zero-padded 7x7 smoothing sees only errors
        g = np.zeros((12, 12))
        g[4:8, 3:9] = 1
        assert mt.weighted_fmeasure(1 - g, g) == pytest.approx(0.0, abs=1e-12)
        assert mt.mae(1 - g, g) == 1.0

    def test_inverse_prediction_near_border(self):
        # zero padding dilutes the smoothed error next to the border, as in the reference algorithm
        g = np.zeros((8, 8))
        g[0:3, 0:3] = 1
        p = (1 - g).tolist()
        assert 0 < mt.weighted_fmeasure(1 - g, g) == pytest.approx(oracles.wfm(p, g.tolist()), abs=1e-12)

    def test_full_gt_empty_pred(self):
        g, p = np.ones((8, 8)), np.zeros((8, 8))
        # full ground truth: S-measure is the mean prediction, E-measure scores the foreground map
        assert mt.s_measure(p, g) == 0.0
        assert mt.e_measure(p, g) == 1.0  # threshold 0 turns every pixel on
        assert mt.e_measure_at(p >= 0.5, g.astype(bool)) == 0.0

    def test_empty_gt_conventions(self):
        z = np.zeros((8, 8))
        assert mt.weighted_fmeasure(z, z) == 1.0
        assert mt.weighted_fmeasure(np.full((8, 8), 0.1), z) == 0.0
        assert mt.s_measure(np.full((8, 8), 0.25), z) == 0.75


@settings(max_examples=25, deadline=None)
@given(unit_maps, binary_maps)
def test_flip_invariance(p, g):
    # S-measure is excluded: its quadrant split follows a rounded 1-based centroid,
    # which lands one column off after mirroring
    a = mt.image_metrics(p, g)
    b = mt.image_metrics(p[:, ::-1], g[:, ::-1])
    for name in ("mdice", "miou", "wfm", "e_measure", "mae"):
        assert abs(a[name] - b[name]) < 1e-9, name


def test_s_measure_split_is_not_mirror_symmetric():
    g = np.zeros((6, 6), int)
    g[0, 1:] = 1
    p = np.zeros((6, 6))
    p[0, 2:] = 1.0
    a, b = mt.s_measure(p, g), mt.s_measure(p[:, ::-1], g[:, ::-1])
    assert a != pytest.approx(b, abs=1e-9)
    assert a == pytest.approx(oracles.s_measure(p.tolist(), g.tolist()), abs=1e-12)
    assert b == pytest.approx(oracles.s_measure(p[:, ::-1].tolist(), g[:, ::-1].tolist()), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(unit_maps, binary_maps)
def test_range(p, g):
    for name, v in mt.image_metrics(p, g).items():
        assert -1e-12 <= v <= 1 + 1e-12, name


def test_e_measure_monotone_relabel():
    # shifting each 8-bit level up by half a step keeps every binarization at the k/255 thresholds
    rng = np.random.default_rng(1)
    g = (rng.uniform(size=(8, 8)) < 0.4).astype(int)
    q = rng.integers(0, 256, (8, 8))
    shifted = np.where(q < 255, (q + 0.5) / 255, 1.0)
    assert mt.e_measure(q / 255, g) == mt.e_measure(shifted, g)


class TestReport:
    def _pairs(self, n=3):
        rng = np.random.default_rng(2)
        out = []
        for i in range(n):
            g = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
            out.append((f"img{i}", rng.uniform(0, 1, (8, 8)), g))
        return out

    def test_means_and_csv(self, tmp_path):
        pairs = self._pairs()
        rep = mt.evaluate_pairs(pairs)
        assert rep.count == 3
        for name in mt.METRIC_NAMES:
            per = [mt.image_metrics(p, g)[name] for _, p, g in pairs]
            assert abs(rep.means[name] - np.mean(per)) < 1e-12
        rep.write(tmp_path, "r")
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert len(rows) == 4 and rows[-1]["id"] == "mean"
        for name in mt.METRIC_NAMES:
            assert abs(float(rows[-1][name]) - np.mean([float(r[name]) for r in rows[:-1]])) < 1e-9
        table = (tmp_path / "r.txt").read_text()
        assert all(h in table for h in mt.TABLE_HEADERS)

    def test_evaluate_dataset(self, tmp_path):
        pairs = self._pairs()
        (tmp_path / "pred").mkdir()
        (tmp_path / "gt").mkdir()
        for name, p, g in pairs:
            imageio.write_gray(tmp_path / "pred" / f"{name}_prob.pgm", p[None])
            imageio.write_mask(tmp_path / "gt" / f"{name}.pgm", g[None])
            imageio.write_mask(tmp_path / "pred" / f"{name}_mask.pgm", g[None])
        rep = mt.evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
        assert rep.ids == ["img0", "img1", "img2"]
        for (name, p, g), row in zip(pairs, rep.per_image):
            q = np.round(p * 255) / 255
            assert row == pytest.approx(mt.image_metrics(q, g))

    def test_identical_directory(self, tmp_path):
        for name, _, g in self._pairs():
            imageio.write_mask(tmp_path / f"{name}.pgm", g[None])
        means = mt.evaluate_dataset(tmp_path, tmp_path).means
        assert all(abs(means[k] - 1.0) < 1e-9 for k in mt.METRIC_NAMES if k != "mae")
        assert means["mae"] == 0.0

    def test_no_overlap(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        imageio.write_mask(tmp_path / "a" / "x.pgm", np.zeros((1, 4, 4)))
        imageio.write_mask(tmp_path / "b" / "y.pgm", np.zeros((1, 4, 4)))
        with pytest.raises(FileNotFoundError, match="no matching"):
            mt.evaluate_dataset(tmp_path / "a", tmp_path / "b")

    def test_missing_and_mismatched_named(self, tmp_path):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        for n in ("a", "b"):
            imageio.write_mask(tmp_path / "g" / f"{n}.pgm", np.zeros((1, 4, 4)))
        imageio.write_mask(tmp_path / "p" / "a.pgm", np.zeros((1, 4, 4)))
        with pytest.raises(FileNotFoundError, match="b.pgm"):
            mt.evaluate_dataset(tmp_path / "p", tmp_path / "g")
        imageio.write_mask(tmp_path / "p" / "b.pgm", np.zeros((1, 4, 5)))
        with pytest.raises(ValueError, match="^b: "):
            mt.evaluate_dataset(tmp_path / "p", tmp_path / "g")
