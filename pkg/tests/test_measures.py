"""Distance measures against their naive recursive oracles."""

import math

import numpy as np
import pytest

from trajsim.errors import FormatError, VersionError
from trajsim.geo import SynthConfig, Trajectory, synth_generate
from trajsim.measures import (GroundTruthMatrix, MeasureKind, MeasureError, SimilarityScale,
                              build_gt_matrix, discrete_frechet, distance_to_similarity, dtw,
                              edwp, estimate_scale, load_gt_matrix, measure_fn, naive_measure,
                              save_gt_matrix)


def random_pair(rng, lo=2, hi=8):
    a = rng.normal(size=(rng.integers(lo, hi + 1), 2)) * rng.uniform(0.5, 20)
    b = rng.normal(size=(rng.integers(lo, hi + 1), 2)) * rng.uniform(0.5, 20)
    return a, b


class TestDtw:
    def test_self_distance_zero(self):
        t = synth_generate(SynthConfig(count=1, seed=0))[0]
        assert dtw(t, t) == 0.0

    def test_single_pair(self):
        assert dtw(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 5.0

    def test_unequal_lengths(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        b = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert dtw(a, b) == pytest.approx(naive_measure(MeasureKind.DTW, a, b), abs=1e-12)
        assert dtw(a, b) == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dtw(np.empty((0, 2)), np.array([[0.0, 0.0]]))


class TestFrechet:
    def test_identical_zero(self):
        t = synth_generate(SynthConfig(count=1, seed=1))[0]
        assert discrete_frechet(t, t) == 0.0

    def test_parallel_lines(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        b = np.array([[0.0, 1.0], [1.0, 1.0]])
        assert discrete_frechet(a, b) == pytest.approx(1.0)

    def test_single_pair(self):
        assert discrete_frechet(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 5.0

    def test_endpoint_lower_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a, b = random_pair(rng, 2, 12)
            d = discrete_frechet(a, b)
            assert d >= np.linalg.norm(a[0] - b[0]) - 1e-12
            assert d >= np.linalg.norm(a[-1] - b[-1]) - 1e-12


class TestEdwp:
    def test_self_cost_zero(self):
        t = synth_generate(SynthConfig(count=1, seed=3))[0]
        assert edwp(t, t) == 0.0

    def test_prefix_extension(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        b = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        assert edwp(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = random_pair(rng, 2, 10)
            assert edwp(a, b) == pytest.approx(edwp(b, a), abs=1e-9)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            edwp(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 1.0]]))


class TestOracleEquivalence:
    @pytest.mark.parametrize("kind", list(MeasureKind))
    def test_matches_naive_recursion(self, kind):
        rng = np.random.default_rng(int(kind.value.encode()[0]))
        fn = measure_fn(kind)
        for _ in range(200):
            a, b = random_pair(rng)
            assert fn(a, b) == pytest.approx(naive_measure(kind, a, b), abs=1e-9)

    def test_naive_size_cap(self):
        a = np.zeros((9, 2))
        b = np.zeros((8, 2))
        with pytest.raises(ValueError):
            naive_measure(MeasureKind.DTW, a, b)


class TestMeasureProperties:
    @pytest.mark.parametrize("kind", list(MeasureKind))
    def test_nonnegative_symmetric_zero_on_identical(self, kind):
        rng = np.random.default_rng(5)
        fn = measure_fn(kind)
        for _ in range(100):
            a, b = random_pair(rng, 2, 10)
            dab = fn(a, b)
            assert dab >= 0.0
            assert dab == pytest.approx(fn(b, a), abs=1e-9)
            assert fn(a, a) == pytest.approx(0.0, abs=1e-12)


class TestSimilarity:
    def test_zero_distance_is_one(self):
        assert distance_to_similarity(0.0, SimilarityScale(100.0)) == 1.0

    def test_scale_distance_is_inv_e(self):
        assert distance_to_similarity(50.0, SimilarityScale(50.0)) == pytest.approx(math.exp(-1))

    def test_monotone_decreasing(self):
        s = SimilarityScale(10.0)
        vals = [distance_to_similarity(d, s) for d in (0.0, 1.0, 5.0, 50.0)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            distance_to_similarity(-1.0, SimilarityScale(1.0))

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            SimilarityScale(0.0)

    def test_estimate_scale_deterministic(self):
        trajs = synth_generate(SynthConfig(count=20, seed=6))
        a = estimate_scale(trajs, MeasureKind.DTW, max_pairs=50, seed=3)
        b = estimate_scale(trajs, MeasureKind.DTW, max_pairs=50, seed=3)
        assert a.s == b.s
        assert a.s > 0


class TestGtMatrix:
    def test_identical_trajectories_give_ones(self):
        t = synth_generate(SynthConfig(count=1, seed=7))[0]
        trajs = [Trajectory(id=f"c{i}", points=t.points.copy()) for i in range(3)]
        gt = build_gt_matrix(trajs, MeasureKind.DTW, SimilarityScale(10.0))
        np.testing.assert_array_equal(gt.values, np.ones((3, 3), dtype=np.float32))

    def test_matches_serial_recompute(self):
        trajs = synth_generate(SynthConfig(count=8, seed=8))
        scale = SimilarityScale(500.0)
        gt = build_gt_matrix(trajs, MeasureKind.DISCRETE_FRECHET, scale)
        for i in range(8):
            for j in range(8):
                if i == j:
                    assert gt.values[i, j] == 1.0
                else:
                    expected = distance_to_similarity(discrete_frechet(trajs[i], trajs[j]), scale)
                    assert gt.values[i, j] == np.float32(expected)

    def test_symmetric_and_unit_diagonal(self):
        trajs = synth_generate(SynthConfig(count=10, seed=9))
        gt = build_gt_matrix(trajs, MeasureKind.DTW, SimilarityScale(1000.0))
        np.testing.assert_array_equal(gt.values, gt.values.T)
        np.testing.assert_array_equal(np.diag(gt.values), np.ones(10, dtype=np.float32))
        assert np.all(gt.values > 0) and np.all(gt.values <= 1)

    @pytest.mark.parametrize("kind", list(MeasureKind))
    def test_parallel_bit_identical_to_serial(self, kind):
        trajs = synth_generate(SynthConfig(count=12, n_min=20, n_max=24, seed=10))
        scale = SimilarityScale(800.0)
        serial = build_gt_matrix(trajs, kind, scale, workers=1)
        parallel = build_gt_matrix(trajs, kind, scale, workers=4)
        np.testing.assert_array_equal(serial.values, parallel.values)

    def test_pair_fault_carries_ids(self):
        bad = [Trajectory(id="ok", points=np.zeros((2, 2))),
               Trajectory(id="short", points=np.zeros((1, 2)))]
        with pytest.raises(MeasureError) as err:
            build_gt_matrix(bad, MeasureKind.EDWP, SimilarityScale(1.0))
        assert err.value.pair == ("ok", "short")

    def test_progress_reported(self):
        trajs = synth_generate(SynthConfig(count=5, seed=11))
        seen = []
        build_gt_matrix(trajs, MeasureKind.DTW, SimilarityScale(10.0),
                        progress=lambda done, total: seen.append((done, total)))
        assert seen[-1] == (5, 5)


class TestGtFile:
    def test_round_trip_bit_identical(self, tmp_path):
        trajs = synth_generate(SynthConfig(count=6, seed=12))
        gt = build_gt_matrix(trajs, MeasureKind.DTW, SimilarityScale(300.0))
        path = tmp_path / "gt.tsim"
        save_gt_matrix(gt, path)
        loaded = load_gt_matrix(path)
        np.testing.assert_array_equal(loaded.values, gt.values)
        save_gt_matrix(loaded, tmp_path / "gt2.tsim")
        assert (tmp_path / "gt.tsim").read_bytes() == (tmp_path / "gt2.tsim").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "gt.tsim"
        save_gt_matrix(GroundTruthMatrix(values=np.ones((2, 2), np.float32)), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_gt_matrix(path)

    def test_newer_version(self, tmp_path):
        path = tmp_path / "gt.tsim"
        save_gt_matrix(GroundTruthMatrix(values=np.ones((2, 2), np.float32)), path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(VersionError):
            load_gt_matrix(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "gt.tsim"
        save_gt_matrix(GroundTruthMatrix(values=np.ones((3, 3), np.float32)), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_gt_matrix(path)
