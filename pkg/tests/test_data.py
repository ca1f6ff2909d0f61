import numpy as np
import pytest

from conformal_smpc.data import (NoiseModel, SplitSpec, TrajectoryDataset, generate_gaussian,
                                 generate_uniform, load_dataset, save_dataset, split)
from conformal_smpc.exceptions import (DatasetDimensionError, DatasetError, DatasetParseError,
                                       RaggedDatasetError)


def test_gaussian_zero_covariance_gives_mean():
    ds = generate_gaussian(2, 5, 3, np.zeros((2, 2)), mean=[1.5, -2.0], seed=0)
    assert np.all(ds.samples == np.array([1.5, -2.0]))


def test_gaussian_moments():
    ds = generate_gaussian(2, 100, 1000, np.eye(2), seed=1)
    flat = ds.samples.reshape(-1, 2)
    assert np.abs(flat.mean(axis=0)).max() < 0.02
    assert np.abs(np.cov(flat.T) - np.eye(2)).max() < 0.05


def test_gaussian_deterministic():
    a = generate_gaussian(2, 10, 4, np.eye(2), seed=7)
    b = generate_gaussian(2, 10, 4, np.eye(2), seed=7)
    assert a.equals(b)


def test_gaussian_degenerate_covariance():
    ds = generate_gaussian(2, 50, 20, [[1.0, 1.0], [1.0, 1.0]], seed=3)
    assert np.allclose(ds.samples[..., 0], ds.samples[..., 1])


def test_gaussian_rejects_indefinite():
    with pytest.raises(DatasetError):
        generate_gaussian(2, 5, 3, np.diag([1.0, -1.0]), seed=0)


def test_uniform_examples():
    assert np.all(generate_uniform(3, 4, 5, 0.0, seed=0).samples == 0)
    ds = generate_uniform(2, 100, 1000, 1.0, seed=2)
    assert np.abs(ds.samples.reshape(-1, 2).var(axis=0) - 1 / 3).max() < 0.01
    ds = generate_uniform(2, 10, 10, [0.5, 2.0], seed=3)
    assert np.all(np.abs(ds.samples) <= [0.5, 2.0])
    with pytest.raises(DatasetError):
        generate_uniform(2, 3, 3, [-1.0, 1.0])


def test_noise_model_matches_generator():
    a = generate_gaussian(2, 6, 5, 0.3 * np.eye(2), seed=11)
    b = NoiseModel("gaussian", 2, 0.3 * np.eye(2)).dataset(5, 6, 11)
    assert a.equals(b)


def test_split_reference_sizes():
    ds = generate_gaussian(1, 3, 750, [[1.0]], seed=0)
    fit, cal, fi, ci = split(ds, SplitSpec(250, 500, 0))
    assert (fit.count, cal.count) == (250, 500)
    assert not set(fi) & set(ci)
    assert np.array_equal(fit.samples, ds.samples[fi])


def test_split_single_calibration_warns(caplog):
    ds = generate_gaussian(1, 2, 10, [[1.0]], seed=0)
    fit, cal, _, _ = split(ds, SplitSpec(9, 1, 0))
    assert cal.count == 1
    assert "single trajectory" in caplog.text


def test_split_deterministic_and_bounds():
    ds = generate_gaussian(1, 2, 20, [[1.0]], seed=0)
    a = split(ds, SplitSpec(5, 10, 3))
    b = split(ds, SplitSpec(5, 10, 3))
    assert np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])
    with pytest.raises(DatasetError):
        split(ds, SplitSpec(15, 10, 0))


def test_split_preserves_multiset():
    ds = generate_gaussian(1, 2, 30, [[1.0]], seed=4)
    fit, cal, fi, ci = split(ds, SplitSpec(10, 15, 9))
    perm = np.random.default_rng(9).permutation(30)[:25]
    joined = np.sort(np.concatenate([fi, ci]))
    assert np.array_equal(joined, np.sort(perm))


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_round_trip_exact(tmp_path, suffix):
    ds = generate_gaussian(3, 7, 4, np.diag([1e-8, 1.0, 1e6]), seed=5)
    path = tmp_path / f"d{suffix}"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.equals(ds)


def test_csv_header_format(tmp_path):
    ds = generate_gaussian(2, 3, 2, np.eye(2), seed=0)
    save_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "# role=disturbance M=2 T=3 n=2"
    assert len(lines) == 1 + 6
    assert lines[1].startswith("1,0,")


def test_ragged_file(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("# role=noise M=2 T=2 n=1\n1,0,0.1\n1,1,0.2\n2,0,0.3\n")
    with pytest.raises(RaggedDatasetError):
        load_dataset(p)


def test_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DatasetParseError):
        load_dataset(p)


def test_dimension_checks(tmp_path):
    ds = generate_gaussian(2, 4, 2, np.eye(2), seed=0)
    save_dataset(ds, tmp_path / "d.csv")
    with pytest.raises(DatasetDimensionError):
        load_dataset(tmp_path / "d.csv", expected_dim=3)
    with pytest.raises(DatasetDimensionError):
        load_dataset(tmp_path / "d.csv", expected_length=10)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.csv")


def test_dataset_is_read_only():
    ds = TrajectoryDataset("error", np.zeros((2, 3, 1)))
    with pytest.raises(ValueError):
        ds.samples[0, 0, 0] = 1.0
