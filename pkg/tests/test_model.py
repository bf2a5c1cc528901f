import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mlrthresh.exceptions import FeasibilityError, ValidationError
from mlrthresh.model import (
    ModelInstance,
    NoiseModel,
    make_instance,
    read_dataset,
    sample_dataset,
    validate_assumptions,
    write_dataset,
)


def annulus_packing_bound(r_min, r_max, sep, grid=200):
    """Upper bound on points in an annulus with pairwise distance >= sep.

    Two points at radii r1, r2 need an angular gap at least
    arccos((r1^2 + r2^2 - sep^2) / (2 r1 r2)); the smallest such gap over a
    radius grid bounds how many fit around the circle.
    """
    radii = np.linspace(r_min, r_max, grid)
    r1, r2 = np.meshgrid(radii, radii)
    cos = np.clip((r1**2 + r2**2 - sep**2) / (2 * r1 * r2), -1, 1)
    return int(2 * math.pi // np.arccos(cos).min())


def test_single_component_instance():
    inst = make_instance(1, 2, 0.9, 0.95, 1.0, NoiseModel("zero"), seed=7)
    assert 0.9 <= np.linalg.norm(inst.weights[0]) <= 1.0
    assert inst.mixing.tolist() == [1.0]
    assert validate_assumptions(inst).passed


def test_two_component_instance_is_separated():
    inst = make_instance(2, 2, 0.95, 0.96, 0.3, NoiseModel("gaussian", 0.1), seed=1)
    report = validate_assumptions(inst)
    assert report.passed
    assert np.linalg.norm(inst.weights[0] - inst.weights[1]) >= 0.96


def test_overpacked_instance_is_infeasible():
    assert annulus_packing_bound(0.9, 1.0, 0.99) <= 6
    with pytest.raises(FeasibilityError):
        make_instance(50, 2, 0.9, 0.99, 0.01, NoiseModel("zero"), seed=1)


@pytest.mark.parametrize(
    "args",
    [
        (0, 2, 0.5, 0.6, 0.5),
        (2, 1, 0.5, 0.6, 0.5),
        (2, 3, 0.6, 0.5, 0.5),
        (2, 3, 0.5, 0.6, 0.6),
    ],
)
def test_make_instance_rejects_bad_arguments(args):
    with pytest.raises(ValidationError):
        make_instance(*args, NoiseModel("zero"), seed=0)


def test_make_instance_is_deterministic():
    a = make_instance(3, 5, 0.8, 0.9, 0.2, NoiseModel("uniform", 0.3), seed=11)
    b = make_instance(3, 5, 0.8, 0.9, 0.2, NoiseModel("uniform", 0.3), seed=11)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.mixing.tobytes() == b.mixing.tobytes()
    assert a.fingerprint(1) == b.fingerprint(1)


def test_validate_reports_a1_margin():
    inst = ModelInstance([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5], NoiseModel("zero"), 0.9, 0.95, 0.3)
    a1 = validate_assumptions(inst)["A1"]
    assert a1.passed
    assert a1.margin == pytest.approx(0.2)


def test_validate_reports_separation_failure():
    inst = ModelInstance([[0.95, 0.0], [0.95, 0.5]], [0.5, 0.5], NoiseModel("zero"), 0.9, 0.9, 0.3)
    sep = validate_assumptions(inst)["A2-separation"]
    assert not sep.passed
    assert sep.margin == pytest.approx(-0.4)
    with pytest.raises(ValidationError):
        validate_assumptions(inst).raise_if_failed()


@settings(max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    k=st.integers(1, 5),
    d=st.integers(2, 8),
    c=st.floats(0.05, 0.9),
    gap=st.floats(0.01, 0.09),
    share=st.floats(0.05, 1.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_constructed_instances_satisfy_assumptions(k, d, c, gap, share, seed):
    delta = c + gap
    try:
        inst = make_instance(k, d, c, delta, share / k, NoiseModel("gaussian", 0.2), seed)
    except FeasibilityError:
        return
    assert validate_assumptions(inst).passed


def test_noise_free_sample_is_exact():
    inst = ModelInstance([[1.0, 0.0]], [1.0], NoiseModel("zero"), 0.9, 0.95, 1.0)
    data = sample_dataset(inst, 3, seed=5)
    for s in data:
        assert s.y == s.x[0]
        assert s.z == 0


@pytest.fixture(scope="module")
def big_dataset():
    inst = make_instance(3, 4, 0.8, 0.9, 0.2, NoiseModel("gaussian", 0.5), seed=3)
    return inst, sample_dataset(inst, 10**5, seed=9)


def test_component_frequencies(big_dataset):
    inst, data = big_dataset
    n = len(data)
    freq = np.bincount(data.z, minlength=inst.k) / n
    se = np.sqrt(inst.mixing * (1 - inst.mixing) / n)
    assert np.all(np.abs(freq - inst.mixing) <= 3 * se)


def test_covariate_mean(big_dataset):
    _, data = big_dataset
    assert np.all(np.abs(data.X.mean(axis=0)) <= 3 / np.sqrt(len(data)))


@pytest.mark.parametrize("kind", ["gaussian", "uniform", "rademacher", "zero"])
def test_residual_is_subgaussian(kind):
    sigma = 0.0 if kind == "zero" else 0.7
    inst = make_instance(2, 3, 0.8, 0.9, 0.3, NoiseModel(kind, sigma), seed=4)
    data = sample_dataset(inst, 10**5, seed=2)
    resid = data.y - np.einsum("ij,ij->i", data.X, inst.weights[data.z])
    n = len(resid)
    assert abs(resid.mean()) <= 3 * sigma / np.sqrt(n) + 1e-12
    for t in (-1.0, -0.5, 0.5, 1.0):
        vals = np.exp(t * resid)
        emp = vals.mean()
        se = vals.std() / np.sqrt(n) / emp
        assert emp <= np.exp(sigma**2 * t**2 / 2) * (1 + 5 * se) + 1e-12


@pytest.mark.parametrize("kind", ["gaussian", "uniform", "rademacher"])
def test_noise_quadrature_matches_mgf(kind):
    noise = NoiseModel(kind, 0.8)
    nodes, weights = noise.quadrature(64)
    for t in (-1.0, 0.5, 2.0):
        assert weights @ np.exp(t * nodes) == pytest.approx(float(noise.mgf(t)), rel=1e-10)


def test_blocks_are_prefix_stable():
    inst = make_instance(2, 3, 0.8, 0.9, 0.3, NoiseModel("gaussian", 0.1), seed=0)
    small = sample_dataset(inst, 70_000, seed=1)
    large = sample_dataset(inst, 140_000, seed=1)
    np.testing.assert_array_equal(small.X, large.X[:70_000])
    np.testing.assert_array_equal(small.y, large.y[:70_000])


def test_dataset_csv_round_trip(tmp_path):
    inst = make_instance(2, 3, 0.8, 0.9, 0.3, NoiseModel("gaussian", 0.3), seed=0)
    data = sample_dataset(inst, 500, seed=42)
    path = tmp_path / "data.csv"
    write_dataset(data, path)
    first = path.read_text().splitlines()[0]
    assert first == "# mlr-dataset v1 d=3 k=2 seed=42"
    back = read_dataset(path)
    assert back.X.tobytes() == data.X.tobytes()
    assert back.y.tobytes() == data.y.tobytes()
    np.testing.assert_array_equal(back.z, data.z)
    assert back.seed == 42


def test_instance_dict_round_trip():
    inst = make_instance(2, 3, 0.8, 0.9, 0.3, NoiseModel("uniform", 0.3), seed=0)
    back = ModelInstance.from_dict(inst.to_dict())
    np.testing.assert_array_equal(back.weights, inst.weights)
    assert back.noise == inst.noise
