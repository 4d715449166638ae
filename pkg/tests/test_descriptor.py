import itertools

import numpy as np
import pytest

import oracles
from scenediff.core import CapacityError, EmptyReconstructionError, InvalidInputError, NoiseModel
from scenediff.descriptor import (
    SyntheticShapeLibrary,
    ViewContext,
    cosine_similarity,
    generate_shape_library,
    mean_occupancy,
    query_grid,
    reconstruct_full_cloud,
    recover_center,
    shape_code_from_latent,
    synth_observe,
)


def test_shape_code_pythagorean():
    assert np.array_equal(shape_code_from_latent([[3, 4, 0], [0, 0, 0]]), [5.0, 0.0])


def test_shape_code_matches_row_norm_oracle():
    z = np.random.default_rng(0).standard_normal((256, 3))
    assert np.allclose(shape_code_from_latent(z), oracles.row_norms(z), atol=1e-12, rtol=0)


def test_shape_code_rotation_invariant():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((256, 3))
    r = oracles.random_rotation(rng)
    assert np.abs(shape_code_from_latent(z) - shape_code_from_latent(z @ r)).max() <= 1e-12


def test_shape_code_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        shape_code_from_latent([[np.nan, 0, 0]])
    with pytest.raises(InvalidInputError):
        shape_code_from_latent(np.zeros((4, 2)))


def test_cosine_examples():
    assert cosine_similarity((1, 0), (1, 0)) == 1.0
    assert cosine_similarity((1, 0), (0, 1)) == 0.0
    with pytest.raises(InvalidInputError):
        cosine_similarity((0, 0), (1, 0))


def test_cosine_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.standard_normal((2, 32))
        assert abs(cosine_similarity(a, b) - oracles.cosine(a, b)) <= 1e-12


def unit_ball(x):
    return (np.linalg.norm(x, axis=1) <= 1.0).astype(float)


def sphere_points(n=200, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_reconstruction_of_unit_ball():
    cloud = reconstruct_full_cloud(unit_ball, sphere_points())
    assert len(cloud) > 0
    assert np.all(np.linalg.norm(cloud.points, axis=1) <= 1.0)


def test_reconstruction_with_empty_field_fails():
    with pytest.raises(EmptyReconstructionError):
        reconstruct_full_cloud(lambda x: np.zeros(len(x)), sphere_points())


def test_reconstruction_of_half_space():
    box = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
    n = 24
    cloud = reconstruct_full_cloud(lambda x: (x[:, 0] > 0).astype(float), box, samples_per_axis=n)
    spacing = 3.0 / (n - 1)
    c = recover_center(cloud)
    assert c[0] > 0
    assert abs(c[1]) <= spacing and abs(c[2]) <= spacing
    # Grid-sum centroid of the kept half: mean of the positive x grid values.
    xs = np.linspace(-1.5, 1.5, n)
    assert abs(c[0] - xs[xs > 0].mean()) <= 1e-12


def test_reconstruction_threshold_validated():
    with pytest.raises(InvalidInputError):
        reconstruct_full_cloud(unit_ball, sphere_points(), v0=1.0)


def test_query_grid_covers_scaled_box():
    grid = query_grid([[0, 0, 0], [2, 2, 2]], box_scale=1.5, samples_per_axis=5)
    assert grid.shape == (125, 3)
    assert np.allclose(grid.min(axis=0), -0.5) and np.allclose(grid.max(axis=0), 2.5)


def test_mean_occupancy_of_interior_points_is_one():
    cloud = reconstruct_full_cloud(unit_ball, sphere_points())
    assert mean_occupancy(unit_ball, cloud) == 1.0


def test_recover_center_examples():
    assert np.array_equal(recover_center([[0, 0, 0], [2, 0, 0]]), [1.0, 0.0, 0.0])
    p = np.array([0.3, -0.2, 5.0])
    assert np.array_equal(recover_center(p[None, :]), p)
    with pytest.raises(InvalidInputError):
        recover_center(np.zeros((0, 3)))


def test_recover_center_matches_mean_oracle():
    pts = np.random.default_rng(3).uniform(-1, 1, size=(1000, 3))
    expected = [sum(pts[:, k].tolist()) / len(pts) for k in range(3)]
    assert np.allclose(recover_center(pts), expected, atol=1e-12, rtol=0)


def test_library_single_code_is_unit():
    lib = generate_shape_library(1, seed=0)
    assert len(lib) == 1
    assert abs(np.linalg.norm(lib.codes[0]) - 1.0) < 1e-12


def test_library_pairwise_similarity_bound():
    lib = generate_shape_library(20, k=256, max_pairwise_similarity=0.8, seed=5)
    codes = [lib.codes[s] for s in lib.shape_ids]
    for a, b in itertools.combinations(codes, 2):
        assert oracles.cosine(a, b) <= 0.8


def test_library_is_deterministic_and_roundtrips():
    a = generate_shape_library(10, seed=7)
    b = generate_shape_library(10, seed=7)
    assert a.to_json() == b.to_json()
    assert SyntheticShapeLibrary.from_json(a.to_json()).to_json() == a.to_json()


def test_library_capacity_error():
    with pytest.raises(CapacityError):
        generate_shape_library(50, k=2, max_pairwise_similarity=0.1, seed=0)


def test_zero_noise_observation_is_exact():
    lib = generate_shape_library(3, seed=1)
    noise = NoiseModel(sigma_code=0.0, sigma_center=0.0)
    m = synth_observe(lib, 2, (0.1, 0.2, 0.3), ViewContext(), noise, seed=0)
    assert np.array_equal(m.shape_code, lib.codes[2])
    assert np.array_equal(m.center, [0.1, 0.2, 0.3])
    assert m.quality == noise.q_max


def _similarity_frequencies(n_draws=10_000):
    """Share of draw pairs above 0.9 for one shape, and for two distinct shapes (default view)."""
    lib = generate_shape_library(20, seed=11)
    noise = NoiseModel()
    view = ViewContext()
    rng = np.random.default_rng(12)
    same = distinct = 0
    for i in range(n_draws):
        a, b = (int(v) for v in rng.choice(20, size=2, replace=False))
        m1 = synth_observe(lib, a, (0, 0, 0), view, noise, [i, 0])
        m2 = synth_observe(lib, a, (0, 0, 0), view, noise, [i, 1])
        m3 = synth_observe(lib, b, (0, 0, 0), view, noise, [i, 2])
        same += cosine_similarity(m1.shape_code, m2.shape_code) > 0.9
        distinct += cosine_similarity(m1.shape_code, m3.shape_code) > 0.9
    return same / n_draws, distinct / n_draws


def test_monte_carlo_similarity_separation():
    same, distinct = _similarity_frequencies()
    assert same >= 0.99
    assert distinct <= 0.01


def test_occlusion_degrades_similarity():
    lib = generate_shape_library(2, seed=3)
    noise = NoiseModel()
    mean_sim = []
    for occ in (0.0, 0.4, 0.8):
        view = ViewContext(occlusion_fraction=occ)
        sims = [cosine_similarity(synth_observe(lib, 0, (0, 0, 0), view, noise, [i, 0]).shape_code,
                                  lib.codes[0]) for i in range(200)]
        mean_sim.append(np.mean(sims))
    assert mean_sim[0] > mean_sim[1] > mean_sim[2]
    quality = [synth_observe(lib, 0, (0, 0, 0), ViewContext(occlusion_fraction=o), noise, 0).quality
               for o in (0.0, 0.4, 0.8)]
    assert quality[0] > quality[1] > quality[2]


def test_view_context_rejects_full_occlusion():
    with pytest.raises(InvalidInputError):
        ViewContext(occlusion_fraction=1.0)
