import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.configspace import (ExchangePath, GridSpec, Initializer, Orbital, SpinorField,
                                   build_field, current_velocity, exchange, node_mask,
                                   osmotic_velocity, read_pwf1, unwrapped_phase_delta, write_pwf1)
from pilotwave.errors import GridMismatch, NodeProximity, NormalizationError, PilotWaveError
from pilotwave.evolution import SplitStepper, StepperConfig

from _util import anyon_state, gauss, ground_state, hermite, pair_state, periodic_k, plane_wave


def test_gaussian_product_on_256_squared_is_normalized():
    spec = GridSpec.uniform(2, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (gauss(0, 1), gauss(0, 1))))
    assert abs(f.norm() - 1.0) < 1e-12


def test_antisymmetrized_hermite_pair_is_odd():
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    f = build_field(spec, Initializer("symmetrized", (hermite(0), hermite(1)), sign=-1))
    assert np.abs(f.values + f.values.T).max() < 1e-12


def test_disjoint_box_state_has_two_separate_lobes():
    spec = GridSpec.uniform(2, 1, 256, 8.0)
    left = Orbital.make("box", lo=-6.0, hi=-2.0, power=2)
    right = Orbital.make("box", lo=2.0, hi=6.0, power=2)
    f = build_field(spec, Initializer("disjoint-boxes", (left, right), alpha=2.0, beta=0.7))
    x = spec.axis(0)
    lobe_a = np.where((x[:, None] < 0) & (x[None, :] > 0), f.values, 0)
    lobe_b = np.where((x[:, None] > 0) & (x[None, :] < 0), f.values, 0)
    assert np.allclose(lobe_a + lobe_b, f.values)
    overlap = abs(np.vdot(lobe_a, lobe_b)) * spec.cell_volume
    assert overlap < 1e-12
    ratio = np.sum(np.abs(lobe_b) ** 2) / np.sum(np.abs(lobe_a) ** 2)
    assert ratio == pytest.approx(4.0, rel=1e-12)


def test_all_zero_initializer_is_rejected():
    spec = GridSpec.uniform(2, 1, 64, 8.0)
    with pytest.raises(NormalizationError):
        build_field(spec, Initializer("symmetrized", (gauss(0, 1), gauss(0, 1)), sign=-1))


def test_initializer_outside_extent_is_rejected():
    spec = GridSpec.uniform(1, 1, 64, 4.0)
    with pytest.raises(PilotWaveError):
        build_field(spec, Initializer("product", (gauss(10.0, 1.0),)))


def test_grid_validation():
    with pytest.raises(PilotWaveError):
        GridSpec.uniform(5, 1, 16, 4.0)
    with pytest.raises(PilotWaveError):
        GridSpec.uniform(1, 4, 16, 4.0)
    with pytest.raises(PilotWaveError):
        GridSpec.uniform(1, 1, 4, 4.0)


def test_exchange_of_symmetric_product_is_identical():
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    f = build_field(spec, Initializer("product", (gauss(0, 1), gauss(0, 1))))
    assert np.abs(exchange(f, 0, 1).values - f.values).max() == 0.0


def test_exchange_of_antisymmetric_field_negates():
    f = pair_state(-1)
    assert np.abs(exchange(f, 0, 1).values + f.values).max() < 1e-15


def test_spinor_exchange_moves_plus_minus_to_minus_plus():
    spec = GridSpec.uniform(2, 1, 32, 4.0)
    x = spec.particle_coords(0)[0]
    y = spec.particle_coords(1)[0]
    block = np.exp(-(x - 1) ** 2 - 2 * (y + 0.5) ** 2) + 0j
    s = SpinorField.from_components(spec, {"+-": block})
    e = exchange(s, 0, 1)
    comps = e.components
    assert np.abs(comps["+-"]).max() == 0
    assert np.array_equal(comps["-+"], block.T)


def test_exchange_rejects_bad_indices():
    f = pair_state(1, points=32)
    with pytest.raises(GridMismatch):
        exchange(f, 0, 0)
    with pytest.raises(GridMismatch):
        exchange(f, 0, 2)


def test_plane_wave_velocity():
    # a box of length 4 pi holds k = 2 exactly
    f = plane_wave(2.0, points=256, extent=2 * np.pi)
    v = current_velocity(f, [0.3], 0)
    assert v[0] == pytest.approx(2.0, abs=1e-3)


def test_real_ground_state_has_zero_velocity():
    f = ground_state()
    assert np.all(current_velocity(f, [0.7], 0) == 0.0)


def test_free_gaussian_velocity_matches_spreading_solution():
    # x(t) = x0 sigma(t)/sigma0 with sigma(t) = sigma0 sqrt(1 + (t/2sigma0^2)^2) gives
    # v(x, t) = x a^2 t / (1 + a^2 t^2), a = 1/(2 sigma0^2); at x = t = 1, sigma0 = 1: 0.2
    spec = GridSpec.uniform(1, 1, 512, 20.0)
    f0 = build_field(spec, Initializer("product", (gauss(0, 1),)))
    f1 = SplitStepper(spec, None, StepperConfig(1e-3)).run(f0, 1000)
    a = 0.5
    want = 1.0 * a * a * 1.0 / (1 + a * a)
    assert current_velocity(f1, [1.0], 0)[0] == pytest.approx(want, abs=1e-5)


def test_osmotic_velocity_of_plane_wave_is_zero():
    f = plane_wave(periodic_k(2.0, 8.0))
    assert abs(osmotic_velocity(f, [0.1], 0)[0]) < 1e-10


def test_osmotic_velocity_of_gaussian():
    spec = GridSpec.uniform(1, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (gauss(0, 1),)))
    assert osmotic_velocity(f, [1.0], 0)[0] == pytest.approx(-0.5, abs=1e-5)


def test_velocity_on_node_raises():
    spec = GridSpec.uniform(1, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (hermite(1),)))
    assert node_mask(f)[spec.index_of(np.array([0.0]))[0]]
    with pytest.raises(NodeProximity):
        current_velocity(f, [0.0], 0)
    with pytest.raises(NodeProximity):
        osmotic_velocity(f, [0.0], 0)


def test_constant_phase_transport_is_zero():
    f = pair_state(1, points=64)
    path = ExchangePath((0, 1), np.array([[-1.0, 1.0], [0.5, 1.2], [1.0, -1.0]]))
    assert unwrapped_phase_delta(f, path) == 0.0


def test_plane_wave_transport_is_k_times_length():
    k = periodic_k(2.0, 8.0)
    f = plane_wave(k)
    path = ExchangePath((0, 0), np.array([[-2.0], [1.0]]))
    assert unwrapped_phase_delta(f, path) == pytest.approx(3.0 * k, abs=1e-9)


def test_anyon_half_turn_gives_nu_pi():
    f = anyon_state(0.5, points=256)
    th = np.linspace(0, np.pi, 257)
    pts = np.stack([2 * np.cos(th), 2 * np.sin(th), 0 * th, 0 * th], axis=1)
    path = ExchangePath((0, 1), pts)
    assert unwrapped_phase_delta(f, path) == pytest.approx(np.pi / 2, abs=1e-3)


def test_closed_loop_without_nodes_has_zero_phase():
    spec = GridSpec.uniform(1, 2, 64, 6.0)
    f = build_field(spec, Initializer("product", (gauss((0.5, -0.3), 1.0, (0.7, 0.2)),)))
    th = np.linspace(0, 2 * np.pi, 200)
    pts = np.stack([1.0 + np.cos(th), np.sin(th)], axis=1)
    assert abs(unwrapped_phase_delta(f, ExchangePath((0, 0), pts))) < 1e-9


def test_closed_loop_around_vortex_gives_winding():
    spec = GridSpec.uniform(1, 2, 128, 6.0)
    x, y = spec.particle_coords(0)
    vals = (x + 1j * y) * np.exp(-(x ** 2 + y ** 2) / 4)
    from pilotwave.configspace import Field
    f = Field(spec, vals).normalized()
    th = np.linspace(0, 2 * np.pi, 400)
    pts = np.stack([1.5 * np.cos(th), 1.5 * np.sin(th)], axis=1)
    assert unwrapped_phase_delta(f, ExchangePath((0, 0), pts)) == pytest.approx(2 * np.pi, abs=1e-3)


def test_pwf1_round_trip(tmp_path):
    f = pair_state(-1, points=32)
    write_pwf1(f, tmp_path / "f.pwf1")
    g = read_pwf1(tmp_path / "f.pwf1")
    assert g.spec == f.spec and np.array_equal(g.values, f.values) and g.time == f.time
    s = SpinorField.from_components(f.spec, {"+-": f.values, "-+": -f.values}).normalized()
    write_pwf1(s, tmp_path / "s.pwf1")
    t = read_pwf1(tmp_path / "s.pwf1")
    assert t.is_spinor and np.array_equal(t.values, s.values)


# ---------------------------------------------------------------- properties

_small = GridSpec.uniform(2, 1, 16, 4.0)
_three = GridSpec.uniform(3, 1, 8, 4.0)


@st.composite
def random_values(draw, spec):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    return rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)


@settings(max_examples=30, deadline=None)
@given(random_values(_small))
def test_exchange_is_an_involution(vals):
    from pilotwave.configspace import Field
    f = Field(_small, vals)
    assert np.array_equal(exchange(exchange(f, 0, 1), 0, 1).values, f.values)


@settings(max_examples=30, deadline=None)
@given(random_values(_three), st.sampled_from(list(itertools.combinations(range(3), 2))))
def test_exchange_preserves_norm_exactly(vals, pair):
    from pilotwave.configspace import Field
    f = Field(_three, vals)
    assert exchange(f, *pair).norm() == f.norm()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_relative_exchange_is_an_involution(seed):
    from pilotwave.configspace import Field
    spec = GridSpec.uniform(2, 2, 16, 4.0, frame="relative")
    rng = np.random.default_rng(seed)
    f = Field(spec, rng.standard_normal(spec.shape) + 0j)
    assert np.array_equal(exchange(exchange(f, 0, 1), 0, 1).values, f.values)
