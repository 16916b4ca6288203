import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.configspace import GridSpec, Initializer, SpinorField, build_field
from pilotwave.errors import NodeProximity
from pilotwave.evolution import PotentialSpec, SplitStepper, StepperConfig, gauge_transform
from pilotwave.guidance import (NODE_HALT, OK, NelsonParams, VectorPotentialSpec, bohm_velocity,
                                integrate_bohm, integrate_nelson, nelson_drift, static_snapshots)
from pilotwave.spin_protocol import random_su2, rotate_spin_basis

from _util import gauss, ground_state, hermite, pair_state, plane_wave


def test_real_eigenstate_has_zero_velocity():
    f = ground_state()
    assert np.all(bohm_velocity(f, np.array([[0.3], [-1.2]])) == 0)


def test_single_component_spinor_matches_scalar_velocity():
    f = pair_state(1, points=64, a=(-1.0, 0.7, 0.4), b=(1.5, 0.6, -0.3))
    s = SpinorField(f.spec, np.stack([np.stack([f.values, 0 * f.values]), np.zeros((2,) + f.spec.shape)]))
    pts = np.array([[-1.0, 1.3], [0.2, -0.4]])
    assert np.abs(bohm_velocity(s, pts) - bohm_velocity(f, pts)).max() < 1e-13


def test_spinor_velocity_is_spin_basis_independent():
    spec = GridSpec.uniform(2, 1, 64, 6.0)
    x, y = spec.particle_coords(0)[0], spec.particle_coords(1)[0]

    def blob(cx, cy, kx, ky):
        return np.exp(-(x - cx) ** 2 / 2 - (y - cy) ** 2 / 2 + 1j * (kx * x + ky * y))
    comps = {"++": blob(-1, 1, 0.5, 0), "+-": blob(1, -0.5, 0, -0.3),
             "-+": 0.5 * blob(0, 0, 0.2, 0.4), "--": 0.7j * blob(0.5, 1.5, -0.4, 0)}
    s = SpinorField.from_components(spec, comps).normalized()
    pts = np.array([[-0.8, 1.1], [0.5, -0.2], [1.0, 0.3]])
    v0 = bohm_velocity(s, pts)
    for seed in range(3):
        r = rotate_spin_basis(s, random_su2(np.random.default_rng(seed)))
        assert np.abs(bohm_velocity(r, pts) - v0).max() < 1e-10


def test_plane_wave_drift_equals_velocity():
    f = plane_wave(2.0, extent=2 * np.pi)
    p = np.array([[0.4]])
    assert np.abs(nelson_drift(f, p) - bohm_velocity(f, p)).max() < 1e-10


def test_ground_state_drift_is_minus_x():
    f = ground_state()
    x = np.array([[-1.3], [0.4], [2.0]])
    assert np.abs(nelson_drift(f, x) - (-x)).max() < 1e-5


def test_drift_next_to_node_raises():
    spec = GridSpec.uniform(1, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (hermite(1),)))
    with pytest.raises(NodeProximity):
        nelson_drift(f, [0.01])
    with pytest.raises(NodeProximity):
        bohm_velocity(f, [0.01])


def test_stationary_real_state_trajectories_do_not_move():
    f = ground_state()
    starts = np.linspace(-2, 2, 11)[:, None]
    ens = integrate_bohm(static_snapshots(f, np.linspace(0, 1, 51)), starts)
    assert np.abs(ens.positions - starts[None]).max() < 1e-10


def test_free_gaussian_trajectories_follow_spreading():
    spec = GridSpec.uniform(1, 1, 512, 20.0)
    f = build_field(spec, Initializer("product", (gauss(0.0, 1.0),)))
    starts = np.linspace(-2.5, 2.5, 21)[:, None]
    ens = integrate_bohm(SplitStepper(spec, None, StepperConfig(2e-3)).evolve(f, 500, 5), starts)
    t = ens.times[:, None, None]
    want = starts[None] * np.sqrt(1 + (t / 2) ** 2)
    nz = np.abs(want) > 0
    assert np.abs((ens.positions - want)[nz] / want[nz]).max() < 1e-3
    assert np.abs(ens.positions[:, 10]).max() < 1e-12


def test_symmetric_state_coincident_start_stays_together():
    f = pair_state(1, points=128, a=(-2.0, 0.7, 0.5), b=(1.0, 0.6, -0.4))
    x0 = np.array([[0.3, 0.3], [-1.0, -1.0]])
    V = PotentialSpec("harmonic")
    ens = integrate_bohm(SplitStepper(f.spec, V, StepperConfig(2e-3)).evolve(f, 500, 5), x0)
    assert np.abs(ens.positions[:, :, 0] - ens.positions[:, :, 1]).max() < 1e-6 * 8.0


def test_halted_trajectories_are_flagged_and_frozen():
    spec = GridSpec.uniform(1, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (hermite(1),)))
    ens = integrate_bohm(static_snapshots(f, [0.0, 0.1]), np.array([[0.0], [1.0]]))
    assert ens.flags[0, 0] == NODE_HALT and ens.flags[-1, 1] == OK
    assert ens.positions[-1, 0, 0] == 0.0


def test_zero_diffusion_nelson_matches_euler_bohm():
    spec = GridSpec.uniform(1, 1, 512, 20.0)
    f = build_field(spec, Initializer("product", (gauss(0.0, 1.0),)))
    snaps = list(SplitStepper(spec, None, StepperConfig(2e-3)).evolve(f, 250, 1))
    starts = np.array([[0.5], [1.5]])
    ens = integrate_nelson(iter(snaps), starts, NelsonParams(seed=1, diffusion_scale=0.0))
    bohm = integrate_bohm(iter(snaps), starts)
    err = np.abs(ens.positions[-1] - bohm.positions[-1]).max()
    assert err < 10 * 2e-3


def test_nelson_ground_state_variance():
    f = ground_state()
    from pilotwave.ensemble import sample_density
    starts = sample_density(f, 10_000, 3)
    ens = integrate_nelson(static_snapshots(f, np.linspace(0, 1, 101)), starts, NelsonParams(seed=4))
    # Ornstein-Uhlenbeck dx = -x dt + dW, <dW^2> = dt: stationary variance 1/2
    assert ens.positions[-1].var() == pytest.approx(0.5, abs=0.02)


def test_seeded_nelson_runs_are_bit_identical():
    f = ground_state()
    starts = np.linspace(-1, 1, 7)[:, None]
    times = np.linspace(0, 0.2, 21)
    a = integrate_nelson(static_snapshots(f, times), starts, NelsonParams(seed=9))
    b = integrate_nelson(static_snapshots(f, times), starts, NelsonParams(seed=9))
    assert np.array_equal(a.positions, b.positions)


def test_nelson_streams_do_not_depend_on_batch_size():
    f = ground_state()
    starts = np.linspace(-1, 1, 6)[:, None]
    times = np.linspace(0, 0.1, 11)
    full = integrate_nelson(static_snapshots(f, times), starts, NelsonParams(seed=2))
    head = integrate_nelson(static_snapshots(f, times), starts[:3], NelsonParams(seed=2))
    assert np.array_equal(full.positions[:, :3], head.positions)


def test_trajectory_csv_layout(tmp_path):
    f = ground_state()
    ens = integrate_bohm(static_snapshots(f, [0.0, 0.5]), np.array([[0.25], [-0.5]]))
    ens.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,traj_id,flag,x1_1"
    assert len(lines) == 5


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-0.5, 0.5), st.floats(0.0, 2 * np.pi))
def test_gauge_invariance_of_guidance(c1, c2, c0):
    spec = GridSpec.uniform(1, 1, 256, 8.0)
    f = build_field(spec, Initializer("product", (gauss(0.3, 0.9, 0.7),)))
    lam = lambda x: c0 + c1 * x[0] + c2 * np.sin(np.pi * x[0] / 8.0)
    grad = lambda xi: c1 + c2 * np.pi / 8.0 * np.cos(np.pi * xi / 8.0)
    A = VectorPotentialSpec(lambda xi: 0.1 * xi)
    g = gauge_transform(f, lam)
    pts = np.linspace(-2, 2, 9)[:, None]
    dv = bohm_velocity(g, pts, A.shifted(grad)) - bohm_velocity(f, pts, A)
    assert np.abs(dv).max() < 1e-6
