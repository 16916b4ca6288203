import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.configspace import GridSpec, Initializer, Orbital, build_field, exchange
from pilotwave.evolution import PotentialSpec, SplitStepper, StepperConfig
from pilotwave.symmetry import (amplitude_exchange_residual, classify, drift_exchange_residual,
                                exchange_phase, pairwise_phase_consistency, pointwise_phase,
                                rotation_path, transport_along, velocity_exchange_residual,
                                winding_phase_table)

from _util import anyon_state, gauss, hermite, pair_state


def residuals(f):
    return (velocity_exchange_residual(f, 0, 1), drift_exchange_residual(f, 0, 1),
            amplitude_exchange_residual(f, 0, 1))


def box(lo, hi):
    return Orbital.make("box", lo=lo, hi=hi, power=2.0)


@pytest.fixture(scope="module")
def sym():
    return pair_state(1, a=(-1.5, 0.7, 0.5), b=(1.5, 0.7, -0.3))


@pytest.fixture(scope="module")
def anti():
    return pair_state(-1, a=(-1.5, 0.7, 0.5), b=(1.5, 0.7, -0.3))


def test_symmetric_residuals_vanish(sym):
    v, d, a = residuals(sym)
    assert v < 1e-8 and d < 1e-8 and a < 1e-12


def test_antisymmetric_residuals_vanish(anti):
    v, d, a = residuals(anti)
    assert v < 1e-6 and d < 1e-6 and a < 1e-12


def nonsymmetric(second):
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    t1 = Initializer("product", (hermite(0), hermite(1)))
    t2 = Initializer("product", (hermite(2), second))
    return build_field(spec, Initializer("superposition", terms=((1.0, t1), (0.5, t2))))


def test_real_nonsymmetric_state_is_caught_by_drift_and_amplitude():
    # a real wavefunction has no current, so only the osmotic part can tell
    v, d, a = residuals(nonsymmetric(hermite(0)))
    assert v == 0.0
    assert d > 0.1 and a > 0.1


def test_nonsymmetric_state_with_current_breaks_velocity_symmetry():
    moving = Orbital.make("gaussian", sigma=np.sqrt(0.5), momentum=1.0)
    v, d, a = residuals(nonsymmetric(moving))
    assert v > 0.1 and d > 0.1 and a > 0.1
    assert classify(nonsymmetric(moving)).verdict == "Inconsistent"


def test_unequal_lobes_share_velocity_but_not_drift():
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    f = build_field(spec, Initializer("disjoint-boxes", (gauss(-2.5, 0.5), gauss(2.5, 0.5)), alpha=2.0))
    v, d, a = residuals(f)
    assert v < 1e-8
    assert d > 0.1 and a > 0.1


def test_strictly_disjoint_lobes_are_degenerate():
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    for alpha in (1.0, 2.0):
        f = build_field(spec, Initializer("disjoint-boxes", (box(-3.5, -0.5), box(0.5, 3.5)), alpha=alpha))
        rep = classify(f)
        assert rep.verdict == "Degenerate"
        # rescaling a lobe leaves grad R / R unchanged on each lobe
        assert rep.drift_residual < 1e-12
    assert rep.amplitude_residual > 0.1


def test_classify_1d_pairs(sym, anti):
    b = classify(sym)
    assert b.verdict == "Boson" and abs(b.gamma) < 1e-6
    fe = classify(anti)
    assert fe.verdict == "Fermion" and abs(abs(fe.gamma) - np.pi) < 1e-6


def test_symmetrized_hermite_product_is_boson():
    spec = GridSpec.uniform(2, 1, 128, 8.0)
    f = build_field(spec, Initializer("symmetrized", (hermite(0), hermite(2)), sign=1))
    assert classify(f).verdict == "Boson"


@pytest.fixture(scope="module")
def slater():
    spec = GridSpec.uniform(3, 1, 48, 6.0)
    orbs = (gauss(-2.0, 0.7, 0.3), gauss(0.0, 0.7, -0.2), gauss(2.0, 0.7, 0.1))
    return build_field(spec, Initializer("symmetrized", orbs, sign=-1))


def test_three_particle_slater_state_is_fermion(slater):
    rep = classify(slater)
    assert rep.verdict == "Fermion"
    gam = {p["pair"]: p["gamma"] for p in rep.phases}
    assert set(gam) == {"12", "13", "23"}
    assert all(abs(abs(g) - np.pi) < 1e-6 for g in gam.values())


def test_pairwise_consistency(slater):
    r = pairwise_phase_consistency(slater)
    assert r["consistent"]
    assert r["composed_error"] < 1e-6 and r["chain_error"] < 1e-6
    assert r["composed_map_equals_direct"]
    spec = slater.spec
    orbs = (gauss(-2.0, 0.7, 0.3), gauss(0.0, 0.7, -0.2), gauss(2.0, 0.7, 0.1))
    s = build_field(spec, Initializer("symmetrized", orbs, sign=1))
    rs = pairwise_phase_consistency(s)
    assert rs["consistent"] and all(abs(g) < 1e-6 for g in rs["gammas"].values())


def test_mixed_three_particle_state_is_inconsistent():
    # symmetric in (1,2) but antisymmetric in (1,3): no single exchange phase
    spec = GridSpec.uniform(3, 1, 48, 6.0)
    orbs = (gauss(-2.0, 0.7, 0.3), gauss(0.0, 0.7, -0.2), gauss(2.0, 0.7, 0.1))
    f = build_field(spec, Initializer("product", orbs))
    v = f.values
    v = v + np.swapaxes(v, 0, 1)
    v = v - np.swapaxes(v, 0, 2)
    g = f.with_values(v).normalized()
    assert not pairwise_phase_consistency(g)["consistent"]
    assert classify(g).verdict == "Inconsistent"


# ---------------------------------------------------------------- two dimensions

START = np.array([1.5, 0.5, 0.0, 0.0])


@pytest.fixture(scope="module")
def half():
    return anyon_state(0.5, points=256)


def test_anyon_simple_exchange_phase(half):
    left = exchange_phase(half, rotation_path(half, START, half_turns=1))
    right = exchange_phase(half, rotation_path(half, START, half_turns=-1))
    assert left == pytest.approx(np.pi / 2, abs=1e-3)
    assert right == pytest.approx(-np.pi / 2, abs=1e-3)


def test_winding_table_half(half):
    t = winding_phase_table(half, START)
    want = {-2: -np.pi, -1: -np.pi / 2, 1: np.pi / 2, 2: np.pi}
    for n, g in want.items():
        assert abs(np.angle(np.exp(1j * (t["gamma"][n] - g)))) < 1e-3
    assert t["consistent"] and t["handedness_consistent"]


def test_winding_table_fermion_and_boson():
    t1 = winding_phase_table(anyon_state(1.0, points=256), START)
    assert abs(abs(t1["gamma"][1]) - np.pi) < 1e-3
    assert abs(np.angle(np.exp(1j * t1["gamma"][2]))) < 1e-3
    t0 = winding_phase_table(anyon_state(0.0, points=256), START)
    assert all(abs(g) < 1e-3 for g in t0["gamma"].values())


def test_relative_frame_verdicts():
    assert classify(anyon_state(0.0, points=256)).verdict == "Boson"
    assert classify(anyon_state(1.0, points=256)).verdict == "Fermion"
    rep = classify(anyon_state(0.5, points=256))
    assert rep.verdict.startswith("Anyon")
    assert rep.gamma == pytest.approx(np.pi / 2, abs=1e-3)


def test_phase_is_additive_under_concatenation(half):
    p1 = rotation_path(half, START, half_turns=1)
    p2 = rotation_path(half, p1.end, half_turns=1)
    whole = p1.concatenate(p2)
    assert whole.winding == 2
    assert transport_along(half, whole) == pytest.approx(
        transport_along(half, p1) + transport_along(half, p2), abs=1e-9)


def test_phase_is_independent_of_base_point(half):
    rng = np.random.default_rng(11)
    gam = []
    for _ in range(5):
        r, th = rng.uniform(0.8, 2.5), rng.uniform(0, 2 * np.pi)
        start = np.array([r * np.cos(th), r * np.sin(th), 0.0, 0.0])
        gam.append(exchange_phase(half, rotation_path(half, start, half_turns=1)))
    assert max(gam) - min(gam) < 1e-5


def test_phase_is_time_independent_under_symmetric_evolution():
    spec = GridSpec.uniform(2, 2, 24, 5.0)
    a = Orbital.make("gaussian", center=(-1.2, 0.0), sigma=0.7, momentum=(0.0, 0.8))
    b = Orbital.make("gaussian", center=(1.2, 0.0), sigma=0.7, momentum=(0.0, -0.5))
    f = build_field(spec, Initializer("symmetrized", (a, b), sign=-1))
    st_ = SplitStepper(spec, PotentialSpec("harmonic"), StepperConfig(5e-3))
    start = np.array([-1.0, 0.2, 1.0, -0.2])
    gam = []
    for g in st_.evolve(f, 40, 10):
        gam.append(exchange_phase(g, rotation_path(g, start, 0, 1, 1)))
    assert len(gam) == 5
    assert max(abs(abs(x) - np.pi) for x in gam) < 1e-5


def test_one_dimensional_phase_uses_pointwise_route(anti):
    g, spread = pointwise_phase(anti, 0, 1)
    assert abs(abs(g) - np.pi) < 1e-12 and spread < 1e-9
    rep = classify(anti)
    assert rep.phases[0]["route"] == "pointwise"


def test_report_serializes_flat(anti):
    rep = classify(anti)
    text = rep.to_text()
    assert "verdict=Fermion" in text and "tolerances.residual=" in text
    assert "convention=" in text


# ---------------------------------------------------------------- classifier invariance

@settings(max_examples=8, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0.1, 10.0), st.sampled_from([1, -1]))
def test_verdict_invariant_under_phase_scale_and_relabeling(phi, scale, sign):
    f = pair_state(sign, points=64, a=(-1.5, 0.7, 0.5), b=(1.5, 0.7, -0.3))
    want = "Boson" if sign == 1 else "Fermion"
    g = f.with_values(f.values * scale * np.exp(1j * phi))
    assert classify(g).verdict == want
    assert classify(exchange(g, 0, 1)).verdict == want
