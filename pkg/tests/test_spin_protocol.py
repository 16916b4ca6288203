import numpy as np
import pytest

from pilotwave.configspace import GridSpec, SpinorField
from pilotwave.ensemble import sample_density
from pilotwave.errors import PilotWaveError
from pilotwave.evolution import SplitStepper, StepperConfig
from pilotwave.spin_protocol import (BoxLayout, apply_flip, box_orbitals, build_measured_state,
                                     component_dominance, distinct_sequences, effective_guidance_check,
                                     merge_same_spin_boxes, random_su2, rotate_spin_basis,
                                     spin_flip_and_merge, three_particle_consistency,
                                     verify_total_symmetry)

LINE = ((-3.5, -0.5), (0.5, 3.5))


def line_state(spins, sign=1, points=64):
    spec = GridSpec.uniform(2, 1, points, 4.0)
    layout = BoxLayout(LINE, spins, 300.0, flip_box=1)
    return build_measured_state(layout, spec, sign=sign), layout


def live(s):
    n = s.component_norms()
    return {k for k, v in n.items() if v > 0}


def test_distinct_sequences():
    assert distinct_sequences((0, 0)) == [(0, 0)]
    assert sorted(distinct_sequences((0, 0, 1))) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]


def test_component_counts():
    assert live(line_state((1, 1))[0]) == {"++"}
    assert live(line_state((1, -1))[0]) == {"+-", "-+"}
    spec = GridSpec.uniform(3, 1, 32, 8.0)
    layout = BoxLayout(((-7.0, -3.0), (-2.0, 2.0), (3.0, 7.0)), (1, 1, -1), 0.0)
    assert live(build_measured_state(layout, spec)) == {"++-", "+-+", "-++"}


def test_overlapping_orbitals_are_rejected():
    spec = GridSpec.uniform(2, 1, 64, 4.0)
    layout = BoxLayout(((-3.0, 1.0), (-1.0, 3.0)), (1, -1), 300.0)
    with pytest.raises(PilotWaveError):
        build_measured_state(layout, spec)


def test_layout_gap_validation():
    spec = GridSpec.uniform(2, 1, 16, 4.0)   # h = 0.5: a 1.0 gap is exactly two cells
    BoxLayout(LINE, (1, -1), 300.0).validate(spec)
    with pytest.raises(PilotWaveError):
        BoxLayout(((-3.5, -0.25), (0.25, 3.5)), (1, -1), 300.0).validate(spec)


def test_component_weights_sum_to_one():
    s, layout = line_state((1, -1))
    rep = component_dominance(s, sample_density(s, 500, 0), layout)
    assert sum(c.weight for c in rep.components) == pytest.approx(1.0, abs=1e-9)


def test_boxed_state_is_locally_single_component():
    s, layout = line_state((1, -1))
    pts = sample_density(s, 2000, 1)
    rep = component_dominance(s, pts, layout)
    assert rep.passed and rep.min_dominant_fraction >= 1 - 1e-8
    assert rep.used + rep.excluded == 2000 and rep.used > 1000
    # particle 1 in the minus box: only psi_{-+} is present there
    x = np.array([[2.0, -2.0]])
    local = {k: abs(v[48, 16]) for k, v in s.components.items()}
    assert local["+-"] == 0 and local["-+"] > 0
    assert component_dominance(s, x, layout).assignment_matches


def test_dominance_fails_once_the_boxes_are_gone():
    s, layout = line_state((1, -1))
    free = SplitStepper(s.spec, None, StepperConfig(4e-3), s.particles).run(s, 400)
    rep = component_dominance(free, sample_density(free, 2000, 2), layout)
    assert rep.min_dominant_fraction < 1 - 1e-8


def test_effective_guidance_matches_full_spinor():
    s, layout = line_state((1, -1))
    starts = sample_density(s, 400, 3)
    where = np.stack([layout.box_of(starts[:, k:k + 1], 0.1) for k in range(2)], axis=1)
    starts = starts[(where >= 0).all(axis=1) & (where[:, 0] != where[:, 1])][:100]
    r = effective_guidance_check(s, layout, starts, 4e-3, 0.25)
    assert r["compared"] > 50
    assert r["max_deviation"] < 1e-6


# ---------------------------------------------------------------- two dimensions

@pytest.fixture(scope="module")
def plane():
    spec = GridSpec.uniform(2, 2, 24, 4.0)
    layout = BoxLayout((((-3.5, -3.5), (-0.5, 3.5)), ((0.5, -3.5), (3.5, 3.5))), (1, -1), 300.0, flip_box=1)
    orbs = box_orbitals(layout, ((1.0, 0.0), (0.0, 1.0)))
    return spec, layout, orbs


def test_pulse_flips_the_target_box(plane):
    spec, layout, orbs = plane
    s = build_measured_state(layout, spec, orbs)
    out, rep = apply_flip(s, layout, 5e-3, 10)
    assert rep.target_label == "++"
    assert rep.fidelity >= 1 - 1e-6
    _, ctrl = apply_flip(s, layout, 5e-3, 10, enabled=False)
    assert ctrl.components_after_pulse["+-"] > 0.4 and ctrl.components_after_pulse["-+"] > 0.4


@pytest.mark.parametrize("sign,verdict", [(1, "Boson"), (-1, "Fermion")])
def test_flip_and_merge_gives_symmetric_scalar(plane, sign, verdict):
    spec, layout, orbs = plane
    s = build_measured_state(layout, spec, orbs, sign=sign)
    merged, rep = spin_flip_and_merge(s, layout, 5e-3, 2.0)
    assert rep.merge.connected
    assert rep.merge.norm_drift < 1e-9
    v = verify_total_symmetry(merged)
    assert v.verdict == verdict
    e = np.exp(1j * v.pair_phases["12"])
    assert abs(e - sign) < 1e-6


def test_merge_control_with_walls_up_stays_disconnected(plane):
    spec, layout, orbs = plane
    s = build_measured_state(BoxLayout(layout.boxes, (1, 1), 300.0), spec, orbs)
    up = BoxLayout(layout.boxes, (1, 1), 300.0)
    _, kept = merge_same_spin_boxes(s, up, 1.0, 5e-3, lower_walls=False)
    assert not kept.connected
    _, down = merge_same_spin_boxes(s, up, 2.0, 5e-3)
    assert down.connected and down.norm_drift < 1e-9


# ---------------------------------------------------------------- total symmetry

@pytest.mark.parametrize("sign,verdict", [(1, "Boson"), (-1, "Fermion")])
def test_three_particle_consistency(sign, verdict):
    r = three_particle_consistency(GridSpec.uniform(3, 1, 32, 8.0), sign=sign)
    assert r["consistent"]["verdict"] == verdict
    assert r["mismatched"]["verdict"] == "Inconsistent"
    assert r["distinguishes"]
    want = 0.0 if sign == 1 else np.pi
    assert all(abs(abs(g) - want) < 1e-6 for g in r["consistent"]["pair_phases"].values())


@pytest.mark.parametrize("sign", [1, -1])
def test_verdict_survives_spin_basis_rotation(sign):
    s, _ = line_state((1, -1), sign=sign, points=64)
    v0 = verify_total_symmetry(s).verdict
    for seed in range(3):
        r = rotate_spin_basis(s, random_su2(np.random.default_rng(seed)))
        assert verify_total_symmetry(r).verdict == v0
