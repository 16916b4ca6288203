"""Spin-resolved box measurements and total (anti)symmetry of spinor wavefunctions.

Each particle starts confined to its own box with a known spin value.  The
protocol flips the spin in one box with a localised field pulse so that every
particle carries the same spin, then lowers the wall between the boxes and lets
the now single-component wavefunction spread into one connected region.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .configspace import (NODE_EPS, Field, GridSpec, Orbital, ParticleSpec, SpinorField,
                          default_particles, exchange, interpolate, permutation_parity,
                          wrap_phase)
from .errors import GridMismatch, NodeProximity, PilotWaveError
from .evolution import MagneticSpec, PotentialSpec, SplitStepper, StepperConfig, plateau
from .guidance import OK, BohmIntegrator


def _spin_index(s) -> int:
    if s in (1, "+", 0.5):
        return 0
    if s in (-1, "-", -0.5):
        return 1
    raise PilotWaveError(f"spin value {s!r} is neither + nor -")


@dataclass(frozen=True)
class BoxLayout:
    """Boxes in single-particle space, the spin measured in each, and wall settings.

    ``boxes`` holds ``(lo, hi)`` corner tuples.  ``flip_box`` names the box whose
    spin the pulse reverses; ``merge_time`` is when walls between equal-spin
    boxes come down.
    """
    boxes: tuple
    spins: tuple
    wall_height: float
    flip_box: int | None = None
    merge_time: float | None = None

    def __post_init__(self):
        if len(self.boxes) != len(self.spins):
            raise PilotWaveError("one spin value per box")
        if len(self.boxes) == 0:
            raise PilotWaveError("no boxes given")

    @property
    def spin_indices(self) -> tuple[int, ...]:
        return tuple(_spin_index(s) for s in self.spins)

    def validate(self, spec: GridSpec, min_gap_cells: int = 2) -> None:
        D = spec.dim
        h = spec.spacing[:D]
        L = np.asarray(spec.extent[:D])
        rects = [(np.broadcast_to(np.asarray(lo, float), (D,)), np.broadcast_to(np.asarray(hi, float), (D,)))
                 for lo, hi in self.boxes]
        for lo, hi in rects:
            if (lo < -L).any() or (hi > L).any():
                raise PilotWaveError("box outside the grid extent")
        for (a, b), (c, d) in itertools.combinations(rects, 2):
            gap = np.maximum(c - b, a - d)   # per-axis separation (negative if overlapping)
            if not (gap >= min_gap_cells * h).any():
                raise PilotWaveError(f"boxes closer than {min_gap_cells} cells")

    def walls(self, flipped: bool = False, merged: bool = False) -> PotentialSpec:
        if not merged:
            return PotentialSpec("box-walls", boxes=tuple(self.boxes), wall_height=self.wall_height)
        return PotentialSpec("box-walls", boxes=tuple(self.merged_boxes(flipped)), wall_height=self.wall_height)

    def current_spins(self, flipped: bool) -> tuple[int, ...]:
        s = list(self.spin_indices)
        if flipped and self.flip_box is not None:
            s[self.flip_box] = 1 - s[self.flip_box]
        return tuple(s)

    def merged_boxes(self, flipped: bool = False) -> list:
        """Bounding box of each group of equal-spin boxes."""
        groups: dict[int, list] = {}
        for box, s in zip(self.boxes, self.current_spins(flipped)):
            groups.setdefault(s, []).append(box)
        out = []
        for s in sorted(groups):
            lo = np.min([np.atleast_1d(np.asarray(b[0], float)) for b in groups[s]], axis=0)
            hi = np.max([np.atleast_1d(np.asarray(b[1], float)) for b in groups[s]], axis=0)
            out.append((tuple(lo), tuple(hi)))
        return out

    def box_of(self, xi: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Index of the box holding each single-particle point (M, D), -1 if none."""
        xi = np.atleast_2d(xi)
        out = np.full(xi.shape[0], -1)
        for k, (lo, hi) in enumerate(self.boxes):
            lo = np.broadcast_to(np.asarray(lo, float), xi.shape[1:])
            hi = np.broadcast_to(np.asarray(hi, float), xi.shape[1:])
            inside = ((xi >= lo + margin) & (xi <= hi - margin)).all(axis=1)
            out[inside] = k
        return out


def box_orbitals(layout: BoxLayout, momentum=0.0, power: float = 2.0) -> list[Orbital]:
    """Smooth sine-power orbital filling each box, with an optional plane-wave factor.

    ``momentum`` is either shared by all boxes or given per box as a sequence of
    wave vectors.
    """
    n = len(layout.boxes)
    if np.ndim(momentum) == 2:
        ks = [tuple(map(float, k)) for k in momentum]
    else:
        ks = [momentum] * n
    if len(ks) != n:
        raise PilotWaveError("need one wave vector per box")
    return [Orbital.make("box", lo=tuple(np.atleast_1d(lo)), hi=tuple(np.atleast_1d(hi)),
                         power=power, momentum=k) for (lo, hi), k in zip(layout.boxes, ks)]


def distinct_sequences(spins: Sequence[int]) -> list[tuple[int, ...]]:
    return sorted(set(itertools.permutations(spins)))


def build_measured_state(layout: BoxLayout, spec: GridSpec, orbitals: Sequence[Orbital] | None = None,
                         sign: int = 1, weights: dict | None = None,
                         particles: Sequence[ParticleSpec] = (), hbar: float = 1.0) -> SpinorField:
    """Spinor with one particle per box and the measured spins attached to the boxes.

    Every permutation puts particle k into box perm[k] with that box's spin; the
    term carries ``sign**parity`` and a per-spin-sequence weight (default 1).
    Terms with the same spin sequence add into one component.
    """
    n = spec.n_particles
    if len(layout.boxes) != n:
        raise PilotWaveError("need exactly one box per particle")
    orbitals = list(orbitals) if orbitals is not None else box_orbitals(layout)
    if len(orbitals) != n:
        raise PilotWaveError("need one orbital per box")
    particles = tuple(particles) or default_particles(n)
    layout.validate(spec)
    # orbital supports must not overlap
    single = [orb(spec.particle_coords(0), hbar, particles[0].mass) for orb in orbitals]
    supports = [np.broadcast_to(np.abs(v) > 0, spec.shape) for v in single]
    for a, b in itertools.combinations(range(n), 2):
        if (supports[a] & supports[b]).any():
            raise PilotWaveError("orbitals overlap")
    spins = layout.spin_indices
    seqs = distinct_sequences(spins)
    if not seqs:
        raise PilotWaveError("empty permutation set")
    weights = {} if weights is None else {tuple(_spin_index(c) for c in k) if isinstance(k, str) else tuple(k): v
                                          for k, v in weights.items()}
    vals = np.zeros((2,) * n + spec.shape, complex)
    for perm in itertools.permutations(range(n)):
        seq = tuple(spins[perm[k]] for k in range(n))
        c = (sign if permutation_parity(perm) < 0 else 1) * weights.get(seq, 1.0)
        term = np.ones(1, complex)
        for k in range(n):
            term = term * orbitals[perm[k]](spec.particle_coords(k), hbar, particles[k].mass)
        vals[seq] += c * term
    s = SpinorField(spec, vals, 0.0, particles, hbar)
    return s.normalized()


# ---------------------------------------------------------------- dominance

@dataclass
class EffectiveComponent:
    label: str
    support: np.ndarray
    weight: float
    dominance: float


@dataclass
class DominanceReport:
    components: list
    min_dominant_fraction: float
    excluded: int
    used: int
    assignment_matches: bool
    threshold: float = 1 - 1e-8

    @property
    def passed(self) -> bool:
        return self.used > 0 and self.min_dominant_fraction >= self.threshold and self.assignment_matches

    def summary(self) -> dict:
        return {
            "components": {c.label: {"weight": c.weight, "dominance": c.dominance} for c in self.components},
            "min_dominant_fraction": self.min_dominant_fraction,
            "one_minus_min_fraction": 1.0 - self.min_dominant_fraction,
            "excluded_samples": self.excluded,
            "used_samples": self.used,
            "assignment_matches": self.assignment_matches,
            "threshold": self.threshold,
        }


def component_dominance(s: SpinorField, samples: np.ndarray, layout: BoxLayout,
                        flipped: bool = False, margin_cells: float = 1.0) -> DominanceReport:
    """Per-sample share of the largest spin component of the local spin density.

    Samples where some particle sits in a wall or gap (or within ``margin_cells``
    of a box edge) are ambiguous and are excluded and counted.
    """
    spec = s.spec
    n, D = spec.n_particles, spec.dim
    samples = np.atleast_2d(samples)
    margin = margin_cells * float(spec.spacing[0])
    where = np.stack([layout.box_of(samples[:, k * D:(k + 1) * D], margin) for k in range(n)], axis=1)
    ok = (where >= 0).all(axis=1)
    # a configuration with two particles in one box is not a measured outcome either
    ok &= np.array([len(set(row)) == n for row in where])
    labels = list(s.components)
    dens = np.stack([np.abs(v) ** 2 for v in s.components.values()])
    loc = interpolate(dens, spec, samples[ok])          # (M, 2^n)
    tot = loc.sum(axis=1)
    frac = loc / np.where(tot > 0, tot, 1.0)[:, None]
    dom = np.argmax(frac, axis=1)
    spins = layout.current_spins(flipped)
    expected = [SpinorField.label(tuple(spins[b] for b in row)) for row in where[ok]]
    matches = all(labels[d] == e for d, e in zip(dom, expected))
    norms = s.component_norms()
    total = sum(norms.values())
    rmax = np.sqrt(s.density.max())
    comps = []
    for c, lab in enumerate(labels):
        if norms[lab] <= 0:
            continue
        sel = dom == c
        comps.append(EffectiveComponent(lab, np.abs(s.components[lab]) >= NODE_EPS * rmax,
                                        norms[lab] / total,
                                        float(frac[sel, c].min()) if sel.any() else float("nan")))
    mn = float(frac[np.arange(len(dom)), dom].min()) if len(dom) else float("nan")
    return DominanceReport(comps, mn, int((~ok).sum()), int(ok.sum()), bool(matches))


# ---------------------------------------------------------------- merging

def exchange_connected(values: np.ndarray, spec: GridSpec, pairs: Sequence[tuple[int, int]],
                       threshold: float) -> bool:
    """Flood fill of ``|psi| >= threshold*max``: do c and its exchanged images share a component?"""
    amp = np.abs(values)
    region = amp >= threshold * amp.max()
    labels, _ = ndimage.label(region)
    ref = np.unravel_index(int(np.argmax(amp)), spec.shape)
    for i, j in pairs:
        other = list(ref)
        for a, b in zip(spec.particle_axes(i), spec.particle_axes(j)):
            other[a], other[b] = other[b], other[a]
        if labels[ref] != labels[tuple(other)]:
            return False
    return True


def _equal_spin_pairs(label: str) -> list[tuple[int, int]]:
    return [(i, j) for i in range(len(label)) for j in range(i + 1, len(label)) if label[i] == label[j]]


@dataclass
class MergeReport:
    connected: bool
    connect_time: float | None
    final_time: float
    norm_drift: float
    threshold: float
    walls_lowered: bool
    history: list = dc_field(default_factory=list)


def merge_same_spin_boxes(s: SpinorField, layout: BoxLayout, duration: float, dt: float,
                          flipped: bool = False, lower_walls: bool = True, check_every: int = 20,
                          support_threshold: float = 0.05, workers: int | None = None
                          ) -> tuple[SpinorField, MergeReport]:
    """Evolve with walls between equal-spin boxes removed (B = 0) and track support connectivity.

    ``lower_walls=False`` runs the same evolution with all walls kept up (control).
    """
    spec = s.spec
    V = layout.walls(flipped, merged=lower_walls)
    st = SplitStepper(spec, V, StepperConfig(dt, s.hbar, workers=workers), s.particles)
    steps = int(round(duration / dt))
    norms = s.component_norms()
    main = max(norms, key=norms.get)
    pairs = _equal_spin_pairs(main)
    n0 = s.norm()
    connected, when, hist = False, None, []
    cur = s
    for f in st.evolve(s, steps, check_every):
        cur = f
        c = exchange_connected(f.values[SpinorField.parse_label(main)], spec, pairs, support_threshold)
        hist.append((float(f.time), bool(c)))
        if c and not connected:
            connected, when = True, float(f.time)
        elif not c:
            connected, when = False, None
    return cur, MergeReport(connected, when, float(cur.time), abs(cur.norm() - n0),
                            support_threshold, lower_walls, hist)


def flip_pulse(layout: BoxLayout, spec: GridSpec, mu: float, steps: int, dt: float, t0: float = 0.0,
               ramp_cells: float = 1.0, hbar: float = 1.0) -> MagneticSpec:
    """Field along x over the flip box, calibrated so the pulse is a spin flip there."""
    if layout.flip_box is None:
        raise PilotWaveError("layout names no box to flip")
    lo, hi = layout.boxes[layout.flip_box]
    duration = steps * dt
    amp = math.pi * hbar / (mu * duration)
    window = plateau(lo, hi, ramp_cells * float(spec.spacing[0]))
    return MagneticSpec((1.0, 0.0, 0.0), amp, mu, window, (t0, t0 + duration))


@dataclass
class FlipReport:
    fidelity: float
    pulse_amplitude: float
    pulse_steps: int
    components_after_pulse: dict
    target_label: str
    merge: MergeReport | None = None
    extracted_weight: float = 0.0


def apply_flip(s: SpinorField, layout: BoxLayout, dt: float, pulse_steps: int = 10, mu: float = 1.0,
               workers: int | None = None, enabled: bool = True) -> tuple[SpinorField, FlipReport]:
    """Run the localised pulse with walls up; returns the spinor and the flip fidelity."""
    spec = s.spec
    B = flip_pulse(layout, spec, mu, pulse_steps, dt, s.time, hbar=s.hbar) if enabled else MagneticSpec()
    st = SplitStepper(spec, layout.walls(), StepperConfig(dt, s.hbar, workers=workers), s.particles, B)
    out = st.run(s, pulse_steps)
    target = SpinorField.label(layout.current_spins(True))
    norms = out.component_norms()
    tot = sum(norms.values())
    if tot <= 0:
        raise PilotWaveError("spinor vanished during the pulse")
    return out, FlipReport(norms[target] / tot, B.amplitude, pulse_steps, norms, target)


def spin_flip_and_merge(s: SpinorField, layout: BoxLayout, dt: float, merge_duration: float,
                        pulse_steps: int = 10, mu: float = 1.0, support_threshold: float = 0.05,
                        workers: int | None = None, check_every: int = 20) -> tuple[Field, FlipReport]:
    """Flip the spin in ``layout.flip_box``, switch the field off, lower the wall.

    After the flip every particle carries the same spin, so the wavefunction is
    a single spin component times a fixed spin state; that component is handed
    on as a scalar field and evolved with the wall between the boxes removed.
    """
    flipped, rep = apply_flip(s, layout, dt, pulse_steps, mu, workers)
    comp = flipped.component_field(rep.target_label)
    weight = comp.norm()
    rep.extracted_weight = weight
    scalar = comp.normalized()
    V = layout.walls(flipped=True, merged=True)
    st = SplitStepper(scalar.spec, V, StepperConfig(dt, s.hbar, workers=workers), scalar.particles)
    steps = int(round(merge_duration / dt))
    pairs = _equal_spin_pairs(rep.target_label)
    hist, connected, when, cur = [], False, None, scalar
    for f in st.evolve(scalar, steps, check_every):
        cur = f
        c = exchange_connected(f.values, f.spec, pairs, support_threshold)
        hist.append((float(f.time), bool(c)))
        if c and not connected:
            connected, when = True, float(f.time)
        elif not c:
            connected, when = False, None
    rep.merge = MergeReport(connected, when, float(cur.time), abs(cur.norm() - 1.0),
                            support_threshold, True, hist)
    return cur, rep


# ---------------------------------------------------------------- total symmetry

def _inner(a: np.ndarray, b: np.ndarray) -> complex:
    return complex(np.vdot(a.ravel(), b.ravel()))


@dataclass
class SpinSymmetryVerdict:
    verdict: str
    pair_phases: dict
    pair_residuals: dict
    sequence_ratios: dict
    tolerance: float
    notes: list = dc_field(default_factory=list)

    def summary(self) -> dict:
        return {
            "verdict": self.verdict,
            "pair_phases": self.pair_phases,
            "pair_residuals": self.pair_residuals,
            "sequence_ratios": {k: [v.real, v.imag] for k, v in self.sequence_ratios.items()},
            "tolerance": self.tolerance,
            "notes": self.notes,
        }

    def as_symmetry_report(self, velocity_residual: float = float("nan"),
                           drift_residual: float = float("nan"),
                           amplitude_residual: float = float("nan")):
        from .symmetry import SymmetryReport
        phases = [{"pair": k, "gamma": v, "winding": 1, "handedness": None, "route": "spinor-overlap"}
                  for k, v in self.pair_phases.items()]
        g = None
        if self.verdict == "Boson":
            g = 0.0
        elif self.verdict == "Fermion":
            g = math.pi
        return SymmetryReport(velocity_residual, drift_residual, amplitude_residual, phases, [],
                              self.verdict, g, {"residual": self.tolerance}, notes=list(self.notes))


def verify_total_symmetry(s: SpinorField | Field, tol: float = 1e-6) -> SpinSymmetryVerdict:
    """Compare the spinor with its combined space-and-spin exchange for every pair.

    ``exp(i gamma_ij)`` is read off the overlap of the exchanged spinor with the
    original; the residual is the relative L2 distance after removing that phase.
    Each spin sequence also reports its own ratio, so sequences that disagree
    about the sign show up directly.
    """
    n = s.spec.n_particles
    norm2 = float(np.vdot(s.values.ravel(), s.values.ravel()).real)
    if norm2 <= 0:
        raise PilotWaveError("zero field")
    phases, residuals, ratios, notes = {}, {}, {}, []
    for i in range(n):
        for j in range(i + 1, n):
            p = exchange(s, i, j)
            ov = _inner(s.values, p.values) / norm2
            e = ov / abs(ov) if abs(ov) > 0 else 1.0
            res = float(np.linalg.norm((p.values - e * s.values).ravel()) / math.sqrt(norm2))
            key = f"{i + 1}{j + 1}"
            phases[key] = float(np.angle(e))
            residuals[key] = res
            if s.is_spinor:
                for lab, comp in s.components.items():
                    w = float(np.vdot(comp.ravel(), comp.ravel()).real)
                    if w > 1e-14 * norm2:
                        r = _inner(comp, p.values[SpinorField.parse_label(lab)]) / w
                        ratios[f"{key}:{lab}"] = complex(r)
    worst = max(residuals.values()) if residuals else 0.0
    ph = list(phases.values())
    if worst >= tol:
        verdict = "Inconsistent"
        notes.append("spinor is not an eigenvector of some exchange; sequences disagree on the sign")
    elif all(abs(float(wrap_phase(g))) < tol for g in ph):
        verdict = "Boson"
    elif all(abs(float(wrap_phase(g - math.pi))) < tol for g in ph):
        verdict = "Fermion"
    else:
        verdict = "Inconsistent"
        notes.append("exchange phases are not a common +1 or -1")
    return SpinSymmetryVerdict(verdict, phases, residuals, ratios, tol, notes)


def rotate_spin_basis(s: SpinorField, U: np.ndarray) -> SpinorField:
    """Apply the same 2x2 unitary to every particle's spin factor."""
    v = s.values
    for i in range(s.spec.n_particles):
        v = np.moveaxis(np.tensordot(U, v, axes=([1], [i])), 0, i)
    return s.with_values(v)


def random_su2(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b = complex(q[0], q[1]), complex(q[2], q[3])
    return np.array([[a, -np.conj(b)], [b, np.conj(a)]])


# ---------------------------------------------------------------- effective guidance

def _confinement_pass(s: SpinorField, layout: BoxLayout, starts: np.ndarray, dt: float, steps: int,
                      stride: int = 1, workers: int | None = None,
                      on_snapshot: Callable[[int, SpinorField], None] | None = None) -> tuple[SpinorField, dict]:
    """One walls-up evolution driving full-spinor and dominant-component trajectories together.

    ``on_snapshot(k, field)`` sees every step (k = 0 is the initial field).
    """
    spec = s.spec
    st = SplitStepper(spec, layout.walls(), StepperConfig(dt, s.hbar, workers=workers), s.particles)
    dom = component_dominance(s, starts, layout, margin_cells=0.0)
    n, D = spec.n_particles, spec.dim
    where = np.stack([layout.box_of(starts[:, k * D:(k + 1) * D]) for k in range(n)], axis=1)
    spins = layout.spin_indices
    labels = np.array([SpinorField.label(tuple(spins[b] for b in row)) if (row >= 0).all() else ""
                       for row in where])
    groups = {lab: labels == lab for lab in sorted(set(labels) - {""})}
    full = BohmIntegrator(s, starts)
    eff = {lab: BohmIntegrator(s.component_field(lab), starts[sel]) for lab, sel in groups.items()}
    cur = s
    for k, f in enumerate(st.evolve(s, steps, 1)):
        cur = f
        if on_snapshot is not None:
            on_snapshot(k, f)
        if k == 0 or (k % stride and k != steps):
            continue
        full.advance(f)
        for lab, run in eff.items():
            run.advance(f.component_field(lab))
    full_ens = full.result()
    dev = np.full(starts.shape[0], np.nan)
    for lab, sel in groups.items():
        e = eff[lab].result()
        both_ok = (e.flags == OK).all(axis=0) & (full_ens.flags[:, sel] == OK).all(axis=0)
        d = np.abs(e.positions - full_ens.positions[:, sel]).max(axis=(0, 2))
        dev[np.nonzero(sel)[0]] = np.where(both_ok, d, np.nan)
    good = np.isfinite(dev)
    return cur, {
        "max_deviation": float(dev[good].max()) if good.any() else float("nan"),
        "compared": int(good.sum()),
        "skipped": int((~good).sum()),
        "dominant_fraction_min": dom.min_dominant_fraction,
        "final_time": float(full_ens.times[-1]),
    }


def effective_guidance_check(s: SpinorField, layout: BoxLayout, starts: np.ndarray, dt: float,
                             duration: float, stride: int = 1, workers: int | None = None) -> dict:
    """Trajectories from the full spinor vs. from the component dominant at each start.

    Walls stay up and B = 0.  A single evolution feeds every ensemble.
    """
    steps = int(round(duration / dt))
    return _confinement_pass(s, layout, np.atleast_2d(starts), dt, steps, stride, workers)[1]


# ---------------------------------------------------------------- static three-particle check

def three_particle_consistency(spec: GridSpec | None = None, sign: int = 1) -> dict:
    """Constructed three-particle spinors on a 1D grid: consistent vs. sign-mismatched weights.

    Spins (+, +, -) in three boxes give three spin sequences.  With equal weights
    the spinor is totally (anti)symmetric; flipping the weight of one sequence
    makes the pair phases disagree between sequences, which the verifier must
    report as Inconsistent.
    """
    spec = spec or GridSpec.uniform(3, 1, 64, 8.0)
    layout = BoxLayout(((-7.0, -3.0), (-2.0, 2.0), (3.0, 7.0)), (1, 1, -1), 0.0)
    good = build_measured_state(layout, spec, sign=sign)
    bad = build_measured_state(layout, spec, sign=sign, weights={"-++": -1.0})
    vg, vb = verify_total_symmetry(good), verify_total_symmetry(bad)
    return {
        "consistent": vg.summary(),
        "mismatched": vb.summary(),
        "distinguishes": vg.verdict in ("Boson", "Fermion") and vb.verdict == "Inconsistent",
    }


@dataclass
class ProtocolSettings:
    points: int = 32
    extent: float = 4.0
    dt: float = 0.005
    wall_height: float = 300.0
    sign: int = 1
    # different transverse motion in the two boxes; identical profiles would keep the
    # spatial part separable, and an antisymmetric x-factor then has a codimension-one node
    momenta: tuple = ((1.0, 0.0), (0.0, 1.0))
    confine_time: float = 0.25
    pulse_steps: int = 10
    mu: float = 1.0
    merge_time: float = 2.0
    samples: int = 2000
    trajectories: int = 200
    seed: int = 0
    support_threshold: float = 0.05
    workers: int | None = None

    def layout(self) -> BoxLayout:
        L = self.extent
        lo_y, hi_y = -L + 0.5, L - 0.5
        return BoxLayout((((-L + 0.5, lo_y), (-0.5, hi_y)), ((0.5, lo_y), (L - 0.5, hi_y))),
                         (1, -1), self.wall_height, flip_box=1)


def run_box_protocol(cfg: ProtocolSettings) -> dict:
    """Two particles in the plane: confine, check dominance and guidance, flip, merge, verify."""
    from .ensemble import sample_density
    spec = GridSpec.uniform(2, 2, cfg.points, cfg.extent)
    layout = cfg.layout()
    s0 = build_measured_state(layout, spec, box_orbitals(layout, cfg.momenta), sign=cfg.sign)
    out: dict = {"layout": {"boxes": [list(map(list, b)) for b in layout.boxes],
                            "spins": list(layout.spins), "wall_height": cfg.wall_height,
                            "flip_box": layout.flip_box}}
    out["wall_schedule"] = [
        {"t": 0.0, "event": "walls up, B = 0"},
        {"t": cfg.confine_time, "event": f"pulse on box {layout.flip_box} for {cfg.pulse_steps} steps"},
        {"t": cfg.confine_time + cfg.pulse_steps * cfg.dt, "event": "B = 0, wall between equal-spin boxes lowered"},
    ]
    out["initial_symmetry"] = verify_total_symmetry(s0).summary()
    # stage 1: confinement; dominance, full-spinor and effective trajectories share one evolution
    steps = int(round(cfg.confine_time / cfg.dt))
    every = max(1, steps // 5)
    dominance = []

    def probe(k: int, f: SpinorField) -> None:
        if k % every == 0:
            pts = sample_density(f, cfg.samples, cfg.seed + k // every)
            dominance.append({"t": float(f.time), **component_dominance(f, pts, layout).summary()})
    starts = sample_density(s0, cfg.trajectories * 2, cfg.seed + 1000)
    n, D = 2, 2
    where = np.stack([layout.box_of(starts[:, k * D:(k + 1) * D], float(spec.spacing[0])) for k in range(n)], axis=1)
    starts = starts[(where >= 0).all(axis=1) & (where[:, 0] != where[:, 1])][: cfg.trajectories]
    cur, out["effective_guidance"] = _confinement_pass(s0, layout, starts, cfg.dt, steps, 1,
                                                       cfg.workers, probe)
    out["dominance"] = dominance
    # control: no pulse keeps two components
    ctrl, ctrl_rep = apply_flip(cur, layout, cfg.dt, cfg.pulse_steps, cfg.mu, cfg.workers, enabled=False)
    out["no_pulse_control"] = {k: v for k, v in ctrl_rep.components_after_pulse.items()}
    # stage 2: flip and merge
    merged, rep = spin_flip_and_merge(cur, layout, cfg.dt, cfg.merge_time, cfg.pulse_steps, cfg.mu,
                                      cfg.support_threshold, cfg.workers)
    out["pulse"] = {"fidelity": rep.fidelity, "amplitude": rep.pulse_amplitude, "steps": rep.pulse_steps,
                    "target": rep.target_label, "extracted_weight": rep.extracted_weight}
    m = rep.merge
    out["merge"] = {"connected": m.connected, "connect_time": m.connect_time, "final_time": m.final_time,
                    "norm_drift": m.norm_drift, "support_threshold": m.threshold}
    final = verify_total_symmetry(merged)
    e = np.exp(1j * final.pair_phases["12"])
    out["final"] = {**final.summary(), "delta_exp_i_gamma": [float(e.real), float(e.imag)],
                    "expected": float(cfg.sign)}
    return out
