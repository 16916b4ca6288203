"""Split-step time evolution and the local PDE diagnostics built on a field.

The stepper is second-order Strang: half a potential (and spin-rotation) kick, a
full kinetic step in Fourier space, another half kick.  Time-dependent
potentials are frozen at the step midpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.fft as sfft

from .configspace import (FD_ORDER, AnyField, Field, GridSpec, ParticleSpec, SpinorField,
                          _exchange_grid, amplitude, default_particles, gradient,
                          log_derivative_grids, node_mask, second_derivative)
from .errors import AliasingError, GridMismatch, NonHermitianError, PhaseAliasing, PilotWaveError

_SIGMA = np.array([
    [[0, 1], [1, 0]],
    [[0, -1j], [1j, 0]],
    [[1, 0], [0, -1]],
], dtype=complex)


def _profile(desc, x):
    kind = desc[0]
    if kind == "poly":
        return np.polyval(np.asarray(desc[1:], float), x)
    if kind == "gauss":
        amp, c, w = desc[1:4]
        return amp * np.exp(-((x - c) / w) ** 2 / 2)
    if kind == "cos":
        amp, k = desc[1:3]
        return amp * np.cos(k * x)
    raise PilotWaveError(f"unknown profile {kind!r}")


@dataclass(frozen=True)
class PotentialSpec:
    """Potential built from one single-particle function summed over identical particles.

    kinds: ``none``, ``harmonic`` (stiffness, center), ``box-walls`` (boxes,
    wall_height, wall_ramp), ``double-well`` (separation, barrier), ``separable-perturbation``
    (profiles: one 1D profile per axis), ``sum`` (terms).  ``pulse=(t0, t1, amp)``
    switches the term on with factor ``amp`` for t0 <= t < t1.
    """
    kind: str = "none"
    stiffness: float = 1.0
    center: float = 0.0
    boxes: tuple = ()
    wall_height: float = 0.0
    separation: float = 1.0
    barrier: float = 1.0
    profiles: tuple = ()
    terms: tuple = ()
    pulse: tuple | None = None
    wall_ramp: float = 0.0

    def single_particle(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        D = len(coords)
        k = self.kind
        if k == "none":
            return np.zeros(1)
        if k == "harmonic":
            return sum(0.5 * self.stiffness * (x - self.center) ** 2 for x in coords)
        if k == "double-well":
            s = self.separation
            return sum(self.barrier * ((x / s) ** 2 - 1.0) ** 2 for x in coords)
        if k == "box-walls":
            # distance outside the nearest box; sin^2 rise over wall_ramp (0: sharp step)
            shape = np.broadcast_shapes(*[x.shape for x in coords])
            dist = np.full(shape, np.inf)
            for lo, hi in self.boxes:
                lo = np.broadcast_to(np.asarray(lo, float), (D,))
                hi = np.broadcast_to(np.asarray(hi, float), (D,))
                out = np.zeros(shape)
                for d, x in enumerate(coords):
                    out = np.maximum(out, np.maximum(lo[d] - x, x - hi[d]))
                dist = np.minimum(dist, out)
            if self.wall_ramp <= 0:
                return np.where(dist <= 0, 0.0, self.wall_height)
            u = np.clip(dist / self.wall_ramp, 0.0, 1.0)
            return self.wall_height * np.sin(0.5 * np.pi * u) ** 2
        if k == "separable-perturbation":
            if len(self.profiles) != D:
                raise PilotWaveError("separable perturbation needs one profile per axis")
            return sum(_profile(p, x) for p, x in zip(self.profiles, coords))
        if k == "sum":
            raise PilotWaveError("sum potentials are evaluated term by term")
        raise PilotWaveError(f"unknown potential kind {k!r}")

    def leaves(self) -> list["PotentialSpec"]:
        if self.kind == "sum":
            return [leaf for t in self.terms for leaf in t.leaves()]
        return [self]

    def factor(self, t: float) -> float:
        if self.pulse is None:
            return 1.0
        t0, t1, amp = self.pulse
        return float(amp) if t0 <= t < t1 else 0.0

    @property
    def time_dependent(self) -> bool:
        return any(leaf.pulse is not None for leaf in self.leaves())

    def grid_terms(self, spec: GridSpec) -> list[np.ndarray]:
        """One full-grid array per leaf (unscaled by pulses)."""
        if spec.frame != "absolute":
            raise GridMismatch("potentials act on absolute-frame grids")
        out = []
        for leaf in self.leaves():
            g = np.zeros(spec.shape)
            for i in range(spec.n_particles):
                g = g + leaf.single_particle(spec.particle_coords(i))
            out.append(g)
        return out

    def evaluate(self, spec: GridSpec, t: float = 0.0) -> np.ndarray:
        out = np.zeros(spec.shape)
        for leaf, g in zip(self.leaves(), self.grid_terms(spec)):
            out += leaf.factor(t) * g
        return out


def check_exchange_symmetric(grid: np.ndarray, spec: GridSpec, tol: float = 1e-12) -> float:
    """Largest relative change of a potential grid under any particle exchange."""
    worst = 0.0
    scale = max(1.0, float(np.abs(grid).max()))
    for i in range(spec.n_particles):
        for j in range(i + 1, spec.n_particles):
            d = float(np.abs(grid - _exchange_grid(grid, spec, i, j)).max()) / scale
            worst = max(worst, d)
    if worst >= tol:
        raise PilotWaveError(f"potential is not exchange symmetric (asymmetry {worst:.3g})")
    return worst


def plateau(lo, hi, ramp: float) -> Callable[[Sequence[np.ndarray]], np.ndarray]:
    """Smooth window: 1 on the box [lo, hi], cos^2 fall-off over ``ramp`` outside it."""
    def window(coords):
        D = len(coords)
        lo_ = np.broadcast_to(np.asarray(lo, float), (D,))
        hi_ = np.broadcast_to(np.asarray(hi, float), (D,))
        w = np.ones(1)
        for d, x in enumerate(coords):
            dist = np.maximum(np.maximum(lo_[d] - x, x - hi_[d]), 0.0)
            if ramp > 0:
                fall = np.where(dist < ramp, np.cos(0.5 * np.pi * dist / ramp) ** 2, 0.0)
            else:
                fall = (dist == 0) * 1.0
            w = w * fall
        return w
    return window


@dataclass(frozen=True)
class MagneticSpec:
    """Magnetic field over single-particle space coupling to spin with strength ``mu``.

    ``direction`` and ``amplitude`` give a uniform field; ``window`` (callable on
    single-particle coordinates) localises it.  ``pulse=(t0, t1)`` limits it in time.
    """
    direction: tuple = (0.0, 0.0, 1.0)
    amplitude: float = 0.0
    mu: float = 1.0
    window: Callable | None = None
    pulse: tuple | None = None

    @property
    def is_zero(self) -> bool:
        return self.amplitude == 0.0

    def active(self, t: float) -> bool:
        if self.is_zero:
            return False
        if self.pulse is None:
            return True
        return self.pulse[0] <= t < self.pulse[1]

    def field_on(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        """B vector (3, ...) at single-particle coordinates."""
        n = np.asarray(self.direction, float)
        n = n / np.linalg.norm(n)
        w = self.window(coords) if self.window is not None else np.ones(1)
        w = np.asarray(w)
        if np.iscomplexobj(w) or not np.all(np.isfinite(w)):
            raise NonHermitianError("magnetic field must be real and finite")
        return (self.amplitude * n).reshape((3,) + (1,) * w.ndim) * w[None]


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    hbar: float = 1.0
    scheme: str = "strang"
    workers: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise PilotWaveError("dt must be positive")
        if self.scheme != "strang":
            raise PilotWaveError("only the Strang split-step scheme is available")


def max_kinetic_energy(spec: GridSpec, particles: Sequence[ParticleSpec], hbar: float = 1.0) -> float:
    inv_m = spec.inverse_mass(particles)
    kmax = np.pi / spec.spacing
    return float(np.sum(hbar ** 2 * kmax ** 2 * inv_m / 2))


def spin_rotation(B: np.ndarray, mu: float, tau: float, hbar: float) -> np.ndarray:
    """exp(-i mu (sigma/2).B tau / hbar) as a (2, 2, ...) array."""
    mag = np.sqrt((B ** 2).sum(axis=0))
    phi = mu * mag * tau / (2 * hbar)
    nhat = np.divide(B, mag, out=np.zeros_like(B), where=mag > 0)
    ndots = np.tensordot(_SIGMA, nhat, axes=([0], [0]))
    eye = np.eye(2).reshape((2, 2) + (1,) * mag.ndim)
    U = np.cos(phi) * eye - 1j * np.sin(phi) * ndots
    err = np.abs(np.abs(U[0, 0]) ** 2 + np.abs(U[1, 0]) ** 2 - 1).max()
    if err > 1e-12:
        raise NonHermitianError(f"local spin propagator is not unitary (error {err:.3g})")
    return U


class SplitStepper:
    """Strang split-step propagator for scalar or spinor fields on one grid."""

    def __init__(self, spec: GridSpec, potential: PotentialSpec | None, cfg: StepperConfig,
                 particles: Sequence[ParticleSpec] = (), magnetic: MagneticSpec | None = None,
                 check_symmetry: bool = True):
        if spec.frame != "absolute":
            raise GridMismatch("relative-frame fields are analysis-only and are not stepped")
        self.spec = spec
        self.cfg = cfg
        self.particles = tuple(particles) or default_particles(spec.n_particles)
        self.potential = potential or PotentialSpec()
        self.magnetic = magnetic or MagneticSpec()
        hbar, dt = cfg.hbar, cfg.dt
        emax = max_kinetic_energy(spec, self.particles, hbar)
        if dt * emax / hbar >= np.pi:
            raise AliasingError(f"dt*E_kin_max/hbar = {dt * emax / hbar:.3f} >= pi")
        self._terms = self.potential.grid_terms(spec)
        self._leaves = self.potential.leaves()
        if spec.boundary == "hard-wall":
            edge = np.zeros(spec.shape, bool)
            for a in range(spec.n_axes):
                idx = np.arange(spec.points[a])
                e = (idx < 2) | (idx >= spec.points[a] - 2)
                shape = [1] * spec.n_axes
                shape[a] = -1
                edge = edge | e.reshape(shape)
            self._edge = np.where(edge, 0.5 * np.pi * hbar / dt, 0.0)
        else:
            self._edge = None
        self._kick_cache: dict = {}
        if check_symmetry:
            same = len({(p.mass, p.charge) for p in self.particles}) == 1
            if same:
                for g in self._terms:
                    check_exchange_symmetric(g, spec)
        # largest potential that can ever be switched on
        vmax = sum(float(np.abs(g).max()) * (abs(leaf.pulse[2]) if leaf.pulse else 1.0)
                   for leaf, g in zip(self._leaves, self._terms))
        if self._edge is not None:
            vmax += float(self._edge.max())
        if vmax * dt / hbar >= np.pi:
            raise AliasingError(f"potential phase per step {vmax * dt / hbar:.3f} >= pi; "
                                "walls this high alias on the split-step grid")
        kin = np.zeros(spec.shape)
        inv_m = spec.inverse_mass(self.particles)
        for a in range(spec.n_axes):
            k = 2 * np.pi * sfft.fftfreq(spec.points[a], spec.spacing[a])
            shape = [1] * spec.n_axes
            shape[a] = -1
            kin = kin + (hbar * inv_m[a] / 2) * (k ** 2).reshape(shape)
        self._kin_phase = np.exp(-1j * dt * kin)
        self._spin_cache: dict = {}

    def potential_grid(self, t: float) -> np.ndarray:
        out = np.zeros(self.spec.shape)
        for leaf, g in zip(self._leaves, self._terms):
            f = leaf.factor(t)
            if f:
                out = out + f * g
        if self._edge is not None:
            out = out + self._edge
        return out

    def _kick(self, t: float) -> np.ndarray:
        key = tuple(leaf.factor(t) for leaf in self._leaves)
        if key not in self._kick_cache:
            v = self.potential_grid(t)
            self._kick_cache[key] = np.exp(-0.5j * self.cfg.dt * v / self.cfg.hbar)
        return self._kick_cache[key]

    def _spin_ops(self) -> list[np.ndarray]:
        if "U" not in self._spin_cache:
            ops = []
            for i in range(self.spec.n_particles):
                B = self.magnetic.field_on(self.spec.particle_coords(i))
                ops.append(spin_rotation(B, self.magnetic.mu, self.cfg.dt / 2, self.cfg.hbar))
            self._spin_cache["U"] = ops
        return self._spin_cache["U"]

    def _rotate_spins(self, values: np.ndarray) -> np.ndarray:
        n = self.spec.n_particles
        for i, U in enumerate(self._spin_ops()):
            a = np.take(values, 0, axis=i)
            b = np.take(values, 1, axis=i)
            new0 = U[0, 0] * a + U[0, 1] * b
            new1 = U[1, 0] * a + U[1, 1] * b
            values = np.stack([new0, new1], axis=i)
        return values

    def step_values(self, values: np.ndarray, t: float, spinor: bool = False) -> np.ndarray:
        dt = self.cfg.dt
        tm = t + 0.5 * dt
        lead = self.spec.n_particles if spinor else 0
        axes = tuple(range(lead, lead + self.spec.n_axes))
        kick = self._kick(tm)
        rotate = spinor and self.magnetic.active(tm)
        psi = values * kick
        if rotate:
            psi = self._rotate_spins(psi)
        psi = sfft.fftn(psi, axes=axes, workers=self.cfg.workers)
        psi *= self._kin_phase
        psi = sfft.ifftn(psi, axes=axes, workers=self.cfg.workers)
        if rotate:
            psi = self._rotate_spins(psi)
        return psi * kick

    def step(self, f: AnyField) -> AnyField:
        if f.spec != self.spec:
            raise GridMismatch("field grid differs from stepper grid")
        vals = self.step_values(f.values, f.time, f.is_spinor)
        return f.with_values(vals, time=f.time + self.cfg.dt)

    def run(self, f: AnyField, steps: int) -> AnyField:
        vals, t = np.array(f.values), f.time
        for k in range(steps):
            vals = self.step_values(vals, t, f.is_spinor)
            t = f.time + (k + 1) * self.cfg.dt
        return f.with_values(vals, time=t)

    def evolve(self, f: AnyField, steps: int, stride: int = 1) -> Iterator[AnyField]:
        """Yield the initial field and every ``stride``-th state up to ``steps``."""
        yield f
        vals = np.array(f.values)
        for k in range(1, steps + 1):
            vals = self.step_values(vals, f.time + (k - 1) * self.cfg.dt, f.is_spinor)
            if k % stride == 0 or k == steps:
                yield f.with_values(vals, time=f.time + k * self.cfg.dt)


def step_schrodinger(f: Field, V: PotentialSpec | None, cfg: StepperConfig) -> Field:
    if f.is_spinor:
        raise GridMismatch("use step_pauli for spinor fields")
    return SplitStepper(f.spec, V, cfg, f.particles).step(f)


def step_pauli(s: SpinorField, V: PotentialSpec | None, B: MagneticSpec | None,
               cfg: StepperConfig) -> SpinorField:
    if not s.is_spinor:
        raise GridMismatch("step_pauli expects a spinor field")
    return SplitStepper(s.spec, V, cfg, s.particles, B).step(s)


def evolve(f: AnyField, V: PotentialSpec | None, cfg: StepperConfig, steps: int, stride: int = 1,
           magnetic: MagneticSpec | None = None) -> Iterator[AnyField]:
    return SplitStepper(f.spec, V, cfg, f.particles, magnetic).evolve(f, steps, stride)


# ---------------------------------------------------------------- diagnostics

def quantum_potential(f: AnyField, order: int = FD_ORDER) -> np.ndarray:
    """-(hbar^2/2) sum_a (1/m_a) d_a^2 R / R; NaN on the node mask."""
    spec = f.spec
    R = amplitude(f)
    mask = node_mask(f)
    inv_m = spec.inverse_mass(f.particles)
    lap = np.zeros(spec.shape)
    for a in range(spec.n_axes):
        lap += inv_m[a] * second_derivative(R, spec, a, order)
    Q = -(f.hbar ** 2 / 2) * lap / np.where(mask, 1.0, R)
    Q[mask] = np.nan
    return Q


def probability_current(f: AnyField, order: int = FD_ORDER) -> np.ndarray:
    """(n_axes,) + grid array of hbar/m Im(psi* d psi), summed over spin."""
    spec = f.spec
    inv_m = spec.inverse_mass(f.particles)
    lead = spec.n_particles if f.is_spinor else 0
    out = np.empty((spec.n_axes,) + spec.shape)
    for a in range(spec.n_axes):
        j = np.conj(f.values) * gradient(f.values, spec, a, order, f.cut, lead)
        if f.is_spinor:
            j = j.reshape((-1,) + spec.shape).sum(axis=0)
        out[a] = f.hbar * inv_m[a] * j.imag
    return out


def _divergence(j: np.ndarray, spec: GridSpec, order: int) -> np.ndarray:
    return sum(gradient(j[a], spec, a, order).real for a in range(spec.n_axes))


def continuity_residual(before: AnyField, after: AnyField, dt: float, V=None,
                        order: int = FD_ORDER) -> float:
    """Max over off-node points of d(rho)/dt + div j with trapezoidal time centring."""
    if before.spec != after.spec:
        raise GridMismatch("snapshots live on different grids")
    spec = before.spec
    r = (after.density - before.density) / dt
    r = r + 0.5 * (_divergence(probability_current(before, order), spec, order)
                   + _divergence(probability_current(after, order), spec, order))
    ok = ~(node_mask(before) | node_mask(after))
    return float(np.abs(r[ok]).max())


def hj_residual(before: Field, after: Field, dt: float, V: PotentialSpec | None = None,
                order: int = FD_ORDER) -> float:
    """Max off-node residual of dS/dt + sum |grad S|^2/2m + V + Q."""
    if before.is_spinor or after.is_spinor:
        raise GridMismatch("phase equation needs scalar fields")
    spec = before.spec
    hbar = before.hbar
    ds = np.angle(after.values * np.conj(before.values))
    if np.abs(ds).max() >= 0.9 * np.pi:
        raise PhaseAliasing("phase advances too far in one step to difference in time")
    dsdt = hbar * ds / dt
    inv_m = spec.inverse_mass(before.particles)
    kin = np.zeros(spec.shape)
    for f in (before, after):
        ld = log_derivative_grids(f, order)
        for a in range(spec.n_axes):
            kin += 0.5 * inv_m[a] * (hbar * ld[a].imag) ** 2 / 2
    Q = 0.5 * (quantum_potential(before, order) + quantum_potential(after, order))
    pot = 0.0
    if V is not None:
        pot = V.evaluate(spec, before.time + 0.5 * dt)
    res = dsdt + kin + pot + Q
    ok = np.isfinite(res) & ~(node_mask(before) | node_mask(after))
    return float(np.abs(res[ok]).max())


def gauge_transform(f: AnyField, lam: Callable[[Sequence[np.ndarray]], np.ndarray],
                    charges: Sequence[float] | None = None) -> AnyField:
    """Multiply by exp(i sum_i q_i Lambda(x_i) / hbar).

    Guidance stays unchanged when the vector potential is replaced by A - grad Lambda.
    """
    spec = f.spec
    if spec.frame != "absolute":
        raise GridMismatch("gauge transforms act on absolute-frame grids")
    q = charges if charges is not None else [p.charge for p in f.particles]
    phase = np.zeros(spec.shape)
    for i in range(spec.n_particles):
        phase = phase + q[i] * np.broadcast_to(lam(spec.particle_coords(i)), spec.shape)
    return f.with_values(f.values * np.exp(1j * phase / f.hbar))


def rabi_pulse_amplitude(mu: float, duration: float, hbar: float = 1.0) -> float:
    """Field strength that turns spin up into spin down over ``duration``."""
    return math.pi * hbar / (mu * duration)
