"""Bohm and Nelson trajectories over a time-ordered stream of field snapshots."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .configspace import (FD_ORDER, AnyField, GridSpec, _axis_velocity_grids,
                          config_velocity_from_axes, interpolate)
from .errors import NodeProximity, PilotWaveError

OK, NODE_HALT, LEFT_DOMAIN = 0, 1, 2
FLAG_NAMES = {OK: "OK", NODE_HALT: "NODE_HALT", LEFT_DOMAIN: "LEFT_DOMAIN"}


@dataclass(frozen=True)
class VectorPotentialSpec:
    """A(x) on single-particle space: callable (M, D) -> (M, D) or a constant vector."""
    A: Callable | Sequence[float] | None = None

    @property
    def is_zero(self) -> bool:
        return self.A is None

    def at(self, xi: np.ndarray) -> np.ndarray:
        if self.A is None:
            return np.zeros_like(xi)
        if callable(self.A):
            return np.asarray(self.A(xi), float)
        return np.broadcast_to(np.asarray(self.A, float), xi.shape)

    def shifted(self, grad_lambda: Callable) -> "VectorPotentialSpec":
        """Partner of a gauge transform by Lambda: A -> A - grad Lambda."""
        base = self

        def new_a(xi):
            return base.at(xi) - np.asarray(grad_lambda(xi), float)
        return VectorPotentialSpec(new_a)


def _vector_term(f: AnyField, points: np.ndarray, A: VectorPotentialSpec | None) -> np.ndarray:
    if A is None or A.is_zero:
        return 0.0
    d = f.spec.dim
    out = np.empty_like(points)
    for i, p in enumerate(f.particles):
        sl = slice(i * d, (i + 1) * d)
        out[:, sl] = (p.charge / p.mass) * A.at(points[:, sl])
    return out


def _vector_grid(f: AnyField, A: VectorPotentialSpec) -> np.ndarray:
    """q*A tabulated per grid axis, so it is interpolated exactly like the phase gradient."""
    key = ("agrid", A)
    if key not in f.cache:
        spec = f.spec
        d = spec.dim
        out = np.empty((spec.n_axes,) + spec.shape)
        for i, p in enumerate(f.particles):
            xs = np.stack([np.broadcast_to(c, spec.shape) for c in spec.particle_coords(i)], axis=-1)
            a = A.at(xs.reshape(-1, d)).reshape(spec.shape + (d,))
            for k in range(d):
                out[i * d + k] = p.charge * a[..., k]
        out.flags.writeable = False
        f.cache[key] = out
    return f.cache[key]


def _field_velocity(f: AnyField, points: np.ndarray, A, drift: bool, order: int,
                    diffusion_scale: float = 1.0) -> np.ndarray:
    spec = f.spec
    g = _axis_velocity_grids(f, "current", order)
    # on absolute grids A joins the phase gradient before interpolation; a gauge
    # shift then cancels node by node instead of up to interpolation error
    gridded = A is not None and not A.is_zero and spec.frame == "absolute"
    if gridded:
        g = g + _vector_grid(f, A)
    coords = spec.to_grid_coords(points)
    if drift:
        g2 = _axis_velocity_grids(f, "osmotic", order)
        both = interpolate(np.concatenate([g, g2]), spec, coords)
        na = spec.n_axes
        vals = both[:, :na] + diffusion_scale * both[:, na:]
    else:
        vals = interpolate(g, spec, coords)
    v = config_velocity_from_axes(f, vals)
    return v if gridded else v + _vector_term(f, points, A)


def bohm_velocity(f: AnyField, point, A: VectorPotentialSpec | None = None,
                  order: int = FD_ORDER) -> np.ndarray:
    """Guidance velocity of the whole configuration (n*dim vector; batched for 2D input)."""
    p = np.asarray(point, float)
    v = _field_velocity(f, np.atleast_2d(p), A, False, order)
    if np.isnan(v).any():
        raise NodeProximity("configuration is too close to a node")
    return v[0] if p.ndim == 1 else v


def nelson_drift(f: AnyField, point, A: VectorPotentialSpec | None = None,
                 order: int = FD_ORDER) -> np.ndarray:
    """Current plus osmotic velocity plus (q/m)A."""
    p = np.asarray(point, float)
    v = _field_velocity(f, np.atleast_2d(p), A, True, order)
    if np.isnan(v).any():
        raise NodeProximity("configuration is too close to a node")
    return v[0] if p.ndim == 1 else v


@dataclass
class TrajectoryEnsemble:
    kind: str
    starts: np.ndarray
    times: np.ndarray
    positions: np.ndarray          # (T, M, n*dim)
    flags: np.ndarray              # (T, M)
    seed: int | None = None
    wraps: np.ndarray | None = None  # (M, n*dim) periodic wrap counts at the end
    meta: dict = dc_field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return self.positions.shape[1]

    @property
    def final_flags(self) -> np.ndarray:
        return self.flags[-1]

    def halted_fraction(self) -> float:
        return float(np.mean(self.flags[-1] != OK))

    def to_csv(self, path) -> None:
        T, M, C = self.positions.shape
        n_dim = self.meta.get("dim", 1)
        cols = [f"x{c // n_dim + 1}_{c % n_dim + 1}" for c in range(C)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "traj_id", "flag"] + cols)
            for m in range(M):
                for k in range(T):
                    w.writerow([f"{self.times[k]:.17g}", m, FLAG_NAMES[int(self.flags[k, m])]]
                               + [f"{v:.17g}" for v in self.positions[k, m]])


def static_snapshots(f: AnyField, times: Sequence[float]) -> Iterator[AnyField]:
    """Stationary-field snapshots sharing one set of derived grids."""
    for t in times:
        yield f.at_time(float(t))


class _Pair:
    """Velocity evaluator on the interval between two snapshots."""

    def __init__(self, f0: AnyField, f1: AnyField, A, drift: bool, order: int, diffusion_scale: float):
        self.f0, self.f1 = f0, f1
        self.t0, self.t1 = f0.time, f1.time
        self.args = (A, drift, order, diffusion_scale)

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        w = 0.0 if self.t1 == self.t0 else (t - self.t0) / (self.t1 - self.t0)
        A, drift, order, ds = self.args
        v0 = _field_velocity(self.f0, x, A, drift, order, ds)
        if w == 0.0:
            return v0
        v1 = _field_velocity(self.f1, x, A, drift, order, ds)
        if w == 1.0:
            return v1
        return (1 - w) * v0 + w * v1


def _domain(spec: GridSpec, x: np.ndarray, wraps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Wrap periodic coordinates into [-L, L); flag points outside hard walls."""
    if spec.frame == "relative":
        # configuration coordinates are unbounded; only r is gridded (periodically)
        return x, np.zeros(x.shape[0], bool)
    L = np.asarray(spec.extent)
    if spec.boundary == "hard-wall":
        out = ((x < -L) | (x >= L)).any(axis=1)
        return x, out
    shift = np.floor((x + L) / (2 * L))
    if shift.any():
        wraps += shift.astype(np.int64)
        x = x - 2 * L * shift
    return x, np.zeros(x.shape[0], bool)


def _first_and_rest(snapshots: Iterable[AnyField]):
    it = iter(snapshots)
    try:
        first = next(it)
    except StopIteration:
        raise PilotWaveError("no snapshots supplied") from None
    return first, it


class BohmIntegrator:
    """RK4 Bohm integration fed one snapshot at a time.

    Lets several ensembles share a single pass of an expensive evolution; see
    :func:`integrate_bohm` for the one-stream form.
    """

    def __init__(self, first: AnyField, starts, A: VectorPotentialSpec | None = None,
                 substeps: int = 1, order: int = FD_ORDER):
        self.starts = np.atleast_2d(np.asarray(starts, float))
        self.spec = first.spec
        self.A, self.substeps, self.order = A, substeps, order
        M = self.starts.shape[0]
        self.x = self.starts.copy()
        self.wraps = np.zeros_like(self.x, dtype=np.int64)
        self.flags = np.full(M, OK, np.int8)
        v0 = _field_velocity(first, self.x, A, False, order)
        self.flags[np.isnan(v0).any(axis=1)] = NODE_HALT
        self.times, self.pos, self.fl = [first.time], [self.x.copy()], [self.flags.copy()]
        self.prev = first

    def advance(self, f: AnyField) -> None:
        prev, x, flags = self.prev, self.x, self.flags
        ev = _Pair(prev, f, self.A, False, self.order, 1.0)
        h = (f.time - prev.time) / self.substeps
        for s in range(self.substeps):
            t = prev.time + s * h
            live = flags == OK
            if not live.any():
                break
            xl = x[live]
            k1 = ev(xl, t)
            k2 = ev(xl + 0.5 * h * k1, t + 0.5 * h)
            k3 = ev(xl + 0.5 * h * k2, t + 0.5 * h)
            k4 = ev(xl + h * k3, t + h)
            xn = xl + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = np.isnan(xn).any(axis=1)
            w = self.wraps[live]
            xn_ok, left = _domain(self.spec, np.where(bad[:, None], xl, xn), w)
            self.wraps[live] = w
            idx = np.nonzero(live)[0]
            flags[idx[bad]] = NODE_HALT
            flags[idx[left & ~bad]] = LEFT_DOMAIN
            keep = ~bad & ~left
            x[idx[keep]] = xn_ok[keep]
        self.times.append(f.time)
        self.pos.append(x.copy())
        self.fl.append(flags.copy())
        self.prev = f

    def result(self) -> TrajectoryEnsemble:
        return TrajectoryEnsemble("bohm", self.starts, np.array(self.times), np.array(self.pos),
                                  np.array(self.fl), None, self.wraps,
                                  {"dim": self.spec.dim, "substeps": self.substeps})


def integrate_bohm(snapshots: Iterable[AnyField], starts, A: VectorPotentialSpec | None = None,
                   substeps: int = 1, order: int = FD_ORDER) -> TrajectoryEnsemble:
    """RK4 through the snapshot stream with velocities interpolated linearly in time.

    A trajectory whose velocity stencil touches the node mask is frozen at its last
    good position and flagged NODE_HALT; the rest carry on.
    """
    first, rest = _first_and_rest(snapshots)
    run = BohmIntegrator(first, starts, A, substeps, order)
    for f in rest:
        run.advance(f)
    return run.result()


@dataclass(frozen=True)
class NelsonParams:
    """Nelson diffusion settings.

    The diffusion coefficient of particle i is ``diffusion_scale * hbar / (2 m_i)``;
    ``diffusion_scale`` also scales the osmotic part of the drift, so 0 recovers
    Euler-integrated Bohm motion.  ``drift_scale = 0`` gives pure diffusion.
    """
    seed: int = 0
    diffusion_scale: float = 1.0
    drift_scale: float = 1.0
    substeps: int = 1

    def __post_init__(self):
        if self.diffusion_scale < 0:
            raise PilotWaveError("diffusion scale must be non-negative")
        if self.substeps < 1:
            raise PilotWaveError("substeps must be at least 1")

    def diffusion_coefficients(self, f: AnyField) -> np.ndarray:
        return np.array([self.diffusion_scale * f.hbar / (2 * p.mass)
                         for p in f.particles for _ in range(f.spec.dim)])


def trajectory_streams(seed: int, count: int) -> list[np.random.Generator]:
    """One independent generator per trajectory, keyed by (seed, index)."""
    return [np.random.default_rng([int(seed), i]) for i in range(count)]


def integrate_nelson(snapshots: Iterable[AnyField], starts, params: NelsonParams,
                     A: VectorPotentialSpec | None = None, order: int = FD_ORDER) -> TrajectoryEnsemble:
    """Euler-Maruyama for dx = b dt + dW with Var(dW) = (hbar/m) dt per axis."""
    starts = np.atleast_2d(np.asarray(starts, float))
    first, rest = _first_and_rest(snapshots)
    spec = first.spec
    M, C = starts.shape
    x = starts.copy()
    wraps = np.zeros_like(x, dtype=np.int64)
    flags = np.full(M, OK, np.int8)
    rngs = trajectory_streams(params.seed, M)
    sigma = np.sqrt(2 * params.diffusion_coefficients(first))
    b0 = _field_velocity(first, x, A, True, order, params.diffusion_scale)
    flags[np.isnan(b0).any(axis=1)] = NODE_HALT
    times, pos, fl = [first.time], [x.copy()], [flags.copy()]
    prev = first
    for f in rest:
        ev = _Pair(prev, f, A, True, order, params.diffusion_scale)
        n = params.substeps
        h = (f.time - prev.time) / n
        noise = np.stack([g.standard_normal((n, C)) for g in rngs], axis=1)  # (n, M, C)
        for s in range(n):
            live = flags == OK
            if not live.any():
                break
            xl = x[live]
            if params.drift_scale == 0.0:
                b = np.zeros_like(xl)
            else:
                b = ev(xl, prev.time + s * h) * params.drift_scale
            xn = xl + b * h + sigma * np.sqrt(h) * noise[s, live]
            bad = np.isnan(xn).any(axis=1)
            w = wraps[live]
            xn_ok, left = _domain(spec, np.where(bad[:, None], xl, xn), w)
            wraps[live] = w
            idx = np.nonzero(live)[0]
            flags[idx[bad]] = NODE_HALT
            flags[idx[left & ~bad]] = LEFT_DOMAIN
            keep = ~bad & ~left
            x[idx[keep]] = xn_ok[keep]
        times.append(f.time)
        pos.append(x.copy())
        fl.append(flags.copy())
        prev = f
    return TrajectoryEnsemble("nelson", starts, np.array(times), np.array(pos), np.array(fl),
                              params.seed, wraps, {"dim": spec.dim, "params": params})
