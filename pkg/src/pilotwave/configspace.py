"""Configuration-space grids, wavefunction containers and local phase primitives.

A grid covers ``n_particles * dim`` axes (absolute frame) laid out particle-major,
so axis ``i*dim + d`` is coordinate ``d`` of particle ``i``.  Two particles in the
plane may also be stored in the relative frame, where the grid axes are the
components of ``r = x1 - x2`` and the centre of mass is factored out.  Grid points
sit at ``x_k = -L + k*h`` with ``h = 2L/N``.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from .errors import GridMismatch, NodeProximity, NormalizationError, PhaseAliasing, PilotWaveError

NODE_EPS = 1e-6
FD_ORDER = 6

_FIRST = {
    2: {1: 1 / 2},
    4: {1: 2 / 3, 2: -1 / 12},
    6: {1: 3 / 4, 2: -3 / 20, 3: 1 / 60},
}
_SECOND = {
    2: (-2.0, {1: 1.0}),
    4: (-5 / 2, {1: 4 / 3, 2: -1 / 12}),
    6: (-49 / 18, {1: 3 / 2, 2: -3 / 20, 3: 1 / 90}),
}


@dataclass(frozen=True)
class GridSpec:
    n_particles: int
    dim: int
    points: tuple[int, ...]
    extent: tuple[float, ...]
    boundary: str = "periodic"
    frame: str = "absolute"

    def __post_init__(self):
        if self.n_particles < 1 or self.n_particles > 4:
            raise GridMismatch("particle count must be in 1..4")
        if self.dim not in (1, 2, 3):
            raise GridMismatch("dimension per particle must be 1, 2 or 3")
        if self.frame not in ("absolute", "relative"):
            raise GridMismatch(f"unknown frame {self.frame!r}")
        if self.frame == "relative" and (self.n_particles != 2 or self.dim != 2):
            raise GridMismatch("relative frame is only defined for two particles in the plane")
        if self.boundary not in ("periodic", "hard-wall"):
            raise GridMismatch(f"unknown boundary {self.boundary!r}")
        na = self.n_axes
        pts = tuple(int(p) for p in np.broadcast_to(np.asarray(self.points), (na,)))
        ext = tuple(float(e) for e in np.broadcast_to(np.asarray(self.extent, float), (na,)))
        if min(pts) < 8:
            raise GridMismatch("need at least 8 points per axis")
        if min(ext) <= 0:
            raise GridMismatch("extent must be positive")
        if self.frame == "relative" and any(p % 2 for p in pts):
            raise GridMismatch("relative frame needs an even point count so r=0 is a grid point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "extent", ext)

    @classmethod
    def uniform(cls, n_particles: int, dim: int, points: int, extent: float, **kw) -> "GridSpec":
        return cls(n_particles, dim, (points,), (extent,), **kw)

    @property
    def n_axes(self) -> int:
        return self.dim if self.frame == "relative" else self.n_particles * self.dim

    @property
    def config_dim(self) -> int:
        return self.n_particles * self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * np.asarray(self.extent) / np.asarray(self.points)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, a: int) -> np.ndarray:
        # centred form so that r = 0 is exactly representable
        n = self.points[a]
        return self.spacing[a] * (np.arange(n) - n / 2)

    def open_axis(self, a: int) -> np.ndarray:
        """Coordinates of axis ``a`` shaped for broadcasting over the full grid."""
        shape = [1] * self.n_axes
        shape[a] = self.points[a]
        return self.axis(a).reshape(shape)

    def particle_axes(self, i: int) -> list[int]:
        if self.frame == "relative":
            raise GridMismatch("relative-frame grids have no per-particle axes")
        return list(range(i * self.dim, (i + 1) * self.dim))

    def particle_coords(self, i: int) -> list[np.ndarray]:
        return [self.open_axis(a) for a in self.particle_axes(i)]

    def to_grid_coords(self, points: np.ndarray) -> np.ndarray:
        """Map configuration points (..., n*dim) to the grid's own coordinates."""
        points = np.asarray(points, float)
        if points.shape[-1] != self.config_dim:
            raise GridMismatch(f"expected {self.config_dim} configuration coordinates")
        if self.frame == "relative":
            return points[..., : self.dim] - points[..., self.dim:]
        return points

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Nearest grid index for points given in grid coordinates."""
        u = (np.asarray(coords, float) + np.asarray(self.extent)) / self.spacing
        return np.rint(u).astype(np.int64)

    def coords_of(self, index: np.ndarray) -> np.ndarray:
        return -np.asarray(self.extent) + self.spacing * np.asarray(index)

    def inverse_mass(self, particles: Sequence["ParticleSpec"]) -> np.ndarray:
        """1/m per grid axis; relative-frame axes carry 1/m1 + 1/m2."""
        if self.frame == "relative":
            v = 1.0 / particles[0].mass + 1.0 / particles[1].mass
            return np.full(self.n_axes, v)
        return np.array([1.0 / particles[a // self.dim].mass for a in range(self.n_axes)])

    def same_particle_axes(self, i: int, j: int) -> bool:
        ai, aj = self.particle_axes(i), self.particle_axes(j)
        return all(self.points[a] == self.points[b] and self.extent[a] == self.extent[b]
                   for a, b in zip(ai, aj))


@dataclass(frozen=True)
class ParticleSpec:
    mass: float = 1.0
    charge: float = 1.0

    def __post_init__(self):
        if not self.mass > 0:
            raise PilotWaveError("particle mass must be positive")


def default_particles(n: int) -> tuple[ParticleSpec, ...]:
    return tuple(ParticleSpec() for _ in range(n))


@dataclass(frozen=True)
class BranchCut:
    """Branch cut of a multi-valued phase on a relative-frame grid.

    The cut runs along the ray ``r_y = 0, sign(r_x) == ray_sign``.  Crossing it
    counter-clockwise multiplies the continued value by ``exp(+i*jump)``.
    ``zero_row_side`` says whether the ``r_y = 0`` row belongs to the upper (+1)
    or lower (-1) sheet.
    """
    jump: float
    ray_sign: int = -1
    zero_row_side: int = 1

    def exchanged(self) -> "BranchCut":
        return BranchCut(self.jump, -self.ray_sign, -self.zero_row_side)

    def first_upper_row(self, spec: GridSpec) -> int:
        j0 = spec.points[1] // 2
        return j0 if self.zero_row_side > 0 else j0 + 1

    def ray_columns(self, spec: GridSpec) -> np.ndarray:
        return spec.axis(0) * self.ray_sign > 0

    def step_factor(self, spec: GridSpec, ix: int, j: int, k: int) -> complex:
        """Continuation factor for a move of ``k`` rows from row ``j`` at column ``ix``."""
        if k == 0 or not self.ray_columns(spec)[ix]:
            return 1.0
        jc = self.first_upper_row(spec)
        lo, hi = (j, j + k) if k > 0 else (j + k, j)
        if lo < jc <= hi:
            sgn = self.ray_sign if k > 0 else -self.ray_sign
            return np.exp(1j * self.jump * sgn)
        return 1.0


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Field:
    spec: GridSpec
    values: np.ndarray
    time: float = 0.0
    particles: tuple[ParticleSpec, ...] = ()
    hbar: float = 1.0
    cut: BranchCut | None = None
    cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.spec.shape:
            raise GridMismatch(f"values shape {v.shape} does not match grid {self.spec.shape}")
        if v is self.values and v.flags.writeable:
            v = v.copy()
        object.__setattr__(self, "values", _freeze(v))
        if not self.particles:
            object.__setattr__(self, "particles", default_particles(self.spec.n_particles))
        if len(self.particles) != self.spec.n_particles:
            raise GridMismatch("one ParticleSpec per particle required")
        if self.cut is not None and self.spec.frame != "relative":
            raise GridMismatch("branch cuts are only supported on relative-frame grids")

    is_spinor = False

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        # correctly rounded sum, so permuting the grid leaves the norm bit-identical
        return math.fsum(self.density.ravel()) * self.spec.cell_volume

    def normalized(self) -> "Field":
        nrm = self.norm()
        if not nrm > 0:
            raise NormalizationError("field is identically zero")
        return self.with_values(self.values / math.sqrt(nrm))

    def with_values(self, values: np.ndarray, time: float | None = None, cut="keep") -> "Field":
        return Field(self.spec, values, self.time if time is None else time, self.particles,
                     self.hbar, self.cut if cut == "keep" else cut)

    def at_time(self, t: float) -> "Field":
        """Same values at another time stamp; derived grids are shared."""
        return Field(self.spec, self.values, t, self.particles, self.hbar, self.cut, self.cache)


@dataclass(frozen=True, eq=False)
class SpinorField:
    """Spinor wavefunction; ``values`` has shape ``(2,)*n + grid shape`` with index 0 = spin up."""
    spec: GridSpec
    values: np.ndarray
    time: float = 0.0
    particles: tuple[ParticleSpec, ...] = ()
    hbar: float = 1.0
    cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    cut = None
    is_spinor = True

    def __post_init__(self):
        if self.spec.frame != "absolute":
            raise GridMismatch("spinor fields live on absolute-frame grids")
        v = np.asarray(self.values, dtype=complex)
        want = (2,) * self.spec.n_particles + self.spec.shape
        if v.shape != want:
            raise GridMismatch(f"spinor values shape {v.shape}, expected {want}")
        if v is self.values and v.flags.writeable:
            v = v.copy()
        object.__setattr__(self, "values", _freeze(v))
        if not self.particles:
            object.__setattr__(self, "particles", default_particles(self.spec.n_particles))

    @property
    def n_spin(self) -> int:
        return self.spec.n_particles

    @staticmethod
    def label(index: Sequence[int]) -> str:
        return "".join("+" if s == 0 else "-" for s in index)

    @staticmethod
    def parse_label(label: str) -> tuple[int, ...]:
        return tuple(0 if c == "+" else 1 for c in label)

    @property
    def components(self) -> dict[str, np.ndarray]:
        return {self.label(idx): self.values[idx]
                for idx in itertools.product((0, 1), repeat=self.n_spin)}

    @classmethod
    def from_components(cls, spec: GridSpec, comps: Mapping[str, np.ndarray], **kw) -> "SpinorField":
        vals = np.zeros((2,) * spec.n_particles + spec.shape, complex)
        for lab, arr in comps.items():
            vals[cls.parse_label(lab)] = arr
        return cls(spec, vals, **kw)

    @property
    def density(self) -> np.ndarray:
        return (np.abs(self.values) ** 2).reshape((-1,) + self.spec.shape).sum(axis=0)

    def norm(self) -> float:
        return math.fsum((np.abs(self.values) ** 2).ravel()) * self.spec.cell_volume

    def component_norms(self) -> dict[str, float]:
        dv = self.spec.cell_volume
        return {k: float((np.abs(v) ** 2).sum() * dv) for k, v in self.components.items()}

    def normalized(self) -> "SpinorField":
        nrm = self.norm()
        if not nrm > 0:
            raise NormalizationError("spinor is identically zero")
        return self.with_values(self.values / math.sqrt(nrm))

    def with_values(self, values: np.ndarray, time: float | None = None) -> "SpinorField":
        return SpinorField(self.spec, values, self.time if time is None else time,
                           self.particles, self.hbar)

    def at_time(self, t: float) -> "SpinorField":
        return SpinorField(self.spec, self.values, t, self.particles, self.hbar, self.cache)

    def component_field(self, label: str) -> Field:
        return Field(self.spec, self.values[self.parse_label(label)], self.time,
                     self.particles, self.hbar)


AnyField = Field | SpinorField


# ---------------------------------------------------------------- exchange

def _exchange_grid(values: np.ndarray, spec: GridSpec, i: int, j: int, lead: int = 0) -> np.ndarray:
    if spec.frame == "relative":
        out = values
        for a in range(spec.n_axes):
            ax = lead + a
            out = np.roll(np.flip(out, ax), 1, ax)
        return out
    order = list(range(values.ndim))
    for a, b in zip(spec.particle_axes(i), spec.particle_axes(j)):
        order[lead + a], order[lead + b] = order[lead + b], order[lead + a]
    return np.transpose(values, order)


def exchange(f: AnyField, i: int, j: int) -> AnyField:
    """Swap particles ``i`` and ``j``; spinors swap spin labels at the same time."""
    spec = f.spec
    n = spec.n_particles
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise GridMismatch(f"invalid particle pair ({i}, {j})")
    if spec.frame == "absolute" and not spec.same_particle_axes(i, j):
        raise GridMismatch("particles live on differently shaped axes")
    if f.is_spinor:
        v = _exchange_grid(f.values, spec, i, j, lead=n)
        order = list(range(v.ndim))
        order[i], order[j] = order[j], order[i]
        return f.with_values(np.transpose(v, order))
    v = _exchange_grid(f.values, spec, i, j)
    cut = f.cut.exchanged() if f.cut is not None else None
    return f.with_values(v, cut=cut)


def exchange_points(spec: GridSpec, points: np.ndarray, i: int, j: int) -> np.ndarray:
    """Swap particle blocks of configuration points."""
    p = np.array(points, float, copy=True)
    d = spec.dim
    p[..., i * d:(i + 1) * d], p[..., j * d:(j + 1) * d] = (
        points[..., j * d:(j + 1) * d].copy(), points[..., i * d:(i + 1) * d].copy())
    return p


# ---------------------------------------------------------------- derivatives

def _shifted(values: np.ndarray, spec: GridSpec, axis: int, k: int, cut: BranchCut | None,
             lead: int = 0) -> np.ndarray:
    """``out[idx] = values[idx + k e_axis]`` with periodic wrap and cut continuation."""
    out = np.roll(values, -k, axis=lead + axis)
    if cut is None or axis != 1 or k == 0:
        return out
    jc = cut.first_upper_row(spec)
    rows = np.arange(spec.points[1])
    lo, hi = (rows, rows + k) if k > 0 else (rows + k, rows)
    crossing = (lo < jc) & (jc <= hi)
    sgn = cut.ray_sign if k > 0 else -cut.ray_sign
    factor = np.where(cut.ray_columns(spec)[:, None] & crossing[None, :],
                      np.exp(1j * cut.jump * sgn), 1.0)
    return out * factor


def gradient(values: np.ndarray, spec: GridSpec, axis: int, order: int = FD_ORDER,
             cut: BranchCut | None = None, lead: int = 0) -> np.ndarray:
    h = spec.spacing[axis]
    out = np.zeros(values.shape, dtype=np.result_type(values, complex if cut else values.dtype))
    for k, c in _FIRST[order].items():
        out += c * (_shifted(values, spec, axis, k, cut, lead) - _shifted(values, spec, axis, -k, cut, lead))
    return out / h


def second_derivative(values: np.ndarray, spec: GridSpec, axis: int, order: int = FD_ORDER) -> np.ndarray:
    h = spec.spacing[axis]
    c0, cs = _SECOND[order]
    out = c0 * values
    for k, c in cs.items():
        out = out + c * (np.roll(values, -k, axis) + np.roll(values, k, axis))
    return out / h ** 2


def stencil_radius(order: int) -> int:
    return order // 2


def amplitude(f: AnyField) -> np.ndarray:
    return np.sqrt(f.density) if f.is_spinor else np.abs(f.values)


def node_mask(f: AnyField, eps: float = NODE_EPS) -> np.ndarray:
    """True where the (spin-summed) amplitude is below ``eps * max``."""
    key = ("node", eps)
    if key not in f.cache:
        r = amplitude(f)
        f.cache[key] = r < eps * r.max()
    return f.cache[key]


def _touch_mask(mask: np.ndarray, axis: int, radius: int) -> np.ndarray:
    out = mask.copy()
    for k in range(1, radius + 1):
        out |= np.roll(mask, k, axis) | np.roll(mask, -k, axis)
    return out


def log_derivative_grids(f: AnyField, order: int = FD_ORDER, eps: float = NODE_EPS) -> np.ndarray:
    """``sum_s conj(psi_s) d_a psi_s / sum_s |psi_s|^2`` per grid axis, NaN near nodes.

    Shape ``(n_axes,) + grid``.  Real part gives the osmotic direction, imaginary
    part the phase gradient.
    """
    key = ("logd", order, eps)
    if key in f.cache:
        return f.cache[key]
    spec = f.spec
    mask = node_mask(f, eps)
    rho = f.density
    safe = np.where(mask, 1.0, rho)
    out = np.empty((spec.n_axes,) + spec.shape, complex)
    lead = spec.n_particles if f.is_spinor else 0
    for a in range(spec.n_axes):
        d = gradient(f.values, spec, a, order, f.cut, lead)
        num = np.conj(f.values) * d
        if f.is_spinor:
            num = num.reshape((-1,) + spec.shape).sum(axis=0)
        g = num / safe
        g[_touch_mask(mask, a, stencil_radius(order))] = complex(np.nan, np.nan)
        out[a] = g
    out.flags.writeable = False
    f.cache[key] = out
    return out


def _axis_velocity_grids(f: AnyField, part: str, order: int = FD_ORDER) -> np.ndarray:
    """Per grid axis ``hbar * (Im|Re)(log-derivative)`` (no mass factor)."""
    key = ("vgrid", part, order)
    if key not in f.cache:
        ld = log_derivative_grids(f, order)
        g = f.hbar * (ld.imag if part == "current" else ld.real)
        g.flags.writeable = False
        f.cache[key] = g
    return f.cache[key]


def config_velocity_from_axes(f: AnyField, axis_vals: np.ndarray) -> np.ndarray:
    """Turn per-grid-axis ``hbar*grad`` values (..., n_axes) into configuration velocities."""
    spec = f.spec
    if spec.frame == "relative":
        m1, m2 = f.particles[0].mass, f.particles[1].mass
        return np.concatenate([axis_vals / m1, -axis_vals / m2], axis=-1)
    inv_m = np.array([1.0 / f.particles[a // spec.dim].mass for a in range(spec.n_axes)])
    return axis_vals * inv_m


# ---------------------------------------------------------------- interpolation

def interpolate(grids: np.ndarray, spec: GridSpec, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of stacked grids ``(K,) + shape`` at grid coordinates (M, n_axes).

    Periodic wrap; NaN anywhere in the stencil propagates to the result.
    Returns (M, K).
    """
    coords = np.atleast_2d(np.asarray(coords, float))
    na = spec.n_axes
    pts = np.asarray(spec.points)
    u = (coords + np.asarray(spec.extent)) / spec.spacing
    bad = ~np.isfinite(u).all(axis=1)
    u[bad] = 0.0
    i0 = np.floor(u).astype(np.int64)
    t = u - i0
    flat = grids.reshape(grids.shape[0], -1)
    strides = np.array([int(np.prod(pts[a + 1:])) for a in range(na)], dtype=np.int64)
    out = np.zeros((coords.shape[0], grids.shape[0]), dtype=grids.dtype)
    for corner in itertools.product((0, 1), repeat=na):
        c = np.asarray(corner)
        idx = np.mod(i0 + c, pts)
        w = np.prod(np.where(c == 1, t, 1.0 - t), axis=1)
        lin = idx @ strides
        out += w[:, None] * flat[:, lin].T
    out[bad] = np.nan
    return out


def _velocity_at(f: AnyField, points: np.ndarray, part: str, order: int) -> np.ndarray:
    spec = f.spec
    pts = np.atleast_2d(np.asarray(points, float))
    g = _axis_velocity_grids(f, part, order)
    vals = interpolate(g, spec, spec.to_grid_coords(pts))
    if np.isnan(vals).any():
        raise NodeProximity("interpolation stencil touches the node mask")
    return config_velocity_from_axes(f, vals)


def current_velocity(f: AnyField, point, particle: int, order: int = FD_ORDER) -> np.ndarray:
    """Phase-gradient velocity of one particle, ``(hbar/m) Im(psi* grad psi)/|psi|^2``."""
    v = _velocity_at(f, point, "current", order)[0]
    d = f.spec.dim
    return v[particle * d:(particle + 1) * d]


def osmotic_velocity(f: AnyField, point, particle: int, order: int = FD_ORDER) -> np.ndarray:
    """Amplitude-gradient velocity ``(hbar/m) Re(psi* grad psi)/|psi|^2``."""
    v = _velocity_at(f, point, "osmotic", order)[0]
    d = f.spec.dim
    return v[particle * d:(particle + 1) * d]


def velocity_field(f: AnyField, points: np.ndarray, part: str = "current", order: int = FD_ORDER,
                   strict: bool = False) -> np.ndarray:
    """Vectorised configuration velocities (M, n*dim); NaN rows near nodes unless ``strict``."""
    spec = f.spec
    pts = np.atleast_2d(np.asarray(points, float))
    g = _axis_velocity_grids(f, part, order)
    vals = interpolate(g, spec, spec.to_grid_coords(pts))
    if strict and np.isnan(vals).any():
        raise NodeProximity("interpolation stencil touches the node mask")
    return config_velocity_from_axes(f, vals)


# ---------------------------------------------------------------- phase transport

@dataclass
class ExchangePath:
    """Equal-time path through configuration space given by waypoints.

    ``winding`` counts half turns of the pair relative to the start (1 is the
    left-handed simple exchange, -1 the right-handed one).  ``None`` marks
    paths without a planar winding interpretation.
    """
    pair: tuple[int, int]
    waypoints: np.ndarray
    handedness: str | None = None
    winding: int | None = None
    enclosed: tuple[int, ...] = ()

    @property
    def start(self) -> np.ndarray:
        return np.asarray(self.waypoints[0])

    @property
    def end(self) -> np.ndarray:
        return np.asarray(self.waypoints[-1])

    @property
    def is_simple(self) -> bool:
        return self.winding in (1, -1) and not self.enclosed

    def concatenate(self, other: "ExchangePath") -> "ExchangePath":
        wp = np.concatenate([self.waypoints, other.waypoints[1:]], axis=0)
        w = None if self.winding is None or other.winding is None else self.winding + other.winding
        return ExchangePath(self.pair, wp, None, w, tuple(set(self.enclosed) | set(other.enclosed)))

    def grid_vertices(self, spec: GridSpec) -> np.ndarray:
        """Snap waypoints to the grid and join them with unit moves (staircase)."""
        idx = spec.index_of(spec.to_grid_coords(np.asarray(self.waypoints, float)))
        pts = np.asarray(spec.points)
        if (idx < 0).any() or (idx >= pts).any():
            raise GridMismatch("path leaves the grid extent")
        verts = [idx[0]]
        for target in idx[1:]:
            cur = verts[-1].copy()
            while True:
                rem = target - cur
                if not rem.any():
                    break
                a = int(np.argmax(np.abs(rem)))
                cur = cur.copy()
                cur[a] += 1 if rem[a] > 0 else -1
                verts.append(cur)
        return np.array(verts)


def wrap_phase(x):
    """Map angles to (-pi, pi]."""
    y = np.mod(np.asarray(x, float) + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def transport_vertices(f: Field, verts: np.ndarray, margin: float = 0.1,
                       eps: float = NODE_EPS) -> float:
    """Sum of neighbour phase steps along grid vertices."""
    if f.is_spinor:
        raise GridMismatch("phase transport needs a scalar field")
    mask = node_mask(f, eps)
    tv = tuple(verts.T)
    if mask[tv].any():
        raise NodeProximity("path vertex lies on the node mask")
    psi = f.values[tv]
    steps = np.diff(verts, axis=0)
    nxt = psi[1:].copy()
    if f.cut is not None:
        for s in np.nonzero(steps[:, 1])[0]:
            nxt[s] *= f.cut.step_factor(f.spec, verts[s, 0], verts[s, 1], int(steps[s, 1]))
    d = np.angle(nxt * np.conj(psi[:-1]))
    if np.abs(d).max(initial=0.0) >= np.pi * (1.0 - margin):
        raise PhaseAliasing("neighbour phase step too large for unambiguous unwrapping")
    return float(d.sum())


def unwrapped_phase_delta(f: Field, path: ExchangePath, margin: float = 0.1,
                          eps: float = NODE_EPS) -> float:
    """Phase change S(end) - S(start) (over hbar) accumulated along a grid-snapped path."""
    return transport_vertices(f, path.grid_vertices(f.spec), margin, eps)


# ---------------------------------------------------------------- initial states

def hermite_function(n: int, x: np.ndarray, omega: float = 1.0, mass: float = 1.0,
                     hbar: float = 1.0) -> np.ndarray:
    s = math.sqrt(mass * omega / hbar)
    xi = s * x
    norm = (s * s / math.pi) ** 0.25 / math.sqrt(2.0 ** n * math.factorial(n))
    return norm * special.eval_hermite(n, xi) * np.exp(-xi * xi / 2)


@dataclass(frozen=True)
class Orbital:
    """Single-particle orbital.

    kinds: ``gaussian`` (center, sigma, momentum), ``hermite`` (level per axis,
    omega), ``box`` (lo, hi, power, momentum), ``plane-wave`` (momentum).
    """
    kind: str
    params: tuple = ()

    @classmethod
    def make(cls, kind: str, **params) -> "Orbital":
        return cls(kind, tuple(sorted((k, _tupled(v)) for k, v in params.items())))

    @property
    def p(self) -> dict:
        return dict(self.params)

    def __call__(self, coords: Sequence[np.ndarray], hbar: float = 1.0, mass: float = 1.0) -> np.ndarray:
        p = self.p
        D = len(coords)
        k = _vec(p.get("momentum", 0.0), D)
        phase = sum(k[d] * coords[d] for d in range(D))
        if self.kind == "gaussian":
            c = _vec(p.get("center", 0.0), D)
            s = _vec(p.get("sigma", 1.0), D)
            out = np.exp(sum(-(coords[d] - c[d]) ** 2 / (4 * s[d] ** 2) for d in range(D)) + 1j * phase)
        elif self.kind == "hermite":
            lv = [int(v) for v in _vec(p.get("level", 0), D)]
            om = float(p.get("omega", 1.0))
            out = np.ones(1, complex)
            for d in range(D):
                out = out * hermite_function(lv[d], coords[d], om, mass, hbar)
            out = out * np.exp(1j * phase)
        elif self.kind == "box":
            lo, hi = _vec(p["lo"], D), _vec(p["hi"], D)
            pw = float(p.get("power", 1.0))
            out = np.ones(1, complex)
            for d in range(D):
                x = coords[d]
                inside = (x >= lo[d]) & (x <= hi[d])
                out = out * np.where(inside, np.abs(np.sin(np.pi * (x - lo[d]) / (hi[d] - lo[d]))) ** pw, 0.0)
            out = out * np.exp(1j * phase)
        elif self.kind == "plane-wave":
            out = np.exp(1j * phase)
        else:
            raise PilotWaveError(f"unknown orbital kind {self.kind!r}")
        return out

    def check_extent(self, spec: GridSpec, axes: Sequence[int]):
        p = self.p
        D = len(axes)
        L = np.array([spec.extent[a] for a in axes])
        if self.kind == "box":
            lo, hi = np.array(_vec(p["lo"], D)), np.array(_vec(p["hi"], D))
            if (lo < -L).any() or (hi > L).any() or (lo >= hi).any():
                raise PilotWaveError("box orbital does not fit inside the grid extent")
        if self.kind == "gaussian":
            c = np.array(_vec(p.get("center", 0.0), D))
            if (np.abs(c) >= L).any():
                raise PilotWaveError("gaussian centre lies outside the grid extent")


def _tupled(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(_tupled(x) for x in v)
    return v


def _vec(v, D: int) -> list[float]:
    a = np.broadcast_to(np.asarray(v, float), (D,))
    return [float(x) for x in a]


def permutation_parity(perm: Sequence[int]) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


@dataclass(frozen=True)
class Initializer:
    """Analytic state family for :func:`build_field`.

    kinds:
      ``product``      -- orbitals[i] for particle i
      ``symmetrized``  -- sum over permutations with ``sign**parity``
      ``disjoint-boxes`` -- orbital0(x1)orbital1(x2) + alpha e^{i beta} orbital1(x1)orbital0(x2)
      ``superposition`` -- sum of sub-initializers with complex weights
      ``anyon``        -- relative-frame ``r^power exp(-r^2/4 sigma^2) exp(i nu theta)``
    """
    kind: str
    orbitals: tuple[Orbital, ...] = ()
    sign: int = 1
    alpha: float = 1.0
    beta: float = 0.0
    nu: float = 0.0
    sigma: float = 1.0
    power: float = 1.0
    terms: tuple = ()


def _product(spec: GridSpec, orbitals: Sequence[Orbital], order: Sequence[int], hbar: float,
             particles) -> np.ndarray:
    out = np.ones(1, complex)
    for i, k in enumerate(order):
        out = out * orbitals[k](spec.particle_coords(i), hbar, particles[i].mass)
    return np.broadcast_to(out, spec.shape)


def _raw_values(spec: GridSpec, init: Initializer, hbar: float, particles) -> tuple[np.ndarray, BranchCut | None]:
    n = spec.n_particles
    if init.kind == "anyon":
        if spec.frame != "relative":
            raise PilotWaveError("anyon states are built on relative-frame grids")
        x, y = spec.open_axis(0), spec.open_axis(1)
        r2 = x * x + y * y
        theta = np.arctan2(y, x)
        theta = np.where((y == 0) & (x < 0), np.pi, theta)
        vals = (np.sqrt(r2) ** init.power) * np.exp(-r2 / (4 * init.sigma ** 2)) * np.exp(1j * init.nu * theta)
        frac = init.nu - round(init.nu)
        cut = BranchCut(2 * np.pi * init.nu) if abs(frac) > 1e-15 else None
        return np.broadcast_to(vals, spec.shape), cut
    if spec.frame == "relative":
        if init.kind == "product" and len(init.orbitals) == 1:
            return np.broadcast_to(init.orbitals[0]([spec.open_axis(0), spec.open_axis(1)], hbar), spec.shape), None
        raise PilotWaveError("relative-frame grids accept anyon or single-orbital product states")
    for i, orb in enumerate(init.orbitals):
        orb.check_extent(spec, spec.particle_axes(i % n))
    if init.kind == "product":
        if len(init.orbitals) != n:
            raise PilotWaveError("product state needs one orbital per particle")
        return _product(spec, init.orbitals, range(n), hbar, particles), None
    if init.kind == "symmetrized":
        if len(init.orbitals) != n:
            raise PilotWaveError("symmetrized state needs one orbital per particle")
        out = np.zeros(spec.shape, complex)
        for perm in itertools.permutations(range(n)):
            c = init.sign ** (0 if permutation_parity(perm) > 0 else 1)
            out += c * _product(spec, init.orbitals, perm, hbar, particles)
        return out, None
    if init.kind == "disjoint-boxes":
        if n != 2 or len(init.orbitals) != 2:
            raise PilotWaveError("disjoint-box state is a two-particle construction")
        a = _product(spec, init.orbitals, (0, 1), hbar, particles)
        b = _product(spec, init.orbitals, (1, 0), hbar, particles)
        return a + init.alpha * np.exp(1j * init.beta) * b, None
    if init.kind == "superposition":
        out = np.zeros(spec.shape, complex)
        for w, sub in init.terms:
            v, _ = _raw_values(spec, sub, hbar, particles)
            out += complex(w) * v
        return out, None
    raise PilotWaveError(f"unknown initializer {init.kind!r}")


def build_field(spec: GridSpec, init: Initializer, particles: Sequence[ParticleSpec] = (),
                hbar: float = 1.0, time: float = 0.0) -> Field:
    particles = tuple(particles) or default_particles(spec.n_particles)
    vals, cut = _raw_values(spec, init, hbar, particles)
    f = Field(spec, np.array(vals, complex), time, particles, hbar, cut)
    return f.normalized()


def product_orbitals(*orbitals: Orbital) -> Initializer:
    return Initializer("product", tuple(orbitals))


# ---------------------------------------------------------------- PWF1 dump format

_MAGIC = b"PWF1"
_VERSION = 1


def write_pwf1(f: AnyField, path) -> None:
    spec = f.spec
    if spec.frame != "absolute":
        raise GridMismatch("PWF1 stores absolute-frame grids only")
    if f.is_spinor:
        comps = [f.values[idx] for idx in itertools.product((0, 1), repeat=spec.n_particles)]
    else:
        comps = [f.values]
    na = spec.n_axes
    head = _MAGIC + struct.pack("<III", _VERSION, spec.n_particles, spec.dim)
    head += struct.pack(f"<{na}I", *spec.points)
    head += struct.pack(f"<{na}d", *spec.extent)
    head += struct.pack("<dI", f.time, len(comps))
    with open(path, "wb") as fh:
        fh.write(head)
        for c in comps:
            fh.write(np.ascontiguousarray(c, dtype="<c16").tobytes())


def read_pwf1(path, hbar: float = 1.0, particles: Sequence[ParticleSpec] = ()) -> AnyField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise PilotWaveError("not a PWF1 file")
    off = 4
    version, n, D = struct.unpack_from("<III", data, off)
    off += 12
    if version != _VERSION:
        raise PilotWaveError(f"unsupported PWF1 version {version}")
    na = n * D
    points = struct.unpack_from(f"<{na}I", data, off)
    off += 4 * na
    extent = struct.unpack_from(f"<{na}d", data, off)
    off += 8 * na
    time, ncomp = struct.unpack_from("<dI", data, off)
    off += 12
    spec = GridSpec(n, D, tuple(points), tuple(extent))
    arr = np.frombuffer(data, dtype="<c16", offset=off).astype(complex)
    if arr.size != ncomp * spec.size:
        raise PilotWaveError("PWF1 payload size does not match header")
    particles = tuple(particles) or default_particles(n)
    if ncomp == 1:
        return Field(spec, arr.reshape(spec.shape), time, particles, hbar)
    if ncomp != 2 ** n:
        raise PilotWaveError("component count is neither 1 nor 2^n")
    return SpinorField(spec, arr.reshape((2,) * n + spec.shape), time, particles, hbar)


def iter_components(f: AnyField) -> Iterable[tuple[str, np.ndarray]]:
    if f.is_spinor:
        yield from f.components.items()
    else:
        yield "", f.values

