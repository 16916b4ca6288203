"""Exchange residuals, exchange-phase extraction and statistics classification.

Phase convention: a phase is ``S(end) - S(start)`` (in units of hbar) along the
path, reported in (-pi, pi].  A left-handed (counter-clockwise) simple exchange
of an anyon field with parameter nu therefore gives ``+nu*pi``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.stats import qmc

from .configspace import (FD_ORDER, NODE_EPS, AnyField, ExchangePath, Field, GridSpec, amplitude,
                          exchange, exchange_points, node_mask, stencil_radius, transport_vertices,
                          unwrapped_phase_delta, velocity_field, wrap_phase)
from .errors import GridMismatch, NodeProximity, PhaseAliasing, PilotWaveError

PHASE_CONVENTION = "gamma = S(end) - S(start) along the path; left-handed simple exchange is positive"
RESIDUAL_TOL = 1e-6
PHASE_TOL = 1e-5
ANYON_PHASE_TOL = 1e-3

__all__ = [
    "ExchangePath", "SymmetryReport", "sample_configurations", "velocity_exchange_residual",
    "drift_exchange_residual", "amplitude_exchange_residual", "exchange_phase", "pointwise_phase",
    "rotation_path", "straight_path", "support_disconnected", "classify",
    "pairwise_phase_consistency", "winding_phase_table",
]


# ---------------------------------------------------------------- sampling

def _support_box(f: AnyField, eps: float = NODE_EPS) -> tuple[np.ndarray, np.ndarray]:
    spec = f.spec
    idx = np.nonzero(~node_mask(f, eps))
    if not idx[0].size:
        raise PilotWaveError("field has no support above the node threshold")
    lo = np.array([spec.axis(a)[idx[a].min()] for a in range(spec.n_axes)])
    hi = np.array([spec.axis(a)[idx[a].max()] for a in range(spec.n_axes)])
    return lo, hi


def sample_configurations(f: AnyField, count: int = 1000) -> np.ndarray:
    """Deterministic low-discrepancy configurations covering the support's bounding box."""
    spec = f.spec
    lo, hi = _support_box(f)
    # keep stencils away from the periodic seam, where the sampled state need not be periodic
    # (symmetric margin, so exchanged samples stay clear of it as well)
    margin = (stencil_radius(FD_ORDER) + 2) * spec.spacing
    L = np.asarray(spec.extent)
    lo = np.maximum(lo, -L + margin)
    hi = np.minimum(hi, L - margin)
    u = qmc.Halton(d=spec.n_axes, scramble=False).random(count + 1)[1:]
    pts = lo + (hi - lo) * u
    if spec.frame == "relative":
        # particle 2 at the origin so r = x1
        return np.concatenate([pts, np.zeros_like(pts)], axis=1)
    return pts


def _pair_velocity(f: AnyField, pts: np.ndarray, drift: bool) -> np.ndarray:
    v = velocity_field(f, pts, "current")
    if drift:
        v = v + velocity_field(f, pts, "osmotic")
    return v


def _exchange_residual(f: AnyField, i: int, j: int, samples, drift: bool) -> float:
    spec = f.spec
    pts = sample_configurations(f) if samples is None else np.atleast_2d(np.asarray(samples, float))
    ppts = exchange_points(spec, pts, i, j)
    v = _pair_velocity(f, pts, drift)
    w = _pair_velocity(f, ppts, drift)
    d = spec.dim
    vi = v[:, i * d:(i + 1) * d]
    wj = w[:, j * d:(j + 1) * d]
    ok = np.isfinite(vi).all(axis=1) & np.isfinite(wj).all(axis=1)
    if not ok.any():
        raise PilotWaveError("no usable off-node sample configurations")
    return float(np.linalg.norm(vi[ok] - wj[ok], axis=1).max())


def velocity_exchange_residual(f: AnyField, i: int, j: int, samples=None) -> float:
    """max |v_i(.., x, .., y, ..) - v_j(.., y, .., x, ..)| over usable samples."""
    return _exchange_residual(f, i, j, samples, drift=False)


def drift_exchange_residual(f: AnyField, i: int, j: int, samples=None) -> float:
    """Same comparison for the Nelson drift (current plus osmotic velocity)."""
    return _exchange_residual(f, i, j, samples, drift=True)


def amplitude_exchange_residual(f: AnyField, i: int, j: int, eps: float = NODE_EPS) -> float:
    R = amplitude(f)
    Rx = amplitude(exchange(f, i, j))
    keep = ~(node_mask(f, eps) & (Rx < eps * R.max()))
    return float(np.abs(R - Rx)[keep].max())


# ---------------------------------------------------------------- paths

def rotation_path(f_or_spec, start, i: int = 0, j: int = 1, half_turns: int = 1,
                  points_per_half_turn: int = 64) -> ExchangePath:
    """Rotate particles i and j about their midpoint by ``half_turns * pi``.

    Rotation happens in the plane of their first two coordinates; any further
    coordinates are carried across linearly.  Positive ``half_turns`` is
    counter-clockwise (left-handed).
    """
    spec = f_or_spec.spec if hasattr(f_or_spec, "spec") else f_or_spec
    if spec.dim < 2:
        raise GridMismatch("rotational exchange paths need at least two dimensions")
    start = np.asarray(start, float)
    d = spec.dim
    xi, xj = start[i * d:(i + 1) * d], start[j * d:(j + 1) * d]
    mid = 0.5 * (xi + xj)
    rel = 0.5 * (xi - xj)
    nsteps = max(2, abs(half_turns) * points_per_half_turn)
    ang = np.linspace(0.0, half_turns * np.pi, nsteps + 1)
    s = np.linspace(0.0, 1.0, nsteps + 1)
    odd = abs(half_turns) % 2 == 1
    wps = np.repeat(start[None, :], nsteps + 1, axis=0)
    c, sn = np.cos(ang), np.sin(ang)
    rx = rel[0] * c - rel[1] * sn
    ry = rel[0] * sn + rel[1] * c
    wps[:, i * d] = mid[0] + rx
    wps[:, i * d + 1] = mid[1] + ry
    wps[:, j * d] = mid[0] - rx
    wps[:, j * d + 1] = mid[1] - ry
    for extra in range(2, d):
        a, b = xi[extra], xj[extra]
        if odd:
            wps[:, i * d + extra] = a + s * (b - a)
            wps[:, j * d + extra] = b + s * (a - b)
    radius = float(np.hypot(rel[0], rel[1]))
    enclosed = []
    for k in range(spec.n_particles):
        if k in (i, j):
            continue
        xk = start[k * d:k * d + 2]
        if np.hypot(*(xk - mid[:2])) < radius:
            enclosed.append(k)
    return ExchangePath((i, j), wps, "left" if half_turns > 0 else "right", int(half_turns),
                        tuple(enclosed))


def straight_path(start, spec: GridSpec, i: int = 0, j: int = 1, points: int = 64) -> ExchangePath:
    """Straight segment from a configuration to its exchange (crosses coincidence in 1D)."""
    start = np.asarray(start, float)
    end = exchange_points(spec, start, i, j)
    s = np.linspace(0, 1, points + 1)[:, None]
    return ExchangePath((i, j), start + s * (end - start))


def exchange_phase(f: Field, path: ExchangePath, margin: float = 0.1) -> float:
    """Exchange phase along ``path`` reduced to (-pi, pi]."""
    return float(wrap_phase(unwrapped_phase_delta(f, path, margin)))


def pointwise_phase(f: Field, i: int, j: int, eps: float = NODE_EPS) -> tuple[float, float]:
    """Phase of psi(Pc) relative to psi(c) from grid values.

    Returns (gamma, spread) where spread is the largest deviation of any
    off-node point from gamma.  Needed in one dimension, where every exchange
    path passes through the coincidence set.
    """
    if f.is_spinor:
        raise GridMismatch("pointwise phase needs a scalar field")
    g = exchange(f, i, j)
    ok = ~(node_mask(f, eps) | node_mask(g, eps))
    if not ok.any():
        raise NodeProximity("no off-node points")
    prod = g.values[ok] * np.conj(f.values[ok])
    gamma = float(np.angle(prod.sum()))
    spread = float(np.abs(wrap_phase(np.angle(prod) - gamma)).max())
    return float(wrap_phase(gamma)), spread


# ---------------------------------------------------------------- support topology

def _coincidence_band(spec: GridSpec) -> np.ndarray:
    band = np.zeros(spec.shape, bool)
    if spec.frame == "relative":
        c = [p // 2 for p in spec.points]
        sl = tuple(slice(ci - 1, ci + 2) for ci in c)
        band[sl] = True
        return band
    idx = [np.arange(p).reshape([-1 if a == b else 1 for b in range(spec.n_axes)])
           for a, p in enumerate(spec.points)]
    for i in range(spec.n_particles):
        for j in range(i + 1, spec.n_particles):
            near = np.ones(spec.shape, bool)
            for a, b in zip(spec.particle_axes(i), spec.particle_axes(j)):
                near = near & (np.abs(idx[a] - idx[b]) <= 1)
            band |= near
    return band


def _exchange_index(spec: GridSpec, idx: tuple, i: int, j: int) -> tuple:
    idx = list(idx)
    if spec.frame == "relative":
        return tuple((-k) % p for k, p in zip(idx, spec.points))
    for a, b in zip(spec.particle_axes(i), spec.particle_axes(j)):
        idx[a], idx[b] = idx[b], idx[a]
    return tuple(idx)


def support_disconnected(f: AnyField, eps: float = NODE_EPS) -> tuple[bool, dict]:
    """Is the exchange orbit of the main support point split across components?

    The support is the off-node set joined with a one-cell band around the
    coincidence set, so that a node along x = y (one dimension) does not by
    itself count as a split.
    """
    spec = f.spec
    region = ~node_mask(f, eps) | _coincidence_band(spec)
    labels, count = ndimage.label(region)
    ref = np.unravel_index(int(np.argmax(amplitude(f))), spec.shape)
    info = {"components": int(count), "pairs": {}}
    split = False
    for i in range(spec.n_particles):
        for j in range(i + 1, spec.n_particles):
            other = _exchange_index(spec, ref, i, j)
            same = labels[ref] == labels[other]
            info["pairs"][f"{i + 1}{j + 1}"] = bool(same)
            split |= not same
    return split, info


# ---------------------------------------------------------------- reports

@dataclass
class SymmetryReport:
    velocity_residual: float
    drift_residual: float
    amplitude_residual: float
    phases: list = dc_field(default_factory=list)
    rejected_paths: list = dc_field(default_factory=list)
    verdict: str = "Inconsistent"
    gamma: float | None = None
    tolerances: dict = dc_field(default_factory=dict)
    convention: str = PHASE_CONVENTION
    notes: list = dc_field(default_factory=list)
    support: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)

    def to_text(self) -> str:
        from .scenarios import flatten
        return "\n".join(f"{k}={v}" for k, v in flatten(self.to_dict()).items()) + "\n"


def _phase_close(a: float, b: float, tol: float) -> bool:
    return abs(float(wrap_phase(a - b))) < tol


def classify(f: AnyField, paths: list[ExchangePath] | None = None, samples=None,
             tol: float = RESIDUAL_TOL, phase_tol: float | None = None) -> SymmetryReport:
    """Boson / Fermion / Anyon / Degenerate / Inconsistent verdict with its evidence."""
    if f.is_spinor:
        from .spin_protocol import verify_total_symmetry
        return verify_total_symmetry(f).as_symmetry_report()
    spec = f.spec
    if phase_tol is None:
        phase_tol = ANYON_PHASE_TOL if f.cut is not None else PHASE_TOL
    n = spec.n_particles
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    vres = max(velocity_exchange_residual(f, i, j, samples) for i, j in pairs)
    dres = max(drift_exchange_residual(f, i, j, samples) for i, j in pairs)
    ares = max(amplitude_exchange_residual(f, i, j) for i, j in pairs)
    split, support = support_disconnected(f)
    rep = SymmetryReport(vres, dres, ares, support=support,
                         tolerances={"residual": tol, "phase": phase_tol, "node_eps": NODE_EPS})
    if split:
        rep.verdict = "Degenerate"
        rep.notes.append("support splits across the exchange orbit; no single exchange phase is defined")
        return rep
    # phases
    route_paths = [p for p in (paths or [])]
    if not route_paths and spec.dim >= 2 and spec.frame == "relative":
        start = _default_start(f)
        route_paths = [rotation_path(spec, start, 0, 1, 1)]
    for p in route_paths:
        try:
            g = exchange_phase(f, p)
            rep.phases.append({"pair": f"{p.pair[0] + 1}{p.pair[1] + 1}", "gamma": g,
                               "winding": p.winding, "handedness": p.handedness, "route": "transport"})
        except (NodeProximity, PhaseAliasing, GridMismatch) as exc:
            rep.rejected_paths.append({"pair": f"{p.pair[0] + 1}{p.pair[1] + 1}",
                                       "winding": p.winding, "reason": type(exc).__name__})
    covered = {ph["pair"] for ph in rep.phases}
    for i, j in pairs:
        key = f"{i + 1}{j + 1}"
        if key not in covered:
            g, spread = pointwise_phase(f, i, j)
            rep.phases.append({"pair": key, "gamma": g, "winding": 1, "handedness": None,
                               "route": "pointwise", "spread": spread})
    if max(vres, dres, ares) >= tol:
        rep.verdict = "Inconsistent"
        rep.notes.append("exchange residuals exceed tolerance")
        return rep
    if any(ph.get("spread", 0.0) >= phase_tol for ph in rep.phases):
        rep.verdict = "Inconsistent"
        rep.notes.append("pointwise exchange phase is not constant over the support")
        return rep
    # gamma per unit winding, per pair
    unit = {}
    for ph in rep.phases:
        w = ph["winding"]
        if w is None:
            continue
        if w == 1 or (w == -1 and ph["pair"] not in unit):
            unit.setdefault(ph["pair"], ph["gamma"] if w == 1 else -ph["gamma"])
    if not unit:
        rep.verdict = "Inconsistent"
        rep.notes.append("no admissible exchange path")
        return rep
    g0 = next(iter(unit.values()))
    if any(not _phase_close(g, g0, phase_tol) for g in unit.values()):
        rep.verdict = "Inconsistent"
        rep.notes.append("pair phases differ")
        return rep
    for ph in rep.phases:
        w = ph["winding"]
        if w is not None and not _phase_close(ph["gamma"], w * g0, phase_tol):
            rep.verdict = "Inconsistent"
            rep.notes.append("phase is not a whole multiple of the unit exchange phase")
            return rep
    rep.gamma = float(wrap_phase(g0))
    if _phase_close(g0, 0.0, phase_tol):
        rep.verdict = "Boson"
    elif _phase_close(g0, np.pi, phase_tol):
        rep.verdict = "Fermion"
    elif spec.dim == 2:
        rep.verdict = f"Anyon({rep.gamma:.6f})"
    else:
        rep.verdict = "Inconsistent"
        rep.notes.append("phase other than 0 or pi outside two dimensions")
    return rep


def _default_start(f: AnyField) -> np.ndarray:
    spec = f.spec
    idx = np.unravel_index(int(np.argmax(amplitude(f))), spec.shape)
    r = spec.coords_of(np.array(idx))
    return np.concatenate([r, np.zeros_like(r)])


# ---------------------------------------------------------------- n-particle consistency

def pairwise_phase_consistency(f: Field, paths: dict | None = None, tol: float = PHASE_TOL,
                               eps: float = NODE_EPS) -> dict:
    """Check that every pair shares one exchange phase and that phases compose.

    With ``paths`` (pair -> ExchangePath) phases come from transport; otherwise
    from the pointwise route.  For particles (i, j, k) the product
    P_jk P_ik P_jk equals P_ij, so gamma_jk + gamma_ik + gamma_jk must match
    gamma_ij modulo 2 pi.
    """
    n = f.spec.n_particles
    if n < 3:
        raise PilotWaveError("pairwise consistency needs at least three particles")
    gam = {}
    spreads = {}
    for i in range(n):
        for j in range(i + 1, n):
            key = (i, j)
            if paths and key in paths:
                gam[key] = exchange_phase(f, paths[key])
                spreads[key] = 0.0
            else:
                gam[key], spreads[key] = pointwise_phase(f, i, j, eps)
    vals = list(gam.values())
    spread = max(abs(float(wrap_phase(v - vals[0]))) for v in vals)
    i, j, k = 0, 1, 2
    composed = gam[(j, k)] + gam[(i, k)] + gam[(j, k)]
    composed_err = abs(float(wrap_phase(composed - gam[(i, j)])))
    # pointwise chain through intermediate configurations
    e1 = exchange(f, j, k)
    e2 = exchange(exchange(f, i, k), j, k)
    e3 = exchange(exchange(exchange(f, j, k), i, k), j, k)
    direct = exchange(f, i, j)
    ok = ~(node_mask(f, eps) | node_mask(e1, eps) | node_mask(e2, eps) | node_mask(e3, eps))
    steps = (np.angle(e1.values[ok] * np.conj(f.values[ok]))
             + np.angle(e2.values[ok] * np.conj(e1.values[ok]))
             + np.angle(e3.values[ok] * np.conj(e2.values[ok])))
    ref = np.angle(direct.values[ok] * np.conj(f.values[ok]))
    chain_err = float(np.abs(wrap_phase(steps - ref)).max())
    bit_equal = bool(np.array_equal(e3.values, direct.values))
    return {
        "gammas": {f"{a + 1}{b + 1}": float(v) for (a, b), v in gam.items()},
        "spreads": {f"{a + 1}{b + 1}": float(v) for (a, b), v in spreads.items()},
        "max_pair_difference": spread,
        "composed_gamma": float(wrap_phase(composed)),
        "composed_error": composed_err,
        "chain_error": chain_err,
        "composed_map_equals_direct": bit_equal,
        "consistent": spread < tol and composed_err < tol and max(spreads.values()) < tol,
        "tolerance": tol,
    }


def winding_phase_table(f: Field, start, windings=(-2, -1, 1, 2), pair=(0, 1),
                        tol: float = ANYON_PHASE_TOL, points_per_half_turn: int = 64) -> dict:
    """Exchange phase for paths that turn the pair by ``n * pi``.

    Reports gamma(n) wrapped to (-pi, pi] and whether gamma(n) = n * gamma(1).
    """
    if f.spec.dim != 2:
        raise GridMismatch("winding classes are a two-dimensional notion")
    table, raw, rejected = {}, {}, {}
    for n in windings:
        path = rotation_path(f.spec, start, pair[0], pair[1], n, points_per_half_turn)
        try:
            d = unwrapped_phase_delta(f, path)
        except (NodeProximity, PhaseAliasing) as exc:
            rejected[n] = type(exc).__name__
            continue
        raw[n] = d
        table[n] = float(wrap_phase(d))
    base = table.get(1)
    if base is None and -1 in table:
        base = -table[-1]
    errors = {n: abs(float(wrap_phase(g - n * base))) for n, g in table.items()} if base is not None else {}
    handed_ok = True
    if 1 in table and -1 in table:
        handed_ok = _phase_close(table[1], -table[-1], tol)
    return {
        "gamma": table,
        "unwrapped": raw,
        "gamma_unit": None if base is None else float(base),
        "errors": errors,
        "rejected": rejected,
        "handedness_consistent": handed_ok,
        "consistent": bool(errors) and max(errors.values()) < tol and handed_ok,
        "tolerance": tol,
        "convention": PHASE_CONVENTION,
    }


def transport_along(f: Field, path: ExchangePath) -> float:
    """Unwrapped transport without reduction (additive under concatenation)."""
    return transport_vertices(f, path.grid_vertices(f.spec))
