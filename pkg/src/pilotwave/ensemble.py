"""Quantum-equilibrium sampling and ensemble-level checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .configspace import AnyField, GridSpec
from .errors import EquivarianceError, NormalizationError
from .guidance import OK, NelsonParams, TrajectoryEnsemble, integrate_nelson, static_snapshots

DEFAULT_BINS = 32


class AliasTable:
    """Walker/Vose alias table for O(1) draws from a discrete distribution."""

    def __init__(self, weights: np.ndarray):
        p = np.asarray(weights, float).ravel()
        total = p.sum()
        if not total > 0 or not np.isfinite(total):
            raise NormalizationError("density is zero or not finite")
        n = p.size
        scaled = p * (n / total)
        prob = np.zeros(n)
        alias = np.zeros(n, np.int64)
        small = list(np.nonzero(scaled < 1.0)[0][::-1])
        large = list(np.nonzero(scaled >= 1.0)[0][::-1])
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        for rest in (large, small):
            for g in rest:
                prob[g] = 1.0
        self.prob, self.alias, self.n = prob, alias, n

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        k = rng.integers(0, self.n, size=count)
        u = rng.random(count)
        return np.where(u < self.prob[k], k, self.alias[k])


def sample_density(f: AnyField, count: int, seed: int) -> np.ndarray:
    """Configurations drawn from |psi|^2 (cell masses), jittered uniformly within cells."""
    spec = f.spec
    if spec.frame != "absolute":
        raise EquivarianceError("sampling is defined for absolute-frame grids")
    rng = np.random.default_rng(seed)
    table = AliasTable(f.density)
    flat = table.draw(rng, count)
    idx = np.stack(np.unravel_index(flat, spec.shape), axis=1)
    jitter = rng.random((count, spec.n_axes)) - 0.5
    return spec.coords_of(idx) + jitter * spec.spacing


@dataclass
class DensityHistogram:
    edges: list
    counts: np.ndarray
    total: int
    mode: str = "probability"
    axes: tuple = ()

    def __post_init__(self):
        if int(self.counts.sum()) != self.total:
            raise ValueError("histogram counts must sum to the sample total")

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / max(self.total, 1)


@dataclass
class EquilibriumMetric:
    tv: float
    chi2: float
    dof: int
    samples: int
    reference: str
    time: float | None = None
    per_axis_tv: list = dc_field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.tv <= 1.0 + 1e-12:
            raise ValueError("total variation must lie in [0, 1]")


def cell_edges(spec: GridSpec, axis: int, bins: int) -> np.ndarray:
    """Bin edges on cell boundaries (cells centred on grid points)."""
    N = spec.points[axis]
    h = spec.spacing[axis]
    cuts = np.rint(np.linspace(0, N, bins + 1)).astype(int)
    return -spec.extent[axis] - 0.5 * h + cuts * h


def _reference_marginal(f: AnyField, axis: int, edges: np.ndarray) -> np.ndarray:
    spec = f.spec
    rho = f.density
    other = tuple(a for a in range(spec.n_axes) if a != axis)
    marg = rho.sum(axis=other) if other else rho
    marg = marg / marg.sum()
    centers = spec.axis(axis)
    which = np.clip(np.searchsorted(edges, centers, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(which, weights=marg, minlength=len(edges) - 1)


def _wrap_periodic(spec: GridSpec, x: np.ndarray, axis: int) -> np.ndarray:
    L, h = spec.extent[axis], spec.spacing[axis]
    lo = -L - 0.5 * h
    return lo + np.mod(x - lo, 2 * L)


def marginal_histogram(points: np.ndarray, spec: GridSpec, axis: int, bins: int = DEFAULT_BINS) -> DensityHistogram:
    edges = cell_edges(spec, axis, bins)
    x = _wrap_periodic(spec, points[:, axis], axis)
    counts, _ = np.histogram(x, bins=edges)
    return DensityHistogram([edges], counts, int(counts.sum()), axes=(axis,))


def compare_to_density(points: np.ndarray, f: AnyField, bins: int = DEFAULT_BINS,
                       axes: Sequence[int] | None = None, time: float | None = None) -> EquilibriumMetric:
    """Largest per-axis TV distance between sample marginals and |psi|^2 marginals."""
    spec = f.spec
    axes = range(spec.n_axes) if axes is None else axes
    tvs, chi2, dof = [], 0.0, 0
    n = points.shape[0]
    for a in axes:
        hist = marginal_histogram(points, spec, a, bins)
        ref = _reference_marginal(f, a, hist.edges[0])
        emp = hist.probabilities
        tvs.append(0.5 * float(np.abs(emp - ref).sum()))
        use = ref * n >= 5
        chi2 += float((((hist.counts - n * ref) ** 2)[use] / (n * ref[use])).sum())
        dof += int(use.sum()) - 1
    return EquilibriumMetric(max(tvs), chi2, dof, n, "|psi_t|^2 marginals", time, tvs)


def chi2_pvalue(metric: EquilibriumMetric) -> float:
    return float(stats.chi2.sf(metric.chi2, metric.dof))


def equivariance_test(snapshots: Iterable[AnyField], ens: TrajectoryEnsemble, bins: int = DEFAULT_BINS,
                      times: Sequence[float] | None = None, max_halted: float = 0.01) -> list[EquilibriumMetric]:
    """TV distance between the trajectory histogram and |psi_t|^2 at each matching snapshot."""
    halted = float(np.mean(ens.flags[-1] != OK))
    if halted > max_halted:
        raise EquivarianceError(f"{halted:.2%} of trajectories halted (limit {max_halted:.0%})")
    want = None if times is None else np.asarray(times, float)
    out = []
    for f in snapshots:
        k = int(np.argmin(np.abs(ens.times - f.time)))
        if abs(ens.times[k] - f.time) > 1e-9:
            continue
        if want is not None and not np.any(np.abs(want - f.time) < 1e-9):
            continue
        live = ens.flags[k] == OK
        out.append(compare_to_density(ens.positions[k][live], f, bins, time=f.time))
    return out


def nelson_stationarity_test(f: AnyField, params: NelsonParams, count: int, T: float,
                             dt: float = 0.01, bins: int = DEFAULT_BINS,
                             sample_seed: int | None = None) -> tuple[EquilibriumMetric, TrajectoryEnsemble]:
    """Walkers started in |psi|^2 on a stationary state, compared with |psi|^2 after time T."""
    seed = params.seed if sample_seed is None else sample_seed
    starts = sample_density(f, count, seed)
    steps = int(round(T / dt))
    times = f.time + dt * np.arange(steps + 1)
    ens = integrate_nelson(static_snapshots(f, times), starts, params)
    halted = float(np.mean(ens.flags[-1] != OK))
    if halted > 0.01:
        raise EquivarianceError(f"{halted:.2%} of walkers halted")
    live = ens.flags[-1] == OK
    return compare_to_density(ens.positions[-1][live], f, bins, time=float(times[-1])), ens


def coincidence_monitor(ens: TrajectoryEnsemble, pair: tuple[int, int] = (0, 1),
                        extent: float | None = None) -> dict:
    """Inter-particle distance statistics for a two-particle (or selected pair) ensemble."""
    D = ens.meta.get("dim", 1)
    i, j = pair
    xi = ens.positions[:, :, i * D:(i + 1) * D]
    xj = ens.positions[:, :, j * D:(j + 1) * D]
    diff = xi - xj
    dist = np.linalg.norm(diff, axis=2)
    valid = ens.flags == OK
    dmask = np.where(valid, dist, np.inf)
    out = {
        "min_distance": np.min(dmask, axis=0),
        "max_separation": float(np.max(np.where(valid, dist, 0.0))),
        "halted": int(np.sum(ens.flags[-1] != OK)),
    }
    if D == 1:
        s = np.sign(diff[:, :, 0])
        ok_pairs = valid[1:] & valid[:-1]
        flips = (s[1:] * s[:-1] < 0) & ok_pairs
        out["sign_changes"] = flips.sum(axis=0)
        out["total_sign_changes"] = int(flips.sum())
        out["trajectories_with_crossings"] = int((flips.sum(axis=0) > 0).sum())
    if extent is not None:
        out["max_separation_over_extent"] = out["max_separation"] / extent
    return out


def write_histogram_csv(path, points: np.ndarray, f: AnyField, axis: int, bins: int = DEFAULT_BINS) -> None:
    hist = marginal_histogram(points, f.spec, axis, bins)
    e = hist.edges[0]
    ref = _reference_marginal(f, axis, e)
    width = np.diff(e)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "count", "density", "reference_density"])
        for k in range(len(width)):
            c = 0.5 * (e[k] + e[k + 1])
            w.writerow([f"{c:.17g}", int(hist.counts[k]),
                        f"{hist.counts[k] / max(hist.total, 1) / width[k]:.17g}",
                        f"{ref[k] / width[k]:.17g}"])


def binned_mean_velocity(ens: TrajectoryEnsemble, axis: int, edges: np.ndarray, k: int,
                         bin_axis: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bin average of the symmetric displacement (x_{k+1} - x_{k-1}) / (2 dt) along ``axis``.

    Walkers are binned by their coordinate ``bin_axis`` (default: ``axis``) at step k.

    For a stationary Nelson ensemble the forward displacement averages to the
    drift (current plus osmotic velocity); averaging forward and backward
    displacements cancels the osmotic part and leaves the current velocity.
    """
    dt_f = ens.times[k + 1] - ens.times[k]
    dt_b = ens.times[k] - ens.times[k - 1]
    x = ens.positions[k, :, axis]
    fwd = (ens.positions[k + 1, :, axis] - x) / dt_f
    bwd = (x - ens.positions[k - 1, :, axis]) / dt_b
    sym = 0.5 * (fwd + bwd)
    ok = (ens.flags[k + 1] == OK) & (ens.flags[k - 1] == OK)
    b = ens.positions[k, :, axis if bin_axis is None else bin_axis]
    which = np.searchsorted(edges, b, side="right") - 1
    nb = len(edges) - 1
    mean = np.full(nb, np.nan)
    err = np.full(nb, np.nan)
    cnt = np.zeros(nb, int)
    for b in range(nb):
        sel = ok & (which == b)
        cnt[b] = int(sel.sum())
        if cnt[b] > 1:
            mean[b] = sym[sel].mean()
            err[b] = sym[sel].std(ddof=1) / np.sqrt(cnt[b])
    return mean, err, cnt
