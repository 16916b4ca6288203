"""Scenario configs, task orchestration, and run reports.

A scenario is an INI file.  Key names carry their unit (``dt_time``,
``extent_length``, ``barrier_energy``); vectors are comma separated and box
lists look like ``lo:hi; lo:hi`` with comma-separated corners in two or more
dimensions.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Literal

import numpy as np
import scipy
from pydantic import AfterValidator, BaseModel, BeforeValidator, ConfigDict, Field as PField, ValidationError, model_validator

from .configspace import (Field, GridSpec, Initializer, Orbital, ParticleSpec, build_field,
                          write_pwf1)
from .ensemble import (coincidence_monitor, compare_to_density, equivariance_test,
                       nelson_stationarity_test, sample_density, write_histogram_csv)
from .errors import ConfigError, PilotWaveError
from .evolution import MagneticSpec, PotentialSpec, SplitStepper, StepperConfig, plateau
from .guidance import OK, NelsonParams, integrate_bohm
from .symmetry import classify, pairwise_phase_consistency, winding_phase_table

TASKS = ("evolve", "classify", "anyon-phase", "pairwise", "trajectories", "equivariance",
         "nelson", "coincidence", "spin-protocol")
BUNDLED = ("two_1d_symmetry", "two_2d_anyon_static", "three_1d_pairwise", "equilibrium_doublewell",
           "coincidence", "spin_boxes", "nelson_harmonic")


# ---------------------------------------------------------------- value parsing

def _split(v, sep=","):
    if isinstance(v, str):
        return [p.strip() for p in v.split(sep) if p.strip()]
    return v


def _boxes(v):
    if not isinstance(v, str):
        return v
    out = []
    for part in v.split(";"):
        if not part.strip():
            continue
        if ":" not in part:
            raise ValueError(f"box {part!r} is not lo:hi")
        lo, hi = part.split(":")
        out.append((tuple(float(x) for x in _split(lo)), tuple(float(x) for x in _split(hi))))
    return tuple(out)


def _interval(v):
    if isinstance(v, str):
        a, b = v.split(":")
        return (float(a), float(b))
    return v


FloatVec = Annotated[tuple[float, ...], BeforeValidator(_split)]
IntVec = Annotated[tuple[int, ...], BeforeValidator(_split)]
NameVec = Annotated[tuple[str, ...], BeforeValidator(_split)]
Boxes = Annotated[tuple[tuple[tuple[float, ...], tuple[float, ...]], ...], BeforeValidator(_boxes)]
Interval = Annotated[tuple[float, float], BeforeValidator(_interval)]


def _unit_sign(v: int) -> int:
    if v not in (1, -1):
        raise ValueError("sign must be 1 or -1")
    return v


Sign = Annotated[int, AfterValidator(_unit_sign)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenarioSection(_Section):
    name: str
    description: str = ""
    budget_minutes: float = PField(10.0, gt=0)
    seed: int = PField(0, ge=0)
    tasks: NameVec

    @model_validator(mode="after")
    def _known_tasks(self):
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ValueError(f"unknown tasks {bad}; choose from {list(TASKS)}")
        return self


class GridSection(_Section):
    particles: int = PField(ge=1, le=4)
    dim: int = PField(ge=1, le=3)
    points: int = PField(ge=8)
    extent_length: float = PField(gt=0)
    boundary: Literal["periodic", "hard-wall"] = "periodic"
    frame: Literal["absolute", "relative"] = "absolute"


class ParticlesSection(_Section):
    mass: float = PField(1.0, gt=0)
    charge: float = 1.0
    hbar: float = PField(1.0, gt=0)


class PotentialSection(_Section):
    kind: Literal["none", "harmonic", "double-well", "box-walls"] = "none"
    omega_frequency: float = PField(1.0, gt=0)
    center_length: float = 0.0
    separation_length: float = PField(1.0, gt=0)
    barrier_energy: float = PField(1.0, ge=0)
    wall_height_energy: float = PField(0.0, ge=0)
    boxes_length: Boxes = ()


class MagneticSection(_Section):
    amplitude_field: float = 0.0
    direction: FloatVec = (0.0, 0.0, 1.0)
    mu_moment: float = 1.0
    window_length: Boxes = ()
    ramp_length: float = PField(0.0, ge=0)
    pulse_time: Interval | None = None


class InitialSection(_Section):
    kind: Literal["product", "symmetrized", "disjoint-boxes", "anyon"]
    sign: Sign = 1
    alpha: float = 1.0
    beta_angle: float = 0.0
    nu: float = 0.0
    sigma_length: float = PField(1.0, gt=0)
    power: float = PField(1.0, ge=0)


class OrbitalSection(_Section):
    kind: Literal["gaussian", "hermite", "box", "plane-wave"]
    center_length: FloatVec = (0.0,)
    sigma_length: float = PField(1.0, gt=0)
    momentum_inverse_length: FloatVec = (0.0,)
    level: IntVec = (0,)
    omega_frequency: float = PField(1.0, gt=0)
    lo_length: FloatVec = (-1.0,)
    hi_length: FloatVec = (1.0,)
    power: float = PField(1.0, gt=0)


class StepperSection(_Section):
    dt_time: float = PField(gt=0)
    steps: int = PField(0, ge=0)
    stride: int = PField(1, ge=1)


class AnalysisSection(_Section):
    expect_verdict: str | None = None
    expect_gamma_angle: float | None = None
    residual_tol: float = PField(1e-6, gt=0)
    phase_tol: float = PField(1e-5, gt=0)
    anyon_phase_tol: float = PField(1e-3, gt=0)
    norm_tol: float = PField(1e-9, gt=0)
    windings: IntVec = (-2, -1, 1, 2)
    start_length: FloatVec | None = None
    trajectories: int = PField(1000, ge=1)
    snapshots: int = PField(5, ge=1)
    bins: int = PField(32, ge=2)
    tv_threshold: float = PField(0.05, gt=0, le=1)
    control_tv_min: float = PField(0.2, gt=0, le=1)
    walkers: int = PField(10000, ge=1)
    horizon_time: float = PField(1.0, ge=0)
    nelson_dt_time: float = PField(0.01, gt=0)
    expect_variance_length2: float | None = None
    variance_tol_length2: float = PField(0.02, gt=0)
    coincident_starts: int = PField(50, ge=1)
    separation_tol_fraction: float = PField(1e-6, gt=0)
    expect_crossings: Literal["none", "some", "report"] = "report"
    controls: bool = True


class SpinSection(_Section):
    points: int = PField(32, ge=8)
    extent_length: float = PField(4.0, gt=0)
    dt_time: float = PField(0.005, gt=0)
    wall_height_energy: float = PField(300.0, gt=0)
    sign: Sign = 1
    confine_time: float = PField(0.25, gt=0)
    pulse_steps: int = PField(10, ge=1)
    mu_moment: float = PField(1.0, gt=0)
    merge_time: float = PField(2.0, gt=0)
    samples: int = PField(2000, ge=1)
    trajectories: int = PField(200, ge=1)
    support_threshold: float = PField(0.05, gt=0, lt=1)
    dominance_threshold: float = PField(1 - 1e-8, gt=0, le=1)
    guidance_tol_length: float = PField(1e-6, gt=0)
    symmetry_tol: float = PField(1e-6, gt=0)
    fidelity_min: float = PField(1 - 1e-6, gt=0, le=1)


class OutputSection(_Section):
    dir: str = "out"
    dump_fields: bool = True
    trajectory_csv: bool = True
    histogram_csv: bool = True


class ScenarioConfig(_Section):
    scenario: ScenarioSection
    grid: GridSection | None = None
    particles: ParticlesSection = ParticlesSection()
    potential: PotentialSection = PotentialSection()
    magnetic: MagneticSection = MagneticSection()
    initial: InitialSection | None = None
    orbitals: tuple[OrbitalSection, ...] = ()
    stepper: StepperSection | None = None
    analysis: AnalysisSection = AnalysisSection()
    spin: SpinSection = SpinSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _needs(self):
        scalar = [t for t in self.scenario.tasks if t != "spin-protocol"]
        if scalar and (self.grid is None or self.initial is None):
            raise ValueError(f"tasks {scalar} need [grid] and [initial] sections")
        moving = {"evolve", "trajectories", "equivariance", "coincidence"} & set(self.scenario.tasks)
        if moving and self.stepper is None:
            raise ValueError(f"tasks {sorted(moving)} need a [stepper] section")
        return self

    # ---- conversion to module objects

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return GridSpec.uniform(g.particles, g.dim, g.points, g.extent_length, boundary=g.boundary, frame=g.frame)

    def particle_specs(self) -> tuple[ParticleSpec, ...]:
        p = self.particles
        return tuple(ParticleSpec(p.mass, p.charge) for _ in range(self.grid.particles))

    def potential_spec(self) -> PotentialSpec:
        p = self.potential
        if p.kind == "harmonic":
            return PotentialSpec("harmonic", stiffness=self.particles.mass * p.omega_frequency ** 2,
                                 center=p.center_length)
        if p.kind == "double-well":
            return PotentialSpec("double-well", separation=p.separation_length, barrier=p.barrier_energy)
        if p.kind == "box-walls":
            return PotentialSpec("box-walls", boxes=p.boxes_length, wall_height=p.wall_height_energy)
        return PotentialSpec()

    def magnetic_spec(self) -> MagneticSpec:
        m = self.magnetic
        if m.amplitude_field == 0.0:
            return MagneticSpec()
        window = None
        if m.window_length:
            lo, hi = m.window_length[0]
            window = plateau(lo, hi, m.ramp_length)
        return MagneticSpec(tuple(m.direction), m.amplitude_field, m.mu_moment, window, m.pulse_time)

    def orbital_objects(self) -> tuple[Orbital, ...]:
        out = []
        for o in self.orbitals:
            if o.kind == "gaussian":
                out.append(Orbital.make("gaussian", center=o.center_length, sigma=o.sigma_length,
                                        momentum=o.momentum_inverse_length))
            elif o.kind == "hermite":
                out.append(Orbital.make("hermite", level=o.level, omega=o.omega_frequency))
            elif o.kind == "box":
                out.append(Orbital.make("box", lo=o.lo_length, hi=o.hi_length, power=o.power,
                                        momentum=o.momentum_inverse_length))
            else:
                out.append(Orbital.make("plane-wave", momentum=o.momentum_inverse_length))
        return tuple(out)

    def initializer(self) -> Initializer:
        i = self.initial
        return Initializer(i.kind, self.orbital_objects(), i.sign, i.alpha, i.beta_angle, i.nu,
                           i.sigma_length, i.power)

    def stepper_config(self, threads: int | None = None) -> StepperConfig:
        return StepperConfig(self.stepper.dt_time, self.particles.hbar, workers=threads)

    def spin_settings(self, threads: int | None = None):
        from .spin_protocol import ProtocolSettings
        s = self.spin
        return ProtocolSettings(points=s.points, extent=s.extent_length, dt=s.dt_time,
                                wall_height=s.wall_height_energy, sign=s.sign, confine_time=s.confine_time,
                                pulse_steps=s.pulse_steps, mu=s.mu_moment, merge_time=s.merge_time,
                                samples=s.samples, trajectories=s.trajectories, seed=self.scenario.seed,
                                support_threshold=s.support_threshold, workers=threads)


def _section_dicts(cp: configparser.ConfigParser) -> dict:
    data: dict[str, Any] = {}
    orbitals = []
    for name in cp.sections():
        body = dict(cp.items(name))
        if name.startswith("orbital."):
            try:
                k = int(name.split(".", 1)[1])
            except ValueError:
                raise ConfigError(f"orbital section {name!r} must be numbered") from None
            orbitals.append((k, body))
        else:
            data[name] = body
    if orbitals:
        data["orbitals"] = [b for _, b in sorted(orbitals)]
    return data


def parse_config(text: str, overrides: dict | None = None) -> ScenarioConfig:
    """Parse and validate INI text; every failure surfaces as ConfigError."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    data = _section_dicts(cp)
    for (sec, key), val in (overrides or {}).items():
        data.setdefault(sec, {})[key] = val
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    revalidate(cfg)
    return cfg


def revalidate(cfg: ScenarioConfig, threads: int | None = None) -> None:
    """Build the module objects once so their own preconditions run before any output."""
    try:
        if cfg.grid is not None:
            spec = cfg.grid_spec()
            f = build_field(spec, cfg.initializer(), cfg.particle_specs(), cfg.particles.hbar)
            if cfg.stepper is not None and spec.frame == "absolute":
                SplitStepper(spec, cfg.potential_spec(), cfg.stepper_config(threads), f.particles,
                             cfg.magnetic_spec())
        if "spin-protocol" in cfg.scenario.tasks:
            s = cfg.spin_settings()
            GridSpec.uniform(2, 2, s.points, s.extent)
            s.layout().validate(GridSpec.uniform(2, 2, s.points, s.extent))
    except (PilotWaveError, ValueError, TypeError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from None


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("pilotwave") / "scenarios_data" / f"{name}.ini"))


def load_config(path_or_name: str, overrides: dict | None = None) -> ScenarioConfig:
    p = Path(path_or_name)
    if not p.exists() and path_or_name in BUNDLED:
        p = bundled_path(path_or_name)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path_or_name!r}: {exc}") from None
    return parse_config(text, overrides)


# ---------------------------------------------------------------- reports

def flatten(d, prefix: str = "") -> dict:
    """Nested dicts/lists to dotted ``key -> value`` pairs."""
    out: dict[str, Any] = {}
    if isinstance(d, dict):
        for k in sorted(d, key=str):
            out.update(flatten(d[k], f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(d, (list, tuple)):
        if not d:
            out[prefix] = "[]"
        for i, v in enumerate(d):
            out.update(flatten(v, f"{prefix}[{i}]"))
    else:
        out[prefix] = _plain(d)
    return out


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return _plain(obj)


@dataclass
class Check:
    name: str
    value: Any
    tolerance: Any
    comparison: str
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "value": _plain(self.value), "tolerance": _plain(self.tolerance),
                "comparison": self.comparison, "passed": bool(self.passed)}


def _lt(name, value, tol) -> Check:
    return Check(name, value, tol, "<", bool(np.isfinite(value) and value < tol))


def _gt(name, value, tol) -> Check:
    return Check(name, value, tol, ">", bool(np.isfinite(value) and value > tol))


def _eq(name, value, want) -> Check:
    return Check(name, value, want, "==", value == want)


@dataclass
class RunReport:
    scenario: str
    config: dict
    seed: int
    versions: dict
    timings: dict = dc_field(default_factory=dict)
    payload: dict = dc_field(default_factory=dict)
    checks: list = dc_field(default_factory=list)
    artifacts: list = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        return _jsonable({
            "scenario": self.scenario, "seed": self.seed, "config": self.config,
            "versions": self.versions, "timings": self.timings, "payload": self.payload,
            "checks": [c.to_dict() for c in self.checks], "artifacts": sorted(self.artifacts),
            "passed": self.passed,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in flatten(self.to_dict()).items())

    def write(self, out_dir: Path) -> None:
        (out_dir / "report.json").write_text(self.to_json())
        (out_dir / "report.txt").write_text(self.to_text())

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        checks = [Check(c["name"], c["value"], c["tolerance"], c["comparison"], c["passed"]) for c in d["checks"]]
        return cls(d["scenario"], d["config"], d["seed"], d["versions"], d.get("timings", {}),
                   d.get("payload", {}), checks, d.get("artifacts", []))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def versions() -> dict:
    from . import __version__
    import pydantic
    return {"pilotwave": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pydantic": pydantic.__version__}


def _subseed(seed: int, task: str) -> int:
    return int(np.random.SeedSequence([seed, TASKS.index(task)]).generate_state(1)[0])


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- tasks

class _Ctx:
    def __init__(self, cfg: ScenarioConfig, out: Path, threads: int | None):
        self.cfg, self.out, self.threads = cfg, out, threads
        self.report: RunReport | None = None

    def field(self) -> Field:
        c = self.cfg
        return build_field(c.grid_spec(), c.initializer(), c.particle_specs(), c.particles.hbar)

    def stepper(self, spec: GridSpec) -> SplitStepper:
        c = self.cfg
        return SplitStepper(spec, c.potential_spec(), c.stepper_config(self.threads), c.particle_specs(),
                            c.magnetic_spec())

    def artifact(self, name: str) -> Path:
        p = self.out / name
        self.report.artifacts.append(name)
        return p


def _task_evolve(ctx: _Ctx) -> tuple[dict, list]:
    c = ctx.cfg
    f0 = ctx.field()
    st = ctx.stepper(f0.spec)
    f = st.run(f0, c.stepper.steps)
    drift = abs(f.norm() - f0.norm())
    if c.output.dump_fields:
        write_pwf1(f0, ctx.artifact("field_initial.pwf1"))
        write_pwf1(f, ctx.artifact("field_final.pwf1"))
    return {"steps": c.stepper.steps, "final_time": f.time, "norm_drift": drift}, \
        [_lt("evolve.norm_drift", drift, c.analysis.norm_tol)]


def _task_classify(ctx: _Ctx) -> tuple[dict, list]:
    a = ctx.cfg.analysis
    f = ctx.field()
    rep = classify(f, tol=a.residual_tol, phase_tol=a.anyon_phase_tol if f.cut is not None else a.phase_tol)
    (ctx.artifact("symmetry_report.txt")).write_text(rep.to_text())
    checks = []
    if a.expect_verdict is not None:
        want = a.expect_verdict
        got = rep.verdict.split("(")[0] if want == "Anyon" else rep.verdict
        checks.append(_eq("classify.verdict", got, want))
    if a.expect_gamma_angle is not None and rep.gamma is not None:
        err = abs(float(np.angle(np.exp(1j * (rep.gamma - a.expect_gamma_angle)))))
        checks.append(_lt("classify.gamma_error", err, a.phase_tol if f.cut is None else a.anyon_phase_tol))
    if rep.verdict != "Degenerate":
        checks.append(_lt("classify.velocity_residual", rep.velocity_residual, a.residual_tol))
        checks.append(_lt("classify.drift_residual", rep.drift_residual, a.residual_tol))
        checks.append(_lt("classify.amplitude_residual", rep.amplitude_residual, a.residual_tol))
    else:
        checks.append(_lt("classify.velocity_residual", rep.velocity_residual, a.residual_tol))
    return rep.to_dict(), checks


def _task_anyon(ctx: _Ctx) -> tuple[dict, list]:
    a = ctx.cfg.analysis
    f = ctx.field()
    start = a.start_length
    if start is None:
        from .symmetry import _default_start
        start = _default_start(f)
    tab = winding_phase_table(f, np.asarray(start, float), a.windings, tol=a.anyon_phase_tol)
    checks = [Check("anyon.table_consistent", tab["consistent"], a.anyon_phase_tol, "all errors <",
                    bool(tab["consistent"]))]
    if a.expect_gamma_angle is not None:
        for n, g in tab["gamma"].items():
            err = abs(float(np.angle(np.exp(1j * (g - n * a.expect_gamma_angle)))))
            checks.append(_lt(f"anyon.gamma_error[{n}]", err, a.anyon_phase_tol))
    checks.append(_eq("anyon.rejected_paths", len(tab["rejected"]), 0))
    return tab, checks


def _task_pairwise(ctx: _Ctx) -> tuple[dict, list]:
    a = ctx.cfg.analysis
    f = ctx.field()
    res = pairwise_phase_consistency(f, tol=a.phase_tol)
    checks = [_lt("pairwise.composed_error", res["composed_error"], a.phase_tol),
              _lt("pairwise.max_pair_difference", res["max_pair_difference"], a.phase_tol)]
    if a.expect_gamma_angle is not None:
        for k, g in res["gammas"].items():
            err = abs(float(np.angle(np.exp(1j * (g - a.expect_gamma_angle)))))
            checks.append(_lt(f"pairwise.gamma_error[{k}]", err, a.phase_tol))
    return res, checks


def _snapshot_times(all_times: np.ndarray, count: int) -> list[float]:
    pick = np.unique(np.rint(np.linspace(0, len(all_times) - 1, count + 1)[1:]).astype(int))
    return [float(all_times[k]) for k in pick]


def _keep(stream, times: list[float], store: list):
    for f in stream:
        if any(abs(f.time - t) < 1e-9 for t in times):
            store.append(f)
        yield f


def _task_trajectories(ctx: _Ctx) -> tuple[dict, list]:
    c = ctx.cfg
    f0 = ctx.field()
    starts = sample_density(f0, c.analysis.trajectories, _subseed(c.scenario.seed, "trajectories"))
    ens = integrate_bohm(ctx.stepper(f0.spec).evolve(f0, c.stepper.steps, c.stepper.stride), starts)
    if c.output.trajectory_csv:
        ens.to_csv(ctx.artifact("trajectories_bohm.csv"))
    return {"count": ens.n_traj, "final_time": float(ens.times[-1]), "halted_fraction": ens.halted_fraction(),
            "final_mean": ens.positions[-1].mean(axis=0)}, [_lt("trajectories.halted_fraction",
                                                               ens.halted_fraction(), 0.01)]


def _task_equivariance(ctx: _Ctx) -> tuple[dict, list]:
    c, a = ctx.cfg, ctx.cfg.analysis
    f0 = ctx.field()
    starts = sample_density(f0, a.trajectories, _subseed(c.scenario.seed, "equivariance"))
    steps, stride = c.stepper.steps, c.stepper.stride
    grid_times = np.array(sorted(set(list(range(0, steps + 1, stride)) + [steps]))) * c.stepper.dt_time + f0.time
    want = _snapshot_times(grid_times, a.snapshots)
    kept: list = []
    ens = integrate_bohm(_keep(ctx.stepper(f0.spec).evolve(f0, steps, stride), want, kept), starts)
    metrics = equivariance_test(kept, ens, a.bins, want)
    payload = {"times": [m.time for m in metrics], "tv": [m.tv for m in metrics],
               "chi2": [m.chi2 for m in metrics], "dof": [m.dof for m in metrics],
               "halted_fraction": ens.halted_fraction(), "trajectories": ens.n_traj}
    checks = [_lt(f"equivariance.tv[t={m.time:.6g}]", m.tv, a.tv_threshold) for m in metrics]
    if a.controls:
        rng = np.random.default_rng(_subseed(c.scenario.seed, "equivariance") + 1)
        L = np.asarray(f0.spec.extent)
        uni = rng.uniform(-L, L, size=(a.trajectories, f0.spec.n_axes))
        ctrl = compare_to_density(uni, f0, a.bins, time=f0.time)
        payload["uniform_start_control_tv"] = ctrl.tv
        checks.append(_gt("equivariance.uniform_control_tv", ctrl.tv, a.control_tv_min))
    if c.output.histogram_csv and kept:
        k = int(np.argmin(np.abs(ens.times - kept[-1].time)))
        write_histogram_csv(ctx.artifact("histogram_axis0.csv"), ens.positions[k][ens.flags[k] == OK],
                            kept[-1], 0, a.bins)
    if c.output.trajectory_csv:
        ens.to_csv(ctx.artifact("trajectories_equivariance.csv"))
    return payload, checks


def _task_nelson(ctx: _Ctx) -> tuple[dict, list]:
    c, a = ctx.cfg, ctx.cfg.analysis
    f0 = ctx.field()
    seed = _subseed(c.scenario.seed, "nelson")
    m, ens = nelson_stationarity_test(f0, NelsonParams(seed=seed), a.walkers, a.horizon_time,
                                      a.nelson_dt_time, a.bins, sample_seed=seed + 1)
    var = ens.positions[-1].var(axis=0)
    payload = {"tv": m.tv, "chi2": m.chi2, "dof": m.dof, "variance": var, "walkers": a.walkers,
               "horizon_time": a.horizon_time}
    checks = [_lt("nelson.tv", m.tv, a.tv_threshold)]
    if a.expect_variance_length2 is not None:
        checks.append(_lt("nelson.variance_error", float(np.abs(var - a.expect_variance_length2).max()),
                          a.variance_tol_length2))
    if a.controls:
        mc, _ = nelson_stationarity_test(f0, NelsonParams(seed=seed, drift_scale=0.0), a.walkers,
                                         a.horizon_time, a.nelson_dt_time, a.bins, sample_seed=seed + 1)
        payload["zero_drift_control_tv"] = mc.tv
        checks.append(_gt("nelson.zero_drift_control_tv", mc.tv, a.control_tv_min))
    return payload, checks


def coincident_starts(f: Field, count: int, seed: int) -> np.ndarray:
    """Configurations with every particle at one shared point, drawn from the diagonal density."""
    spec = f.spec
    n, D = spec.n_particles, spec.dim
    idx = np.indices(spec.points[:D]).reshape(D, -1).T
    full = np.concatenate([idx] * n, axis=1)
    w = f.density[tuple(full.T)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(w), size=count, replace=True, p=w / w.sum())
    return spec.coords_of(full[pick])


def _task_coincidence(ctx: _Ctx) -> tuple[dict, list]:
    c, a = ctx.cfg, ctx.cfg.analysis
    f0 = ctx.field()
    spec = f0.spec
    st = ctx.stepper(spec)
    steps, stride = c.stepper.steps, c.stepper.stride
    L = float(max(spec.extent))
    payload: dict = {}
    checks = []
    seed = _subseed(c.scenario.seed, "coincidence")
    diag = f0.density[tuple(np.concatenate([np.indices(spec.points[:spec.dim]).reshape(spec.dim, -1).T]
                                           * spec.n_particles, axis=1).T)]
    if diag.max() > 1e-12 * f0.density.max():
        starts = coincident_starts(f0, a.coincident_starts, seed)
        ens = integrate_bohm(st.evolve(f0, steps, stride), starts)
        mon = coincidence_monitor(ens, extent=L)
        payload["coincident"] = {"count": len(starts), "max_separation": mon["max_separation"],
                                 "halted": mon["halted"], "tolerance": a.separation_tol_fraction * L}
        checks.append(_lt("coincidence.max_separation", mon["max_separation"], a.separation_tol_fraction * L))
    else:
        payload["coincident"] = {"skipped": "the state vanishes on the coincidence set"}
    starts = sample_density(f0, a.trajectories, seed + 1)
    ens = integrate_bohm(st.evolve(f0, steps, stride), starts)
    mon = coincidence_monitor(ens, extent=L)
    payload["sampled"] = {"count": ens.n_traj, "halted": mon["halted"],
                          "min_distance": float(np.min(mon["min_distance"]))}
    if spec.dim == 1:
        payload["sampled"]["total_sign_changes"] = mon["total_sign_changes"]
        payload["sampled"]["trajectories_with_crossings"] = mon["trajectories_with_crossings"]
        if a.expect_crossings == "none":
            checks.append(_eq("coincidence.sign_changes", mon["total_sign_changes"], 0))
        elif a.expect_crossings == "some":
            checks.append(_gt("coincidence.sign_changes", mon["total_sign_changes"], 0))
    if c.output.trajectory_csv:
        ens.to_csv(ctx.artifact("trajectories_coincidence.csv"))
    return payload, checks


def _task_spin(ctx: _Ctx) -> tuple[dict, list]:
    from .spin_protocol import run_box_protocol, three_particle_consistency
    s = ctx.cfg.spin
    res = run_box_protocol(ctx.cfg.spin_settings(ctx.threads))
    res["three_particle"] = three_particle_consistency(sign=s.sign)
    dom = min(d["min_dominant_fraction"] for d in res["dominance"])
    matches = all(d["assignment_matches"] for d in res["dominance"])
    fin = res["final"]
    de = fin["delta_exp_i_gamma"]
    checks = [
        Check("spin.dominance_min", dom, s.dominance_threshold, ">=", bool(dom >= s.dominance_threshold)),
        _eq("spin.box_assignment_matches", matches, True),
        _lt("spin.effective_guidance_deviation", res["effective_guidance"]["max_deviation"], s.guidance_tol_length),
        Check("spin.pulse_fidelity", res["pulse"]["fidelity"], s.fidelity_min, ">=",
              bool(res["pulse"]["fidelity"] >= s.fidelity_min)),
        _eq("spin.merged_connected", res["merge"]["connected"], True),
        _lt("spin.final_exchange_residual", fin["pair_residuals"]["12"], s.symmetry_tol),
        _lt("spin.delta_exp_i_gamma_error", float(abs(complex(*de) - s.sign)), s.symmetry_tol),
        _eq("spin.three_particle_distinguishes", res["three_particle"]["distinguishes"], True),
    ]
    return res, checks


_RUNNERS = {
    "evolve": _task_evolve, "classify": _task_classify, "anyon-phase": _task_anyon,
    "pairwise": _task_pairwise, "trajectories": _task_trajectories, "equivariance": _task_equivariance,
    "nelson": _task_nelson, "coincidence": _task_coincidence, "spin-protocol": _task_spin,
}


def run_scenario(cfg: ScenarioConfig, out_dir: str | os.PathLike | None = None, threads: int | None = None,
                 tasks: tuple[str, ...] | None = None) -> RunReport:
    """Run the configured tasks, write artifacts and the report, and return the report."""
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    tasks = tuple(tasks) if tasks is not None else cfg.scenario.tasks
    missing = [t for t in tasks if t not in TASKS]
    if missing:
        raise ConfigError(f"unknown tasks {missing}")
    if set(tasks) - {"spin-protocol"} and (cfg.grid is None or cfg.initial is None):
        raise ConfigError("this task needs [grid] and [initial] sections")
    if {"evolve", "trajectories", "equivariance", "coincidence"} & set(tasks) and cfg.stepper is None:
        raise ConfigError("this task needs a [stepper] section")
    revalidate(cfg, threads)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Ctx(cfg, out, threads)
    report = RunReport(cfg.scenario.name, cfg.model_dump(mode="json"), cfg.scenario.seed, versions())
    ctx.report = report
    t_all = time.perf_counter()
    for task in tasks:
        t0 = time.perf_counter()
        payload, checks = _RUNNERS[task](ctx)
        report.timings[task] = time.perf_counter() - t0
        report.payload[task] = payload
        report.checks.extend(checks)
    total = time.perf_counter() - t_all
    report.timings["total"] = total
    report.timings["budget_seconds"] = cfg.scenario.budget_minutes * 60
    report.timings["within_budget"] = total <= cfg.scenario.budget_minutes * 60
    report.write(out)
    return report


# ---------------------------------------------------------------- diffs

def _close(a, b, atol: float, rtol: float) -> bool:
    if isinstance(a, bool) or isinstance(b, bool) or not isinstance(a, (int, float)) or not isinstance(b, (int, float)):
        return a == b
    if np.isnan(a) and np.isnan(b):
        return True
    return abs(a - b) <= atol + rtol * abs(b)


def diff_reports(a: RunReport | dict, b: RunReport | dict, atol: float = 0.0, rtol: float = 0.0) -> dict:
    """Field-by-field differences of two reports of the same scenario (timings and versions ignored)."""
    da = a.to_dict() if isinstance(a, RunReport) else a
    db = b.to_dict() if isinstance(b, RunReport) else b
    if da["scenario"] != db["scenario"]:
        raise PilotWaveError(f"scenario mismatch: {da['scenario']!r} vs {db['scenario']!r}")
    out: dict[str, list] = {}
    for part in ("config", "payload", "checks", "artifacts"):
        fa, fb = flatten(da.get(part, {})), flatten(db.get(part, {}))
        diffs = []
        for k in sorted(set(fa) | set(fb)):
            va, vb = fa.get(k), fb.get(k)
            if k not in fa or k not in fb or not _close(va, vb, atol, rtol):
                diffs.append({"key": k, "a": va, "b": vb})
        out[part] = diffs
    out["seed"] = [] if da["seed"] == db["seed"] else [{"key": "seed", "a": da["seed"], "b": db["seed"]}]
    out["identical"] = not any(out[p] for p in ("config", "payload", "checks", "artifacts", "seed"))
    return out
