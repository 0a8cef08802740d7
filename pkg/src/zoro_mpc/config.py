"""Scenario configuration, reference generation and noise-bound estimation.

Scenario files are UTF-8 JSON validated against a strict schema: unknown keys
are rejected and every omitted field takes the default listed here.  The
defaults for weights, bounds, horizon and noise are ours; they are not
calibrated to any particular robot.
"""

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.interpolate import CubicSpline

from .model import NU, NX, OMEGA, THETA, V, DiffDriveParams, DiscretizationParams, rollout, wrap_angle
from .ocp import Bounds, Obstacle, OcpSpec, ReferenceTrajectory, Weights
from .simulator import PlantModel, Scenario
from .tube import NoiseModel, ScalarTube, feedback_gain
from .zoro_solver import TubeModel, ZoroSettings

REFERENCE_KINDS = ("line", "circle", "figure-eight", "waypoint-spline")
MIN_NOISE_SAMPLES = 31


class ConfigError(ValueError):
    """Invalid scenario file; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


# --------------------------------------------------------------------------
# schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DiscretizationConfig(_Strict):
    dt: float = Field(0.05, gt=0)
    substeps: int = Field(1, ge=1)


class ObstacleConfig(_Strict):
    cx: float
    cy: float
    radius: float = Field(ge=0)


class WeightsConfig(_Strict):
    Q: List[float] = Field(default_factory=lambda: [10.0, 10.0, 1.0, 0.1, 0.1],
                           min_length=NX, max_length=NX)
    R: List[float] = Field(default_factory=lambda: [0.1, 0.1], min_length=NU, max_length=NU)
    Q_e: Optional[List[float]] = Field(None, min_length=NX, max_length=NX)

    @field_validator("Q", "R", "Q_e")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and any(x < 0 for x in v):
            raise ValueError("weights must be non-negative")
        return v


class BoundsConfig(_Strict):
    v_min: float = -0.5
    v_max: float = 1.5
    omega_min: float = -1.5
    omega_max: float = 1.5
    a_min: float = -2.0
    a_max: float = 2.0
    alpha_min: float = -3.0
    alpha_max: float = 3.0


class NoiseConfig(_Strict):
    """Disturbance shape: ``diag`` (variances-like entries of a diagonal W) or a full ``W``."""

    diag: Optional[List[float]] = Field(
        default_factory=lambda: [0.006 ** 2] * 3 + [0.06 ** 2] * 2, min_length=NX, max_length=NX)
    W: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _one_form(self):
        if self.W is not None:
            if len(self.W) != NX or any(len(r) != NX for r in self.W):
                raise ValueError("W must be 5x5")
        elif self.diag is None:
            raise ValueError("give either diag or W")
        elif any(x < 0 for x in self.diag):
            raise ValueError("diag entries must be non-negative")
        return self

    def matrix(self):
        if self.W is not None:
            return np.array(self.W, dtype=float)
        return np.diag(np.array(self.diag, dtype=float))


class ReferenceConfig(_Strict):
    kind: Optional[Literal["line", "circle", "figure-eight", "waypoint-spline"]] = None
    params: dict = Field(default_factory=dict)
    file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.kind is None) == (self.file is None):
            raise ValueError("give exactly one of kind or file")
        return self


class ControllerConfig(_Strict):
    qp_iterations_per_sample: int = Field(2, ge=1)
    backoff_updates_per_sample: int = Field(2, ge=1)
    max_outer_iterations: int = Field(50, ge=1)
    max_sqp_iterations: int = Field(200, ge=1)
    tol_stationarity: float = Field(1e-10, gt=0)
    tol_feasibility: float = Field(1e-10, gt=0)
    levenberg: float = Field(1e-8, ge=0)
    slack_penalty_l1: float = Field(1e4, ge=0)
    slack_penalty_l2: float = Field(1e4, gt=0)
    solve_mode: Literal["realtime", "converge"] = "realtime"


class PlantConfig(_Strict):
    mode: Literal["ideal", "diff-drive-mismatch"] = "ideal"
    noise_mode: Literal["boundary", "interior", "off"] = "boundary"


class ScalarTubeConfig(_Strict):
    rho: float = Field(1.0, ge=0)
    eps_step: Optional[float] = Field(None, ge=0)
    eps0: Optional[float] = Field(None, ge=0)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    N: int = Field(ge=1)
    reference: ReferenceConfig
    discretization: DiscretizationConfig = Field(default_factory=DiscretizationConfig)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    bounds: BoundsConfig = Field(default_factory=BoundsConfig)
    obstacles: List[ObstacleConfig] = Field(default_factory=list)
    robot_radius: float = Field(0.5, gt=0)
    apply_accel_backoff: bool = False
    tau: float = Field(0.1, gt=0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    sigma0: Union[Literal["W", "zero"], List[List[float]]] = "W"
    scalar_tube: ScalarTubeConfig = Field(default_factory=ScalarTubeConfig)
    delay: Literal["dt", "none"] = "dt"
    initial_offset: List[float] = Field(default_factory=lambda: [0.0] * NX,
                                        min_length=NX, max_length=NX)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    plant: PlantConfig = Field(default_factory=PlantConfig)
    seed: int = 0
    steps: int = Field(200, ge=1)


def _error_key(loc):
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def parse_scenario(text, base_dir=None):
    """Validate scenario JSON text; raises :class:`ConfigError`."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = _error_key(err["loc"])
        raise ConfigError(f"{key}: {err['msg']}", key=key)
    if cfg.reference.file is not None and base_dir is not None:
        path = Path(cfg.reference.file)
        if not path.is_absolute():
            ref = cfg.reference.model_copy(update={"file": str(Path(base_dir) / path)})
            cfg = cfg.model_copy(update={"reference": ref})
    return cfg


def load_scenario(path):
    """Read and validate a scenario file."""
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), base_dir=path.parent)


def bundled_scenario(name):
    """One of the scenarios shipped with the package (``gauntlet``, ``gap``, ...)."""
    text = resources.files("zoro_mpc").joinpath("scenarios", f"{name}.json").read_text("utf-8")
    return parse_scenario(text)


def bundled_scenario_names():
    files = resources.files("zoro_mpc").joinpath("scenarios").iterdir()
    return sorted(Path(f.name).stem for f in files if f.name.endswith(".json"))


def dump_scenario(cfg):
    """Fully resolved config as JSON text."""
    return json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n"


# --------------------------------------------------------------------------
# references


def _check_feasible(states, inputs, bounds):
    lo = np.array([bounds.v_min, bounds.omega_min])
    hi = np.array([bounds.v_max, bounds.omega_max])
    vel = states[:, [V, OMEGA]]
    if np.any(vel < lo - 1e-12) or np.any(vel > hi + 1e-12):
        raise ValueError("infeasible reference: velocities leave the bounds")
    ulo = np.array([bounds.a_min, bounds.alpha_min])
    uhi = np.array([bounds.a_max, bounds.alpha_max])
    if inputs.size and (np.any(inputs < ulo - 1e-12) or np.any(inputs > uhi + 1e-12)):
        raise ValueError("infeasible reference: accelerations leave the bounds")


def _from_velocity_profile(s0, v, omega, disc):
    """Dynamics-consistent reference whose velocities hit ``v[k], omega[k]`` at every sample."""
    inputs = np.column_stack([np.diff(v), np.diff(omega)]) / disc.dt
    s0 = np.array(s0, dtype=float)
    s0[V], s0[OMEGA] = v[0], omega[0]
    states = rollout(s0, np.ascontiguousarray(inputs), disc.dt, disc.substeps)
    return states, inputs


def generate_reference(kind, params=None, disc=DiscretizationParams(), bounds=Bounds()):
    """Reference built by forward simulation of smooth acceleration profiles.

    kinds and parameters (defaults in brackets):

    - ``line``: speed [1.0], duration [10 s], decel_time [0 s], start [0, 0], heading [0]
    - ``circle``: radius [2.0], speed [0.5], duration [one lap], start, heading
    - ``figure-eight``: speed [0.8], period [20 s], speed_modulation [0.0]
    - ``waypoint-spline``: waypoints (list of [x, y]), speed [0.8]

    Raises ``ValueError`` when the resulting velocities or accelerations leave
    ``bounds``.
    """
    p = dict(params or {})
    dt = disc.dt
    start = list(p.pop("start", [0.0, 0.0]))
    heading = float(p.pop("heading", 0.0))
    s0 = np.array([start[0], start[1], heading, 0.0, 0.0])

    if kind == "line":
        speed = float(p.pop("speed", 1.0))
        n = int(round(float(p.pop("duration", 10.0)) / dt))
        ramp = float(p.pop("decel_time", 0.0))
        t = dt * np.arange(n + 1)
        # optional linear deceleration to rest over the final ``decel_time`` seconds
        v = speed * np.clip((t[-1] - t) / ramp, 0.0, 1.0) if ramp > 0 else np.full(n + 1, speed)
        omega = np.zeros(n + 1)
    elif kind == "circle":
        radius = float(p.pop("radius", 2.0))
        speed = float(p.pop("speed", 0.5))
        if radius <= 0:
            raise ValueError("circle radius must be positive")
        n = int(round(float(p.pop("duration", 2 * np.pi * radius / abs(speed))) / dt))
        v = np.full(n + 1, speed)
        omega = np.full(n + 1, speed / radius)
    elif kind == "figure-eight":
        speed = float(p.pop("speed", 0.8))
        period = float(p.pop("period", 20.0))
        mod = float(p.pop("speed_modulation", 0.0))
        n = int(round(period / dt))
        t = dt * np.arange(n + 1)
        # each half period turns through one full revolution, in opposite senses
        omega = (2.0 * np.pi ** 2 / period) * np.sin(2.0 * np.pi * t / period)
        v = speed * (1.0 + mod * np.sin(4.0 * np.pi * t / period))
    elif kind == "waypoint-spline":
        pts = np.asarray(p.pop("waypoints"), dtype=float)
        speed = float(p.pop("speed", 0.8))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("waypoints must be a list of at least two [x, y] points")
        chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        spline = CubicSpline(chord, pts, bc_type="natural")
        d1, d2 = spline.derivative(1), spline.derivative(2)
        # arc length along the spline by fine quadrature, then resample at the speed
        fine = np.linspace(0.0, chord[-1], 4000)
        ds = np.hypot(*d1(fine).T)
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(fine))])
        n = int(np.floor(arc[-1] / (speed * dt)))
        par = np.interp(speed * dt * np.arange(n + 1), arc, fine)
        vel, acc = d1(par), d2(par)
        curvature = (vel[:, 0] * acc[:, 1] - vel[:, 1] * acc[:, 0]) / np.hypot(*vel.T) ** 3
        v = np.full(n + 1, speed)
        omega = speed * curvature
        s0[0], s0[1] = pts[0]
        s0[THETA] = float(np.arctan2(vel[0, 1], vel[0, 0]))
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    if p:
        raise ValueError(f"unknown reference parameters: {sorted(p)}")
    if n < 1:
        raise ValueError("reference must cover at least one step")
    states, inputs = _from_velocity_profile(s0, v, omega, disc)
    _check_feasible(states, inputs, bounds)
    return ReferenceTrajectory(dt=dt, states=states, inputs=inputs)


def load_reference_file(path, dt):
    """Reference stored as JSON ``{"states": [[...]], "inputs": [[...]]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return ReferenceTrajectory(dt=float(data.get("dt", dt)), states=data["states"],
                               inputs=data["inputs"])


# --------------------------------------------------------------------------
# noise estimation


@dataclass(frozen=True)
class NoiseEstimate:
    sigma: np.ndarray
    W: np.ndarray
    samples: int

    def __post_init__(self):
        if self.samples < MIN_NOISE_SAMPLES - 1:
            raise ValueError("a noise estimate needs at least 30 residuals")


def estimate_noise_bounds(states, inputs, p=DiscretizationParams()):
    """Three-sigma disturbance bounds from a logged trajectory.

    ``states[k]`` and ``inputs[k]`` are the measured state and the applied
    command of step ``k``; the residual ``s_{k+1} - psi(s_k, u_k)`` (heading
    wrapped) is the disturbance sample.  ``W = diag((3 sigma)^2)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if states.shape[0] < MIN_NOISE_SAMPLES:
        raise ValueError(f"too-few-samples: need at least {MIN_NOISE_SAMPLES} states, "
                         f"got {states.shape[0]}")
    n = states.shape[0] - 1
    if inputs.shape[0] < n:
        raise ValueError("need one input per transition")
    pred = np.array([rollout(states[k], inputs[k:k + 1], p.dt, p.substeps)[1] for k in range(n)])
    res = states[1:] - pred
    res[:, THETA] = wrap_angle(res[:, THETA])
    sigma = res.std(axis=0, ddof=1)
    return NoiseEstimate(sigma=sigma, W=np.diag((3.0 * sigma) ** 2), samples=n)


# --------------------------------------------------------------------------
# assembly


def build_reference(cfg, disc=None, bounds=None):
    disc = disc or DiscretizationParams(dt=cfg.discretization.dt,
                                        substeps=cfg.discretization.substeps)
    bounds = bounds or Bounds(**cfg.bounds.model_dump())
    if cfg.reference.file is not None:
        return load_reference_file(cfg.reference.file, disc.dt)
    return generate_reference(cfg.reference.kind, cfg.reference.params, disc, bounds)


def build_scenario(cfg):
    """Turn a validated config into a :class:`~zoro_mpc.simulator.Scenario`."""
    disc = DiscretizationParams(dt=cfg.discretization.dt, substeps=cfg.discretization.substeps)
    bounds = Bounds(**cfg.bounds.model_dump())
    w = cfg.weights
    weights = Weights(np.diag(w.Q), np.diag(w.R), np.diag(w.Q_e if w.Q_e is not None else w.Q))
    spec = OcpSpec(N=cfg.N, weights=weights, bounds=bounds,
                   obstacles=[Obstacle(o.cx, o.cy, o.radius) for o in cfg.obstacles],
                   robot_radius=cfg.robot_radius, apply_accel_backoff=cfg.apply_accel_backoff,
                   disc=disc)
    ref = build_reference(cfg, disc, bounds)
    dd = DiffDriveParams(tau=cfg.tau)
    noise = NoiseModel(cfg.noise.matrix())
    if cfg.sigma0 == "W":
        sigma0 = noise.W.copy()
    elif cfg.sigma0 == "zero":
        sigma0 = np.zeros((NX, NX))
    else:
        sigma0 = np.array(cfg.sigma0, dtype=float)
    tube = TubeModel(K=feedback_gain(dd, disc), W=noise, sigma0=sigma0)
    circ = ScalarTube.circumscribing(noise, sigma0, rho=cfg.scalar_tube.rho)
    scalar = ScalarTube(eps0=circ.eps0 if cfg.scalar_tube.eps0 is None else cfg.scalar_tube.eps0,
                        rho=circ.rho,
                        eps_step=circ.eps_step if cfg.scalar_tube.eps_step is None
                        else cfg.scalar_tube.eps_step)
    c = cfg.controller
    settings = ZoroSettings(**c.model_dump(exclude={"solve_mode"}))
    plant = PlantModel(mode=cfg.plant.mode, dd=dd, noise=noise, noise_mode=cfg.plant.noise_mode)
    s0 = ref.states[0] + np.array(cfg.initial_offset, dtype=float)
    return Scenario(spec=spec, reference=ref, tube=tube, plant=plant, settings=settings,
                    steps=cfg.steps, s0=s0, delay=disc.dt if cfg.delay == "dt" else 0.0,
                    solve_mode=c.solve_mode, scalar=scalar, name=cfg.name)
