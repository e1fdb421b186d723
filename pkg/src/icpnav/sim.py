"""Scenario simulator and the closed-loop runner.

Generates ground-truth relative motion, synthetic IMU streams with
biases and noise, and synthetic laser scans with outliers, dropouts, and
partial views; wires those streams through the ICP/filter loop epoch by
epoch; and reads/writes the scenario and log file formats.  Everything
is deterministic for a fixed scenario seed: independent child streams
drive the IMU noise, the scan noise, and the filter initialization draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .akf import (
    AdaptiveCov,
    E_TH_DEFAULT,
    FaultGate,
    FilterConfig,
    FilterState,
    build_H,
    navigation_step,
)
from .attitude import quat_align_sign, quat_conj, quat_product_raw, quat_to_rot
from .dynamics import (
    I_ATT,
    I_R,
    ImuNoise,
    ImuSample,
    NavState,
    OrbitParams,
    propagate_full,
)
from .errors import ConfigError
from .fileio import fmt, format_kv, load_model_points, parse_kv
from .icp import ModelSet, sample_model

__all__ = [
    "PiecewiseProfile",
    "Scenario",
    "FilterSetup",
    "TruthData",
    "ImuData",
    "RunLog",
    "mockup_triangles",
    "propagate_truth",
    "synth_imu",
    "synth_scan",
    "true_icp_pose",
    "build_model",
    "run_closed_loop",
    "pose_nees",
    "LOG_COLUMNS",
]


@dataclass(frozen=True)
class PiecewiseProfile:
    """Piecewise-constant vector signal: a base value plus additive
    segments (t_start, t_end, vec3) active on [t_start, t_end)."""

    base: np.ndarray
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        segs = tuple((float(t0), float(t1), np.asarray(v, dtype=float))
                     for t0, t1, v in self.segments)
        for t0, t1, _ in segs:
            if t1 <= t0:
                raise ConfigError(f"profile segment [{t0}, {t1}) is empty")
        object.__setattr__(self, "segments", segs)

    def value(self, t: float) -> np.ndarray:
        out = self.base.copy()
        for t0, t1, v in self.segments:
            if t0 <= t < t1:
                out += v
        return out

    @staticmethod
    def parse_segments(text: str):
        """Parse ``t0:t1:vx:vy:vz; ...`` segment syntax."""
        segments = []
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            parts = chunk.split(":")
            if len(parts) != 5:
                raise ConfigError(f"bad profile segment {chunk!r} "
                                  "(want t0:t1:vx:vy:vz)")
            vals = [float(p) for p in parts]
            segments.append((vals[0], vals[1], np.array(vals[2:5])))
        return tuple(segments)

    def format_segments(self) -> str:
        return "; ".join(
            f"{fmt(t0)}:{fmt(t1)}:{fmt(v[0])}:{fmt(v[1])}:{fmt(v[2])}"
            for t0, t1, v in self.segments)


_SCENARIO_KEYS = {
    "seed", "duration", "imu_rate", "scan_rate", "orbit_radius",
    "model_file", "model_resolution", "model_seed",
    "r0", "v0", "q0", "bg_true", "ba_true", "rho1_true", "rho2_true",
    "sigma_a", "sigma_g", "sigma_b", "sigma_scan",
    "scan_points", "outlier_fraction", "dropout", "view_sector",
    "thrust", "rate_base", "rate",
}


@dataclass
class Scenario:
    """Everything that defines a simulated run (units SI, angles rad)."""

    seed: int = 0
    duration: float = 60.0
    imu_rate: float = 10.0
    scan_rate: float = 1.0
    orbit_radius: float = 6.778e6
    model_file: str | None = None
    model_resolution: float = 0.02
    model_seed: int | None = None
    r0: np.ndarray = field(default_factory=lambda: np.array([0.0, -12.0, 0.0]))
    v0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q0: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    bg_true: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba_true: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho1_true: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho2_true: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_a: float = 1e-3
    sigma_g: float = 2e-4
    sigma_b: float = 1e-6
    sigma_scan: float = 1e-3
    scan_points: int = 200
    outlier_fraction: float = 0.0
    dropouts: tuple = ()
    view_sector: tuple | None = None        # (center azimuth, full width)
    thrust: PiecewiseProfile = field(
        default_factory=lambda: PiecewiseProfile(np.zeros(3)))
    rate_base: np.ndarray | None = None     # None -> co-rotation (0, 0, n)
    rate_segments: tuple = ()

    def __post_init__(self):
        for name in ("r0", "v0", "q0", "bg_true", "ba_true",
                     "rho1_true", "rho2_true"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.model_seed is None:
            self.model_seed = self.seed
        ratio = self.imu_rate / self.scan_rate
        if self.imu_rate < self.scan_rate or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of "
                              "scan_rate")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError("outlier_fraction must lie in [0, 1]")
        for t0, t1 in self.dropouts:
            if t1 <= t0:
                raise ConfigError(f"dropout window [{t0}, {t1}) is empty")

    @property
    def orbit(self) -> OrbitParams:
        return OrbitParams.circular(self.orbit_radius)

    def rate_profile(self) -> PiecewiseProfile:
        base = self.rate_base
        if base is None:
            base = np.array([0.0, 0.0, self.orbit.n])
        return PiecewiseProfile(base, self.rate_segments)

    def in_dropout(self, t: float) -> bool:
        return any(t0 <= t < t1 for t0, t1 in self.dropouts)

    @classmethod
    def from_file(cls, path) -> "Scenario":
        path = Path(path)
        kv = parse_kv(path)
        unknown = set(kv) - _SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario key {sorted(unknown)[0]!r}")

        def get(key, conv, default):
            return conv(kv[key]) if key in kv else default

        def vec(key, default):
            if key not in kv:
                return default
            return np.array([float(p) for p in kv[key].split()])

        dropouts = ()
        if "dropout" in kv:
            dropouts = tuple(
                tuple(float(x) for x in chunk.strip().split(":"))
                for chunk in kv["dropout"].split(";") if chunk.strip())
        view_sector = None
        if "view_sector" in kv:
            parts = [float(p) for p in kv["view_sector"].split()]
            if len(parts) != 2:
                raise ConfigError("view_sector wants 'center width'")
            view_sector = tuple(parts)
        thrust = PiecewiseProfile(
            np.zeros(3),
            PiecewiseProfile.parse_segments(kv["thrust"]) if "thrust" in kv else ())
        model_file = kv.get("model_file")
        if model_file is not None:
            model_file = str((path.parent / model_file).resolve())

        return cls(
            seed=get("seed", int, 0),
            duration=get("duration", float, 60.0),
            imu_rate=get("imu_rate", float, 10.0),
            scan_rate=get("scan_rate", float, 1.0),
            orbit_radius=get("orbit_radius", float, 6.778e6),
            model_file=model_file,
            model_resolution=get("model_resolution", float, 0.02),
            model_seed=get("model_seed", int, None),
            r0=vec("r0", np.array([0.0, -12.0, 0.0])),
            v0=vec("v0", np.zeros(3)),
            q0=vec("q0", np.array([0.0, 0.0, 0.0, 1.0])),
            bg_true=vec("bg_true", np.zeros(3)),
            ba_true=vec("ba_true", np.zeros(3)),
            rho1_true=vec("rho1_true", np.zeros(3)),
            rho2_true=vec("rho2_true", np.zeros(3)),
            sigma_a=get("sigma_a", float, 1e-3),
            sigma_g=get("sigma_g", float, 2e-4),
            sigma_b=get("sigma_b", float, 1e-6),
            sigma_scan=get("sigma_scan", float, 1e-3),
            scan_points=get("scan_points", int, 200),
            outlier_fraction=get("outlier_fraction", float, 0.0),
            dropouts=dropouts,
            view_sector=view_sector,
            thrust=thrust,
            rate_base=vec("rate_base", None),
            rate_segments=(PiecewiseProfile.parse_segments(kv["rate"])
                           if "rate" in kv else ()),
        )

    def to_mapping(self) -> dict:
        """Effective configuration as writable key-value pairs."""
        out = {
            "seed": str(self.seed),
            "duration": fmt(self.duration),
            "imu_rate": fmt(self.imu_rate),
            "scan_rate": fmt(self.scan_rate),
            "orbit_radius": fmt(self.orbit_radius),
            "model_resolution": fmt(self.model_resolution),
            "model_seed": str(self.model_seed),
        }
        if self.model_file:
            out["model_file"] = self.model_file
        for key, val in (("r0", self.r0), ("v0", self.v0), ("q0", self.q0),
                         ("bg_true", self.bg_true), ("ba_true", self.ba_true),
                         ("rho1_true", self.rho1_true),
                         ("rho2_true", self.rho2_true)):
            out[key] = " ".join(fmt(x) for x in val)
        out.update({
            "sigma_a": fmt(self.sigma_a), "sigma_g": fmt(self.sigma_g),
            "sigma_b": fmt(self.sigma_b), "sigma_scan": fmt(self.sigma_scan),
            "scan_points": str(self.scan_points),
            "outlier_fraction": fmt(self.outlier_fraction),
        })
        if self.dropouts:
            out["dropout"] = "; ".join(f"{fmt(a)}:{fmt(b)}"
                                       for a, b in self.dropouts)
        if self.view_sector is not None:
            out["view_sector"] = f"{fmt(self.view_sector[0])} {fmt(self.view_sector[1])}"
        if self.thrust.segments:
            out["thrust"] = self.thrust.format_segments()
        if self.rate_base is not None:
            out["rate_base"] = " ".join(fmt(x) for x in self.rate_base)
        if self.rate_segments:
            out["rate"] = PiecewiseProfile(np.zeros(3),
                                           self.rate_segments).format_segments()
        return out


_FILTER_KEYS = {
    "window", "i_max", "eps_th", "e_th", "adapt", "disc",
    "sigma_a", "sigma_g", "sigma_b", "sigma_ba",
    "r0_diag", "p0_r", "p0_v", "p0_att", "p0_bg", "p0_ba", "p0_rho1",
    "p0_rho2", "init",
}


@dataclass
class FilterSetup:
    """Filter-side tuning: window, gate, noise model, initial covariance.

    ``eps_th = None`` resolves to 4x the model resolution squared at run
    assembly.  ``init`` chooses whether the initial estimate is the truth
    ("exact") or a draw from N(truth, P0) ("perturbed").
    """

    window: int = 30
    i_max: int = 30
    eps_th: float | None = None
    e_th: float = E_TH_DEFAULT
    adapt: str = "residual"
    disc: str = "closed_form"
    noise: ImuNoise = field(default_factory=ImuNoise)
    # The fit-error stop 4*resolution^2 bounds the accepted alignment
    # sloppiness at roughly the model resolution, so the initial R guess
    # is scaled to centimeter-grade translation / half-degree attitude.
    r0_diag: np.ndarray = field(default_factory=lambda: np.array(
        [4e-4, 4e-4, 4e-4, 1e-4, 1e-4, 1e-4]))
    r0_full: np.ndarray | None = None   # full 6x6 override (API only)
    # Handoff-grade initial uncertainty: ICP's correspondence search only
    # recovers coarse errors well inside the target's own span.
    p0_r: float = 1e-2
    p0_v: float = 1e-4
    p0_att: float = 2.5e-5
    p0_bg: float = 1e-8
    p0_ba: float = 1e-4
    p0_rho1: float = 2.5e-3
    p0_rho2: float = 2.5e-3
    init: str = "perturbed"

    def __post_init__(self):
        self.r0_diag = np.asarray(self.r0_diag, dtype=float)
        if self.init not in ("perturbed", "exact"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.r0_diag.shape != (6,):
            raise ConfigError("r0_diag wants 6 values")

    @classmethod
    def from_file(cls, path, scenario: Scenario | None = None) -> "FilterSetup":
        kv = parse_kv(path)
        unknown = set(kv) - _FILTER_KEYS
        if unknown:
            raise ConfigError(f"unknown filter key {sorted(unknown)[0]!r}")
        return cls.from_mapping(kv, scenario)

    @classmethod
    def from_mapping(cls, kv: dict, scenario: Scenario | None = None) -> "FilterSetup":
        base = cls.defaults_for(scenario) if scenario else cls()

        def get(key, conv, default):
            return conv(kv[key]) if key in kv else default

        eps_th = base.eps_th
        if "eps_th" in kv:
            eps_th = None if kv["eps_th"] == "auto" else float(kv["eps_th"])
        r0_diag = base.r0_diag
        if "r0_diag" in kv:
            r0_diag = np.array([float(p) for p in kv["r0_diag"].split()])
        noise = ImuNoise(
            sigma_a=get("sigma_a", float, base.noise.sigma_a),
            sigma_g=get("sigma_g", float, base.noise.sigma_g),
            sigma_b=get("sigma_b", float, base.noise.sigma_b),
            sigma_ba=get("sigma_ba", float, base.noise.sigma_ba),
        )
        return cls(
            window=get("window", int, base.window),
            i_max=get("i_max", int, base.i_max),
            eps_th=eps_th,
            e_th=get("e_th", float, base.e_th),
            adapt=get("adapt", str, base.adapt),
            disc=get("disc", str, base.disc),
            noise=noise,
            r0_diag=r0_diag,
            p0_r=get("p0_r", float, base.p0_r),
            p0_v=get("p0_v", float, base.p0_v),
            p0_att=get("p0_att", float, base.p0_att),
            p0_bg=get("p0_bg", float, base.p0_bg),
            p0_ba=get("p0_ba", float, base.p0_ba),
            p0_rho1=get("p0_rho1", float, base.p0_rho1),
            p0_rho2=get("p0_rho2", float, base.p0_rho2),
            init=get("init", str, base.init),
        )

    @classmethod
    def defaults_for(cls, scenario: Scenario) -> "FilterSetup":
        """Matched-filter defaults: noise model taken from the scenario."""
        return cls(noise=ImuNoise(sigma_a=scenario.sigma_a,
                                  sigma_g=scenario.sigma_g,
                                  sigma_b=scenario.sigma_b))

    def resolve_eps_th(self, scenario: Scenario | None,
                       model: "ModelSet") -> float:
        """Concrete ICP stop/fault threshold.

        The threshold doubles as the convergence stop inside the ICP
        loop, so in the closed loop it must sit just above the
        achievable fit-error floor of ~3 sigma_scan^2; otherwise ICP
        halts at resolution-scale misalignments whose errors correlate
        with the prediction and break filter consistency.  Without a
        scenario (standalone alignment) it falls back to the
        model-resolution scaling 4*resolution^2.
        """
        if self.eps_th is not None:
            return self.eps_th
        if scenario is not None:
            return max(6.0 * scenario.sigma_scan**2, 1e-12)
        return 4.0 * model.resolution**2

    def p0_matrix(self) -> np.ndarray:
        blocks = np.concatenate([
            np.full(3, self.p0_r), np.full(3, self.p0_v),
            np.full(3, self.p0_att), np.full(3, self.p0_bg),
            np.full(3, self.p0_ba), np.full(3, self.p0_rho1),
            np.full(3, self.p0_rho2)])
        return np.diag(blocks)

    def to_mapping(self, eps_th_resolved: float) -> dict:
        return {
            "window": str(self.window),
            "i_max": str(self.i_max),
            "eps_th": fmt(eps_th_resolved),
            "e_th": fmt(self.e_th),
            "adapt": self.adapt,
            "disc": self.disc,
            "sigma_a": fmt(self.noise.sigma_a),
            "sigma_g": fmt(self.noise.sigma_g),
            "sigma_b": fmt(self.noise.sigma_b),
            "sigma_ba": fmt(self.noise.sigma_ba),
            "r0_diag": " ".join(fmt(x) for x in self.r0_diag),
            "p0_r": fmt(self.p0_r), "p0_v": fmt(self.p0_v),
            "p0_att": fmt(self.p0_att), "p0_bg": fmt(self.p0_bg),
            "p0_ba": fmt(self.p0_ba), "p0_rho1": fmt(self.p0_rho1),
            "p0_rho2": fmt(self.p0_rho2),
            "init": self.init,
        }


def mockup_triangles():
    """Triangle soup of the built-in spacecraft mockup (deliberately
    asymmetric: offset solar panel, corner antenna block, one fin)."""

    def box(center, size):
        cx, cy, cz = center
        sx, sy, sz = np.asarray(size) / 2.0
        v = np.array([[cx + dx * sx, cy + dy * sy, cz + dz * sz]
                      for dx in (-1, 1) for dy in (-1, 1) for dz in (-1, 1)])
        faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
                 (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = []
        for a, b, c, d in faces:
            tris.append([v[a], v[b], v[c]])
            tris.append([v[a], v[c], v[d]])
        return np.array(tris)

    return np.concatenate([
        box([0.0, 0.0, 0.0], [1.2, 0.8, 0.6]),          # bus
        box([1.15, 0.0, 0.05], [1.1, 0.04, 0.8]),       # solar panel (+x only)
        box([-0.35, 0.25, 0.45], [0.25, 0.3, 0.3]),     # antenna block
        box([0.0, -0.5, -0.2], [0.5, 0.2, 0.08]),       # lower fin
    ])


@dataclass
class TruthData:
    """Ground truth sampled at the IMU rate (n+1 samples over n steps)."""

    t: np.ndarray
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray   # true body rate driving the attitude
    accel: np.ndarray   # true specific force (body frame)


@dataclass
class ImuData:
    t: np.ndarray
    u_a: np.ndarray
    u_g: np.ndarray
    bg: np.ndarray      # random-walking true gyro bias at each sample


def propagate_truth(scn: Scenario) -> TruthData:
    """Integrate the true relative trajectory at the IMU rate."""
    orbit = scn.orbit
    dt = 1.0 / scn.imu_rate
    n_steps = int(round(scn.duration * scn.imu_rate))
    rate = scn.rate_profile()

    t = np.arange(n_steps + 1) * dt
    r = np.empty((n_steps + 1, 3))
    v = np.empty((n_steps + 1, 3))
    q = np.empty((n_steps + 1, 4))
    omega = np.empty((n_steps + 1, 3))
    accel = np.empty((n_steps + 1, 3))

    x = np.zeros(22)
    x[0:3] = scn.r0
    x[3:6] = scn.v0
    x[6:10] = scn.q0 / np.linalg.norm(scn.q0)
    for i in range(n_steps + 1):
        r[i], v[i], q[i] = x[0:3], x[3:6], x[6:10]
        omega[i] = rate.value(t[i])
        accel[i] = scn.thrust.value(t[i])
        if i < n_steps:
            x = propagate_full(x, accel[i], omega[i], dt, orbit)
    return TruthData(t=t, r=r, v=v, q=q, omega=omega, accel=accel)


def synth_imu(truth: TruthData, scn: Scenario, rng) -> ImuData:
    """Invert the IMU measurement model: outputs = truth - bias - noise.

    White noise scales as sigma/sqrt(dt); the true gyro bias random-walks
    with increments sigma_b*sqrt(dt).
    """
    dt = 1.0 / scn.imu_rate
    n = len(truth.t) - 1
    eps_a = scn.sigma_a / np.sqrt(dt) * rng.standard_normal((n, 3))
    eps_g = scn.sigma_g / np.sqrt(dt) * rng.standard_normal((n, 3))
    walk = scn.sigma_b * np.sqrt(dt) * rng.standard_normal((n, 3))
    bg = scn.bg_true + np.concatenate([np.zeros((1, 3)),
                                       np.cumsum(walk, axis=0)])[:n]
    u_a = truth.accel[:n] - scn.ba_true - eps_a
    u_g = truth.omega[:n] - bg - eps_g
    return ImuData(t=truth.t[:n], u_a=u_a, u_g=u_g, bg=bg)


def true_icp_pose(r, q, scn: Scenario):
    """True ICP alignment at a truth sample: (q, A(q)^T (r - rho2) + rho1)."""
    rho = quat_to_rot(q).T @ (r - scn.rho2_true) + scn.rho1_true
    return q, rho


def visible_model_points(model_points: np.ndarray, scn: Scenario) -> np.ndarray:
    """Apply the optional angular-sector mask (azimuth in the model frame)."""
    if scn.view_sector is None:
        return model_points
    center, width = scn.view_sector
    az = np.arctan2(model_points[:, 1], model_points[:, 0])
    delta = np.arctan2(np.sin(az - center), np.cos(az - center))
    return model_points[np.abs(delta) <= width / 2.0]


def synth_scan(r, q, t: float, model_points: np.ndarray, scn: Scenario,
               rng) -> np.ndarray:
    """Synthetic scan frame at one truth sample.

    Maps a subsample of the visible model points into the sensor frame
    with the true pose, adds isotropic Gaussian noise, and replaces an
    outlier fraction with uniform draws inside the frame's bounding box.
    Returns an empty (0, 3) array inside dropout windows.
    """
    if scn.in_dropout(t):
        return np.zeros((0, 3))
    pts = visible_model_points(model_points, scn)
    if pts.shape[0] == 0:
        return np.zeros((0, 3))
    if scn.scan_points > 0 and scn.scan_points < pts.shape[0]:
        idx = rng.choice(pts.shape[0], scn.scan_points, replace=False)
        pts = pts[idx]
    _, rho = true_icp_pose(r, q, scn)
    clean = (pts - rho) @ quat_to_rot(q)
    scan = clean + scn.sigma_scan * rng.standard_normal(clean.shape)
    n_out = int(round(scn.outlier_fraction * scan.shape[0]))
    if n_out > 0:
        which = rng.choice(scan.shape[0], n_out, replace=False)
        lo = clean.min(axis=0)
        hi = clean.max(axis=0)
        scan[which] = lo + (hi - lo) * rng.random((n_out, 3))
    return scan


def build_model(scn: Scenario) -> ModelSet:
    """Model cloud for a scenario: from its model file, or the built-in
    mockup when no file is named."""
    if scn.model_file:
        pts, res = load_model_points(scn.model_file, scn.model_resolution,
                                     scn.model_seed)
        return ModelSet(pts, res)
    pts = sample_model(mockup_triangles(), scn.model_resolution,
                       scn.model_seed)
    return ModelSet(pts, scn.model_resolution)


LOG_COLUMNS = (
    ["t"]
    + [f"tr_{c}" for c in ("rx", "ry", "rz", "qx", "qy", "qz", "qo")]
    + [f"es_{c}" for c in ("rx", "ry", "rz", "qx", "qy", "qz", "qo")]
    + ["phi", "eps", "iters", "nees", "trace_R"]
    + [f"bg_{c}" for c in "xyz"] + [f"ba_{c}" for c in "xyz"]
    + [f"rho1_{c}" for c in "xyz"] + [f"rho2_{c}" for c in "xyz"]
)


@dataclass
class RunLog:
    """Per-scan-epoch record table with the fixed 32-column layout."""

    data: dict

    def __len__(self) -> int:
        return len(self.data["t"])

    def column(self, name: str) -> np.ndarray:
        return self.data[name]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            n = len(self)
            cols = [self.data[c] for c in LOG_COLUMNS]
            for i in range(n):
                fh.write(",".join(fmt(col[i]) for col in cols) + "\n")

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        from .errors import FileFormatError

        with open(path) as fh:
            header = fh.readline().strip()
            if header.split(",") != LOG_COLUMNS:
                raise FileFormatError("unexpected run-log header", 1)
            rows = []
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != len(LOG_COLUMNS):
                    raise FileFormatError(
                        f"row has {len(parts)} fields, want "
                        f"{len(LOG_COLUMNS)} (row {lineno - 1})", lineno)
                rows.append([float(p) for p in parts])
        if not rows:
            raise FileFormatError("run log has no data rows", 2)
        arr = np.array(rows)
        return cls({name: arr[:, j].copy()
                    for j, name in enumerate(LOG_COLUMNS)})

    def attitude_errors(self) -> np.ndarray:
        """Per-epoch truth-vs-estimate rotation angle [rad]."""
        out = np.empty(len(self))
        for i in range(len(self)):
            qt = np.array([self.data["tr_qx"][i], self.data["tr_qy"][i],
                           self.data["tr_qz"][i], self.data["tr_qo"][i]])
            qe = np.array([self.data["es_qx"][i], self.data["es_qy"][i],
                           self.data["es_qz"][i], self.data["es_qo"][i]])
            rel = quat_product_raw(qt, quat_conj(qe))
            out[i] = 2.0 * np.arctan2(np.linalg.norm(rel[:3]), abs(rel[3]))
        return out

    def position_errors(self) -> np.ndarray:
        d = self.data
        return np.sqrt((d["tr_rx"] - d["es_rx"])**2
                       + (d["tr_ry"] - d["es_ry"])**2
                       + (d["tr_rz"] - d["es_rz"])**2)

    def fault_windows(self):
        """Contiguous phi = 0 stretches as (t_first, t_last) pairs."""
        t = self.data["t"]
        phi = self.data["phi"]
        windows = []
        start = None
        for i in range(len(self)):
            if phi[i] == 0.0 and start is None:
                start = t[i]
            elif phi[i] != 0.0 and start is not None:
                windows.append((start, t[i - 1]))
                start = None
        if start is not None:
            windows.append((start, t[-1]))
        return windows

    def summarize(self) -> dict:
        """Log-derivable run statistics (shared by run and report)."""
        d = self.data
        pos_err = self.position_errors()
        att_err = self.attitude_errors()
        ok = d["phi"] == 1.0
        out = {
            "epochs": str(len(self)),
            "rmse_pos_m": fmt(np.sqrt(np.mean(pos_err**2))),
            "rmse_att_rad": fmt(np.sqrt(np.mean(att_err**2))),
            "phi_rate": fmt(np.mean(d["phi"])),
            "mean_icp_iters": fmt(np.mean(d["iters"][ok]) if ok.any() else 0.0),
            "mean_nees": fmt(np.mean(d["nees"])),
            "final_bg": " ".join(fmt(d[f"bg_{c}"][-1]) for c in "xyz"),
            "final_ba": " ".join(fmt(d[f"ba_{c}"][-1]) for c in "xyz"),
            "final_rho1": " ".join(fmt(d[f"rho1_{c}"][-1]) for c in "xyz"),
            "final_rho2": " ".join(fmt(d[f"rho2_{c}"][-1]) for c in "xyz"),
        }
        windows = self.fault_windows()
        out["fault_windows"] = ("; ".join(f"{fmt(a)}:{fmt(b)}"
                                          for a, b in windows)
                                if windows else "none")
        return out

    def format_summary(self) -> str:
        return "".join(f"summary.{k} = {v}\n"
                       for k, v in self.summarize().items())


def _initial_filter_state(truth: TruthData, setup: FilterSetup,
                          scn: Scenario, rng) -> FilterState:
    P0 = setup.p0_matrix()
    delta = np.zeros(21)
    if setup.init == "perturbed":
        delta = rng.standard_normal(21) * np.sqrt(np.diag(P0))
    qtv = delta[I_ATT]
    q_err = np.array([*qtv, np.sqrt(max(0.0, 1.0 - qtv @ qtv))])
    q_ref0 = quat_product_raw(quat_conj(q_err), truth.q[0])
    q_ref0 /= np.linalg.norm(q_ref0)
    nav0 = NavState(
        r=truth.r[0] + delta[0:3],
        v=truth.v[0] + delta[3:6],
        q_tilde_v=np.zeros(3),
        b_g=scn.bg_true + delta[9:12],
        b_a=scn.ba_true + delta[12:15],
        rho1=scn.rho1_true + delta[15:18],
        rho2=scn.rho2_true + delta[18:21],
        q_ref=q_ref0,
    )
    return FilterState(nav=nav0, P=P0, k=0)


def pose_nees(posterior: FilterState, r_true, q_true) -> float:
    """Normalized estimation error squared of the 6-dof pose block.

    Both error components follow the filter's truth-minus-estimate
    convention (the attitude part is the error-quaternion vector of the
    truth relative to the reference), matching the covariance's
    cross-correlation signs.
    """
    nav = posterior.nav
    err = np.empty(6)
    err[:3] = np.asarray(r_true, float) - nav.r
    q_t = quat_align_sign(np.asarray(q_true, float), nav.q_ref)
    err[3:] = quat_product_raw(q_t, quat_conj(nav.q_ref))[:3]
    idx = np.r_[0:3, 6:9]
    P6 = posterior.P[np.ix_(idx, idx)]
    return float(err @ np.linalg.solve(P6, err))


def run_closed_loop(scn: Scenario, setup: FilterSetup | None = None,
                    model: ModelSet | None = None,
                    run_seed: int | None = None,
                    with_final_state: bool = False):
    """Simulate a scenario and run the full ICP/filter loop over it.

    ``run_seed`` overrides the scenario seed (Monte-Carlo replication);
    the truth trajectory is seed-independent, while IMU noise, scan
    noise, and the filter initialization draw derive from child streams.
    Returns the RunLog, or (RunLog, final posterior FilterState) when
    ``with_final_state`` is set.
    """
    if setup is None:
        setup = FilterSetup.defaults_for(scn)
    if model is None:
        model = build_model(scn)
    orbit = scn.orbit
    seed = scn.seed if run_seed is None else run_seed
    ss = np.random.SeedSequence(seed)
    rng_imu, rng_scan, rng_init = (np.random.default_rng(s)
                                   for s in ss.spawn(3))

    truth = propagate_truth(scn)
    imu = synth_imu(truth, scn, rng_imu)

    eps_th = setup.resolve_eps_th(scn, model)
    gate = FaultGate(eps_th=eps_th, e_th=setup.e_th, i_max=setup.i_max)
    R0 = np.diag(setup.r0_diag) if setup.r0_full is None \
        else np.asarray(setup.r0_full, dtype=float)
    config = FilterConfig(window=setup.window, adapt=setup.adapt,
                          disc=setup.disc, noise=setup.noise, R0=R0)

    fs = _initial_filter_state(truth, setup, scn, rng_init)
    H0 = build_H(fs.nav)
    c0 = H0 @ fs.P @ H0.T + config.R0
    acov = AdaptiveCov(setup.window, c0, mode=setup.adapt
                       if setup.adapt != "off" else "residual")

    dt = 1.0 / scn.imu_rate
    step = int(round(scn.imu_rate / scn.scan_rate))
    epoch_idx = list(range(0, len(imu.t), step))
    n_epochs = len(epoch_idx)

    data = {name: np.zeros(n_epochs) for name in LOG_COLUMNS}
    for e, i0 in enumerate(epoch_idx):
        t_k = truth.t[i0]
        scan = synth_scan(truth.r[i0], truth.q[i0], t_k, model.points,
                          scn, rng_scan)
        segment = [ImuSample(imu.t[j], imu.u_a[j], imu.u_g[j])
                   for j in range(i0, min(i0 + step, len(imu.t)))]
        res = navigation_step(fs, acov, gate, scan, segment,
                              [dt] * len(segment), model, config, orbit)
        fs, acov = res.fs, res.acov

        post = res.posterior
        d = data
        d["t"][e] = t_k
        d["tr_rx"][e], d["tr_ry"][e], d["tr_rz"][e] = truth.r[i0]
        d["tr_qx"][e], d["tr_qy"][e], d["tr_qz"][e], d["tr_qo"][e] = truth.q[i0]
        d["es_rx"][e], d["es_ry"][e], d["es_rz"][e] = post.nav.r
        (d["es_qx"][e], d["es_qy"][e], d["es_qz"][e],
         d["es_qo"][e]) = post.nav.q_ref
        d["phi"][e] = res.phi
        d["eps"][e] = res.eps
        d["iters"][e] = res.iterations
        d["nees"][e] = pose_nees(post, truth.r[i0], truth.q[i0])
        d["trace_R"][e] = res.trace_R
        d["bg_x"][e], d["bg_y"][e], d["bg_z"][e] = post.nav.b_g
        d["ba_x"][e], d["ba_y"][e], d["ba_z"][e] = post.nav.b_a
        d["rho1_x"][e], d["rho1_y"][e], d["rho1_z"][e] = post.nav.rho1
        d["rho2_x"][e], d["rho2_y"][e], d["rho2_z"][e] = post.nav.rho2
        last_posterior = post
    log = RunLog(data)
    if with_final_state:
        return log, last_posterior
    return log
