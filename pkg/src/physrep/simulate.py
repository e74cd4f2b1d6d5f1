"""Parameterized 2D periodic simulators and the on-disk dataset format.

Three systems, each governed by two scalar parameters that the probes later
regress:

* ``advdiff``   scalar field carried by a constant x-velocity and diffused.
* ``grayscott`` two-species reaction-diffusion, feed rate and kill rate.
* ``shearvort`` incompressible vorticity of a double shear layer plus a
  passive tracer, inverse viscosity and inverse tracer diffusivity.

The stepping kernels accept a leading batch axis so datasets can be
generated many trajectories at a time; the per-trajectory entry points are
thin wrappers and produce bitwise-identical frames.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import make_rng

log = logging.getLogger(__name__)

SYSTEMS = ("advdiff", "grayscott", "shearvort")


class StabilityError(ValueError):
    pass


@dataclass
class SystemSpec:
    system: str
    grid: int = 32
    timesteps: int = 32
    dt: float = 1.0
    save_every: int = 1
    param_names: tuple[str, str] = ("a", "b")
    param_ranges: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0))
    log_uniform: tuple[bool, bool] = (False, False)
    channels: tuple[str, ...] = ("field",)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        self.param_names = tuple(self.param_names)
        self.param_ranges = tuple(tuple(float(v) for v in r) for r in self.param_ranges)
        self.log_uniform = tuple(bool(v) for v in self.log_uniform)
        self.channels = tuple(self.channels)
        if not (len(self.param_names) == len(self.param_ranges) == len(self.log_uniform) == 2):
            raise ValueError("SystemSpec: exactly two governing parameters are required")
        if self.timesteps < 1 or self.save_every < 1 or self.grid < 4:
            raise ValueError("SystemSpec: timesteps, save_every and grid must be positive (grid >= 4)")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (len(self.channels), self.grid, self.grid)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SystemSpec:
        return cls(**d)


def default_spec(system: str, grid: int = 32, timesteps: int = 32) -> SystemSpec:
    if system == "advdiff":
        return SystemSpec(
            system, grid, timesteps, dt=0.5, save_every=4,
            param_names=("velocity", "diffusivity"),
            param_ranges=((0.1, 1.0), (0.01, 0.2)),
            log_uniform=(False, True),
            channels=("concentration",),
        )
    if system == "grayscott":
        return SystemSpec(
            system, grid, timesteps, dt=1.0, save_every=25,
            param_names=("feed", "kill"),
            param_ranges=((0.025, 0.055), (0.05, 0.063)),
            log_uniform=(False, False),
            channels=("u", "v"),
        )
    if system == "shearvort":
        return SystemSpec(
            system, grid, timesteps, dt=0.1, save_every=5,
            param_names=("reynolds", "schmidt"),
            param_ranges=((20.0, 500.0), (20.0, 500.0)),
            log_uniform=(True, True),
            channels=("vorticity", "tracer"),
        )
    raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")


@dataclass
class Trajectory:
    frames: np.ndarray  # [T, C, H, W]
    params: dict[str, float]
    seed: int
    system: str = ""
    channels: tuple[str, ...] = ()
    dt: float = 0.0

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"Trajectory frames must be [T, C, H, W], got {self.frames.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frames.shape


def sample_parameters(spec: SystemSpec, n: int, seed: int) -> list[dict[str, float]]:
    """``n`` i.i.d. draws from the system's parameter ranges (uniform or log-uniform per parameter)."""
    if n < 1:
        raise ValueError(f"sample_parameters: n must be >= 1, got {n}")
    rng = make_rng(seed, "params", spec.system)
    cols = []
    for name, (lo, hi), is_log in zip(spec.param_names, spec.param_ranges, spec.log_uniform):
        if not lo <= hi:
            raise ValueError(f"sample_parameters: empty range [{lo}, {hi}] for {name}")
        if is_log and lo <= 0:
            raise ValueError(f"sample_parameters: log-uniform range for {name} must be positive, got [{lo}, {hi}]")
        u = rng.random(n)
        if lo == hi:
            cols.append(np.full(n, lo))
        elif is_log:
            cols.append(np.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))))
        else:
            cols.append(lo + u * (hi - lo))
    return [{name: float(col[i]) for name, col in zip(spec.param_names, cols)} for i in range(n)]


# ---------------------------------------------------------------------------
# shared numerics
# ---------------------------------------------------------------------------


def _laplacian(f: np.ndarray, dx: float = 1.0) -> np.ndarray:
    """Periodic 5-point Laplacian over the last two axes."""
    return (
        np.roll(f, 1, -1) + np.roll(f, -1, -1) + np.roll(f, 1, -2) + np.roll(f, -1, -2) - 4.0 * f
    ) / (dx * dx)


def _wavenumbers(n: int, length: float):
    kx = np.fft.rfftfreq(n, d=length / n) * 2 * np.pi
    ky = np.fft.fftfreq(n, d=length / n) * 2 * np.pi
    return kx[None, :], ky[:, None]


def _smooth_random_field(rng: np.random.Generator, batch: int, n: int, kmax: float = 4.0) -> np.ndarray:
    """Zero-mean, unit-std random fields band-limited to |k| <= kmax (grid wavenumber units)."""
    kx, ky = _wavenumbers(n, float(n))
    kk = np.sqrt(kx**2 + ky**2) * n / (2 * np.pi)
    amp = np.where((kk > 0) & (kk <= kmax), 1.0, 0.0)
    coef = (rng.standard_normal((batch, n, n // 2 + 1)) + 1j * rng.standard_normal((batch, n, n // 2 + 1))) * amp
    f = np.fft.irfft2(coef, s=(n, n))
    f -= f.mean(axis=(-2, -1), keepdims=True)
    return f / f.std(axis=(-2, -1), keepdims=True)


def _check_finite(system: str, arr: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise StabilityError(f"{system}: non-finite values at solver step {step}")


def _param_column(params: Sequence[dict], name: str) -> np.ndarray:
    return np.array([float(p[name]) for p in params])


# ---------------------------------------------------------------------------
# advection-diffusion
# ---------------------------------------------------------------------------


def _advdiff_run(spec: SystemSpec, params: Sequence[dict], init: np.ndarray) -> np.ndarray:
    n = spec.grid
    dx = 1.0
    u = _param_column(params, "velocity")
    kappa = _param_column(params, "diffusivity")
    diff_cfl = np.max(kappa) * spec.dt / dx**2
    adv_cfl = np.max(np.abs(u)) * spec.dt / dx
    if diff_cfl > 0.25:
        raise StabilityError(f"advdiff: diffusion bound kappa*dt/dx^2 <= 0.25 violated ({diff_cfl:.4g})")
    if adv_cfl > 1.0:
        raise StabilityError(f"advdiff: advection bound |u|*dt/dx <= 1 violated ({adv_cfl:.4g})")
    kx, _ = _wavenumbers(n, n * dx)
    # exact spectral translation by u*dt per step; the k=0 mode (total mass) is untouched
    shift = np.exp(-1j * kx[None] * (u * spec.dt)[:, None, None])
    advect = np.any(u != 0)
    diffuse = np.any(kappa != 0)
    c = init.copy()
    frames = np.empty((len(params), spec.timesteps, 1, n, n))
    frames[:, 0, 0] = c
    step = 0
    for t in range(1, spec.timesteps):
        for _ in range(spec.save_every):
            if advect:
                c = np.fft.irfft2(np.fft.rfft2(c) * shift, s=(n, n))
            if diffuse:
                c = c + (kappa * spec.dt)[:, None, None] * _laplacian(c, dx)
            step += 1
        _check_finite("advdiff", c, step)
        frames[:, t, 0] = c
    return frames


def simulate_advdiff(params: dict, spec: SystemSpec, seed: int, initial: np.ndarray | None = None) -> Trajectory:
    if initial is None:
        initial = _smooth_random_field(make_rng(seed, "advdiff-init"), 1, spec.grid)[0]
    frames = _advdiff_run(spec, [params], np.asarray(initial, dtype=np.float64)[None])[0]
    return Trajectory(frames, dict(params), seed, spec.system, spec.channels, spec.dt)


def _advdiff_initial(spec: SystemSpec, seeds: Sequence[int]) -> np.ndarray:
    return np.stack([_smooth_random_field(make_rng(s, "advdiff-init"), 1, spec.grid)[0] for s in seeds])


# ---------------------------------------------------------------------------
# Gray-Scott
# ---------------------------------------------------------------------------

GS_DU = 0.16
GS_DV = 0.08


def _grayscott_initial(spec: SystemSpec, seeds: Sequence[int]) -> np.ndarray:
    n = spec.grid
    out = np.empty((len(seeds), 2, n, n))
    for i, s in enumerate(seeds):
        rng = make_rng(s, "grayscott-init")
        u = np.ones((n, n))
        v = np.zeros((n, n))
        for _ in range(rng.integers(2, 5)):
            size = int(rng.integers(3, 7))
            r, c = rng.integers(0, n, size=2)
            rows = (np.arange(size) + r) % n
            cols = (np.arange(size) + c) % n
            u[np.ix_(rows, cols)] = 0.5
            v[np.ix_(rows, cols)] = 0.25
        bump = v > 0
        u[bump] += 0.02 * rng.standard_normal(int(bump.sum()))
        v[bump] += 0.02 * rng.standard_normal(int(bump.sum()))
        out[i, 0], out[i, 1] = u, v
    return out


def _grayscott_run(spec: SystemSpec, params: Sequence[dict], init: np.ndarray) -> np.ndarray:
    feed = _param_column(params, "feed")[:, None, None]
    kill = _param_column(params, "kill")[:, None, None]
    if np.any(feed < 0.01) or np.any(feed > 0.08) or np.any(kill < 0.04) or np.any(kill > 0.07):
        raise StabilityError("grayscott: parameters outside F in [0.01, 0.08], k in [0.04, 0.07]")
    bound = max(GS_DU, GS_DV) * spec.dt
    if bound > 0.25:
        raise StabilityError(f"grayscott: diffusion bound D*dt/dx^2 <= 0.25 violated ({bound:.4g})")
    u = init[:, 0].copy()
    v = init[:, 1].copy()
    dt = spec.dt
    frames = np.empty((len(params), spec.timesteps, 2, spec.grid, spec.grid))
    frames[:, 0, 0], frames[:, 0, 1] = u, v
    step = 0
    for t in range(1, spec.timesteps):
        for _ in range(spec.save_every):
            uvv = u * v * v
            u, v = (
                u + dt * (GS_DU * _laplacian(u) - uvv + feed * (1.0 - u)),
                v + dt * (GS_DV * _laplacian(v) + uvv - (feed + kill) * v),
            )
            step += 1
        _check_finite("grayscott", u, step)
        frames[:, t, 0], frames[:, t, 1] = u, v
    return frames


def simulate_grayscott(params: dict, spec: SystemSpec, seed: int, initial: np.ndarray | None = None) -> Trajectory:
    init = _grayscott_initial(spec, [seed]) if initial is None else np.asarray(initial, dtype=np.float64)[None]
    frames = _grayscott_run(spec, [params], init)[0]
    return Trajectory(frames, dict(params), seed, spec.system, spec.channels, spec.dt)


# ---------------------------------------------------------------------------
# shear-layer vorticity + passive tracer (pseudo-spectral, integrating-factor RK4)
# ---------------------------------------------------------------------------

SHEAR_WIDTH = 0.5
SHEAR_NOISE = 0.05


class _SpectralGrid:
    def __init__(self, n: int):
        self.n = n
        self.kx, self.ky = _wavenumbers(n, 2 * np.pi)
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        kmax = n // 2
        self.dealias = (np.abs(self.kx) < 2.0 / 3.0 * kmax) & (np.abs(self.ky) < 2.0 / 3.0 * kmax)
        self.dx = 2 * np.pi / n

    def fwd(self, f):
        return np.fft.rfft2(f)

    def inv(self, fh):
        return np.fft.irfft2(fh, s=(self.n, self.n))

    def velocity(self, wh):
        psih = wh * self.inv_k2
        return self.inv(1j * self.ky * psih), self.inv(-1j * self.kx * psih)

    def rhs(self, state):
        """Advective tendency -(u . grad) of vorticity and tracer, spectral, dealiased."""
        wh, sh = state[:, 0], state[:, 1]
        ux, uy = self.velocity(wh)
        out = np.empty_like(state)
        for i, fh in enumerate((wh, sh)):
            fx = self.inv(1j * self.kx * fh)
            fy = self.inv(1j * self.ky * fh)
            out[:, i] = -self.fwd(ux * fx + uy * fy) * self.dealias
        return out


def _shear_initial(spec: SystemSpec, seeds: Sequence[int]) -> np.ndarray:
    n = spec.grid
    y = (np.arange(n) + 0.5) * 2 * np.pi / n
    d = SHEAR_WIDTH
    # u_x(y) = tanh((y - pi/2)/d) - tanh((y - 3pi/2)/d) - 1;  vorticity = -du_x/dy
    sech2 = lambda z: 1.0 / np.cosh(z) ** 2  # noqa: E731
    ux = np.tanh((y - np.pi / 2) / d) - np.tanh((y - 3 * np.pi / 2) / d) - 1.0
    w0 = -(sech2((y - np.pi / 2) / d) - sech2((y - 3 * np.pi / 2) / d)) / d
    out = np.empty((len(seeds), 2, n, n))
    for i, s in enumerate(seeds):
        rng = make_rng(s, "shearvort-init")
        noise = _smooth_random_field(rng, 1, n, kmax=4.0)[0]
        out[i, 0] = w0[:, None] + SHEAR_NOISE * noise / np.abs(noise).max() * np.abs(w0).max()
        out[i, 1] = np.broadcast_to(((ux + 1.0) / 2.0)[:, None], (n, n))
    return out


def _shearvort_run(spec: SystemSpec, params: Sequence[dict], init: np.ndarray) -> np.ndarray:
    g = _SpectralGrid(spec.grid)
    nu = 1.0 / _param_column(params, "reynolds")
    kappa = 1.0 / _param_column(params, "schmidt")
    ux, uy = g.velocity(g.fwd(init[:, 0]))
    umax = float(np.max(np.sqrt(ux**2 + uy**2))) if init.size else 0.0
    cfl = umax * spec.dt / g.dx
    if cfl > 1.0:
        raise StabilityError(f"shearvort: CFL bound |u|*dt/dx <= 1 violated ({cfl:.4g})")
    h = spec.dt
    diff = np.stack([nu, kappa], axis=1)[:, :, None, None] * g.k2[None, None]
    e1 = np.exp(-diff * h)
    e2 = np.exp(-diff * h / 2)
    state = g.fwd(init)
    frames = np.empty((len(params), spec.timesteps, 2, spec.grid, spec.grid))
    frames[:, 0] = init
    step = 0
    for t in range(1, spec.timesteps):
        for _ in range(spec.save_every):
            a = g.rhs(state)
            b = g.rhs(e2 * (state + 0.5 * h * a))
            c = g.rhs(e2 * state + 0.5 * h * b)
            d = g.rhs(e1 * state + h * e2 * c)
            state = e1 * state + (h / 6.0) * (e1 * a + 2.0 * e2 * (b + c) + d)
            step += 1
        field_ = g.inv(state)
        _check_finite("shearvort", field_, step)
        frames[:, t] = field_
    return frames


def simulate_shearvort(params: dict, spec: SystemSpec, seed: int, initial: np.ndarray | None = None) -> Trajectory:
    init = _shear_initial(spec, [seed]) if initial is None else np.asarray(initial, dtype=np.float64)[None]
    frames = _shearvort_run(spec, [params], init)[0]
    return Trajectory(frames, dict(params), seed, spec.system, spec.channels, spec.dt)


def kinetic_energy(vorticity: np.ndarray) -> np.ndarray:
    """Domain-mean kinetic energy of periodic vorticity fields on [0, 2pi)^2 (last two axes)."""
    g = _SpectralGrid(vorticity.shape[-1])
    ux, uy = g.velocity(g.fwd(vorticity))
    return 0.5 * (ux**2 + uy**2).mean(axis=(-2, -1))


_RUNNERS = {
    "advdiff": (_advdiff_initial, _advdiff_run),
    "grayscott": (_grayscott_initial, _grayscott_run),
    "shearvort": (_shear_initial, _shearvort_run),
}


def simulate(spec: SystemSpec, params: dict, seed: int) -> Trajectory:
    return simulate_batch(spec, [params], [seed])[0]


def simulate_batch(spec: SystemSpec, params: Sequence[dict], seeds: Sequence[int]) -> list[Trajectory]:
    """Simulate several trajectories of one system together. Frames match per-trajectory calls bitwise."""
    initial, run = _RUNNERS[spec.system]
    frames = run(spec, params, initial(spec, seeds))
    return [
        Trajectory(frames[i], dict(p), int(s), spec.system, spec.channels, spec.dt)
        for i, (p, s) in enumerate(zip(params, seeds))
    ]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

TRAJ_MAGIC = b"PHYSTRAJ"
TRAJ_VERSION = 1
HEADER_SIZE = 64
MANIFEST_NAME = "manifest.json"
SPLITS = ("pretrain", "train", "val", "test")


class DatasetError(ValueError):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


def write_trajectory(path, traj: Trajectory) -> None:
    """64-byte header (magic, version, JSON length), JSON metadata, then float32 LE frames [T, C, H, W]."""
    meta = {
        "shape": list(traj.frames.shape),
        "channels": list(traj.channels),
        "params": traj.params,
        "seed": int(traj.seed),
        "dt": float(traj.dt),
        "system": traj.system,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = TRAJ_MAGIC + struct.pack("<IQ", TRAJ_VERSION, len(blob))
    header += b"\0" * (HEADER_SIZE - len(header))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(blob)
        f.write(np.ascontiguousarray(traj.frames, dtype="<f4").tobytes())
    tmp.replace(path)


def read_trajectory(path, expect_shape: Sequence[int] | None = None) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"trajectory file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE or raw[:8] != TRAJ_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic or short header")
    version, blen = struct.unpack("<IQ", raw[8:20])
    if version != TRAJ_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported format version {version}")
    if HEADER_SIZE + blen > len(raw):
        raise TruncatedFileError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(raw[HEADER_SIZE : HEADER_SIZE + blen].decode("utf-8"))
        shape = tuple(int(s) for s in meta["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable metadata ({exc})") from None
    if len(shape) != 4:
        raise ShapeMismatchError(f"{path}: expected [T, C, H, W] shape, header says {list(shape)}")
    if expect_shape is not None and tuple(expect_shape) != shape:
        raise ShapeMismatchError(f"{path}: shape {list(shape)} does not match dataset shape {list(expect_shape)}")
    payload = raw[HEADER_SIZE + blen :]
    need = 4 * int(np.prod(shape))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, shape {list(shape)} needs {need}")
    if len(payload) > need:
        raise ShapeMismatchError(f"{path}: payload has {len(payload) - need} bytes beyond shape {list(shape)}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Trajectory(
        frames, {k: float(v) for k, v in meta.get("params", {}).items()}, int(meta.get("seed", 0)),
        meta.get("system", ""), tuple(meta.get("channels", ())), float(meta.get("dt", 0.0)),
    )


@dataclass
class DatasetManifest:
    system: str
    spec: SystemSpec
    entries: list[dict] = field(default_factory=list)  # {file, params, seed, split}
    norm_mean: list[float] = field(default_factory=list)
    norm_std: list[float] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "format": "physrep-dataset",
            "version": 1,
            "system": self.system,
            "spec": self.spec.to_dict(),
            "config_hash": self.config_hash,
            "channels": list(self.spec.channels),
            "parameters": {"names": list(self.spec.param_names), "log_transform": list(self.spec.log_uniform)},
            "normalization": {"mean": self.norm_mean, "std": self.norm_std, "computed_on": "pretrain"},
            "trajectories": self.entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        try:
            spec = SystemSpec.from_dict(d["spec"])
            return cls(
                system=d["system"], spec=spec, entries=list(d["trajectories"]),
                norm_mean=list(d["normalization"]["mean"]), norm_std=list(d["normalization"]["std"]),
                config_hash=d.get("config_hash", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"invalid manifest: {exc}") from None

    def split(self, name: str) -> list[dict]:
        return [e for e in self.entries if e["split"] == name]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.spec.timesteps, *self.spec.frame_shape)


def compute_normalization(frames: np.ndarray) -> tuple[list[float], list[float]]:
    """Per-channel mean/std over [n, T, C, H, W]."""
    axes = (0, 1, 3, 4)
    mean = frames.mean(axis=axes, dtype=np.float64)
    std = frames.std(axis=axes, dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return [float(m) for m in mean], [float(s) for s in std]


def write_manifest(manifest: DatasetManifest, directory) -> Path:
    path = Path(directory) / MANIFEST_NAME
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: corrupt manifest ({exc})") from None
    if not isinstance(d, dict) or d.get("format") != "physrep-dataset":
        raise DatasetError(f"{path}: not a dataset manifest")
    return DatasetManifest.from_dict(d)


def check_manifest(directory) -> DatasetManifest:
    """Read the manifest and verify every listed file exists."""
    manifest = read_manifest(directory)
    for e in manifest.entries:
        if not (Path(directory) / e["file"]).exists():
            raise MissingFileError(f"{directory}: manifest lists missing file {e['file']}")
    return manifest


def write_dataset(directory, trajectories: Sequence[Trajectory], splits: Sequence[str], spec: SystemSpec, config_hash: str = "") -> DatasetManifest:
    """Write trajectory files plus a manifest; normalization stats come from the pretrain split only."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(trajectories) != len(splits):
        raise ValueError("write_dataset: one split label per trajectory required")
    bad = set(splits) - set(SPLITS)
    if bad:
        raise ValueError(f"write_dataset: unknown split labels {sorted(bad)}")
    entries = []
    for i, (traj, split) in enumerate(zip(trajectories, splits)):
        if traj.frames.shape != (spec.timesteps, *spec.frame_shape):
            raise ShapeMismatchError(f"trajectory {i}: shape {traj.frames.shape} does not match spec")
        if not np.all(np.isfinite(traj.frames)):
            raise DatasetError(f"trajectory {i}: non-finite values")
        name = f"traj_{i:05d}.bin"
        write_trajectory(directory / name, traj)
        entries.append({"file": name, "params": traj.params, "seed": int(traj.seed), "split": split})
    stats_from = [t.frames for t, s in zip(trajectories, splits) if s == "pretrain"] or [t.frames for t in trajectories]
    mean, std = compute_normalization(np.stack(stats_from).astype(np.float32))
    manifest = DatasetManifest(spec.system, spec, entries, mean, std, config_hash)
    write_manifest(manifest, directory)
    return manifest


def read_dataset(directory) -> tuple[DatasetManifest, list[Trajectory]]:
    manifest = check_manifest(directory)
    trajs = [read_trajectory(Path(directory) / e["file"], manifest.shape) for e in manifest.entries]
    return manifest, trajs


def load_split(directory, split: str, manifest: DatasetManifest | None = None, normalize: bool = True):
    """Stack one split as float32 [n, T, C, H, W] (normalized with manifest stats) plus its entries."""
    manifest = manifest or check_manifest(directory)
    entries = manifest.split(split)
    if not entries:
        return np.zeros((0, *manifest.shape), dtype=np.float32), entries
    frames = np.stack([read_trajectory(Path(directory) / e["file"], manifest.shape).frames for e in entries])
    if normalize:
        mean = np.asarray(manifest.norm_mean, dtype=np.float32)[None, None, :, None, None]
        std = np.asarray(manifest.norm_std, dtype=np.float32)[None, None, :, None, None]
        frames = (frames - mean) / std
    return frames.astype(np.float32), entries


def ingest_trajectory(directory, source, split: str, params: dict | None = None) -> dict:
    """Copy an externally converted trajectory file into a dataset and register it in the manifest."""
    if split not in SPLITS:
        raise ValueError(f"ingest: unknown split {split!r}")
    manifest = read_manifest(directory)
    traj = read_trajectory(source, manifest.shape)
    labels = dict(traj.params if params is None else params)
    missing = set(manifest.spec.param_names) - set(labels)
    if missing:
        raise DatasetError(f"ingest: {source} lacks parameters {sorted(missing)}")
    name = f"ext_{len(manifest.entries):05d}.bin"
    shutil.copyfile(source, Path(directory) / name)
    entry = {"file": name, "params": {k: float(labels[k]) for k in manifest.spec.param_names}, "seed": traj.seed, "split": split}
    manifest.entries.append(entry)
    write_manifest(manifest, directory)
    return entry


def generate_dataset(directory, spec: SystemSpec, n_pretrain: int, n_labeled: int, seed: int,
                     split_fractions=(0.6, 0.2, 0.2), batch: int = 64, config_hash: str = "") -> DatasetManifest:
    """Sample parameters, simulate, assign splits (pretrain | train/val/test) and write everything."""
    n = n_pretrain + n_labeled
    params = sample_parameters(spec, n, seed)
    seeds = [int(make_rng(seed, spec.system, "traj", i).integers(0, 2**31 - 1)) for i in range(n)]
    n_train = int(round(split_fractions[0] * n_labeled))
    n_val = int(round(split_fractions[1] * n_labeled))
    splits = (["pretrain"] * n_pretrain + ["train"] * n_train + ["val"] * n_val
              + ["test"] * (n_labeled - n_train - n_val))
    trajs: list[Trajectory] = []
    for start in range(0, n, batch):
        trajs.extend(simulate_batch(spec, params[start : start + batch], seeds[start : start + batch]))
    log.info("generated %d %s trajectories", n, spec.system)
    return write_dataset(directory, trajs, splits, spec, config_hash)
