"""Synthetic multipath CSI.

Each frame is a superposition of static paths and per-user paths,

    H[t, m, n, k] = sum_l a_l(t) exp(-j 2 pi f_k tau_l(t)) exp(j 2 pi fD_l t) + noise,

with f_k = carrier + (k - N_sc/2) * spacing. An activity is a trajectory of
small delay and gain perturbations applied to its user's paths, so the same
motion produces phase swings proportional to the carrier frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .csi import CsiTensor, DomainDescriptor, PaddedLabelVector, Sample, amplitude_preprocess, \
    pad_label_set, phase_ratio_preprocess, to_canonical
from .dataset import write_dataset

C_LIGHT = 299_792_458.0
ANTENNA_SPACING_M = 0.0625       # half a wavelength at 2.4 GHz
SHIFTS = ("room", "frequency", "combined")


class GenerationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathSpec:
    attenuation: complex
    delay_s: float
    doppler_hz: float = 0.0
    aoa_rad: float = 0.0
    aod_rad: float = 0.0

    def __post_init__(self):
        if self.delay_s < 0:
            raise ValueError("delay_s must be nonnegative")
        if not (np.isfinite(self.attenuation) and np.isfinite(self.doppler_hz)):
            raise ValueError("path parameters must be finite")


# Signature shapes, indexed by activity id.
KINDS = ("sway", "wave", "burst", "ramp", "chirp", "double", "pulse", "flutter", "still")
_BASE_RATE = {"sway": 0.7, "wave": 3.0, "burst": 0.0, "ramp": 0.0, "chirp": 0.5,
              "double": 0.0, "pulse": 1.5, "flutter": 6.0, "still": 0.0}


@dataclass(frozen=True)
class ActivityKernel:
    """Delay and gain trajectory of one user's paths.

    ``depth_s`` scales the delay perturbation; ``gain_depth`` the fractional
    change of path magnitude. Both are driven by the same unit-range shape.
    """

    activity_id: int
    kind: str
    rate_hz: float = 1.0
    phase: float = 0.0
    onset_s: float = 0.0
    depth_s: float = 3e-11
    gain_depth: float = 0.2

    def shape(self, t: np.ndarray) -> np.ndarray:
        k, r, ph = self.kind, self.rate_hz, self.phase
        span = t[-1] if len(t) > 1 else 1.0
        if k in ("sway", "wave", "flutter"):
            return np.sin(2 * np.pi * r * t + ph)
        if k == "pulse":
            return 2.0 * np.sin(np.pi * r * t + ph) ** 8 - 1.0
        if k == "burst":
            return 2.0 * np.exp(-0.5 * ((t - self.onset_s) / (0.06 * span)) ** 2) - 1.0
        if k == "double":
            gap = 0.25 * span
            bumps = [np.exp(-0.5 * ((t - c) / (0.04 * span)) ** 2) for c in (self.onset_s, self.onset_s + gap)]
            return 2.0 * (bumps[0] + bumps[1]) - 1.0
        if k == "ramp":
            return np.clip(2.0 * (t - self.onset_s) / (0.5 * span), -1.0, 1.0)
        if k == "chirp":
            return np.sin(2 * np.pi * (r * t + 1.5 * r * t ** 2 / span) + ph)
        if k == "still":
            return 0.05 * np.sin(2 * np.pi * 0.2 * t + ph)
        raise GenerationError(f"unknown activity kind {k!r}")

    def modulate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.shape(np.asarray(t, dtype=np.float64))
        dtau = self.depth_s * (s + 1.0)
        gain = 1.0 + self.gain_depth * s
        return dtau, gain


def make_kernel(activity_id: int, rng: np.random.Generator, duration_s: float,
                depth_s: float = 3e-11, gain_depth: float = 0.2, jitter: float = 0.15) -> ActivityKernel:
    kind = KINDS[activity_id % len(KINDS)]
    j = lambda: 1.0 + jitter * rng.uniform(-1, 1)
    return ActivityKernel(
        activity_id=activity_id, kind=kind,
        rate_hz=_BASE_RATE[kind] * j(),
        phase=float(rng.uniform(0, 2 * np.pi)),
        onset_s=float(rng.uniform(0.15, 0.55) * duration_s),
        depth_s=depth_s * j(),
        gain_depth=gain_depth * j(),
    )


@dataclass(frozen=True)
class Room:
    environment_id: str
    static_paths: tuple
    user_delay_s: tuple = (15e-9, 60e-9)
    user_gain: tuple = (0.15, 0.35)


def sample_room(environment_id: str, rng: np.random.Generator, n_reflections: int = 4) -> Room:
    paths = [PathSpec(1.0 * np.exp(1j * rng.uniform(0, 2 * np.pi)), float(rng.uniform(8e-9, 20e-9)),
                      aoa_rad=float(rng.uniform(-1.2, 1.2)), aod_rad=float(rng.uniform(-1.2, 1.2)))]
    for _ in range(n_reflections):
        paths.append(PathSpec(rng.uniform(0.15, 0.5) * np.exp(1j * rng.uniform(0, 2 * np.pi)),
                              float(rng.uniform(20e-9, 80e-9)),
                              aoa_rad=float(rng.uniform(-1.5, 1.5)), aod_rad=float(rng.uniform(-1.5, 1.5))))
    return Room(environment_id, tuple(paths))


def sample_user_paths(room: Room, rng: np.random.Generator, n_paths: int = 2) -> tuple:
    out = []
    for _ in range(n_paths):
        out.append(PathSpec(rng.uniform(*room.user_gain) * np.exp(1j * rng.uniform(0, 2 * np.pi)),
                            float(rng.uniform(*room.user_delay_s)),
                            aoa_rad=float(rng.uniform(-1.5, 1.5)), aod_rad=float(rng.uniform(-1.5, 1.5))))
    return tuple(out)


@dataclass(frozen=True)
class SceneSpec:
    environment_id: str
    static_paths: tuple
    users: tuple                      # ((ActivityKernel, (PathSpec, ...)), ...)
    carrier_hz: float = 2.4e9
    subcarrier_spacing_hz: float = 312.5e3
    N_r: int = 3
    N_t: int = 1
    N_sc: int = 16
    T: int = 160
    sample_rate_hz: float = 50.0
    noise_std: float = 0.02
    M: int = 3
    num_classes: int = 3

    def __post_init__(self):
        if len(self.users) > self.M:
            raise ValueError(f"{len(self.users)} users exceed {self.M} slots")
        if min(self.N_r, self.N_t, self.N_sc, self.T) < 1:
            raise ValueError("antenna, subcarrier and frame counts must be >= 1")
        if self.noise_std < 0 or self.carrier_hz <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("noise_std must be >= 0; carrier and sample rate > 0")

    def subcarrier_hz(self) -> np.ndarray:
        k = np.arange(self.N_sc)
        return self.carrier_hz + (k - self.N_sc / 2) * self.subcarrier_spacing_hz


def _path_block(paths: Sequence[PathSpec], dtau: np.ndarray, gain: np.ndarray, scene: SceneSpec,
                t: np.ndarray) -> np.ndarray:
    """Sum of ``paths`` sharing one (T,) delay/gain perturbation -> (T, N_r, N_t, N_sc)."""
    f = scene.subcarrier_hz()
    m = np.arange(scene.N_r)[:, None]
    n = np.arange(scene.N_t)[None, :]
    H = np.zeros((len(t), scene.N_r, scene.N_t, scene.N_sc), dtype=np.complex128)
    for p in paths:
        geom = ANTENNA_SPACING_M * (m * np.sin(p.aoa_rad) + n * np.sin(p.aod_rad)) / C_LIGHT
        tau = p.delay_s + dtau[:, None, None, None] + geom[None, :, :, None]
        H += (p.attenuation * gain[:, None, None, None]
              * np.exp(-2j * np.pi * f * tau)
              * np.exp(2j * np.pi * p.doppler_hz * t)[:, None, None, None])
    return H


def render_csi(scene: SceneSpec, seed: int, noise: bool = True) -> tuple[CsiTensor, PaddedLabelVector]:
    t = np.arange(scene.T) / scene.sample_rate_hz
    zeros, ones = np.zeros(scene.T), np.ones(scene.T)
    H = _path_block(scene.static_paths, zeros, ones, scene, t)
    for kernel, paths in scene.users:
        dtau, gain = kernel.modulate(t)
        if not (np.all(np.isfinite(dtau)) and np.all(np.isfinite(gain))):
            raise GenerationError(f"activity {kernel.activity_id} produced non-finite modulation")
        H += _path_block(paths, dtau, gain, scene, t)
    if noise and scene.noise_std > 0:
        rng = np.random.default_rng(seed)
        s = scene.noise_std / math.sqrt(2.0)
        H += s * (rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape))
    labels = pad_label_set([k.activity_id for k, _ in scene.users], scene.M, scene.num_classes)
    return CsiTensor(H, scene.sample_rate_hz, scene.carrier_hz), labels


def make_shift_pair(base: Sequence[SceneSpec], shift: str, seed: int,
                    carrier_tgt_hz: float = 5e9, target_room: Optional[Room] = None):
    """Return (source scenes, target scenes) with the target shifted in room,
    carrier frequency or both. Activities and their kernels are kept."""
    if shift not in SHIFTS:
        raise ValueError(f"shift must be one of {SHIFTS}, got {shift!r}")
    base = list(base)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    if shift in ("room", "combined") and target_room is None:
        target_room = sample_room(f"room-{seed}-target", rng)
    out = []
    for s in base:
        t = s
        if shift in ("room", "combined"):
            users = tuple((k, sample_user_paths(target_room, rng, len(p))) for k, p in s.users)
            t = replace(t, environment_id=target_room.environment_id,
                        static_paths=target_room.static_paths, users=users)
        if shift in ("frequency", "combined"):
            t = replace(t, carrier_hz=carrier_tgt_hz)
        out.append(t)
    return base, out


@dataclass
class BenchmarkConfig:
    n_source: int = 1000
    n_target: int = 1000
    n_holdout: int = 200
    K: int = 3
    M: int = 3
    occupancy_dist: dict = field(default_factory=lambda: {0: 0.15, 1: 0.4, 2: 0.3, 3: 0.15})
    shift: str = "frequency"
    carrier_src_hz: float = 2.4e9
    carrier_tgt_hz: float = 5e9
    noise_std: float = 0.02
    seed: int = 0
    N_r: int = 3
    N_t: int = 1
    N_sc: int = 16
    T: int = 160
    sample_rate_hz: float = 50.0
    subcarrier_spacing_hz: float = 312.5e3
    depth_s: float = 3e-11
    gain_depth: float = 0.2
    user_paths: int = 1
    user_gain: tuple = (0.15, 0.35)
    preprocess: str = "amplitude"
    receivers: int = 3
    store: str = "raw"

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
            cfg.occupancy_dist = {int(k): float(v) for k, v in dict(cfg.occupancy_dist).items()}
            cfg.user_gain = tuple(float(g) for g in cfg.user_gain)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid generator config: {exc}") from exc
        return cfg

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"{key}: {why}")
        for key in ("n_source", "n_target", "K", "M", "N_r", "N_t", "N_sc", "T"):
            if int(getattr(self, key)) < 1:
                bad(key, "must be >= 1")
        if self.n_holdout < 0:
            bad("n_holdout", "must be >= 0")
        if self.shift not in SHIFTS:
            bad("shift", f"must be one of {SHIFTS}")
        if self.preprocess not in ("amplitude", "phase-ratio"):
            bad("preprocess", "must be 'amplitude' or 'phase-ratio'")
        if self.store not in ("raw", "features"):
            bad("store", "must be 'raw' or 'features'")
        if self.noise_std < 0:
            bad("noise_std", "must be >= 0")
        probs = self.occupancy_dist
        if not probs or any(k < 0 or k > self.M for k in probs) or any(v < 0 for v in probs.values()):
            bad("occupancy_dist", f"keys must lie in 0..M={self.M} with nonnegative weights")
        if abs(sum(probs.values()) - 1.0) > 1e-6:
            bad("occupancy_dist", "weights must sum to 1")
        if self.preprocess == "phase-ratio" and (self.N_t != 1 or self.N_r % self.receivers
                                                  or self.N_r // self.receivers < 2):
            bad("receivers", "phase-ratio needs N_t=1 and N_r a multiple (>=2 antennas each) of receivers")


def _draw_scenes(cfg: BenchmarkConfig, room: Room, n: int, stream: int) -> list[SceneSpec]:
    occ_keys = sorted(cfg.occupancy_dist)
    occ_p = np.array([cfg.occupancy_dist[k] for k in occ_keys])
    duration = cfg.T / cfg.sample_rate_hz
    scenes = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream, i]))
        occ = occ_keys[rng.choice(len(occ_keys), p=occ_p)]
        acts = rng.integers(0, cfg.K, size=occ)
        users = tuple((make_kernel(int(a), rng, duration, cfg.depth_s, cfg.gain_depth),
                       sample_user_paths(room, rng, cfg.user_paths)) for a in acts)
        scenes.append(SceneSpec(room.environment_id, room.static_paths, users, cfg.carrier_src_hz,
                                cfg.subcarrier_spacing_hz, cfg.N_r, cfg.N_t, cfg.N_sc, cfg.T,
                                cfg.sample_rate_hz, cfg.noise_std, cfg.M, cfg.K))
    return scenes


def scene_features(raw: CsiTensor, cfg: BenchmarkConfig) -> np.ndarray:
    if cfg.preprocess == "amplitude":
        return to_canonical(amplitude_preprocess(raw, None))
    return phase_ratio_preprocess(raw, receivers=cfg.receivers, target_T=cfg.T, profile=None)


def render_split(scenes: Sequence[SceneSpec], cfg: BenchmarkConfig, split: str, stream: int,
                 keep_raw: bool = True) -> list[Sample]:
    out = []
    for i, sc in enumerate(scenes):
        seed = int(np.random.SeedSequence([cfg.seed, stream, i, 1]).generate_state(1)[0])
        raw, labels = render_csi(sc, seed)
        raw = CsiTensor(raw.values.astype(np.complex64), raw.sample_rate_hz, raw.carrier_hz)
        feats = scene_features(raw, cfg)
        out.append(Sample(feats, labels, DomainDescriptor(sc.environment_id, sc.carrier_hz, split),
                          raw=raw if keep_raw else None))
    return out


def build_benchmark(cfg: BenchmarkConfig, keep_raw: bool = True) -> dict[str, list[Sample]]:
    """Render source, held-out source and target splits in memory."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    room = replace(sample_room(f"room-{cfg.seed}-source", rng), user_gain=tuple(cfg.user_gain))
    source = _draw_scenes(cfg, room, cfg.n_source + cfg.n_holdout, stream=1)
    target_base = _draw_scenes(cfg, room, cfg.n_target, stream=2)
    target_room = replace(sample_room(f"room-{cfg.seed}-target", rng), user_gain=room.user_gain)
    _, target = make_shift_pair(target_base, cfg.shift, cfg.seed, cfg.carrier_tgt_hz, target_room)
    rendered = render_split(source, cfg, "source", 1, keep_raw)
    return {
        "source": rendered[:cfg.n_source],
        "holdout": rendered[cfg.n_source:],
        "target": render_split(target, cfg, "target", 2, keep_raw),
    }


def generate_benchmark(cfg: BenchmarkConfig, out_dir) -> dict[str, Path]:
    """Write source / holdout / target manifests; target labels are flagged eval-only."""
    splits = build_benchmark(cfg, keep_raw=cfg.store == "raw")
    header = {"preprocess": cfg.preprocess, "sample_rate_hz": cfg.sample_rate_hz}
    if cfg.preprocess == "phase-ratio":
        header.update(receivers=cfg.receivers, target_T=cfg.T)
    paths = {}
    for name, samples in splits.items():
        if not samples:
            continue
        split = "target" if name == "target" else "source"
        paths[name] = write_dataset(samples, out_dir, "synthetic", name=f"{name}.json", store=cfg.store,
                                    num_classes=cfg.K, max_users=cfg.M, split=split,
                                    eval_only_labels=name == "target", **header)
    return paths
