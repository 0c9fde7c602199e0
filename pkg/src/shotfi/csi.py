"""CSI data model, label padding and the two preprocessing pipelines.

Raw CSI blocks are complex arrays laid out as (T, N_r, N_t, N_sc).
Model-facing features use the canonical layout (1, F, T).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class ProfileError(ValueError):
    """Raw CSI does not match the declared dataset profile."""


class CapacityError(ValueError):
    """More activities than slots."""


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    n_time: Optional[int]
    n_rx: int
    n_tx: int
    n_sc: int


WIMANS_PROFILE = DatasetProfile("wimans-amp", 3000, 3, 3, 30)
WIDAR_PROFILE = DatasetProfile("widar-phase-ratio", None, 18, 1, 30)


@dataclass(eq=False)
class CsiTensor:
    values: np.ndarray
    sample_rate_hz: float = 1000.0
    carrier_hz: float = 2.4e9

    def __post_init__(self):
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ProfileError(f"CSI must be 4-D (T, N_r, N_t, N_sc), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("CSI contains NaN or Inf")
        if self.sample_rate_hz <= 0 or self.carrier_hz <= 0:
            raise ValueError("sample rate and carrier must be positive")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class DomainDescriptor:
    environment_id: str
    carrier_hz: float
    split: str = "source"

    def __post_init__(self):
        if self.carrier_hz <= 0:
            raise ValueError("carrier_hz must be positive")
        if self.split not in ("source", "target"):
            raise ValueError(f"split must be 'source' or 'target', got {self.split!r}")


@dataclass(frozen=True)
class PaddedLabelVector:
    """Fixed-length slot labels; entries equal to ``num_classes`` mean "no person"."""

    slots: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        for s in self.slots:
            if not 0 <= s <= self.num_classes:
                raise ValueError(f"slot label {s} outside 0..{self.num_classes}")

    @property
    def no_person(self) -> int:
        return self.num_classes

    @property
    def M(self) -> int:
        return len(self.slots)

    @property
    def occupancy(self) -> int:
        return sum(s != self.num_classes for s in self.slots)

    def activities(self) -> list[int]:
        """Strip the no-person fills, returning the activity multiset as a sorted list."""
        return sorted(s for s in self.slots if s != self.num_classes)

    def multiset_equal(self, other: "PaddedLabelVector") -> bool:
        return (self.num_classes == other.num_classes
                and Counter(self.slots) == Counter(other.slots))

    def permuted(self, perm: Sequence[int]) -> "PaddedLabelVector":
        return PaddedLabelVector(tuple(self.slots[j] for j in perm), self.num_classes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.slots, dtype=np.int64)


def pad_label_set(activities: Iterable[int], M: int, num_classes: int) -> PaddedLabelVector:
    acts = [int(a) for a in activities]
    if len(acts) > M:
        raise CapacityError(f"{len(acts)} activities do not fit in {M} slots")
    for a in acts:
        if not 0 <= a < num_classes:
            raise ValueError(f"activity {a} outside 0..{num_classes - 1}")
    return PaddedLabelVector(tuple(acts) + (num_classes,) * (M - len(acts)), num_classes)


@dataclass(eq=False)
class Sample:
    """One preprocessed sample. ``features`` is canonical (1, F, T) float32."""

    features: np.ndarray
    labels: Optional[PaddedLabelVector]
    domain: DomainDescriptor
    raw: Optional[CsiTensor] = None
    quality_flags: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 3 or self.features.shape[0] != 1:
            raise ValueError(f"features must be (1, F, T), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")


def _check_profile(raw: CsiTensor, profile: Optional[DatasetProfile]) -> None:
    if profile is None:
        return
    T, n_rx, n_tx, n_sc = raw.shape
    want = (profile.n_rx, profile.n_tx, profile.n_sc)
    if (n_rx, n_tx, n_sc) != want or (profile.n_time is not None and T != profile.n_time):
        raise ProfileError(
            f"{profile.name}: expected (T={profile.n_time}, {want}), got {raw.shape}")


def amplitude_preprocess(raw: CsiTensor, profile: Optional[DatasetProfile] = WIMANS_PROFILE) -> np.ndarray:
    """|H| flattened over space, returned as (1, T, F) with f = k + N_sc*(n + N_t*m).

    This is the on-disk WiMANS orientation; use :func:`to_canonical` for (1, F, T).
    """
    _check_profile(raw, profile)
    T = raw.shape[0]
    amp = np.abs(raw.values).astype(np.float32)
    return amp.reshape(1, T, -1)


def to_canonical(features_tf: np.ndarray) -> np.ndarray:
    """(1, T, F) -> (1, F, T)."""
    return np.ascontiguousarray(np.swapaxes(features_tf, 1, 2))


def wrap_angle(phi: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    phi = np.asarray(phi, dtype=np.float64)
    return phi - 2 * np.pi * np.ceil((phi - np.pi) / (2 * np.pi))


def phase_ratio_preprocess(raw: CsiTensor, receivers: int = 6, target_T: int = 1200,
                           profile: Optional[DatasetProfile] = WIDAR_PROFILE,
                           with_quality: bool = False):
    """Phase of H[r, antenna 0] / H[r, antenna 1] for each receiver.

    Output is (1, receivers * N_sc, target_T) with f = r * N_sc + k. Longer
    recordings are truncated at the end, shorter ones zero-padded at the end.
    Cells with a zero denominator get phase 0 and are counted; pass
    ``with_quality=True`` to also receive that count.
    """
    _check_profile(raw, profile)
    T, n_rx, n_tx, n_sc = raw.shape
    if n_tx != 1:
        raise ProfileError(f"phase ratio expects one transmit antenna, got {n_tx}")
    if n_rx % receivers or n_rx // receivers < 2:
        raise ProfileError(f"{n_rx} receive antennas cannot form {receivers} receivers of >=2 antennas")
    per = n_rx // receivers
    h = raw.values[:, :, 0, :].reshape(T, receivers, per, n_sc)
    num, den = h[:, :, 0, :], h[:, :, 1, :]
    bad = den == 0
    phi = wrap_angle(np.angle(num) - np.angle(den))
    phi[bad] = 0.0
    # (T, R, K) -> (R*K, T)
    grid = phi.reshape(T, receivers * n_sc).T.astype(np.float32)
    out = np.zeros((1, receivers * n_sc, target_T), dtype=np.float32)
    n = min(T, target_T)
    out[0, :, :n] = grid[:, :n]
    if with_quality:
        return out, int(bad.sum())
    return out
