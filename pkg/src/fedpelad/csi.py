"""Synthetic CSI, angle-delay preprocessing, real stacking and the NMSE metric.

Complex matrices are numpy ``complex128`` arrays; real CSI samples are float64
arrays of shape ``(n_delay, n_tx, 2)`` with the real part in channel 0.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import DimensionError


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    """Multipath generator settings for one UE / sub-scenario."""

    n_sub: int = 32
    n_tx: int = 32
    n_delay: int = 16
    n_paths: int = 6
    angle_center_deg: float = 0.0
    angle_spread_deg: float = 10.0
    delay_spread_frac: float = 0.8
    rician_k_db: float = -math.inf
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_delay > self.n_sub:
            raise DimensionError(f"n_delay={self.n_delay} exceeds n_sub={self.n_sub}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.angle_spread_deg < 0:
            raise ValueError("angle_spread_deg must be >= 0")
        if not 0.0 <= self.delay_spread_frac <= 1.0:
            raise ValueError("delay_spread_frac must lie in [0, 1]")


def steering_vector(theta_rad: float, n_tx: int) -> np.ndarray:
    """Half-wavelength ULA response, element t = exp(j*pi*t*sin(theta))."""
    return np.exp(1j * np.pi * np.arange(n_tx) * np.sin(theta_rad))


def path_parameters(cfg: ChannelConfig, rng: np.random.Generator):
    """Draw (gains, delays, angles) for one realization.

    With a finite Rician K the first path is a deterministic line-of-sight
    component: real gain sqrt(K/(K+1)), zero delay, boresight at the angle
    center. The remaining paths share the scattered power 1/(K+1) equally.
    """
    has_los = cfg.rician_k_db > -math.inf
    if not has_los:
        los_power = 0.0
    elif math.isinf(cfg.rician_k_db):
        los_power = 1.0
    else:
        k_lin = 10.0 ** (cfg.rician_k_db / 10.0)
        los_power = k_lin / (k_lin + 1.0)
    n_scatter = cfg.n_paths - 1 if has_los else cfg.n_paths
    max_delay = cfg.delay_spread_frac * cfg.n_delay / cfg.n_sub
    center = math.radians(cfg.angle_center_deg)
    spread = math.radians(cfg.angle_spread_deg)

    gains, delays, angles = [], [], []
    if has_los:
        gains.append(math.sqrt(los_power) + 0j)
        delays.append(0.0)
        angles.append(center)
    if n_scatter > 0:
        power = (1.0 - los_power) / n_scatter
        g = rng.normal(size=n_scatter) + 1j * rng.normal(size=n_scatter)
        gains.extend(np.sqrt(power / 2.0) * g)
        delays.extend(rng.uniform(0.0, max_delay, size=n_scatter))
        angles.extend(center + spread * rng.uniform(-1.0, 1.0, size=n_scatter))
    return np.asarray(gains), np.asarray(delays, dtype=np.float64), np.asarray(angles)


def channel_from_paths(
    gains: np.ndarray, delays: np.ndarray, angles: np.ndarray, n_sub: int, n_tx: int
) -> np.ndarray:
    """Frequency-domain CSI matrix (n_sub x n_tx) whose row n is h_n^H."""
    n = np.arange(n_sub)[:, None]
    h = np.zeros((n_sub, n_tx), dtype=np.complex128)
    for g, tau, theta in zip(gains, delays, angles):
        h += (g * np.exp(-2j * np.pi * n * tau)) * steering_vector(theta, n_tx)[None, :]
    return h.conj()


def synth_channel(cfg: ChannelConfig, sample_index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, sample_index])
    gains, delays, angles = path_parameters(cfg, rng)
    return channel_from_paths(gains, delays, angles, cfg.n_sub, cfg.n_tx)


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix, entry (a, b) = exp(-2j*pi*a*b/n)/sqrt(n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    # reduce a*b mod n first so large products keep full phase accuracy
    phase = (np.outer(idx, idx) % n) / n
    return np.exp(-2j * np.pi * phase) / np.sqrt(n)


def to_angle_delay(h: np.ndarray) -> np.ndarray:
    if h.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {h.shape}")
    f_d = dft_matrix(h.shape[0])
    f_a = dft_matrix(h.shape[1])
    return f_d @ h @ f_a.conj().T


def from_angle_delay(h_bar: np.ndarray) -> np.ndarray:
    f_d = dft_matrix(h_bar.shape[0])
    f_a = dft_matrix(h_bar.shape[1])
    return f_d.conj().T @ h_bar @ f_a


def crop_delay(h_bar: np.ndarray, n_delay: int) -> np.ndarray:
    """Keep the first ``n_delay`` delay taps (rows)."""
    if n_delay > h_bar.shape[0] or n_delay < 1:
        raise DimensionError(f"cannot keep {n_delay} taps of a {h_bar.shape[0]}-row matrix")
    return h_bar[:n_delay, :].copy()


def to_real(h: np.ndarray) -> np.ndarray:
    return np.stack([h.real, h.imag], axis=-1).astype(np.float64)


def from_real(s: np.ndarray) -> np.ndarray:
    if s.shape[-1] != 2:
        raise DimensionError(f"last axis must hold (re, im), got shape {s.shape}")
    out = np.empty(s.shape[:-1], dtype=np.complex128)
    out.real = s[..., 0]
    out.imag = s[..., 1]
    return out


def _per_sample_sq(x: np.ndarray) -> np.ndarray:
    return (x.reshape(x.shape[0], -1) ** 2).sum(axis=1)


def nmse(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Batch-mean of ||estimate - truth||_F^2 / ||truth||_F^2.

    A single sample of shape (n_delay, n_tx, 2) is treated as a batch of one.
    """
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise DimensionError(f"truth {truth.shape} vs estimate {estimate.shape}")
    if truth.ndim == 3:
        truth, estimate = truth[None], estimate[None]
    power = _per_sample_sq(truth)
    if np.any(power == 0.0):
        raise DegenerateSampleError("NMSE undefined for an all-zero ground-truth sample")
    return float(np.mean(_per_sample_sq(estimate - truth) / power))


def to_db(value: float) -> float:
    return -math.inf if value == 0.0 else 10.0 * math.log10(value)


def nmse_db(truth: np.ndarray, estimate: np.ndarray) -> float:
    return to_db(nmse(truth, estimate))


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def n_k(self) -> int:
        return int(self.train.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train.shape[1:])

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.ascontiguousarray(part, dtype="<f8").tobytes())
        return h.hexdigest()


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 split; val and test are floored, the remainder goes to train."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def make_sample(cfg: ChannelConfig, sample_index: int, normalize: bool = True) -> np.ndarray:
    h_ad = crop_delay(to_angle_delay(synth_channel(cfg, sample_index)), cfg.n_delay)
    s = to_real(h_ad)
    if normalize:
        s = s / np.sqrt((s**2).sum())
    return s


def build_dataset(cfg: ChannelConfig, n_samples: int) -> Dataset:
    if n_samples < 10:
        raise ValueError("need at least 10 samples for an 8:1:1 split")
    samples = np.stack([make_sample(cfg, i) for i in range(n_samples)])
    n_train, n_val, _ = split_sizes(n_samples)
    return Dataset(
        train=samples[:n_train],
        val=samples[n_train : n_train + n_val],
        test=samples[n_train + n_val :],
    )


_DATASET_MAGIC = b"FPLD"
_DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIIIII")


def dataset_to_bytes(ds: Dataset) -> bytes:
    n_delay, n_tx, _ = ds.sample_shape
    header = _DATASET_HEADER.pack(
        _DATASET_MAGIC, _DATASET_VERSION, n_delay, n_tx,
        ds.train.shape[0], ds.val.shape[0], ds.test.shape[0],
    )
    body = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for p in (ds.train, ds.val, ds.test)
    )
    return header + body


def dataset_from_bytes(raw: bytes) -> Dataset:
    if len(raw) < _DATASET_HEADER.size:
        raise ValueError("truncated dataset header")
    magic, version, n_delay, n_tx, n_tr, n_va, n_te = _DATASET_HEADER.unpack_from(raw)
    if magic != _DATASET_MAGIC:
        raise ValueError(f"bad dataset magic {magic!r}")
    if version != _DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    per = n_delay * n_tx * 2
    expected = _DATASET_HEADER.size + 8 * per * (n_tr + n_va + n_te)
    if len(raw) != expected:
        raise ValueError(f"dataset payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_DATASET_HEADER.size).astype(np.float64)
    parts, start = [], 0
    for count in (n_tr, n_va, n_te):
        parts.append(flat[start : start + count * per].reshape(count, n_delay, n_tx, 2))
        start += count * per
    return Dataset(*parts)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
