"""MFCC front-end, per-utterance mean normalization and segment cropping."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from .dataio import SAMPLE_RATE, DataError, WaveBuffer

FEATURE_KINDS = ("mfcc", "lgp")


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = 400     # 25 ms
    hop_length: int = 160     # 10 ms
    n_fft: int = 512
    n_mels: int = 80
    n_ceps: int = 80
    f_min: float = 20.0
    f_max: float = 7600.0
    preemph: float = 0.97
    log_floor: float = 1e-10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AcousticFeatureMatrix:
    """T x D frame-major feature matrix."""

    data: np.ndarray
    frame_shift: float = 0.01
    feature_kind: str = "mfcc"

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x D with T >= 1, got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters equally spaced on the mel scale."""
    n_bins = cfg.n_fft // 2 + 1
    bin_mel = hz_to_mel(np.arange(n_bins) * cfg.sample_rate / cfg.n_fft)
    edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel[None, :] - left) / (center - left)
    down = (right - bin_mel[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, cfg: MfccConfig = MfccConfig()) -> int:
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def mfcc(wave: WaveBuffer, cfg: MfccConfig = MfccConfig()) -> AcousticFeatureMatrix:
    """Per-frame pre-emphasis, Hamming window, power spectrum, log-mel, orthonormal DCT-II."""
    if cfg.n_mels < cfg.n_ceps:
        raise ValueError("n_mels must be >= n_ceps")
    if wave.sample_rate != cfg.sample_rate:
        raise DataError(f"unsupported sample rate {wave.sample_rate}")
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < cfg.win_length:
        raise DataError(f"too short: {len(x)} samples < one {cfg.win_length}-sample window")
    frames = sliding_window_view(x, cfg.win_length)[::cfg.hop_length].copy()
    # pre-emphasis inside each frame keeps frames independent of their neighbours
    frames[:, 1:] -= cfg.preemph * frames[:, :-1].copy()
    frames[:, 0] *= 1.0 - cfg.preemph
    frames *= np.hamming(cfg.win_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.n_ceps]
    return AcousticFeatureMatrix(ceps, cfg.hop_length / cfg.sample_rate, "mfcc")


def mean_normalize(feat: AcousticFeatureMatrix) -> AcousticFeatureMatrix:
    """Subtract the per-coefficient utterance mean."""
    data = feat.data - feat.data.mean(axis=0, keepdims=True)
    return AcousticFeatureMatrix(data, feat.frame_shift, feat.feature_kind)


def crop_offset(n_frames: int, target_frames: int, rng: np.random.Generator) -> int:
    """Random start index of a ``target_frames`` crop (0 when padding is needed)."""
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    if n_frames <= target_frames:
        return 0
    return int(rng.integers(0, n_frames - target_frames + 1))


def crop_at(data: np.ndarray, target_frames: int, offset: int) -> np.ndarray:
    """Contiguous crop starting at ``offset``, or circular padding when too short."""
    T = data.shape[0]
    if T >= target_frames:
        return data[offset:offset + target_frames]
    return data[np.arange(target_frames) % T]


def crop_or_pad(feat: AcousticFeatureMatrix, target_frames: int, rng: np.random.Generator) -> AcousticFeatureMatrix:
    off = crop_offset(feat.n_frames, target_frames, rng)
    return AcousticFeatureMatrix(crop_at(feat.data, target_frames, off), feat.frame_shift, feat.feature_kind)


# ---------------------------------------------------------------------------
# FEATv1 files
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"FEATv1"
# magic, dtype code (0 = f32), kind code, T, D, frame_shift, config hash
_FEAT_HEADER = struct.Struct("<6sBBIId32s")


def write_features(path, feat: AcousticFeatureMatrix, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    T, D = feat.data.shape
    header = _FEAT_HEADER.pack(_FEAT_MAGIC, 0, FEATURE_KINDS.index(feat.feature_kind), T, D,
                               feat.frame_shift, config_hash.encode("ascii").ljust(32, b"\0"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(feat.data, dtype="<f4").tobytes())


def read_features(path, expect_hash: str = None) -> AcousticFeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FEAT_HEADER.size or raw[:6] != _FEAT_MAGIC:
        raise DataError(f"{path}: not a FEATv1 file")
    magic, dtype_code, kind, T, D, shift, chash = _FEAT_HEADER.unpack_from(raw)
    if dtype_code != 0 or kind >= len(FEATURE_KINDS):
        raise DataError(f"{path}: unsupported dtype/kind code")
    chash = chash.rstrip(b"\0").decode("ascii")
    if expect_hash is not None and chash != expect_hash:
        raise DataError(f"{path}: config hash {chash or '<none>'} does not match {expect_hash}")
    payload = raw[_FEAT_HEADER.size:]
    if len(payload) != 4 * T * D:
        raise DataError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, D).astype(np.float64)
    return AcousticFeatureMatrix(data, float(shift), FEATURE_KINDS[kind])
