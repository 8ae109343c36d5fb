"""Diagonal-covariance GMMs trained by EM, and log Gaussian probability (LGP) features.

The LGP feature of a frame x is, per component i, the Gaussian log-density
with every x-independent term removed::

    y_i = -1/2 * sum_d x_d^2 / var_id + sum_d x_d * mu_id / var_id

Columns are then standardized with statistics pooled over training frames.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.special import logsumexp

from .dataio import DataError
from .features import AcousticFeatureMatrix

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-6
CHUNK = 4096


@dataclass
class LgpNormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("LGP normalization std must be positive")


@dataclass
class DiagGmm:
    weights: np.ndarray      # (N,)
    means: np.ndarray        # (N, D)
    variances: np.ndarray    # (N, D)
    var_floor: np.ndarray    # (D,)
    var_floor_factor: float = 1e-3
    norm: Optional[LgpNormStats] = None
    loglik: list = field(default_factory=list)  # per-frame average, one entry per EM evaluation

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def lgp_constants(self) -> np.ndarray:
        """The per-component terms dropped from the LGP feature (C_i)."""
        return (-0.5 * self.dim * LOG_2PI
                - 0.5 * np.log(self.variances).sum(axis=1)
                - 0.5 * (self.means ** 2 / self.variances).sum(axis=1))

    def component_logpdf(self, frames: np.ndarray) -> np.ndarray:
        """(T, N) full Gaussian log-densities log p_i(x_t)."""
        return lgp_frames(self, frames) + self.lgp_constants()[None, :]

    def log_likelihood(self, frames: np.ndarray) -> np.ndarray:
        """(T,) mixture log-likelihood of each frame."""
        return logsumexp(self.component_logpdf(frames) + np.log(self.weights)[None, :], axis=1)


# ---------------------------------------------------------------------------
# LGP features
# ---------------------------------------------------------------------------

def lgp_frames(gmm: DiagGmm, frames: np.ndarray) -> np.ndarray:
    # einsum keeps each row's reduction order independent of the row count,
    # so a matrix maps exactly like its rows taken one at a time
    frames = np.asarray(frames, dtype=np.float64)
    prec = 1.0 / gmm.variances
    return (-0.5 * np.einsum("td,nd->tn", frames * frames, prec)
            + np.einsum("td,nd->tn", frames, gmm.means * prec))


def _lgp_frames_blas(gmm: DiagGmm, frames: np.ndarray) -> np.ndarray:
    prec = 1.0 / gmm.variances
    return -0.5 * (frames * frames) @ prec.T + frames @ (gmm.means * prec).T


def lgp_frame(gmm: DiagGmm, x: np.ndarray) -> np.ndarray:
    """LGP vector (N,) of a single D-dim frame."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gmm.dim,):
        raise ValueError(f"frame has shape {x.shape}, GMM expects ({gmm.dim},)")
    return lgp_frames(gmm, x[None, :])[0]


def lgp_extract(gmm: DiagGmm, feat: AcousticFeatureMatrix) -> AcousticFeatureMatrix:
    """Map a T x D MFCC matrix to the T x N LGP matrix, row by row."""
    if feat.feature_kind != "mfcc":
        raise ValueError(f"LGP extraction needs MFCC input, got {feat.feature_kind}")
    if feat.dim != gmm.dim:
        raise ValueError(f"feature dim {feat.dim} does not match GMM dim {gmm.dim}")
    return AcousticFeatureMatrix(lgp_frames(gmm, feat.data), feat.frame_shift, "lgp")


def fit_norm_stats(gmm: DiagGmm, training_feats: Iterable[AcousticFeatureMatrix]) -> LgpNormStats:
    """Single streaming pass of pooled per-component mean and population std."""
    count, mean, m2 = 0, None, None
    for feat in training_feats:
        y = lgp_extract(gmm, feat).data
        n = y.shape[0]
        bmean = y.mean(axis=0)
        bm2 = ((y - bmean) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n, bmean, bm2
            continue
        # Chan et al. pairwise merge
        total = count + n
        delta = bmean - mean
        mean = mean + delta * (n / total)
        m2 = m2 + bm2 + delta ** 2 * (count * n / total)
        count = total
    if mean is None:
        raise ValueError("fit_norm_stats: empty training stream")
    return LgpNormStats(mean, np.maximum(np.sqrt(m2 / count), STD_FLOOR))


def lgp_normalize(feat: AcousticFeatureMatrix, stats: LgpNormStats) -> AcousticFeatureMatrix:
    if feat.dim != stats.mean.shape[0]:
        raise ValueError(f"feature width {feat.dim} != stats width {stats.mean.shape[0]}")
    return AcousticFeatureMatrix((feat.data - stats.mean) / stats.std, feat.frame_shift, feat.feature_kind)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(len(data))]
    d2 = ((data - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(data))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total)))
            idx = min(idx, len(data) - 1)
        centers[j] = data[idx]
        d2 = np.minimum(d2, ((data - centers[j]) ** 2).sum(axis=1))
    return centers


def _nearest(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = np.empty(len(data), dtype=np.int64)
    c2 = (centers ** 2).sum(axis=1)
    for s in range(0, len(data), CHUNK):
        x = data[s:s + CHUNK]
        out[s:s + CHUNK] = np.argmin(c2[None, :] - 2 * x @ centers.T, axis=1)
    return out


def _accumulate(gmm: DiagGmm, data: np.ndarray):
    """E-step sufficient statistics, reduced chunk by chunk in index order."""
    N, D = gmm.n_components, gmm.dim
    nk, f, s = np.zeros(N), np.zeros((N, D)), np.zeros((N, D))
    ll = 0.0
    logw = np.log(gmm.weights)
    const = gmm.lgp_constants() + logw
    for start in range(0, len(data), CHUNK):
        x = data[start:start + CHUNK]
        logp = _lgp_frames_blas(gmm, x) + const
        lse = logsumexp(logp, axis=1)
        resp = np.exp(logp - lse[:, None])
        nk += resp.sum(axis=0)
        f += resp.T @ x
        s += resp.T @ (x * x)
        ll += lse.sum()
    return nk, f, s, ll


def _m_step(gmm: DiagGmm, nk, f, s, data: np.ndarray, outlier_rank: np.ndarray) -> None:
    n = len(data)
    dead = np.flatnonzero(nk < 1e-8)
    live = nk >= 1e-8
    gmm.means[live] = f[live] / nk[live, None]
    var = s[live] / nk[live, None] - gmm.means[live] ** 2
    gmm.variances[live] = np.maximum(var, gmm.var_floor[None, :])
    gmm.weights[:] = nk / n
    for j, comp in enumerate(dead):
        datum = outlier_rank[j % len(outlier_rank)]
        logger.warning("GMM component %d lost all responsibility; reinitialized from frame %d", comp, datum)
        gmm.means[comp] = data[datum]
        gmm.variances[comp] = np.maximum(data.var(axis=0), gmm.var_floor)
        gmm.weights[comp] = 1.0 / n
    gmm.weights /= gmm.weights.sum()


def em_train(frames: np.ndarray, n_components: int, n_iters: int = 30, seed: int = 0,
             var_floor_factor: float = 1e-3, init_subsample: int = None) -> DiagGmm:
    """Fit a diagonal GMM: seeded k-means++ centres, one hard M-step, then ``n_iters`` EM steps.

    ``gmm.loglik`` records the average per-frame log-likelihood before every
    M-step and once more for the returned model (``n_iters + 1`` values).
    """
    data = np.ascontiguousarray(frames, dtype=np.float64)
    n, D = data.shape
    if n < 10 * n_components:
        raise ValueError(f"em_train needs >= {10 * n_components} frames for {n_components} components, got {n}")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    rng = np.random.default_rng(seed)
    global_mean = data.mean(axis=0)
    global_var = data.var(axis=0)
    var_floor = var_floor_factor * global_var
    if np.any(var_floor <= 0):
        raise ValueError("data has a constant dimension; variance floor would be zero")
    outlier_rank = np.argsort(-(((data - global_mean) ** 2) / global_var).sum(axis=1), kind="stable")[:n_components]

    sub_n = init_subsample or min(n, max(2000, 20 * n_components))
    sub = data[np.sort(rng.choice(n, size=sub_n, replace=False))] if sub_n < n else data
    centers = _kmeans_pp(sub, n_components, rng)

    gmm = DiagGmm(np.full(n_components, 1.0 / n_components), centers.copy(),
                  np.tile(global_var, (n_components, 1)), var_floor, var_floor_factor)
    assign = _nearest(data, centers)
    hard = np.zeros(n_components)
    f = np.zeros((n_components, D))
    s = np.zeros((n_components, D))
    np.add.at(hard, assign, 1.0)
    np.add.at(f, assign, data)
    np.add.at(s, assign, data * data)
    _m_step(gmm, hard, f, s, data, outlier_rank)

    for it in range(n_iters):
        nk, f, s, ll = _accumulate(gmm, data)
        gmm.loglik.append(ll / n)
        logger.debug("EM iter %d: avg loglik %.6f", it, ll / n)
        _m_step(gmm, nk, f, s, data, outlier_rank)
    gmm.loglik.append(_accumulate(gmm, data)[3] / n)
    return gmm


# ---------------------------------------------------------------------------
# GMMv1 files
# ---------------------------------------------------------------------------

_GMM_MAGIC = b"GMMv1\0"
# magic, N, D, variance-floor factor, has-norm flag, config hash
_GMM_HEADER = struct.Struct("<6sIIdB32s")


def save_gmm(path, gmm: DiagGmm, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_norm = gmm.norm is not None
    with open(path, "wb") as fh:
        fh.write(_GMM_HEADER.pack(_GMM_MAGIC, gmm.n_components, gmm.dim, gmm.var_floor_factor,
                                  int(has_norm), config_hash.encode("ascii").ljust(32, b"\0")))
        arrays = [gmm.weights, gmm.means, gmm.variances]
        if has_norm:
            arrays += [gmm.norm.mean, gmm.norm.std]
        arrays.append(gmm.var_floor)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_gmm(path, expect_hash: str = None) -> DiagGmm:
    raw = Path(path).read_bytes()
    if len(raw) < _GMM_HEADER.size or raw[:6] != _GMM_MAGIC:
        raise DataError(f"{path}: not a GMMv1 file")
    _, N, D, factor, has_norm, chash = _GMM_HEADER.unpack_from(raw)
    chash = chash.rstrip(b"\0").decode("ascii")
    if expect_hash is not None and chash != expect_hash:
        raise DataError(f"{path}: config hash {chash or '<none>'} does not match {expect_hash}")
    sizes = [N, N * D, N * D] + ([N, N] if has_norm else []) + [D]
    payload = np.frombuffer(raw, dtype="<f8", offset=_GMM_HEADER.size)
    if payload.size != sum(sizes):
        raise DataError(f"{path}: truncated GMM payload")
    parts = np.split(payload.astype(np.float64), np.cumsum(sizes)[:-1])
    norm = LgpNormStats(parts[3], parts[4]) if has_norm else None
    return DiagGmm(parts[0], parts[1].reshape(N, D), parts[2].reshape(N, D), parts[-1], factor, norm)
