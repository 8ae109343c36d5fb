"""Cosine trial scoring, EER and minimum detection cost."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .dataio import DataError, TrialRecord


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 0.01
    c_fa: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("detection costs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrialScore:
    trial: TrialRecord
    score: float


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def split_scores(scores: Iterable[TrialScore]) -> tuple:
    tar, non = [], []
    for s in scores:
        (tar if s.trial.is_target else non).append(s.score)
    return np.asarray(tar, dtype=np.float64), np.asarray(non, dtype=np.float64)


def error_rates(target: np.ndarray, nontarget: np.ndarray) -> tuple:
    """Miss and false-alarm rates over the sweep of observed scores plus +inf.

    A trial is accepted when its score is >= the threshold, so
    P_miss(t) = #{target < t} / n_t and P_fa(t) = #{nontarget >= t} / n_n.
    """
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    if target.size == 0 or nontarget.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    thr = np.append(np.unique(np.concatenate([target, nontarget])), np.inf)
    p_miss = np.searchsorted(np.sort(target), thr, side="left") / target.size
    p_fa = (nontarget.size - np.searchsorted(np.sort(nontarget), thr, side="left")) / nontarget.size
    return thr, p_miss, p_fa


def compute_eer(target: np.ndarray, nontarget: np.ndarray) -> tuple:
    """(eer, threshold), linearly interpolated at the sign change of P_miss - P_fa."""
    thr, p_miss, p_fa = error_rates(target, nontarget)
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))  # d ends at +1, so a crossing always exists
    if d[i] == 0 or i == 0:
        return float(p_miss[i]), _finite(thr, i)
    frac = -d[i - 1] / (d[i] - d[i - 1])
    eer = p_miss[i - 1] + frac * (p_miss[i] - p_miss[i - 1])
    t = thr[i - 1] + frac * (thr[i] - thr[i - 1]) if np.isfinite(thr[i]) else thr[i - 1]
    return float(eer), float(t)


def compute_min_dcf(target: np.ndarray, nontarget: np.ndarray, params: DcfParams = DcfParams()) -> tuple:
    """(normalized minDCF, threshold) over the observed-score sweep."""
    thr, p_miss, p_fa = error_rates(target, nontarget)
    dcf = params.c_miss * params.p_target * p_miss + params.c_fa * (1 - params.p_target) * p_fa
    norm = min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    i = int(np.argmin(dcf))
    return float(dcf[i] / norm), _finite(thr, i)


def _finite(thr: np.ndarray, i: int) -> Optional[float]:
    # the +inf sweep point ("reject everything") has no JSON representation
    return float(thr[i]) if np.isfinite(thr[i]) else None


def eer(scores: Sequence[TrialScore]) -> tuple:
    return compute_eer(*split_scores(scores))


def min_dcf(scores: Sequence[TrialScore], params: DcfParams = DcfParams()) -> tuple:
    return compute_min_dcf(*split_scores(scores), params)


# ---------------------------------------------------------------------------
# trial scoring
# ---------------------------------------------------------------------------

def score_trials(embed: Callable[[str], np.ndarray], trials: Sequence[TrialRecord], cache: bool = True,
                 known: Optional[set] = None) -> list:
    """Cosine-score every trial; ``embed(utt_id)`` returns one embedding.

    With ``cache`` each distinct utterance is embedded once. ``known``, when
    given, is checked up front so that a bad trial list fails before any work.
    """
    if known is not None:
        for t in trials:
            for u in (t.enroll_utt, t.test_utt):
                if u not in known:
                    raise DataError(f"trial references unknown utterance {u!r}")
    memo: dict = {}

    def get(u: str) -> np.ndarray:
        if not cache:
            return embed(u)
        if u not in memo:
            memo[u] = embed(u)
        return memo[u]

    return [TrialScore(t, cosine(get(t.enroll_utt), get(t.test_utt))) for t in trials]


def make_report(scores: Sequence[TrialScore], params: DcfParams = DcfParams()) -> dict:
    tar, non = split_scores(scores)
    e, te = compute_eer(tar, non)
    d, td = compute_min_dcf(tar, non, params)
    return {"eer": e, "min_dcf": d, "threshold_eer": te, "threshold_dcf": td,
            "n_target": int(tar.size), "n_nontarget": int(non.size), "n_trials": int(tar.size + non.size)}


def write_scores(path, scores: Iterable[TrialScore], config_hash: Optional[str] = None) -> None:
    """``enroll test score`` lines, preceded by a ``# config_hash`` comment when given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash:
            fh.write(f"# config_hash {config_hash}\n")
        for s in scores:
            fh.write(f"{s.trial.enroll_utt} {s.trial.test_utt} {s.score!r}\n")


def read_scores(path, trials: Sequence[TrialRecord]) -> list:
    """Re-attach labels from ``trials`` (matched by enroll/test pair) to a scores file."""
    labels = {(t.enroll_utt, t.test_utt): t for t in trials}
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 'enroll test score'")
        key = (parts[0], parts[1])
        if key not in labels:
            raise DataError(f"{path}:{n}: no trial for pair {key}")
        out.append(TrialScore(labels[key], float(parts[2])))
    return out


def scores_hash(path) -> Optional[str]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
    return first[2] if len(first) == 3 and first[:2] == ["#", "config_hash"] else None


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
