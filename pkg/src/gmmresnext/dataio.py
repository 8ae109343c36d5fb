"""Audio, manifest and trial-list I/O plus a deterministic synthetic corpus."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
GENDERS = ("male", "female", "unknown")
MANIFEST_FIELDS = ("utt_id", "path", "speaker_id", "gender")


class DataError(ValueError):
    """Malformed or unsupported input data."""


@dataclass(frozen=True)
class UtteranceManifestEntry:
    utt_id: str
    path: Path
    speaker_id: str
    gender: str = "unknown"


@dataclass(frozen=True)
class TrialRecord:
    label: str  # "target" | "nontarget"
    enroll_utt: str
    test_utt: str

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def load_wav(path) -> WaveBuffer:
    """Read a mono 16 kHz PCM16 or float32 WAV file, scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise DataError(f"{path}: unsupported or corrupt WAV ({exc})") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: unsupported sample rate {rate} (need {SAMPLE_RATE})")
    if data.size == 0:
        raise DataError(f"{path}: empty audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported encoding {data.dtype} (need PCM16 or float32)")
    return WaveBuffer(samples, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write ``samples`` in [-1, 1] as PCM16."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _entry_from_row(row: dict, where: str, base: Path) -> UtteranceManifestEntry:
    for field in MANIFEST_FIELDS:
        if field == "gender":
            continue
        if not row.get(field):
            raise DataError(f"{where}: missing field {field!r}")
    gender = (row.get("gender") or "unknown").strip().lower()
    if gender not in GENDERS:
        raise DataError(f"{where}: invalid gender {row.get('gender')!r}")
    path = Path(row["path"])
    if not path.is_absolute():
        path = base / path
    return UtteranceManifestEntry(row["utt_id"].strip(), path, row["speaker_id"].strip(), gender)


def parse_manifest(path) -> list:
    """Read a CSV (``utt_id,path,speaker_id,gender``) or JSONL manifest.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries: list = []
    with open(path, encoding="utf-8", newline="") as fh:
        if path.suffix == ".jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: bad JSON ({exc.msg})") from exc
                entries.append(_entry_from_row(row, f"{path}:{lineno}", base))
        else:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [f for f in MANIFEST_FIELDS[:3] if f not in header]
            if missing:
                raise DataError(f"{path}: header lacks {missing}")
            for lineno, row in enumerate(reader, 2):
                entries.append(_entry_from_row(row, f"{path}:{lineno}", base))
    seen = set()
    for e in entries:
        if e.utt_id in seen:
            raise DataError(f"{path}: duplicate utt_id {e.utt_id!r}")
        seen.add(e.utt_id)
    return entries


def write_manifest(path, entries: Iterable[UtteranceManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            p = Path(e.path)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            writer.writerow([e.utt_id, p.as_posix(), e.speaker_id, e.gender])


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

_LABELS = {"1": "target", "0": "nontarget", "target": "target", "nontarget": "nontarget"}


def parse_trials(path, manifest: Sequence[UtteranceManifestEntry] = None) -> list:
    """Read ``label enroll test`` lines (label 1/0).

    Utterance tokens may be utt_ids or audio paths; with a manifest they are
    resolved to utt_ids and unknown tokens are rejected.
    """
    path = Path(path)
    lookup = None
    if manifest is not None:
        lookup = {e.utt_id: e.utt_id for e in manifest}
        for e in manifest:
            lookup.setdefault(Path(e.path).as_posix(), e.utt_id)
            try:
                lookup.setdefault(Path(e.path).resolve().relative_to(path.parent.resolve()).as_posix(), e.utt_id)
            except ValueError:
                pass
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in _LABELS:
                raise DataError(f"{path}:{lineno}: expected 'label enroll test', got {line.strip()!r}")
            label, enroll, test = parts
            if lookup is not None:
                for tok in (enroll, test):
                    if tok not in lookup:
                        raise DataError(f"{path}:{lineno}: unresolved utterance {tok!r}")
                enroll, test = lookup[enroll], lookup[test]
            trials.append(TrialRecord(_LABELS[label], enroll, test))
    return trials


def write_trials(path, trials: Iterable[TrialRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{1 if t.is_target else 0} {t.enroll_utt} {t.test_utt}\n")


def all_pairs_trials(entries: Sequence[UtteranceManifestEntry]) -> list:
    """Every unordered pair of distinct utterances, labelled by speaker identity."""
    out = []
    for a, b in combinations(entries, 2):
        out.append(TrialRecord("target" if a.speaker_id == b.speaker_id else "nontarget", a.utt_id, b.utt_id))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeakerRecipe:
    """Fixed source-filter parameters that define one synthetic voice."""

    f0: float
    formants: tuple
    bandwidths: tuple
    tilt: float
    breathiness: float


def _speaker_recipe(seed: int, index: int, gender: str) -> SpeakerRecipe:
    rng = np.random.default_rng([seed, index, 0])
    f0 = rng.uniform(95, 150) if gender == "male" else rng.uniform(175, 260)
    scale = 1.0 if gender == "male" else 1.15
    formants = (rng.uniform(300, 850) * scale, rng.uniform(900, 2300) * scale,
                rng.uniform(2400, 3300) * scale, rng.uniform(3500, 4500) * scale)
    bandwidths = tuple(rng.uniform(60, 180, size=4))
    return SpeakerRecipe(f0, formants, bandwidths, rng.uniform(0.90, 0.98), rng.uniform(0.05, 0.4))


def _resonator(freq: float, bw: float, sr: int):
    r = math.exp(-math.pi * bw / sr)
    theta = 2 * math.pi * freq / sr
    a = [1.0, -2 * r * math.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def synth_utterance(recipe: SpeakerRecipe, n_samples: int, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render one utterance: jittered glottal pulses plus noise through the speaker's formants."""
    t = np.arange(n_samples) / sample_rate
    # slow intonation contour around the speaker's f0
    vib_rate = rng.uniform(2.0, 5.0)
    f0 = recipe.f0 * (1 + 0.06 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(f0) / sample_rate
    pulses = np.diff(np.floor(phase), prepend=0.0)
    noise = rng.normal(size=n_samples)
    excitation = pulses + recipe.breathiness * 0.3 * noise
    excitation = signal.lfilter([1.0], [1.0, -recipe.tilt], excitation)
    out = np.zeros(n_samples)
    for f, bw in zip(recipe.formants, recipe.bandwidths):
        jitter = 1 + rng.uniform(-0.03, 0.03)
        b, a = _resonator(f * jitter, bw, sample_rate)
        out += signal.lfilter(b, a, excitation)
    # syllable-rate amplitude envelope
    syl = rng.uniform(3.0, 6.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * syl * t + rng.uniform(0, 2 * np.pi)) ** 2
    out *= env
    out += 1e-3 * rng.normal(size=n_samples)
    return 0.5 * out / np.max(np.abs(out))


def synth_corpus(out_dir, n_speakers: int, utts_per_speaker: int, seed: int,
                 min_duration: float = 2.0, max_duration: float = 3.0) -> list:
    """Write a deterministic corpus of WAVs plus ``manifest.csv`` under ``out_dir``.

    Even-indexed speakers are male, odd-indexed female. Returns the manifest
    entries in file order.
    """
    if n_speakers < 2:
        raise ValueError("synth_corpus needs at least 2 speakers")
    if utts_per_speaker < 1:
        raise ValueError("synth_corpus needs at least 1 utterance per speaker")
    out_dir = Path(out_dir)
    entries = []
    for s in range(n_speakers):
        gender = "male" if s % 2 == 0 else "female"
        recipe = _speaker_recipe(seed, s, gender)
        spk = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u + 1])
            n = int(round(rng.uniform(min_duration, max_duration) * SAMPLE_RATE))
            utt_id = f"{spk}-{u:03d}"
            wav_path = out_dir / "wav" / spk / f"{utt_id}.wav"
            write_wav(wav_path, synth_utterance(recipe, n, rng))
            entries.append(UtteranceManifestEntry(utt_id, wav_path, spk, gender))
    write_manifest(out_dir / "manifest.csv", entries)
    logger.info("wrote %d synthetic utterances for %d speakers to %s", len(entries), n_speakers, out_dir)
    return entries
