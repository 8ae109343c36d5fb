"""Run configuration, artifact layout and the pipeline stages behind the CLI.

Every stage reads its inputs from the work directory and writes its outputs
there, so running the stages one by one is the same computation as ``run``.
Artifacts carry a hash of the configuration sections they depend on; a stale
artifact (produced under a different configuration) fails to load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .dataio import DataError
from .evaluate import DcfParams, make_report, read_scores, score_trials, scores_hash, write_report, write_scores
from .features import AcousticFeatureMatrix, MfccConfig, mean_normalize, mfcc, read_features, write_features
from .gmm import em_train, fit_norm_stats, lgp_extract, lgp_normalize, load_gmm, save_gmm
from .model import MODEL_PROFILES, DualGmmResNext, ModelConfig, load_checkpoint, model_from_checkpoint
from .nncore import no_grad
from .train import (
    TRAIN_PROFILES,
    TrainConfig,
    save_training_checkpoint,
    train_dual_path_two_step,
    train_single_path,
    write_train_log,
)

log = logging.getLogger(__name__)

SEED_ENV = "GMMRESNEXT_SEED"
SINGLE_VARIANTS = ("base", "no_gmm", "no_mfa")
DUAL_VARIANTS = ("dual", "no_2s")
VARIANTS = SINGLE_VARIANTS + DUAL_VARIANTS
VARIANT_LABELS = {
    "base": "GMM-ResNext",
    "no_gmm": "  w/o GMM",
    "no_mfa": "  w/o MFA",
    "dual": "dGMM-ResNext",
    "no_2s": "  w/o 2S",
}
GMM_KINDS = ("ubm", "male", "female")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    n_speakers: int = 16
    train_utts: int = 10
    eval_utts: int = 4
    min_duration: float = 2.0
    max_duration: float = 3.0


@dataclass(frozen=True)
class GmmConfig:
    n_components: int = 64
    n_iters: int = 30
    var_floor_factor: float = 1e-3


def _default_paths() -> dict:
    return {"train_manifest": "data/train.csv", "eval_manifest": "data/eval.csv", "trials": "data/trials.txt"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    mfcc: MfccConfig = MfccConfig()
    gmm: GmmConfig = GmmConfig()
    # n_gaussians is taken from gmm.n_components and not stored here
    model: ModelConfig = MODEL_PROFILES["tiny"]
    train: TrainConfig = TRAIN_PROFILES["desk"]
    dcf: DcfParams = DcfParams()
    paths: dict = field(default_factory=_default_paths)

    def to_dict(self, with_paths: bool = True) -> dict:
        model = self.model.to_dict()
        model.pop("n_gaussians")
        train = self.train.to_dict()
        train.pop("seed")
        d = {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "mfcc": self.mfcc.to_dict(),
            "gmm": dataclasses.asdict(self.gmm),
            "model": model,
            "train": train,
            "dcf": self.dcf.to_dict(),
        }
        if with_paths:
            d["paths"] = dict(self.paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        known = {"seed", "data", "mfcc", "gmm", "model", "train", "dcf", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            seed = int(d.get("seed", base.seed))
            gmm = _merge(GmmConfig, base.gmm, d.get("gmm"))
            model = _merge(ModelConfig, base.model, d.get("model"), forbid=("n_gaussians",))
            model = replace(model, n_gaussians=gmm.n_components)
            train = replace(_merge(TrainConfig, base.train, d.get("train"), forbid=("seed",)), seed=seed)
            paths = dict(base.paths)
            paths.update(d.get("paths") or {})
            return cls(seed, _merge(DataConfig, base.data, d.get("data")), _merge(MfccConfig, base.mfcc, d.get("mfcc")),
                       gmm, model, train, _merge(DcfParams, base.dcf, d.get("dcf")), paths)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, section: str, **values) -> "RunConfig":
        d = self.to_dict()
        if section == "seed":
            d["seed"] = values["seed"]
        else:
            d[section].update(values)
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        if self.data.n_speakers < 2 or self.data.train_utts < 1 or self.data.eval_utts < 1:
            raise ConfigError("data: need >= 2 speakers and >= 1 train/eval utterance each")
        if not 0 < self.data.min_duration <= self.data.max_duration:
            raise ConfigError("data: need 0 < min_duration <= max_duration")
        if self.gmm.n_components < 1 or self.gmm.n_iters < 0:
            raise ConfigError("gmm: n_components must be >= 1 and n_iters >= 0")


def _merge(cls, default, values: Optional[dict], forbid: tuple = ()):
    values = dict(values or {})
    for key in forbid:
        if key in values:
            raise ConfigError(f"{cls.__name__}.{key} is derived and cannot be set directly")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return replace(default, **values)


PROFILES = {
    "desk": RunConfig(),
    "full": RunConfig(gmm=GmmConfig(n_components=512), model=replace(MODEL_PROFILES["full"], n_gaussians=512),
                       train=TRAIN_PROFILES["full"]),
}


def digest(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:32]


# ---------------------------------------------------------------------------
# work directory
# ---------------------------------------------------------------------------

def _safe(utt_id: str) -> str:
    return utt_id.replace("/", "__").replace(os.sep, "__")


class Workspace:
    """A work directory holding ``config.json`` and every artifact derived from it."""

    def __init__(self, root, cfg: RunConfig, stored_seed: Optional[int] = None):
        self.root = Path(root)
        self.cfg = cfg
        # seed written to config.json; differs from cfg.seed under the environment override
        self.stored_seed = cfg.seed if stored_seed is None else stored_seed

    # -- config -------------------------------------------------------------
    @classmethod
    def open(cls, root, config_path=None, profile: str = "desk") -> "Workspace":
        """Load ``root/config.json`` (or ``config_path``, or a profile) and apply the seed override."""
        root = Path(root)
        stored = root / "config.json"
        if config_path is not None:
            cfg = load_config(config_path)
        elif stored.exists():
            cfg = load_config(stored)
        else:
            cfg = PROFILES[profile]
        cfg.validate()
        ws = cls(root, cfg)
        ws.save_config()
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                ws.cfg = cfg.with_overrides("seed", seed=int(env_seed))
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
        return ws

    def save_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        doc = self.cfg.to_dict()
        doc["seed"] = self.stored_seed
        (self.root / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def update(self, cfg: RunConfig) -> None:
        """Adopt ``cfg`` (a CLI override) and persist it."""
        cfg.validate()
        if cfg.seed != self.cfg.seed:
            self.stored_seed = cfg.seed
        self.cfg = cfg
        self.save_config()

    def path(self, key: str) -> Path:
        p = Path(self.cfg.paths[key])
        return p if p.is_absolute() else self.root / p

    # -- hashes ---------------------------------------------------------------
    def h_data(self) -> str:
        return digest("data", self.cfg.seed, dataclasses.asdict(self.cfg.data))

    def h_mfcc(self) -> str:
        return digest("mfcc", self.h_data(), self.cfg.mfcc.to_dict())

    def h_gmm(self, kind: str) -> str:
        return digest("gmm", kind, self.h_mfcc(), dataclasses.asdict(self.cfg.gmm))

    def h_inputs(self, variant: str) -> str:
        if variant == "no_gmm":
            return self.h_mfcc()
        if variant in DUAL_VARIANTS:
            return digest(self.h_gmm("male"), self.h_gmm("female"))
        return self.h_gmm("ubm")

    def h_model(self, variant: str) -> str:
        return digest("model", variant, self.h_inputs(variant), self.model_config(variant).to_dict(),
                      self.cfg.train.to_dict())

    def h_report(self, variant: str) -> str:
        return digest("report", self.h_model(variant), self.cfg.dcf.to_dict())

    # -- artifact paths -------------------------------------------------------
    def feat_path(self, kind: str, utt_id: str) -> Path:
        return self.root / "feats" / kind / f"{_safe(utt_id)}.feat"

    def gmm_path(self, kind: str) -> Path:
        return self.root / "gmm" / f"{kind}.gmm"

    def ckpt_path(self, variant: str) -> Path:
        return self.root / "models" / f"{variant}.ckpt"

    def emb_path(self, variant: str) -> Path:
        return self.root / "embeddings" / f"{variant}.npz"

    def scores_path(self, variant: str) -> Path:
        return self.root / "scores" / f"{variant}.txt"

    def report_path(self, variant: str) -> Path:
        return self.root / "reports" / f"{variant}.json"

    # -- manifests ------------------------------------------------------------
    def manifest(self, split: str) -> list:
        path = self.path(f"{split}_manifest")
        if not path.exists():
            raise DataError(f"missing {split} manifest {path} (run synth-data or set paths.{split}_manifest)")
        return dataio.parse_manifest(path)

    def all_entries(self) -> list:
        seen, out = set(), []
        for e in self.manifest("train") + self.manifest("eval"):
            if e.utt_id not in seen:
                seen.add(e.utt_id)
                out.append(e)
        return out

    def trials(self) -> list:
        path = self.path("trials")
        if not path.exists():
            raise DataError(f"missing trial list {path}")
        return dataio.parse_trials(path, self.manifest("eval"))

    # -- variants -------------------------------------------------------------
    def model_config(self, variant: str) -> ModelConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        return replace(self.cfg.model, n_gaussians=self.cfg.gmm.n_components,
                       ablate_gmm=variant == "no_gmm", ablate_mfa=variant == "no_mfa")

    def feature_kinds(self, variant: str) -> tuple:
        if variant == "no_gmm":
            return ("mfcc",)
        if variant in DUAL_VARIANTS:
            return ("lgp_male", "lgp_female")
        return ("lgp_ubm",)

    def load_feature(self, kind: str, utt_id: str) -> np.ndarray:
        path = self.feat_path(kind, utt_id)
        if not path.exists():
            stage = "extract-mfcc" if kind == "mfcc" else "extract-lgp"
            raise DataError(f"missing features {path} (run {stage})")
        if kind == "mfcc":
            expect = self.h_mfcc()
        else:
            expect = self.h_gmm(kind.split("_", 1)[1])
        return read_features(path, expect_hash=expect).data.astype(np.float32)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def synth_data(ws: Workspace) -> list:
    d = ws.cfg.data
    per = d.train_utts + d.eval_utts
    out = ws.root / "data"
    entries = dataio.synth_corpus(out, d.n_speakers, per, ws.cfg.seed, d.min_duration, d.max_duration)
    train = [e for i, e in enumerate(entries) if i % per < d.train_utts]
    held = [e for i, e in enumerate(entries) if i % per >= d.train_utts]
    dataio.write_manifest(ws.path("train_manifest"), train)
    dataio.write_manifest(ws.path("eval_manifest"), held)
    dataio.write_trials(ws.path("trials"), dataio.all_pairs_trials(held))
    log.info("synthesized %d utterances (%d train, %d eval)", len(entries), len(train), len(held))
    return entries


def extract_mfcc(ws: Workspace) -> int:
    h = ws.h_mfcc()
    entries = ws.all_entries()
    for e in entries:
        feat = mean_normalize(mfcc(dataio.load_wav(e.path), ws.cfg.mfcc))
        write_features(ws.feat_path("mfcc", e.utt_id), feat, h)
    log.info("wrote MFCC features for %d utterances", len(entries))
    return len(entries)


def _train_gmm(ws: Workspace, kind: str, train: list) -> None:
    if kind == "ubm":
        subset = train
    else:
        subset = [e for e in train if e.gender == kind]
        if not subset:
            raise DataError(f"no {kind} training utterances: gender labels are required for the gender GMMs")
    frames = np.concatenate([ws.load_feature("mfcc", e.utt_id) for e in subset]).astype(np.float64)
    g = ws.cfg.gmm
    try:
        gmm = em_train(frames, g.n_components, g.n_iters, ws.cfg.seed, g.var_floor_factor)
    except ValueError as exc:
        raise DataError(f"{kind} GMM: {exc}") from exc
    all_train = (AcousticFeatureMatrix(ws.load_feature("mfcc", e.utt_id).astype(np.float64)) for e in train)
    gmm.norm = fit_norm_stats(gmm, all_train)
    save_gmm(ws.gmm_path(kind), gmm, ws.h_gmm(kind))
    log.info("%s GMM: %d components, final loglik %.4f", kind, g.n_components, gmm.loglik[-1])


def train_gmm(ws: Workspace, kinds=GMM_KINDS) -> None:
    train = ws.manifest("train")
    for kind in kinds:
        _train_gmm(ws, kind, train)


def _load_gmm(ws: Workspace, kind: str):
    path = ws.gmm_path(kind)
    if not path.exists():
        raise DataError(f"missing GMM {path} (run train-gmm)")
    return load_gmm(path, expect_hash=ws.h_gmm(kind))


def extract_lgp(ws: Workspace, kinds=GMM_KINDS) -> int:
    entries = ws.all_entries()
    for kind in kinds:
        gmm = _load_gmm(ws, kind)
        h = ws.h_gmm(kind)
        for e in entries:
            feat = AcousticFeatureMatrix(ws.load_feature("mfcc", e.utt_id).astype(np.float64))
            write_features(ws.feat_path(f"lgp_{kind}", e.utt_id), lgp_normalize(lgp_extract(gmm, feat), gmm.norm), h)
    log.info("wrote LGP features (%s) for %d utterances", ",".join(kinds), len(entries))
    return len(entries)


def train_model(ws: Workspace, variant: str) -> list:
    model_cfg = ws.model_config(variant)
    entries = ws.manifest("train")
    speakers = [e.speaker_id for e in entries]
    views = [[ws.load_feature(k, e.utt_id) for e in entries] for k in ws.feature_kinds(variant)]
    if variant in DUAL_VARIANTS:
        if any(e.gender not in ("male", "female") for e in entries):
            raise DataError("dual-path training needs male/female gender labels on every training utterance")
        result = train_dual_path_two_step(views[0], views[1], speakers, model_cfg, ws.cfg.train,
                                          two_step=variant == "dual")
    else:
        result = train_single_path(views[0], speakers, model_cfg, ws.cfg.train)
    save_training_checkpoint(ws.ckpt_path(variant), result, model_cfg, ws.cfg.train, ws.h_model(variant))
    if result.step1_state:
        np.savez(ws.root / "models" / f"{variant}.step1.npz", **result.step1_state)
    write_train_log(ws.root / "models" / f"{variant}.log.jsonl", result.history)
    return result.history


def _load_model(ws: Workspace, variant: str):
    path = ws.ckpt_path(variant)
    if not path.exists():
        raise DataError(f"missing checkpoint {path} (run train/train-dual)")
    return model_from_checkpoint(load_checkpoint(path, expect_hash=ws.h_model(variant)))


def embed(ws: Workspace, variant: str) -> dict:
    model = _load_model(ws, variant)
    kinds = ws.feature_kinds(variant)
    out = {}
    with no_grad():
        for e in ws.manifest("eval"):
            xs = [ws.load_feature(k, e.utt_id).T[None] for k in kinds]
            emb = model(*xs) if isinstance(model, DualGmmResNext) else model(xs[0])
            out[e.utt_id] = emb.data[0].copy()
    path = ws.emb_path(variant)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = sorted(out)
    np.savez(path, utt_ids=np.array(ids), embeddings=np.stack([out[u] for u in ids]),
             config_hash=np.array(ws.h_model(variant)))
    return out


def load_embeddings(ws: Workspace, variant: str) -> dict:
    path = ws.emb_path(variant)
    if not path.exists():
        raise DataError(f"missing embeddings {path} (run embed)")
    with np.load(path) as z:
        if str(z["config_hash"]) != ws.h_model(variant):
            raise DataError(f"{path}: config hash does not match the current configuration")
        return {str(u): e for u, e in zip(z["utt_ids"], z["embeddings"])}


def score(ws: Workspace, variant: str) -> list:
    emb = load_embeddings(ws, variant)

    def lookup(u: str) -> np.ndarray:
        return emb[u]

    scores = score_trials(lookup, ws.trials(), known=set(emb))
    write_scores(ws.scores_path(variant), scores, ws.h_model(variant))
    return scores


def evaluate(ws: Workspace, variant: str) -> dict:
    path = ws.scores_path(variant)
    if not path.exists():
        raise DataError(f"missing scores {path} (run score)")
    if scores_hash(path) != ws.h_model(variant):
        raise DataError(f"{path}: config hash does not match the current configuration")
    scores = read_scores(path, ws.trials())
    report = {"variant": variant, "config_hash": ws.h_report(variant), "config": ws.cfg.to_dict(with_paths=False)}
    report.update(make_report(scores, ws.cfg.dcf))
    write_report(ws.report_path(variant), report)
    return report


def _needs_gmm(variants) -> tuple:
    kinds = []
    if any(v in ("base", "no_mfa") for v in variants):
        kinds.append("ubm")
    if any(v in DUAL_VARIANTS for v in variants):
        kinds += ["male", "female"]
    return tuple(kinds)


def run_variant(ws: Workspace, variant: str) -> dict:
    train_model(ws, variant)
    embed(ws, variant)
    score(ws, variant)
    return evaluate(ws, variant)


def run_pipeline(ws: Workspace, variants=("base",), synth: bool = True) -> list:
    if synth:
        synth_data(ws)
    extract_mfcc(ws)
    kinds = _needs_gmm(variants)
    if kinds:
        train_gmm(ws, kinds)
        extract_lgp(ws, kinds)
    return [run_variant(ws, v) for v in variants]


def ablation_rows(variants) -> list:
    rows = ["base"] + [v for v in variants if v != "base"]
    for v in rows:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    return rows


def ablate(ws: Workspace, variants, synth: bool = True) -> dict:
    rows = ablation_rows(variants)
    reports = run_pipeline(ws, rows, synth=synth)
    table = {
        "config_hash": digest("ablation", [ws.h_report(v) for v in rows]),
        "config": ws.cfg.to_dict(with_paths=False),
        "rows": [{"variant": r["variant"], "eer": r["eer"], "min_dcf": r["min_dcf"]} for r in reports],
    }
    write_report(ws.root / "reports" / "ablation.json", table)
    (ws.root / "reports" / "ablation.txt").write_text(format_table(table["rows"]), encoding="utf-8")
    return table


def format_table(rows: list) -> str:
    lines = [f"{'System':<16} {'EER(%)':>8} {'minDCF':>8}", "-" * 34]
    for r in rows:
        lines.append(f"{VARIANT_LABELS[r['variant']]:<16} {100 * r['eer']:>8.2f} {r['min_dcf']:>8.4f}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(doc)
