"""AAM-softmax training of single-path and dual-path embedding networks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nncore as nn
from .dataio import DataError
from .features import crop_at, crop_offset
from .model import DualGmmResNext, GmmResNext, ModelConfig, save_checkpoint
from .nncore import ParamTree, Tensor

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    lr_decay_per_epoch: float = 0.03
    weight_decay: float = 2e-5
    margin: float = 0.2
    scale: float = 30.0
    batch_size: int = 32
    epochs: int = 20
    segment_frames: int = 200
    seed: int = 0
    # fusion stage of two-step training; None -> same as step 1
    step2_epochs: Optional[int] = None
    step2_lr0: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two items)")
        if self.epochs < 1 or self.segment_frames < 2:
            raise ValueError("epochs must be >= 1 and segment_frames >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


TRAIN_PROFILES = {
    "desk": TrainConfig(),
    "full": TrainConfig(batch_size=200, epochs=100),
}


def lr_schedule(epoch: int, lr0: float = 0.001, decay: float = 0.03) -> float:
    """lr0 * (1 - decay) ** epoch, evaluated in decimal so that e.g. epoch 1 gives 0.00097."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return float(Decimal(repr(lr0)) * (Decimal(1) - Decimal(repr(decay))) ** int(epoch))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def init_head(n_classes: int, embedding_dim: int, seed: int, name: str = "head") -> ParamTree:
    """Classifier rows of the angular-margin softmax (renormalized at use)."""
    head = ParamTree()
    rng = np.random.default_rng([seed, 0x4ead, n_classes])
    head.add(f"{name}.weight", rng.normal(0.0, 1.0 / math.sqrt(embedding_dim), size=(n_classes, embedding_dim)))
    return head


def aam_softmax_loss(embeddings: Tensor, labels: np.ndarray, weight: Tensor, margin: float = 0.2,
                     scale: float = 30.0) -> tuple:
    """Additive angular margin softmax.

    Returns (mean loss, cosine matrix as a plain array). The target logit
    becomes cos(theta + m) while theta + m stays below pi; past that point it
    falls back to cos(theta) - m sin(m) so the logit stays monotone in theta.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cos = nn.matmul(nn.l2_normalize(embeddings, axis=1), nn.transpose(nn.l2_normalize(weight, axis=1), (1, 0)))
    onehot = np.zeros(cos.shape, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    sin = nn.sqrt(nn.clamp_min(nn.sub(1.0, nn.mul(cos, cos)), 1e-12))
    phi = nn.sub(nn.mul(cos, math.cos(margin)), nn.mul(sin, math.sin(margin)))
    phi = nn.where(cos.data > math.cos(math.pi - margin), phi, nn.sub(cos, margin * math.sin(margin)))
    logits = nn.where(onehot, phi, cos)
    return nn.cross_entropy(nn.mul(logits, scale), labels), cos.data


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and decoupled weight decay.

    Leaves flagged frozen, or without a gradient, are skipped entirely. Decay
    is applied only to leaves with ``decays(name)`` (not BN affine terms or
    biases).
    """

    def __init__(self, params: ParamTree, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in self.params.leaf_names_sorted():
            leaf = self.params[name]
            if not self.params.is_trainable(name) or leaf.grad is None:
                continue
            g = leaf.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(leaf.data)
                self.v[name] = np.zeros_like(leaf.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and self.params.decays(name):
                leaf.data -= lr * self.weight_decay * leaf.data
            leaf.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["step"] = self.t
        return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    accuracy: float
    phase: str = "train"

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "lr": self.lr, "mean_loss": self.mean_loss,
                           "accuracy": self.accuracy, "phase": self.phase})


def _batches(order: np.ndarray, batch_size: int) -> list:
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _segment_batch(views: Sequence[Sequence[np.ndarray]], idx: np.ndarray, seg: int,
                   rng: np.random.Generator) -> list:
    """One random crop per item, shared across the item's views; returns (B, C, seg) arrays."""
    dtype = nn.get_default_dtype()
    offsets = [crop_offset(views[0][i].shape[0], seg, rng) for i in idx]
    return [np.stack([crop_at(v[i], seg, o).T for i, o in zip(idx, offsets)]).astype(dtype) for v in views]


def _fit(forward: Callable, trainable: ParamTree, head: ParamTree, views: Sequence[Sequence[np.ndarray]],
         labels: np.ndarray, cfg: TrainConfig, epochs: int, lr0: float, rng_tag: int, phase: str,
         on_epoch: Optional[Callable] = None) -> tuple:
    tree = ParamTree()
    tree.update(trainable)
    tree.update(head)
    (head_name,) = head.names()
    opt = Adam(tree, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, rng_tag])
    n = len(labels)
    history = []
    for epoch in range(epochs):
        lr = lr_schedule(epoch, lr0, cfg.lr_decay_per_epoch)
        total, correct = 0.0, 0
        for idx in _batches(rng.permutation(n), cfg.batch_size):
            xs = [Tensor(x) for x in _segment_batch(views, idx, cfg.segment_frames, rng)]
            emb = forward(xs, True)
            loss, cos = aam_softmax_loss(emb, labels[idx], head[head_name], cfg.margin, cfg.scale)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} ({phase})")
            tree.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value * len(idx)
            correct += int(np.sum(np.argmax(cos, axis=1) == labels[idx]))
        entry = EpochLog(epoch, lr, total / n, correct / n, phase)
        history.append(entry)
        log.info("%s epoch %d lr %.3g loss %.4f acc %.3f", phase, epoch, lr, entry.mean_loss, entry.accuracy)
        if on_epoch is not None:
            on_epoch(entry)
    return history, opt


def _encode_labels(speakers: Sequence) -> tuple:
    classes = sorted(set(speakers))
    if len(classes) < 2:
        raise DataError(f"training needs at least 2 speakers, got {len(classes)}")
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[s] for s in speakers], dtype=np.int64), classes


def _check_views(feats: Sequence[np.ndarray], channels: int, what: str) -> None:
    for f in feats:
        if f.ndim != 2 or f.shape[1] != channels:
            raise DataError(f"{what}: expected (T, {channels}) features, got {f.shape}")


@dataclass
class TrainResult:
    model: object
    head: ParamTree
    classes: list
    history: list
    optimizer: Optional[Adam] = None
    step1_state: dict = field(default_factory=dict)

    def checkpoint_state(self) -> dict:
        state = self.model.params.state_dict()
        state.update(self.head.state_dict())
        return state


def train_single_path(features: Sequence[np.ndarray], speakers: Sequence, model_cfg: ModelConfig,
                      train_cfg: TrainConfig, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train one GMM-ResNext path; ``features`` are (T, C) arrays, one per utterance."""
    labels, classes = _encode_labels(speakers)
    if len(features) != len(labels):
        raise DataError("features and speaker labels differ in length")
    _check_views(features, model_cfg.in_channels, "train")
    model = GmmResNext(model_cfg, seed=train_cfg.seed)
    head = init_head(len(classes), model_cfg.embedding_dim, train_cfg.seed)
    history, opt = _fit(lambda xs, tr: model(xs[0], tr), model.params, head, [features], labels,
                        train_cfg, train_cfg.epochs, train_cfg.lr0, 1, "train", on_epoch)
    return TrainResult(model, head, classes, history, opt)


def train_dual_path_two_step(features_male: Optional[Sequence[np.ndarray]],
                             features_female: Optional[Sequence[np.ndarray]], speakers: Sequence,
                             model_cfg: ModelConfig, train_cfg: TrainConfig, two_step: bool = True,
                             on_epoch: Optional[Callable] = None) -> TrainResult:
    """Dual-path training.

    ``features_male``/``features_female`` are the same utterances seen through
    the male-GMM and female-GMM LGP front ends. With ``two_step`` each path is
    first trained alone with its own classifier, then both are frozen and only
    the fusion layer plus a fresh classifier are trained (paths in eval mode).
    Without it, everything is trained jointly from scratch.
    """
    if features_male is None or features_female is None:
        raise DataError("dual-path training needs male and female GMM features")
    labels, classes = _encode_labels(speakers)
    if not len(features_male) == len(features_female) == len(labels):
        raise DataError("male/female features and speaker labels differ in length")
    _check_views(features_male, model_cfg.in_channels, "male path")
    _check_views(features_female, model_cfg.in_channels, "female path")
    for a, b in zip(features_male, features_female):
        if a.shape[0] != b.shape[0]:
            raise DataError("male and female views of an utterance differ in length")

    dual = DualGmmResNext(model_cfg, seed=train_cfg.seed)
    K, E = len(classes), model_cfg.embedding_dim
    history: list = []
    if not two_step:
        head = init_head(K, E, train_cfg.seed)
        h, opt = _fit(lambda xs, tr: dual(xs[0], xs[1], tr), dual.params, head,
                      [features_male, features_female], labels, train_cfg, train_cfg.epochs,
                      train_cfg.lr0, 10, "joint", on_epoch)
        return TrainResult(dual, head, classes, h, opt)

    views = {"male": features_male, "female": features_female}
    for tag, path in enumerate(DualGmmResNext.PATHS):
        net = dual.paths[path]
        head_p = init_head(K, E, train_cfg.seed * 2 + tag + 1, name=f"{path}_head")
        h, _ = _fit(lambda xs, tr, net=net: net(xs[0], tr), dual.params.subset(f"{path}."), head_p,
                    [views[path]], labels, train_cfg, train_cfg.epochs, train_cfg.lr0, 11 + tag, path, on_epoch)
        history += h
    step1 = {k: v for p in DualGmmResNext.PATHS for k, v in dual.params.state_dict(f"{p}.").items()}

    dual.params.freeze("male.")
    dual.params.freeze("female.")
    head = init_head(K, E, train_cfg.seed)
    step2 = replace(train_cfg, epochs=train_cfg.step2_epochs or train_cfg.epochs)
    h, opt = _fit(lambda xs, tr: dual(xs[0], xs[1], tr, path_training=False), dual.params.subset("fuse."),
                  head, [features_male, features_female], labels, step2, step2.epochs,
                  train_cfg.step2_lr0 or train_cfg.lr0, 13, "fuse", on_epoch)
    return TrainResult(dual, head, classes, history + h, opt, step1)


def write_train_log(path, history: Sequence[EpochLog]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(e.to_json() + "\n" for e in history), encoding="utf-8")


def save_training_checkpoint(path, result: TrainResult, model_cfg: ModelConfig, train_cfg: TrainConfig,
                             config_hash: str = "") -> None:
    kind = "dual" if isinstance(result.model, DualGmmResNext) else "single"
    meta = {"kind": kind, "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
            "classes": [str(c) for c in result.classes]}
    opt = result.optimizer.state_dict() if result.optimizer is not None else None
    save_checkpoint(path, meta, result.checkpoint_state(), opt, config_hash)
