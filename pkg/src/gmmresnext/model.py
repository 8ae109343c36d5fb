"""GMM-ResNext embedding network and its dual-path (gender-split) variant.

Layout of a single path::

    LGP (B, N, T) -> stem conv k=3 + BN + ReLU
                  -> 4 stages of DW-ResBlocks (stride 1, T preserved)
                  -> MFA: BN(concat of stage outputs)
                  -> ASP: attention-weighted mean and std over time
                  -> FC -> embedding

All parameters live in one :class:`ParamTree` under a name prefix, so the dual
model keeps both paths and the fusion layer in a single tree.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import nncore as nn
from .dataio import DataError
from .nncore import ParamTree, Tensor

MFCC_DIM = 80


@dataclass(frozen=True)
class ModelConfig:
    n_gaussians: int = 512
    stage_blocks: tuple = (3, 3, 9, 3)
    stage_channels: tuple = (256, 256, 256, 256)
    se_reduction: int = 4
    asp_bottleneck: int = 128
    embedding_dim: int = 256
    ablate_mfa: bool = False
    ablate_gmm: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise ValueError("stage_blocks and stage_channels must be non-empty and equally long")
        if min(self.stage_blocks) < 1:
            raise ValueError("every stage needs at least one block")
        for c in self.stage_channels:
            if c % self.se_reduction:
                raise ValueError(f"stage width {c} not divisible by se_reduction {self.se_reduction}")
        if min(self.n_gaussians, self.asp_bottleneck, self.embedding_dim) < 1:
            raise ValueError("n_gaussians, asp_bottleneck and embedding_dim must be positive")

    @property
    def in_channels(self) -> int:
        return MFCC_DIM if self.ablate_gmm else self.n_gaussians

    @property
    def pooled_channels(self) -> int:
        """Channels entering attentive pooling."""
        return self.stage_channels[-1] if self.ablate_mfa else sum(self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


MODEL_PROFILES = {
    "full": ModelConfig(),
    "tiny": ModelConfig(n_gaussians=64, stage_blocks=(1, 1, 1, 1), stage_channels=(32, 32, 32, 32),
                        asp_bottleneck=32, embedding_dim=64),
}


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _glorot(rng: np.random.Generator, out_f: int, in_f: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (in_f + out_f)), size=(out_f, in_f))


def add_block_params(params: ParamTree, prefix: str, cin: int, c: int, se_reduction: int,
                     rng: np.random.Generator) -> None:
    params.add(f"{prefix}.conv1.weight", _he(rng, (c, cin, 1), cin))
    params.add_batchnorm(f"{prefix}.bn1", c)
    params.add(f"{prefix}.dw.weight", _he(rng, (c, 1, 3), 3))
    params.add(f"{prefix}.conv2.weight", _he(rng, (c, c, 1), c))
    params.add_batchnorm(f"{prefix}.bn2", c)
    r = c // se_reduction
    params.add(f"{prefix}.se.fc1.weight", _he(rng, (r, c), c))
    params.add(f"{prefix}.se.fc1.bias", np.zeros(r), decay=False)
    params.add(f"{prefix}.se.fc2.weight", _glorot(rng, c, r))
    params.add(f"{prefix}.se.fc2.bias", np.zeros(c), decay=False)
    if cin != c:
        params.add(f"{prefix}.proj.weight", _he(rng, (c, cin, 1), cin))
        params.add_batchnorm(f"{prefix}.proj_bn", c)


def init_path_params(cfg: ModelConfig, seed: int, params: Optional[ParamTree] = None,
                     prefix: str = "") -> ParamTree:
    params = ParamTree() if params is None else params
    rng = np.random.default_rng([seed, 0x5eed])
    c0 = cfg.stage_channels[0]
    params.add(f"{prefix}stem.conv.weight", _he(rng, (c0, cfg.in_channels, 3), 3 * cfg.in_channels))
    params.add_batchnorm(f"{prefix}stem.bn", c0)
    cin = c0
    for s, (nb, c) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
        for b in range(nb):
            add_block_params(params, f"{prefix}stage{s}.block{b}", cin, c, cfg.se_reduction, rng)
            cin = c
    params.add_batchnorm(f"{prefix}mfa.bn", cfg.pooled_channels)
    cp, a = cfg.pooled_channels, cfg.asp_bottleneck
    params.add(f"{prefix}asp.attn1.weight", _glorot(rng, a, cp)[:, :, None])
    params.add(f"{prefix}asp.attn1.bias", np.zeros(a), decay=False)
    params.add(f"{prefix}asp.attn2.weight", _glorot(rng, 1, a)[:, :, None])
    params.add(f"{prefix}asp.attn2.bias", np.zeros(1), decay=False)
    params.add(f"{prefix}fc.weight", _glorot(rng, cfg.embedding_dim, 2 * cp))
    params.add(f"{prefix}fc.bias", np.zeros(cfg.embedding_dim), decay=False)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _bn(x: Tensor, params: ParamTree, name: str, training: bool, cfg: Optional[ModelConfig] = None) -> Tensor:
    if cfg is None:
        return nn.batchnorm(x, params.bn_state(name, training))
    return nn.batchnorm(x, params.bn_state(name, training, cfg.bn_momentum, cfg.bn_eps))


def se_block(x: Tensor, params: ParamTree, prefix: str) -> Tensor:
    """Squeeze over time, two-layer bottleneck gate, rescale channels."""
    z = nn.time_mean(x)
    h = nn.relu(nn.linear(z, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    s = nn.sigmoid(nn.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return nn.mul(x, nn.reshape(s, s.shape + (1,)))


def dw_resblock(x: Tensor, params: ParamTree, prefix: str, training: bool = False,
                cfg: Optional[ModelConfig] = None) -> Tensor:
    w1 = params[f"{prefix}.conv1.weight"]
    if x.shape[1] != w1.shape[1]:
        raise ValueError(f"{prefix}: input has {x.shape[1]} channels, block expects {w1.shape[1]}")
    h = nn.relu(_bn(nn.conv1d(x, w1), params, f"{prefix}.bn1", training, cfg))
    h = nn.conv1d(h, params[f"{prefix}.dw.weight"], padding="same", groups=h.shape[1])
    h = _bn(nn.conv1d(h, params[f"{prefix}.conv2.weight"]), params, f"{prefix}.bn2", training, cfg)
    h = se_block(h, params, f"{prefix}.se")
    if f"{prefix}.proj.weight" in params:
        x = _bn(nn.conv1d(x, params[f"{prefix}.proj.weight"]), params, f"{prefix}.proj_bn", training, cfg)
    return nn.relu(nn.add(x, h))


def mfa(stage_outputs: list, params: ParamTree, prefix: str, training: bool = False,
        ablate: bool = False, cfg: Optional[ModelConfig] = None) -> Tensor:
    """Concatenate stage outputs on channels and batch-normalize; last stage only when ablated."""
    h = stage_outputs[-1] if ablate else nn.concat_channels(stage_outputs)
    return _bn(h, params, f"{prefix}.bn", training, cfg)


def asp(h: Tensor, params: ParamTree, prefix: str, floor: float = 1e-9) -> tuple:
    """Attentive statistics pooling: returns ((B, 2C) pooled, (B, 1, T) weights)."""
    if h.shape[2] < 2:
        raise ValueError("attentive pooling needs at least two frames")
    a = nn.tanh(nn.conv1d(h, params[f"{prefix}.attn1.weight"], params[f"{prefix}.attn1.bias"]))
    e = nn.conv1d(a, params[f"{prefix}.attn2.weight"], params[f"{prefix}.attn2.bias"])
    alpha = nn.softmax(e, axis=2)
    mu = nn.reduce_sum(nn.mul(alpha, h), axis=2)
    var = nn.sub(nn.reduce_sum(nn.mul(alpha, nn.mul(h, h)), axis=2), nn.mul(mu, mu))
    sigma = nn.sqrt(nn.clamp_min(var, floor))
    return nn.concat([mu, sigma], axis=1), alpha


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class GmmResNext:
    """One embedding path; ``params`` may be shared with other modules under ``prefix``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Optional[ParamTree] = None,
                 prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params if params is not None else ParamTree()
        if f"{prefix}stem.conv.weight" not in self.params:
            init_path_params(cfg, seed, self.params, prefix)

    def stage_outputs(self, x: Tensor, training: bool = False) -> list:
        cfg, p, pre = self.cfg, self.params, self.prefix
        if x.ndim != 3 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, T) input, got {x.shape}")
        h = nn.conv1d(x, p[f"{pre}stem.conv.weight"], padding="same")
        h = nn.relu(_bn(h, p, f"{pre}stem.bn", training, cfg))
        outs = []
        for s, nb in enumerate(cfg.stage_blocks):
            for b in range(nb):
                h = dw_resblock(h, p, f"{pre}stage{s}.block{b}", training, cfg)
            outs.append(h)
        return outs

    def pooled(self, x: Tensor, training: bool = False) -> tuple:
        outs = self.stage_outputs(x, training)
        h = mfa(outs, self.params, f"{self.prefix}mfa", training, self.cfg.ablate_mfa, self.cfg)
        return asp(h, self.params, f"{self.prefix}asp")

    def forward_embedding(self, x: Union[Tensor, np.ndarray], training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        pooled, _ = self.pooled(x, training)
        pre = self.prefix
        return nn.linear(pooled, self.params[f"{pre}fc.weight"], self.params[f"{pre}fc.bias"])

    __call__ = forward_embedding


def forward_embedding(model: GmmResNext, x: Union[Tensor, np.ndarray], training: bool = False) -> Tensor:
    return model.forward_embedding(x, training)


class DualGmmResNext:
    """Male and female GMM paths fused by a fully connected layer."""

    PATHS = ("male", "female")

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Optional[ParamTree] = None):
        self.cfg = cfg
        self.params = params if params is not None else ParamTree()
        self.paths = {
            name: GmmResNext(cfg, seed * 2 + i, self.params, f"{name}.")
            for i, name in enumerate(self.PATHS)
        }
        if "fuse.weight" not in self.params:
            rng = np.random.default_rng([seed, 0xf05e])
            e = cfg.embedding_dim
            self.params.add("fuse.weight", _glorot(rng, e, 2 * e))
            self.params.add("fuse.bias", np.zeros(e), decay=False)

    @property
    def male(self) -> GmmResNext:
        return self.paths["male"]

    @property
    def female(self) -> GmmResNext:
        return self.paths["female"]

    def forward_embedding(self, x_male, x_female, training: bool = False,
                          path_training: Optional[bool] = None) -> Tensor:
        return dual_forward(self.male, self.female, self.params, x_male, x_female,
                            training, path_training)

    __call__ = forward_embedding


def dual_forward(model_m: GmmResNext, model_f: GmmResNext, fuse_params: ParamTree, x_male, x_female,
                 training: bool = False, path_training: Optional[bool] = None) -> Tensor:
    """``path_training`` overrides the BN mode of both paths (False while they are frozen)."""
    pt = training if path_training is None else path_training
    em = model_m.forward_embedding(x_male, pt)
    ef = model_f.forward_embedding(x_female, pt)
    return nn.linear(nn.concat([em, ef], axis=1), fuse_params["fuse.weight"], fuse_params["fuse.bias"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKPTv1\0\0"
_LEAF_HEAD = struct.Struct("<H")


class CheckpointError(DataError):
    pass


def _write_arrays(fh, arrays: dict) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(_LEAF_HEAD.pack(len(raw)) + raw)
        fh.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def _read_arrays(buf: memoryview, pos: int) -> tuple:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = _LEAF_HEAD.unpack_from(buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + ln]).decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) * 4
        if pos + size > len(buf):
            raise CheckpointError("checkpoint truncated")
        out[name] = np.frombuffer(buf[pos:pos + size], dtype="<f4").reshape(shape).copy()
        pos += size
    return out, pos


@dataclass
class Checkpoint:
    meta: dict
    state: dict
    optimizer: Optional[dict] = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], meta: dict, state: dict, optimizer: Optional[dict] = None,
                    config_hash: str = "") -> None:
    """``meta`` carries the model config; ``state`` maps leaf/buffer names to arrays.

    ``optimizer`` (optional) maps names to arrays and may include an integer ``step``.
    """
    doc = json.dumps({"meta": meta, "config_hash": config_hash}, sort_keys=True,
                     separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(doc)) + doc)
        _write_arrays(fh, state)
        if optimizer is None:
            fh.write(b"\0")
        else:
            opt = dict(optimizer)
            step = int(opt.pop("step", 0))
            fh.write(b"\1" + struct.pack("<Q", step))
            _write_arrays(fh, opt)


def load_checkpoint(path: Union[str, Path], expect_hash: Optional[str] = None) -> Checkpoint:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:8]) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CKPTv1 file")
    (ln,) = struct.unpack_from("<I", buf, 8)
    doc = json.loads(bytes(buf[12:12 + ln]).decode("utf-8"))
    if expect_hash is not None and doc["config_hash"] != expect_hash:
        raise CheckpointError(f"{path}: config hash {doc['config_hash']} != expected {expect_hash}")
    state, pos = _read_arrays(buf, 12 + ln)
    optimizer = None
    if buf[pos]:
        (step,) = struct.unpack_from("<Q", buf, pos + 1)
        optimizer, pos = _read_arrays(buf, pos + 9)
        optimizer["step"] = step
    return Checkpoint(doc["meta"], state, optimizer, doc["config_hash"])


def state_digest(state: dict) -> str:
    """Order-independent content hash of a state dict (names, shapes, bytes)."""
    h = hashlib.sha256()
    for name in sorted(state):
        a = np.ascontiguousarray(state[name], dtype="<f4")
        h.update(name.encode() + str(a.shape).encode() + a.tobytes())
    return h.hexdigest()


def model_from_checkpoint(ck: Checkpoint) -> Union[GmmResNext, DualGmmResNext]:
    """Rebuild the network described by a checkpoint; classifier rows are ignored."""
    cfg = ModelConfig.from_dict(ck.meta["model"])
    model = DualGmmResNext(cfg) if ck.meta.get("kind") == "dual" else GmmResNext(cfg)
    wanted = set(model.params.names()) | set(model.params.buffers)
    model.params.load_state_dict({k: v for k, v in ck.state.items() if k in wanted})
    return model
