"""Named parameter storage with gradient buffers, freezing and BN buffers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .autograd import Tensor, get_default_dtype
from .ops import BatchNormState


class ParamTree:
    """Flat, dotted-name registry of trainable leaves and non-trainable buffers.

    Leaves are :class:`Tensor` objects with ``requires_grad=True``. Each leaf
    carries two flags: ``trainable`` (False once frozen) and ``decay``
    (whether weight decay applies; off for biases and BN affine terms).
    Buffers hold batch-norm running statistics.
    """

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._decay: dict[str, bool] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # -- construction -------------------------------------------------------
    def add(self, name: str, value: np.ndarray, decay: bool = True, trainable: bool = True) -> Tensor:
        if name in self._leaves or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        leaf = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=True, name=name)
        self._leaves[name] = leaf
        self._trainable[name] = trainable
        self._decay[name] = decay
        return leaf

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._leaves or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        buf = np.array(value, dtype=get_default_dtype())
        self.buffers[name] = buf
        return buf

    def add_batchnorm(self, prefix: str, channels: int) -> None:
        self.add(f"{prefix}.gamma", np.ones(channels), decay=False)
        self.add(f"{prefix}.beta", np.zeros(channels), decay=False)
        self.add_buffer(f"{prefix}.running_mean", np.zeros(channels))
        self.add_buffer(f"{prefix}.running_var", np.ones(channels))

    # -- access -------------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self._leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __iter__(self) -> Iterator[str]:
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)

    def items(self):
        return self._leaves.items()

    def names(self, prefix: str = "") -> list:
        return [n for n in self._leaves if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def bn_state(self, prefix: str, training: bool, momentum: float = 0.1, eps: float = 1e-5) -> BatchNormState:
        return BatchNormState(
            gamma=self._leaves[f"{prefix}.gamma"],
            beta=self._leaves[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"],
            momentum=momentum,
            eps=eps,
            training=training,
        )

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters (buffers excluded)."""
        return int(sum(self._leaves[n].data.size for n in self.names(prefix)))

    # -- gradients and freezing --------------------------------------------
    def zero_grad(self) -> None:
        for leaf in self._leaves.values():
            leaf.grad = None

    def grad(self, name: str) -> np.ndarray:
        leaf = self._leaves[name]
        return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    def freeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self._trainable[n] = False

    def unfreeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self._trainable[n] = True

    # -- snapshots ----------------------------------------------------------
    def state_dict(self, prefix: str = "") -> dict:
        """Copy of every leaf and buffer value, keyed by name."""
        out = {n: self._leaves[n].data.copy() for n in self.names(prefix)}
        out.update({n: b.copy() for n, b in self.buffers.items() if n.startswith(prefix)})
        return out

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        expected = set(self.names(prefix)) | {n for n in self.buffers if n.startswith(prefix)}
        missing = expected - set(state)
        if strict and missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in self._leaves:
                target = self._leaves[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            elif strict:
                raise KeyError(f"unknown parameter {name!r}")
            else:
                continue
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def update(self, other: "ParamTree", prefix: str = "") -> None:
        """Adopt every leaf/buffer of ``other`` under ``prefix`` (shared, not copied)."""
        for name, leaf in other._leaves.items():
            full = prefix + name
            if full in self._leaves:
                raise KeyError(f"duplicate parameter name {full!r}")
            self._leaves[full] = leaf
            self._trainable[full] = other._trainable[name]
            self._decay[full] = other._decay[name]
        for name, buf in other.buffers.items():
            self.buffers[prefix + name] = buf

    def subset(self, prefix: str) -> "ParamTree":
        """A view over the leaves/buffers under ``prefix``, names unchanged, storage shared."""
        view = ParamTree()
        for name in self.names(prefix):
            view._leaves[name] = self._leaves[name]
            view._trainable[name] = self._trainable[name]
            view._decay[name] = self._decay[name]
        view.buffers = {n: b for n, b in self.buffers.items() if n.startswith(prefix)}
        return view

    def leaf_names_sorted(self) -> list:
        return sorted(self._leaves)

    def get(self, name: str) -> Optional[Tensor]:
        return self._leaves.get(name)
