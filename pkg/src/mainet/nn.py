"""Parameter containers, initialisers and the checkpoint file format."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import DimensionError, Tensor, deserialize, linear, serialize


class Module:
    """Attribute-registered parameter tree.

    Parameters are Tensors with ``requires_grad=True`` assigned as attributes;
    sub-modules are discovered the same way, in assignment order, so names
    and iteration order are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(f"{prefix}{key}", val)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for n, p in own.items():
            p.assign_(np.asarray(state[n]))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(name: str, val) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(f"{name}.{k}", item)


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    return param(rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in))


def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.weight = xavier(rng, (n_in, n_out), n_in, n_out, gain)
        if bias:
            self.bias = param(np.zeros(n_out))
        else:
            self.bias = None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


# -- checkpoint format -------------------------------------------------------------
#
# <stem>.bin  : concatenated serialized tensors, in index order
# <stem>.json : {"tensors": [{"name", "offset", "shape"}, ...], "meta": {...}}

def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    index = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        index.append({"name": name, "offset": len(blob), "shape": list(arr.shape)})
        blob += serialize(arr)
    path.with_suffix(".bin").write_bytes(bytes(blob))
    doc = {"tensors": index, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for entry in doc["tensors"]:
        t, _ = deserialize(blob, entry["offset"])
        if list(t.shape) != entry["shape"]:
            raise DimensionError(f"checkpoint entry {entry['name']}: shape {t.shape} != index {entry['shape']}")
        out[entry["name"]] = t.data
    return out, doc["meta"]

