"""Named parameter store, bias-corrected Adam, and the checkpoint container.

Checkpoint layout (version 1): a single file holding a UTF-8 JSON header
line followed by the concatenated little-endian float64 payloads.  The
header records name -> shape -> byte offset for every parameter plus the
builder's config dict and PRNG seed, so a run can be reconstructed from the
file alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

CHECKPOINT_FORMAT = "dialtune-checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered mapping name -> parameter Tensor.

    Iteration order is insertion order, so identical construction sequences
    iterate identically run to run (the optimizer and the checkpoint writer
    both rely on this).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        tensor.requires_grad = True
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def copy(self) -> "ParamStore":
        """Deep copy with fresh zero gradients (same names, same order)."""
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, Tensor(p.data.copy(), requires_grad=True))
        return out

    def copy_from(self, other: "ParamStore") -> None:
        if self.names() != other.names():
            raise ValueError("copy_from: parameter stores have different layouts")
        for name, p in other.items():
            self._params[name].data[...] = p.data


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Consumes the accumulated gradients (they are zeroed afterwards).
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    params.zero_grad()


def gaussian_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones_init(shape) -> Tensor:
    return Tensor(np.ones(shape))


def save_checkpoint(path, params: ParamStore, config: dict, seed: int) -> None:
    """Write the versioned header + little-endian f64 payload container."""
    entries = []
    offset = 0
    blobs = []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "seed": seed,
        "params": entries,
        "payload_bytes": offset,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a container; returns (ParamStore, config dict, seed)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if len(payload) != header["payload_bytes"]:
        raise ValueError(
            f"{path}: payload truncated ({len(payload)} bytes, "
            f"expected {header['payload_bytes']})"
        )
    params = ParamStore()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params.add(entry["name"], Tensor(arr.reshape(shape).copy(), requires_grad=True))
    return params, header["config"], header["seed"]
