"""Binary checkpoint format.

Layout::

    GPDNET-CHECKPOINT\\n
    <manifest length: uint64 little-endian>
    <manifest: UTF-8 JSON>
    <tensor data: little-endian float32, concatenated>

The manifest carries the format version, the network and training
configurations, optimizer scalars, iteration counter, RNG state and, for
every stored tensor, its name, group, shape and byte offset into the data
section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam, ParameterStore, Tensor
from .errors import DataIOError, VersionError
from .network import GpdNetConfig
from .training import TrainingConfig, TrainState

MAGIC = b"GPDNET-CHECKPOINT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net_config: GpdNetConfig
    params: ParameterStore
    train_config: TrainingConfig | None = None
    optimizer: Adam | None = None
    iteration: int = 0
    rng_state: dict | None = None

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        return cls(state.net_config, state.params, state.train_config, state.optimizer,
                   state.iteration, state.rng.bit_generator.state)

    def to_state(self, train_config: TrainingConfig | None = None) -> TrainState:
        """Training state to resume from; ``train_config`` may extend the iteration budget."""
        tc = train_config or self.train_config
        if tc is None:
            raise VersionError("checkpoint carries no training configuration")
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        opt = self.optimizer or Adam(lr=tc.lr)
        return TrainState(self.net_config, tc, self.params, opt, np.random.Generator(bitgen),
                          self.iteration)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.dtype.str, "values": [int(v) for v in obj.ravel()],
                "shape": list(obj.shape)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["values"], dtype=np.dtype(obj["__ndarray__"])).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def dumps(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0

    def put(name, group, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)

    for name, t in ckpt.params.items():
        put(name, "param", t.data)
    for name, b in ckpt.params.buffers.items():
        put(name, "buffer", b)
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"t": o.t, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps}
        for name, m in o.m.items():
            put(name, "adam_m", m)
        for name, v in o.v.items():
            put(name, "adam_v", v)
    manifest = {
        "format_version": FORMAT_VERSION,
        "net_config": ckpt.net_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "iteration": ckpt.iteration,
        "optimizer": opt,
        "rng_state": None if ckpt.rng_state is None else _jsonable(ckpt.rng_state),
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def loads(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise VersionError("not a gpdnet checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        manifest = json.loads(raw[pos:pos + n].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"checkpoint manifest is truncated or corrupt: {exc}") from exc
    pos += n
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported "
                           f"(expected {FORMAT_VERSION})")
    data = raw[pos:]
    need = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["tensors"])
    if len(data) != need:
        raise DataIOError(f"checkpoint data section holds {len(data)} bytes, expected {need}")
    params = ParameterStore()
    opt = None
    if manifest["optimizer"] is not None:
        o = manifest["optimizer"]
        opt = Adam(o["lr"], o["beta1"], o["beta2"], o["eps"])
        opt.t = o["t"]
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=e["offset"])
        arr = arr.astype(np.float32).reshape(e["shape"])
        group = e["group"]
        if group == "param":
            params._params[e["name"]] = Tensor(arr, requires_grad=True)
        elif group == "buffer":
            params.buffers[e["name"]] = arr
        elif group == "adam_m":
            opt.m[e["name"]] = arr
        elif group == "adam_v":
            opt.v[e["name"]] = arr
    tc = manifest["train_config"]
    rng_state = manifest["rng_state"]
    return Checkpoint(
        net_config=GpdNetConfig.from_dict(manifest["net_config"]),
        params=params,
        train_config=None if tc is None else TrainingConfig(**tc),
        optimizer=opt,
        iteration=manifest["iteration"],
        rng_state=None if rng_state is None else _from_jsonable(rng_state),
    )


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
