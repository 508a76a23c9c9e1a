"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..5    magic b"FFCKPT"
    bytes 6..7    format version, uint16
    bytes 8..15   header length in bytes, uint64
    header        UTF-8 JSON, keys sorted, compact separators
    payload       raw array bytes, concatenated in header order

The header's "arrays" list records name, dtype (explicit-endian numpy
string like "<f4"), shape, byte offset into the payload, and byte count
for every array. Array entries are sorted by name and the JSON is
canonicalized, so equal checkpoints serialize to identical bytes; the
round-trip is bit-exact because payloads are raw memory copies.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, ContractError
from .vit import DeitModel, ModelConfig

MAGIC = b"FFCKPT"
FORMAT_VERSION = 1


@dataclass
class OptimizerSnapshot:
    """Serializable copy of AdamW state: step count plus both moments."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def copy(self) -> "OptimizerSnapshot":
        return OptimizerSnapshot(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model mid-run."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    stage: str
    epoch: int
    optimizer: OptimizerSnapshot | None = None
    rng: dict[str, int] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def from_model(model: DeitModel, stage: str, epoch: int,
               optimizer: OptimizerSnapshot | None = None,
               rng: dict[str, int] | None = None,
               history: list[dict] | None = None) -> Checkpoint:
    """Snapshot a model; arrays are copied so later steps cannot mutate it."""
    return Checkpoint(
        config=model.config,
        params={k: v.copy() for k, v in model.state_arrays().items()},
        stage=stage,
        epoch=int(epoch),
        optimizer=optimizer.copy() if optimizer is not None else None,
        rng=dict(rng or {}),
        history=[dict(h) for h in (history or [])],
    )


def build_model(ck: Checkpoint, dtype=np.float32) -> DeitModel:
    model = DeitModel(ck.config, seed=0, dtype=dtype)
    model.load_state_arrays(ck.params)
    return model


def check_compatible(model: DeitModel, ck: Checkpoint) -> None:
    if model.config != ck.config:
        raise CompatibilityError(
            f"checkpoint config {ck.config} does not match model {model.config}"
        )


def restore_into(model: DeitModel, ck: Checkpoint) -> None:
    check_compatible(model, ck)
    model.load_state_arrays(ck.params)


# ---------------------------------------------------------------------------
# serialization


def _named_arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [("params." + k, v) for k, v in sorted(ck.params.items())]
    if ck.optimizer is not None:
        out += [("optimizer.m." + k, v) for k, v in sorted(ck.optimizer.m.items())]
        out += [("optimizer.v." + k, v) for k, v in sorted(ck.optimizer.v.items())]
    return out


def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays = _named_arrays(ck)
    index = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        # explicit little-endian dtype so files are portable across hosts
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": dataclasses.asdict(ck.config),
        "stage": ck.stage,
        "epoch": ck.epoch,
        "optimizer_step": None if ck.optimizer is None else ck.optimizer.step,
        "rng": ck.rng,
        "history": ck.history,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(2, "little"))
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CompatibilityError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version = int.from_bytes(buf[pos : pos + 2], "little")
    if version != FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    pos += 2
    head_len = int.from_bytes(buf[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(buf[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"{path}: corrupt header ({exc})") from exc
    payload = buf[pos + head_len :]

    named: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CompatibilityError(f"{path}: truncated payload at {entry['name']}")
        dt = np.dtype(entry["dtype"])
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize,
                            offset=start)
        arr = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)
        named[entry["name"]] = arr

    params = {k[len("params.") :]: v for k, v in named.items()
              if k.startswith("params.")}
    optimizer = None
    if header["optimizer_step"] is not None:
        optimizer = OptimizerSnapshot(
            step=int(header["optimizer_step"]),
            m={k[len("optimizer.m.") :]: v for k, v in named.items()
               if k.startswith("optimizer.m.")},
            v={k[len("optimizer.v.") :]: v for k, v in named.items()
               if k.startswith("optimizer.v.")},
        )
    try:
        config = ModelConfig(**header["config"])
    except TypeError as exc:
        raise CompatibilityError(f"{path}: unknown config schema ({exc})") from exc
    if not params:
        raise ContractError(f"{path}: checkpoint holds no parameters")
    return Checkpoint(
        config=config,
        params=params,
        stage=header["stage"],
        epoch=int(header["epoch"]),
        optimizer=optimizer,
        rng={k: int(v) for k, v in header["rng"].items()},
        history=list(header["history"]),
    )
