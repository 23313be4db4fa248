"""Binary checkpoint persistence (VITF format).

Layout, all integers little-endian:

    magic   4 bytes  b"VITF"
    version u32
    config  u32 byte length, then UTF-8 config text
    count   u32 number of tensors
    tensor  u16 name length, name bytes,
            u8 rank, rank x u32 dims,
            float32 data (row-major)

The config text is the run configuration plus ``meta.*`` lines. Model
parameters are stored under ``param.``, Adam moments under ``opt.m.`` /
``opt.v.``, and best-epoch weights under ``best.``. Loading parses and
validates the whole file (magic, version, sizes, tensor shapes against the
configured architecture) before any state is constructed, so a bad file
never yields a partial model. A save -> load -> save cycle is
byte-identical.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .config import ConfigError, RunConfig, parse_kv_text
from .tensor import Tensor
from .train import OptimizerState

__all__ = [
    "CheckpointError",
    "BadMagicError",
    "VersionError",
    "TruncatedError",
    "TensorMismatchError",
    "TrainingState",
    "save_checkpoint",
    "load_checkpoint",
    "save_state",
    "load_state",
]

MAGIC = b"VITF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class TensorMismatchError(CheckpointError):
    """A stored tensor's name or shape disagrees with the configuration."""


def save_checkpoint(path: str, config_text: str,
                    tensors: dict[str, np.ndarray]) -> None:
    """Write the raw format: config text plus named float32 tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config_bytes = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(array, dtype="<f4")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(
                f"{self.path}: truncated checkpoint (needed {n} bytes at "
                f"offset {self.pos}, file has {len(self.raw)})"
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> tuple[str, dict[str, np.ndarray]]:
    """Parse and validate the raw format; returns (config_text, tensors)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(raw, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    config_text = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(size * 4), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data.copy()
    if r.pos != len(raw):
        raise CheckpointError(
            f"{path}: {len(raw) - r.pos} trailing bytes after tensor table"
        )
    return config_text, tensors


# ---------------------------------------------------------------------------
# model-aware layer


@dataclass
class TrainingState:
    """Everything a run persists: config, weights, optimizer moments, the
    best-epoch snapshot, and resume metadata."""

    run_config: RunConfig
    params: dict[str, Tensor]
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    best_params: dict[str, Tensor] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def optimizer_state(self) -> OptimizerState | None:
        if self.opt_m is None:
            return None
        state = OptimizerState(self.params)
        state.m = {k: v.copy() for k, v in self.opt_m.items()}
        state.v = {k: v.copy() for k, v in self.opt_v.items()}
        state.t = int(self.meta.get("meta.opt_step", "0"))
        return state


def save_state(path: str, state: TrainingState) -> None:
    config_text = state.run_config.to_text()
    for key in sorted(state.meta):
        if not key.startswith("meta."):
            raise CheckpointError(f"metadata keys must start with 'meta.': {key}")
        config_text += f"{key} = {state.meta[key]}\n"
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"param.{name}"] = p.data
    if state.opt_m is not None:
        for name in state.params:
            tensors[f"opt.m.{name}"] = state.opt_m[name]
        for name in state.params:
            tensors[f"opt.v.{name}"] = state.opt_v[name]
    if state.best_params is not None:
        for name, p in state.best_params.items():
            tensors[f"best.{name}"] = p.data
    save_checkpoint(path, config_text, tensors)


def _collect(tensors: dict[str, np.ndarray], prefix: str,
             expected: dict[str, tuple], path: str) -> dict[str, np.ndarray]:
    found = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    for name, (shape, _) in expected.items():
        if name not in found:
            raise TensorMismatchError(f"{path}: missing tensor {prefix}{name}")
        if found[name].shape != shape:
            raise TensorMismatchError(
                f"{path}: tensor {prefix}{name} has shape {found[name].shape}, "
                f"config requires {shape}"
            )
    extra = set(found) - set(expected)
    if extra:
        raise TensorMismatchError(f"{path}: unexpected tensors {sorted(extra)[:5]}")
    return found


def load_state(path: str) -> TrainingState:
    """Load and fully validate a training checkpoint."""
    config_text, tensors = load_checkpoint(path)
    try:
        run_config = RunConfig.from_text(config_text, source=path)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config invalid: {exc}") from None
    meta = {
        key: value
        for key, (value, _) in parse_kv_text(config_text, path).items()
        if key.startswith("meta.")
    }
    expected = M.param_shapes(run_config.vit)
    params_raw = _collect(tensors, "param.", expected, path)
    params = {
        name: Tensor(params_raw[name], requires_grad=True) for name in expected
    }
    opt_m = opt_v = None
    if any(k.startswith("opt.") for k in tensors):
        opt_m = _collect(tensors, "opt.m.", expected, path)
        opt_v = _collect(tensors, "opt.v.", expected, path)
        opt_m = {name: opt_m[name] for name in expected}
        opt_v = {name: opt_v[name] for name in expected}
    best_params = None
    if any(k.startswith("best.") for k in tensors):
        best_raw = _collect(tensors, "best.", expected, path)
        best_params = {
            name: Tensor(best_raw[name], requires_grad=True) for name in expected
        }
    known_prefixes = ("param.", "opt.m.", "opt.v.", "best.")
    stray = [k for k in tensors if not k.startswith(known_prefixes)]
    if stray:
        raise TensorMismatchError(f"{path}: unexpected tensors {stray[:5]}")
    return TrainingState(run_config, params, opt_m, opt_v, best_params, meta)
