"""
Versioned tensor container and the training Checkpoint record.

Container layout (all integers little-endian):

    b"PFCK" | u32 format version | u32 header length | JSON header | tensor blobs

The header holds free-form metadata plus an index of every tensor
(name, dtype, shape, byte offset into the blob section, byte length).
Floating tensors are stored as 32-bit floats.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from . import describe_version
from .console import get_logger
from .errors import ArchitectureMismatchError, CheckpointError

logger = get_logger(__name__)

MAGIC = b"PFCK"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")

_DTYPES = {
    "f4": (np.dtype("<f4"), torch.float32),
    "i8": (np.dtype("<i8"), torch.int64),
}


def _dtype_code(tensor: torch.Tensor) -> str:
    if tensor.is_floating_point():
        return "f4"
    if tensor.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8, torch.bool):
        return "i8"
    raise CheckpointError(f"cannot store tensors of dtype {tensor.dtype}")


def _atomic_write(path: Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)
    return path


def write_container(path: Path, tensors: Dict[str, torch.Tensor], metadata: Dict[str, Any]) -> Path:
    """Write named tensors plus JSON metadata; the file appears atomically"""
    index = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        code = _dtype_code(tensor)
        np_dtype, _ = _DTYPES[code]
        data = tensor.detach().cpu().contiguous().numpy().astype(np_dtype, copy=False).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(tensor.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    header = json.dumps({"metadata": metadata, "tensors": index}, sort_keys=True).encode("utf-8")
    payload = b"".join([_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)), header] + blobs)
    return _atomic_write(path, payload)


def read_container(path: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Inverse of write_container; raises CheckpointError on any corruption"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    start = _PREAMBLE.size
    if start + header_len > len(raw):
        raise CheckpointError(f"{path}: header runs past end of file")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    blob = memoryview(raw)[start + header_len:]
    tensors: Dict[str, torch.Tensor] = {}
    for item in header.get("tensors", []):
        try:
            np_dtype, torch_dtype = _DTYPES[item["dtype"]]
            shape = tuple(item["shape"])
            begin, nbytes = int(item["offset"]), int(item["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed tensor index entry {item!r}") from e
        if nbytes != int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize:
            raise CheckpointError(f"{path}: tensor {item['name']} has inconsistent size")
        if begin < 0 or begin + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {item['name']} runs past end of file")
        array = np.frombuffer(blob[begin:begin + nbytes], dtype=np_dtype).reshape(shape)
        tensors[item["name"]] = torch.from_numpy(array.copy()).to(torch_dtype)
    return tensors, header.get("metadata", {})


# ==========================================
#  CHECKPOINT RECORD
# ==========================================

@dataclass
class Checkpoint:
    """Everything needed to evaluate a model or continue its training"""
    model: str                                     # cpgan | cpcnn | adda
    epoch: int
    step: int
    modules: Dict[str, Dict[str, torch.Tensor]]    # module name -> state_dict
    optimizers: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    schedulers: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None     # numpy bit-generator state
    config: Dict[str, Any] = field(default_factory=dict)
    stage: Optional[str] = None
    num_classes: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    version: str = field(default_factory=describe_version)

    def module_state(self, name: str) -> Dict[str, torch.Tensor]:
        if name not in self.modules:
            raise CheckpointError(
                f"{self.model} checkpoint has no module '{name}' (has {sorted(self.modules)})"
            )
        return self.modules[name]

    def load_into(self, name: str, module: torch.nn.Module) -> torch.nn.Module:
        try:
            module.load_state_dict(self.module_state(name))
        except RuntimeError as e:
            raise ArchitectureMismatchError(f"module '{name}' does not fit: {e}") from e
        return module

    def architecture(self) -> Dict[str, Any]:
        model = self.config.get("model", {})
        return {k: model.get(k) for k in ("image_size", "channels", "embedding_dim", "encoder_variant")}

    def check_architecture(self, expected: Dict[str, Any]) -> None:
        mine = self.architecture()
        diffs = {k: (mine.get(k), v) for k, v in expected.items() if mine.get(k) != v}
        if diffs:
            detail = ", ".join(f"{k}: checkpoint={a} requested={b}" for k, (a, b) in diffs.items())
            raise ArchitectureMismatchError(f"architecture mismatch ({detail})",
                                            field=next(iter(diffs)))

    # ------------------------------------------------------------------
    def save(self, path: Path) -> Path:
        tensors: Dict[str, torch.Tensor] = {}
        module_keys: Dict[str, list] = {}
        for mod_name, state in self.modules.items():
            module_keys[mod_name] = list(state)
            for key, value in state.items():
                tensors[f"module/{mod_name}/{key}"] = value

        optimizers: Dict[str, Any] = {}
        for opt_name, state_dict in self.optimizers.items():
            scalars: Dict[str, Dict[str, Any]] = {}
            tensor_keys: Dict[str, list] = {}
            for idx, slots in state_dict.get("state", {}).items():
                for key, value in slots.items():
                    if torch.is_tensor(value):
                        tensors[f"optim/{opt_name}/{idx}/{key}"] = value
                        tensor_keys.setdefault(str(idx), []).append(key)
                    else:
                        scalars.setdefault(str(idx), {})[key] = value
            optimizers[opt_name] = {
                "param_groups": state_dict.get("param_groups", []),
                "tensor_keys": tensor_keys,
                "scalars": scalars,
            }

        metadata = {
            "kind": "pfgan-checkpoint",
            "model": self.model,
            "epoch": self.epoch,
            "step": self.step,
            "stage": self.stage,
            "num_classes": self.num_classes,
            "modules": module_keys,
            "optimizers": optimizers,
            "schedulers": self.schedulers,
            "rng_state": self.rng_state,
            "config": self.config,
            "extra": self.extra,
            "version": self.version,
        }
        written = write_container(path, tensors, metadata)
        logger.debug("checkpoint written to %s (%d tensors)", written, len(tensors))
        return written

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        tensors, meta = read_container(path)
        if meta.get("kind") != "pfgan-checkpoint":
            raise CheckpointError(f"{path} is a container but not a training checkpoint")
        try:
            modules = {
                name: {key: tensors[f"module/{name}/{key}"] for key in keys}
                for name, keys in meta["modules"].items()
            }
            optimizers = {}
            for opt_name, info in meta.get("optimizers", {}).items():
                state: Dict[int, Dict[str, Any]] = {}
                for idx, keys in info.get("tensor_keys", {}).items():
                    for key in keys:
                        state.setdefault(int(idx), {})[key] = tensors[f"optim/{opt_name}/{idx}/{key}"]
                for idx, slots in info.get("scalars", {}).items():
                    state.setdefault(int(idx), {}).update(slots)
                optimizers[opt_name] = {"state": state, "param_groups": info["param_groups"]}
        except KeyError as e:
            raise CheckpointError(f"{path}: missing tensor or field {e}") from e

        return cls(
            model=meta["model"], epoch=int(meta["epoch"]), step=int(meta["step"]),
            modules=modules, optimizers=optimizers, schedulers=meta.get("schedulers", {}),
            rng_state=meta.get("rng_state"), config=meta.get("config", {}),
            stage=meta.get("stage"), num_classes=meta.get("num_classes"),
            extra=meta.get("extra", {}), version=meta.get("version", "unknown"),
        )
