# modules/checkpoint.py
"""
Single-file checkpoint container.

Layout: magic "DNCK" | u16 version | u32 header length | JSON header |
float32/int64 tensor blob | sha256 of everything before it.

The JSON header carries the flat config echo, step counter, speaker
vocabulary, optimizer/scheduler hyperparameters and the tensor index.
Serialization is canonical, so save -> load -> save reproduces the bytes.
"""

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from modules.codec import DisentangledCodec
from modules.errors import CheckpointInvalidError, IoFailureError
from utils.config_utils import RunConfig, config_from_flat
from utils.log_utils import get_logger

logger = get_logger(__name__)

MAGIC = b"DNCK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    config: Dict[str, Any]  # flat dotted RunConfig echo
    step: int
    speakers: List[str]
    model: "OrderedDict[str, torch.Tensor]"
    discriminator: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    teacher_centroids: Optional[np.ndarray] = None
    optimizers: Dict[str, dict] = field(default_factory=dict)  # torch optimizer state_dicts
    schedulers: Dict[str, dict] = field(default_factory=dict)
    version: int = VERSION


# -------------------------
# Flattening
# -------------------------
def _storage(t: torch.Tensor) -> Tuple[str, np.ndarray]:
    arr = t.detach().cpu()
    if arr.is_floating_point():
        return "f4", arr.to(torch.float32).numpy().astype("<f4")
    return "i8", arr.to(torch.int64).numpy().astype("<i8")


def _flatten(ckpt: Checkpoint) -> Tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, t in ckpt.model.items():
        tensors[f"model/{name}"] = t
    for name, t in ckpt.discriminator.items():
        tensors[f"disc/{name}"] = t
    if ckpt.teacher_centroids is not None:
        tensors["teacher/centroids"] = torch.as_tensor(np.asarray(ckpt.teacher_centroids))

    optim_meta = {}
    for opt_name, sd in ckpt.optimizers.items():
        state_meta = {}
        for pid, entries in sorted(sd["state"].items(), key=lambda kv: int(kv[0])):
            scalars = {}
            for key, value in entries.items():
                if torch.is_tensor(value):
                    tensors[f"optim/{opt_name}/{pid}/{key}"] = value
                else:
                    scalars[key] = value
            state_meta[str(pid)] = {"keys": list(entries.keys()), "scalars": scalars}
        optim_meta[opt_name] = {"state": state_meta, "param_groups": sd["param_groups"]}

    header = {
        "version": ckpt.version,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "speakers": list(ckpt.speakers),
        "optimizers": optim_meta,
        "schedulers": ckpt.schedulers,
        "has_teacher": ckpt.teacher_centroids is not None,
    }
    return header, tensors


def to_bytes(ckpt: Checkpoint) -> bytes:
    header, tensors = _flatten(ckpt)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        kind, arr = _storage(t)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header["tensors"] = index
    header_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREAMBLE.pack(MAGIC, ckpt.version, len(header_raw)) + header_raw + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREAMBLE.size + _DIGEST_SIZE:
        raise CheckpointInvalidError(f"{source}: too short to be a checkpoint")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    magic, version, header_len = _PREAMBLE.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointInvalidError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointInvalidError(f"{source}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointInvalidError(f"{source}: checksum mismatch")

    try:
        header = json.loads(body[_PREAMBLE.size:_PREAMBLE.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointInvalidError(f"{source}: unreadable header ({e})") from e
    blob = body[_PREAMBLE.size + header_len:]

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for entry in header["tensors"]:
        dtype = "<f4" if entry["dtype"] == "f4" else "<i8"
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointInvalidError(f"{source}: tensor '{entry['name']}' is truncated")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)

    model = OrderedDict((k[len("model/"):], v) for k, v in tensors.items() if k.startswith("model/"))
    disc = OrderedDict((k[len("disc/"):], v) for k, v in tensors.items() if k.startswith("disc/"))
    centroids = tensors["teacher/centroids"].numpy().astype(np.float64) if header["has_teacher"] else None

    optimizers = {}
    for opt_name, meta in header["optimizers"].items():
        state = {}
        for pid, entry in sorted(meta["state"].items(), key=lambda kv: int(kv[0])):
            values = {}
            for key in entry["keys"]:
                values[key] = entry["scalars"][key] if key in entry["scalars"] else \
                    tensors[f"optim/{opt_name}/{pid}/{key}"]
            state[int(pid)] = values
        optimizers[opt_name] = {"state": state, "param_groups": meta["param_groups"]}

    return Checkpoint(
        config=header["config"],
        step=header["step"],
        speakers=header["speakers"],
        model=model,
        discriminator=disc,
        teacher_centroids=centroids,
        optimizers=optimizers,
        schedulers=header["schedulers"],
        version=version,
    )


# -------------------------
# File IO
# -------------------------
def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(to_bytes(ckpt))
        tmp.replace(path)
    except OSError as e:
        raise IoFailureError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"💾 Checkpoint (step {ckpt.step}) -> {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointInvalidError(f"Cannot read checkpoint {path}: {e}") from e
    return from_bytes(data, source=str(path))


def restore_model(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> Tuple[DisentangledCodec, RunConfig]:
    """Rebuild the codec and its RunConfig from a checkpoint, in eval mode."""
    cfg = config_from_flat(ckpt.config)
    codec = DisentangledCodec(cfg.model, num_speakers=len(ckpt.speakers))
    try:
        codec.load_state_dict(ckpt.model)
    except RuntimeError as e:
        raise CheckpointInvalidError(f"checkpoint tensors do not fit the configured model: {e}") from e
    return codec.to(dtype).eval(), cfg


def load_model(path: str | Path, dtype: torch.dtype = torch.float32):
    ckpt = load_checkpoint(path)
    codec, cfg = restore_model(ckpt, dtype)
    return codec, cfg, ckpt
