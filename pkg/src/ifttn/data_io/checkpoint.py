"""Model checkpoints.

Layout (little-endian)::

    "IFTN" | int32 version | int32 entry_count
    entry_count x ( int32 name_len | name (utf-8) | int32 ndim | int32 dims[ndim] | float32 data )
    "META" | int32 text_len | text (utf-8, "key = value" lines)

The trailing META block carries the training phase, the fusion mode and an
echo of the model configuration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from ..backbone import init_cross_modality
from ..pipeline import IFTTN, ModelConfig, build_model
from ..tensor_core import Tensor
from .formats import BadTagError, FormatError, TruncatedFileError

CKPT_TAG = b"IFTN"
META_TAG = b"META"
VERSION = 1


class CheckpointError(FormatError):
    pass


@dataclass
class Checkpoint:
    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    phase: str = "init"
    fusion_mode: str = "attention"
    config: Dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    def meta_items(self) -> Dict[str, str]:
        items = {"phase": self.phase, "fusion_mode": self.fusion_mode}
        items.update({f"config.{k}": v for k, v in self.config.items()})
        return items

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_items(self.config)

    def has_group(self, group: str) -> bool:
        return any(k.startswith(group + ".") for k in self.entries)


def format_items(items: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def parse_items(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_TAG, struct.pack("<ii", ckpt.version, len(ckpt.entries))]
    for name, arr in ckpt.entries.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<i", len(nb)) + nb + struct.pack("<i", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    meta = format_items(ckpt.meta_items()).encode("utf-8")
    parts.append(META_TAG + struct.pack("<i", len(meta)) + meta)
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    if len(buf) < 12:
        raise TruncatedFileError(f"{path}: truncated checkpoint header")
    if buf[:4] != CKPT_TAG:
        raise BadTagError(f"{path}: bad tag {buf[:4]!r}")
    version, count = struct.unpack_from("<ii", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if count < 0:
        raise CheckpointError(f"{path}: negative entry count {count}")
    off = 12
    entries: Dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise TruncatedFileError(f"{path}: truncated at byte {off} (entry count {count})")
        chunk = buf[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<i", take(4))
        if nlen <= 0 or nlen > 4096:
            raise CheckpointError(f"{path}: corrupt entry name length {nlen} at byte {off - 4}")
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt entry name at byte {off - nlen}") from exc
        (ndim,) = struct.unpack("<i", take(4))
        if ndim < 0 or ndim > 8:
            raise CheckpointError(f"{path}: corrupt ndim {ndim} for {name!r}")
        dims = struct.unpack(f"<{ndim}i", take(4 * ndim))
        if any(d < 0 for d in dims):
            raise CheckpointError(f"{path}: negative dimension in {name!r}")
        n = int(np.prod(dims)) if ndim else 1
        if name in entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        entries[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    tag = take(4)
    if tag != META_TAG:
        raise CheckpointError(f"{path}: expected META block after {count} entries, found {tag!r}")
    (mlen,) = struct.unpack("<i", take(4))
    if mlen < 0:
        raise CheckpointError(f"{path}: corrupt META length")
    meta = parse_items(take(mlen).decode("utf-8"))
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes (entry count mismatch?)")
    config = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
    return Checkpoint(entries, meta.get("phase", "init"), meta.get("fusion_mode", "attention"), config, version)


def model_state(model: IFTTN, groups=("spatial", "temporal", "ttn", "ifm")) -> Dict[str, np.ndarray]:
    state = {k: v.data for k, v in model.named_parameters(groups).items()}
    state.update({k: v for k, v in model.named_buffers().items() if k.split(".", 1)[0] in groups})
    return state


def save_checkpoint(path, model: IFTTN, phase: str = "init",
                    groups=("spatial", "temporal", "ttn", "ifm")) -> Checkpoint:
    ckpt = Checkpoint(model_state(model, groups), phase, model.config.fusion_mode, model.config.to_items())
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
    return ckpt


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)


def _assign(model: IFTTN, name: str, value: np.ndarray) -> None:
    group, key = name.split(".", 1)
    if group == "ifm":
        stage, alpha = key.split(".")
        trip = model.fusion.alphas.get(int(stage[len("stage"):]))
        if trip is None:
            raise CheckpointError(f"checkpoint has fusion weights for {stage} but the model does not fuse it")
        target = trip[int(alpha[len("alpha"):]) - 1]
        if target.shape != value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} vs model {target.shape}")
        target.data[...] = value
        return
    part = getattr(model, group, None)
    if part is None:
        raise CheckpointError(f"unknown parameter group in {name!r}")
    if key in part.params:
        target = part.params[key].data
    elif key in part.buffers:
        target = part.buffers[key]
    else:
        raise CheckpointError(f"{name}: not a parameter of the model")
    if target.shape != value.shape:
        raise CheckpointError(f"{name}: checkpoint shape {value.shape} vs model {target.shape}")
    target[...] = value


def load_into_model(ckpt: Checkpoint, model: IFTTN) -> IFTTN:
    """Copy checkpoint tensors into ``model`` after validating every shape.

    A checkpoint holding only the spatial stream seeds the temporal stream by
    cross-modality initialization rather than by a direct copy.
    """
    for name, value in ckpt.entries.items():
        _assign(model, name, value)
    if ckpt.has_group("spatial") and not ckpt.has_group("temporal"):
        model.temporal = init_cross_modality(model.spatial, model.temporal.config.in_channels,
                                             name="temporal", dropout=model.temporal.config.dropout)
    return model


def load_checkpoint(path, model: Optional[IFTTN] = None) -> IFTTN:
    """Restore a model; builds one from the stored config echo when ``model`` is None."""
    ckpt = read_checkpoint(path)
    if model is None:
        model = build_model(ckpt.model_config(), seed=0)
    elif ckpt.config and ckpt.model_config().num_classes != model.config.num_classes:
        raise CheckpointError(f"checkpoint has {ckpt.model_config().num_classes} classes, "
                              f"model has {model.config.num_classes}")
    return load_into_model(ckpt, model)


