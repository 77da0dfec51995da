"""Binary checkpoint files for encoder weights and prefix sets.

Layout: the ASCII header line ``PFORGE1``, one JSON metadata line (kind,
model config, config fingerprint), then each tensor as

    u32 name length, UTF-8 name, u32 rank, rank * u32 dims,
    little-endian float32 values in C order.

All integers are little-endian. Values are stored at 32-bit precision
regardless of the in-memory dtype. The fingerprint lets a later load refuse
tensors produced under an incompatible ModelConfig.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ClassificationHead, EncoderWeights, ModelConfig, PrefixSet
from .numerics import Tensor

MAGIC = b"PFORGE1\n"
_U32 = struct.Struct("<I")
_NAME_LIMIT = 4096


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if not raw or len(raw) > _NAME_LIMIT:
        raise ValueError(f"tensor name length {len(raw)} outside (0, {_NAME_LIMIT}]")
    fh.write(_U32.pack(len(raw)))
    fh.write(raw)
    fh.write(_U32.pack(arr.ndim))
    for dim in arr.shape:
        fh.write(_U32.pack(dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def save_tensors(path: str | Path, tensors: dict[str, Tensor | np.ndarray],
                 metadata: dict) -> None:
    """Write a checkpoint atomically (tmp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_line = json.dumps(metadata, sort_keys=True).encode("utf-8")
    if b"\n" in meta_line:
        raise ValueError("metadata must serialize to a single line")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(meta_line + b"\n")
            for name, t in tensors.items():
                arr = t.data if isinstance(t, Tensor) else np.asarray(t)
                _write_tensor(fh, name, arr)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a PFORGE1 checkpoint")
        meta_raw = fh.readline()
        if not meta_raw.endswith(b"\n"):
            raise ValueError("truncated checkpoint file")
        try:
            metadata = json.loads(meta_raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: bad metadata line: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(_U32.size)
            if not head:
                break
            if len(head) != _U32.size:
                raise ValueError("truncated checkpoint file")
            (name_len,) = _U32.unpack(head)
            if not 0 < name_len <= _NAME_LIMIT:
                raise ValueError(f"corrupt checkpoint: name length {name_len}")
            name = _read_exact(fh, name_len).decode("utf-8")
            if name in tensors:
                raise ValueError(f"duplicate tensor name {name!r}")
            (rank,) = _U32.unpack(_read_exact(fh, _U32.size))
            if rank > 8:
                raise ValueError(f"corrupt checkpoint: rank {rank}")
            shape = tuple(
                _U32.unpack(_read_exact(fh, _U32.size))[0] for _ in range(rank)
            )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
            tensors[name] = data.reshape(shape).copy()
    return tensors, metadata


def _config_meta(kind: str, config: ModelConfig, extra: dict | None) -> dict:
    meta = {
        "kind": kind,
        "config": asdict(config),
        "fingerprint": config.fingerprint(),
    }
    if extra:
        overlap = meta.keys() & extra.keys()
        if overlap:
            raise ValueError(f"metadata keys {sorted(overlap)} are reserved")
        meta.update(extra)
    return meta


def _check_meta(metadata: dict, kind: str, expect: ModelConfig | None,
                path: str | Path) -> ModelConfig:
    if metadata.get("kind") != kind:
        raise ValueError(
            f"{path}: checkpoint kind {metadata.get('kind')!r}, expected {kind!r}"
        )
    config = ModelConfig(**metadata["config"])
    if expect is not None and config.fingerprint() != expect.fingerprint():
        raise ValueError(
            f"{path}: config fingerprint {config.fingerprint()} does not match "
            f"expected {expect.fingerprint()}"
        )
    return config


def save_encoder(path: str | Path, weights: EncoderWeights,
                 extra: dict | None = None) -> None:
    meta = _config_meta("encoder", weights.config, extra)
    save_tensors(path, weights.named_tensors(), meta)


def load_encoder(path: str | Path, expect: ModelConfig | None = None
                 ) -> tuple[EncoderWeights, dict]:
    tensors, metadata = load_tensors(path)
    config = _check_meta(metadata, "encoder", expect, path)
    weights = EncoderWeights(config)
    slots = weights.named_tensors()
    missing = slots.keys() - tensors.keys()
    surplus = tensors.keys() - slots.keys()
    if missing or surplus:
        raise ValueError(
            f"{path}: tensor set mismatch; missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(surplus)[:3]}"
        )
    for name, slot in slots.items():
        if tensors[name].shape != slot.shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {slot.shape}"
            )
        slot.data = tensors[name].astype(slot.data.dtype)
    return weights, metadata


def save_prefix(path: str | Path, prefix: PrefixSet, config: ModelConfig,
                extra: dict | None = None) -> None:
    """PrefixSet checkpoints hold only the P_k/P_v tensors plus fingerprint."""
    prefix.check_compatible(config)
    meta = _config_meta("prefix", config, extra)
    save_tensors(path, prefix.named_tensors(), meta)


def load_prefix(path: str | Path, expect: ModelConfig | None = None
                ) -> tuple[PrefixSet, dict]:
    tensors, metadata = load_tensors(path)
    config = _check_meta(metadata, "prefix", expect, path)
    dt = config.precision
    p_k, p_v = [], []
    for i in range(config.num_layers):
        for part, dest in (("k", p_k), ("v", p_v)):
            name = f"prefix.{i}.{part}"
            if name not in tensors:
                raise ValueError(f"{path}: missing tensor {name!r}")
            dest.append(Tensor(tensors[name], requires_grad=True, dtype=dt))
    prefix = PrefixSet(p_k, p_v)
    prefix.check_compatible(config)
    return prefix, metadata


def save_head(path: str | Path, head: ClassificationHead, config: ModelConfig,
              extra: dict | None = None) -> None:
    meta = _config_meta("head", config, extra)
    save_tensors(path, head.named_tensors(), meta)


def load_head(path: str | Path, expect: ModelConfig | None = None
              ) -> tuple[ClassificationHead, dict]:
    tensors, metadata = load_tensors(path)
    config = _check_meta(metadata, "head", expect, path)
    try:
        w, b = tensors["head.w"], tensors["head.b"]
    except KeyError as exc:
        raise ValueError(f"{path}: missing head tensor {exc}") from exc
    dt = config.precision
    return ClassificationHead(
        Tensor(w, requires_grad=True, dtype=dt),
        Tensor(b, requires_grad=True, dtype=dt),
    ), metadata
