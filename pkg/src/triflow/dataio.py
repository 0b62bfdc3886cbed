"""Dataset files: a JSON-lines manifest plus one binary tensor blob.

The manifest's first line is a dataset-level meta record; each following line
describes one trajectory (task code, embodiment, length, success flag, byte
offsets into the blob). The blob stores, per trajectory, the tensors frames,
proprio, actions and optionally flow, each as float32 little-endian row-major
data prefixed by an 8-byte little-endian header sequence: rank, then one
8-byte value per dimension.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError

MANIFEST_NAME = "manifest.jsonl"
BLOB_NAME = "data.bin"
FORMAT_VERSION = 1

_HEADER_DTYPE = np.dtype("<u8")
_DATA_DTYPE = np.dtype("<f4")


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_DATA_DTYPE)
    header = np.array([arr.ndim, *arr.shape], dtype=_HEADER_DTYPE)
    return header.tobytes() + arr.tobytes()


def _unpack_tensor(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    if offset + 8 > len(buf):
        raise DatasetError("blob truncated while reading tensor rank")
    rank = int(np.frombuffer(buf, _HEADER_DTYPE, count=1, offset=offset)[0])
    offset += 8
    if offset + 8 * rank > len(buf):
        raise DatasetError("blob truncated while reading tensor dims")
    dims = np.frombuffer(buf, _HEADER_DTYPE, count=rank, offset=offset).astype(int)
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise DatasetError("blob truncated while reading tensor data")
    arr = np.frombuffer(buf, _DATA_DTYPE, count=count, offset=offset).reshape(dims)
    return arr, offset + nbytes


@dataclass
class TrajectoryRecord:
    index: int
    task_code: int
    embodiment: int
    length: int
    success: bool
    offset: int
    nbytes: int


class Dataset:
    """In-memory view of one dataset directory."""

    def __init__(self, meta: dict, records: list[TrajectoryRecord], blob: bytes):
        self.meta = meta
        self.records = records
        self._blob = memoryview(blob)

    def __len__(self) -> int:
        return len(self.records)

    def tensors(self, index: int) -> dict[str, np.ndarray]:
        rec = self.records[index]
        names = ["frames", "proprio", "actions"]
        if self.meta.get("with_flow"):
            names.append("flow")
        out = {}
        offset = rec.offset
        for name in names:
            arr, offset = _unpack_tensor(self._blob, offset)
            out[name] = arr
        if offset - rec.offset != rec.nbytes:
            raise DatasetError(
                f"trajectory {index}: manifest says {rec.nbytes} bytes, read {offset - rec.offset}")
        return out


def write_dataset(path: str, trajectories: list, meta: dict,
                  flows: list[np.ndarray] | None = None) -> None:
    """Serialize trajectories (and optional per-trajectory flow stacks)."""
    os.makedirs(path, exist_ok=True)
    with_flow = flows is not None
    lines = []
    blob_parts = []
    offset = 0
    for i, traj in enumerate(trajectories):
        part = _pack_tensor(traj.frames) + _pack_tensor(traj.proprio) + _pack_tensor(traj.actions)
        if with_flow:
            part += _pack_tensor(flows[i])
        lines.append(json.dumps({
            "index": i,
            "task_code": int(traj.task_code),
            "embodiment": int(traj.embodiment),
            "length": int(len(traj)),
            "success": bool(traj.success),
            "offset": offset,
            "nbytes": len(part),
        }, sort_keys=True))
        blob_parts.append(part)
        offset += len(part)

    header = dict(meta)
    header.update({"meta": True, "format_version": FORMAT_VERSION,
                   "count": len(trajectories), "with_flow": with_flow})
    manifest = "\n".join([json.dumps(header, sort_keys=True)] + lines) + "\n"

    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        f.write(manifest)
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        for part in blob_parts:
            f.write(part)


def read_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    blob_path = os.path.join(path, BLOB_NAME)
    if not os.path.exists(manifest_path) or not os.path.exists(blob_path):
        raise DatasetError(f"no dataset at {path}")
    with open(manifest_path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or not lines[0].get("meta"):
        raise DatasetError(f"{manifest_path}: missing meta record")
    meta = lines[0]
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {meta.get('format_version')}")
    records = [TrajectoryRecord(r["index"], r["task_code"], r["embodiment"],
                                r["length"], r["success"], r["offset"], r["nbytes"])
               for r in lines[1:]]
    if len(records) != meta["count"]:
        raise DatasetError(f"{manifest_path}: expected {meta['count']} records, found {len(records)}")
    with open(blob_path, "rb") as f:
        blob = f.read()
    return Dataset(meta, records, blob)
