"""Binary file containers: datasets, checkpoints and chain outputs.

Every file starts with an ASCII magic line, then a JSON manifest line, then
raw little-endian float64 blocks. Named-block containers (checkpoints and
chains) carry block names/shapes in the manifest; dataset files interleave a
JSON record line with the z/f blocks of each supervision tuple.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"DRV1"
CHECKPOINT_MAGIC = b"DRVCKPT1"
CHAIN_MAGIC = b"DRVCHN1"


def _json_line(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")


def _block(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_blocks(path, magic: bytes, manifest: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write a named-block container; block order follows sorted names."""
    names = sorted(blocks)
    manifest = dict(manifest)
    manifest["blocks"] = [{"name": n, "shape": list(np.shape(blocks[n]))} for n in names]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(_json_line(manifest))
        for n in names:
            fh.write(_block(blocks[n]))


def read_blocks(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        head = fh.readline().rstrip(b"\n")
        if head != magic:
            raise ValueError(f"{path}: expected magic {magic!r}, found {head!r}")
        manifest = json.loads(fh.readline().decode("utf-8"))
        blocks = {}
        for entry in manifest["blocks"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated block {entry['name']!r}")
            blocks[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return manifest, blocks


def write_dataset(path, header: dict, tuples) -> int:
    """Stream supervision tuples to disk; returns the record count.

    Each record is a JSON line ``{"theta": ..., "seed": ..., "n": ...}``
    followed by the raw z block then the raw f block.
    """
    count = 0
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + b"\n")
        fh.write(_json_line(header))
        for rec in tuples:
            meta = {"theta": rec.theta, "seed": rec.seed, "n": int(rec.z.size)}
            fh.write(_json_line(meta))
            fh.write(_block(rec.z))
            fh.write(_block(rec.f))
            count += 1
    return count


def read_dataset(path):
    """Yield ``(header, records)`` where records is a list of parsed tuples."""
    from .sampling import TrainTuple

    with open(path, "rb") as fh:
        head = fh.readline().rstrip(b"\n")
        if head != DATASET_MAGIC:
            raise ValueError(f"{path}: expected magic {DATASET_MAGIC!r}, found {head!r}")
        header = json.loads(fh.readline().decode("utf-8"))
        records = []
        while True:
            line = fh.readline()
            if not line:
                break
            meta = json.loads(line.decode("utf-8"))
            n = int(meta["n"])
            z = np.frombuffer(fh.read(n * 8), dtype="<f8").copy()
            f = np.frombuffer(fh.read(n * 8), dtype="<f8").copy()
            if z.size != n or f.size != n:
                raise ValueError(f"{path}: truncated record")
            records.append(TrainTuple(theta=meta["theta"], z=z, f=f, seed=int(meta["seed"])))
    return header, records


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
