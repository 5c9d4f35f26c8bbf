"""On-disk formats.

Checkpoint (``.ckpt``), all integers little-endian::

    8 bytes   magic b"DDROPCKP"
    u32       format version (1)
    u32       length of the spec JSON
    bytes     spec JSON (utf-8, sorted keys)
    u64       param_count
    f64 * param_count   parameters, layout as in ModelSpec.slices()

A sidecar ``<ckpt>.json`` records seed, training config and dataset checksum.

Influence reports are JSON lines: one header record, then one record per
training sample ``{"id", "total", "per_validation"?}``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .influence import InfluenceReport, InfluenceScore
from .ihvp import IhvpConfig
from .model import ModelSpec

CKPT_MAGIC = b"DDROPCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_atomic(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def _plain(value):
    # numpy scalars and arrays that slip into metadata
    if isinstance(value, (np.generic, np.ndarray)):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def checkpoint_bytes(spec: ModelSpec, params) -> bytes:
    params = np.asarray(params, dtype="<f8")
    if params.shape != (spec.param_count,):
        raise CheckpointError("params do not match spec")
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(spec_json)),
        spec_json,
        struct.pack("<Q", spec.param_count),
        params.tobytes(),
    ])


def save_checkpoint(path, spec: ModelSpec, params, metadata: dict | None = None) -> None:
    write_atomic(path, checkpoint_bytes(spec, params))
    if metadata is not None:
        write_json(f"{path}.json", metadata)


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, spec_len = struct.unpack_from("<II", blob, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        spec = ModelSpec.from_dict(json.loads(blob[off:off + spec_len].decode()))
        off += spec_len
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
    except CheckpointError:
        raise
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if count != spec.param_count or len(blob) - off != 8 * count:
        raise CheckpointError(f"{path}: parameter payload does not match spec")
    params = np.frombuffer(blob, dtype="<f8", offset=off, count=count).astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise CheckpointError(f"{path}: non-finite parameters")
    return spec, params


# -- influence reports ----------------------------------------------------

def report_lines(report: InfluenceReport) -> list[str]:
    header = {
        "type": "header",
        "n": report.n,
        "k": report.k,
        "ihvp_solve_count": report.ihvp_solve_count,
        "ihvp_residuals": [float(r) for r in report.ihvp_residuals],
        "methods_used": report.methods_used,
        "solver": report.config_echo.to_dict(),
        "model_hash": report.model_hash,
        "val_ids": None if report.val_ids is None else [int(i) for i in report.val_ids],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for s in report.scores:
        rec = {"id": s.sample_id, "total": s.total}
        if s.per_validation is not None:
            rec["per_validation"] = [float(v) for v in s.per_validation]
        lines.append(json.dumps(rec))
    return lines


def save_report(path, report: InfluenceReport) -> None:
    write_atomic(path, "\n".join(report_lines(report)) + "\n")


def load_report(path) -> InfluenceReport:
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "header":
        raise ValueError(f"{path}: missing header record")
    head = records[0]
    scores = [
        InfluenceScore(int(r["id"]), float(r["total"]),
                       None if "per_validation" not in r else np.array(r["per_validation"]))
        for r in records[1:]
    ]
    if len(scores) != head["n"]:
        raise ValueError(f"{path}: header says n={head['n']} but has {len(scores)} records")
    val_ids = head.get("val_ids")
    return InfluenceReport(scores, int(head["ihvp_solve_count"]),
                           np.array(head["ihvp_residuals"], dtype=np.float64),
                           IhvpConfig(**head["solver"]), head["model_hash"],
                           None if val_ids is None else np.array(val_ids, dtype=np.int64),
                           list(head.get("methods_used", [])))


# -- id lists -------------------------------------------------------------

def save_ids(path, ids: Iterable[int]) -> None:
    write_atomic(path, "".join(f"{int(i)}\n" for i in sorted(ids)))


def load_ids(path) -> set[int]:
    with open(path) as fh:
        return {int(line) for line in fh if line.strip()}
