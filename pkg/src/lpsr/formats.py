"""On-disk formats: binary basis files, JSONL traces, CSV metric tables."""
from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .engine import GenerationTrace
from .steering import UNIT_TOL, SteeringBasis

MAGIC = b"LPSB"
VERSION = 1
# magic, version u16, d u32, count u32, layer u16, cfg_digest u64
HEADER = struct.Struct("<4sHIIHQ")


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def basis_to_bytes(basis: SteeringBasis) -> bytes:
    vecs = np.ascontiguousarray(basis.vectors, dtype="<f4")
    return HEADER.pack(MAGIC, VERSION, basis.d, basis.count, basis.layer, basis.cfg_digest) + vecs.tobytes()


def basis_from_bytes(data: bytes, check_unit: bool = True) -> SteeringBasis:
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} < {HEADER.size} bytes", len(data))
    magic, version, d, count, layer, digest = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = count * d * 4
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}",
                          HEADER.size + min(len(payload), expected))
    vecs = np.frombuffer(payload, dtype="<f4").reshape(count, d).astype(np.float32)
    if not np.all(np.isfinite(vecs)):
        bad = int(np.flatnonzero(~np.isfinite(vecs.ravel()))[0])
        raise FormatError("non-finite float in payload", HEADER.size + 4 * bad)
    if check_unit:
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if len(off):
            raise FormatError(f"vector {off[0]} has norm {norms[off[0]]:.8f}",
                              HEADER.size + 4 * d * int(off[0]))
    return SteeringBasis(vecs, layer, digest, check_unit=check_unit)


def write_basis(path, basis: SteeringBasis) -> None:
    Path(path).write_bytes(basis_to_bytes(basis))


def read_basis(path, check_unit: bool = True) -> SteeringBasis:
    return basis_from_bytes(Path(path).read_bytes(), check_unit)


def write_traces(path, traces) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tr in traces:
            f.write(json.dumps(tr.to_dict(), sort_keys=True) + "\n")


def read_traces(path) -> list[GenerationTrace]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(GenerationTrace.from_dict(json.loads(line)))
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    return out


def _cell(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return repr(round(x, 10))
    return str(x)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns, rows) -> None:
    Path(path).write_text(csv_text(columns, rows), encoding="utf-8")


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
