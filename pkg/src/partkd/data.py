"""Model-input preparation, occlusion degradation and dataset I/O.

Payload files (``*.skl``) hold a single sequence::

    magic   4s    b"SKL1"
    n       <H    byte length of schema_id
    schema  n s   utf-8 schema id
    dims    <4I   C_in, T_raw, V, M_bodies
    quality <B    0 = high, 1 = low
    label   <i
    data          float32 little-endian, row-major (C_in, T_raw, V, M_bodies)

The manifest is a JSON document listing one record per sequence.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptySequence,
    MalformedRecord,
    MissingPayload,
    SchemaMismatch,
    ValidationError,
)
from .skeleton import NUM_PARTS, Dataset, PartMap, SkeletonSequence, build_graph

FRAMES = 300
BODIES = 2
MAGIC = b"SKL1"
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "partkd-manifest"
MANIFEST_VERSION = 1
_QUALITY_CODE = {"high": 0, "low": 1}


@dataclass
class ModelInput:
    coords: np.ndarray  # (3, frames, V, bodies)
    label: int
    instance_id: str
    schema_id: str


def pad_or_truncate(seq: SkeletonSequence, frames: int = FRAMES, bodies: int = BODIES) -> ModelInput:
    """Fit a sequence into the fixed (3, frames, V, bodies) model shape.

    Extra frames are dropped, missing frames and bodies are zero-filled.
    """
    C, T, V, M = seq.coords.shape
    if T == 0:
        raise EmptySequence(f"{seq.instance_id}: sequence has no frames")
    if M > bodies:
        raise ConfigError(f"{seq.instance_id}: {M} bodies exceed model capacity {bodies}")
    out = np.zeros((C, frames, V, bodies), dtype=seq.coords.dtype)
    t = min(T, frames)
    out[:, :t, :, :M] = seq.coords[:, :t]
    return ModelInput(out, seq.label, seq.instance_id, seq.schema_id)


def stack_inputs(items: Sequence[ModelInput]) -> tuple:
    """(N, 3, T, V, M) float32 array and (N,) int64 labels."""
    x = np.stack([it.coords for it in items]).astype(np.float32, copy=False)
    y = np.array([it.label for it in items], dtype=np.int64)
    return x, y


# --- degradation -----------------------------------------------------------

def _check_prob(p):
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"occlusion probability must lie in [0, 1], got {p}")


def joint_occlusion_mask(V: int, bodies: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (V, bodies) mask of occluded joints; one Bernoulli(p) draw per cell."""
    _check_prob(p)
    return rng.random((V, bodies)) < p


def occlude_joints(seq: SkeletonSequence, p: float, seed) -> SkeletonSequence:
    """Zero each (joint, body) over all frames independently with probability ``p``.

    All three channels are cleared, so 2D schemas also lose the confidence.
    """
    _check_prob(p)
    rng = np.random.default_rng(seed)
    mask = joint_occlusion_mask(seq.V, seq.bodies, p, rng)
    coords = seq.coords.copy()
    coords[:, :, mask] = 0
    return seq.replace(coords=coords)


def occlude_part(seq: SkeletonSequence, part_map: PartMap, part_id: int) -> SkeletonSequence:
    if not 0 <= part_id < NUM_PARTS:
        raise ConfigError(f"part_id must lie in [0, {NUM_PARTS}), got {part_id}")
    if part_map.schema_id != seq.schema_id:
        raise ConfigError(f"part map {part_map.schema_id} does not match sequence schema {seq.schema_id}")
    coords = seq.coords.copy()
    coords[:, :, list(part_map.parts[part_id])] = 0
    return seq.replace(coords=coords)


def occlude_all(seqs: Sequence[SkeletonSequence], p: float, seed: int) -> list:
    """Occlude a list of sequences with per-instance streams derived from ``seed``."""
    _check_prob(p)
    if p == 0:
        return list(seqs)
    return [occlude_joints(s, p, np.random.SeedSequence([seed, i])) for i, s in enumerate(seqs)]


# --- payload I/O -----------------------------------------------------------

def write_sequence(seq: SkeletonSequence, path) -> None:
    coords = np.ascontiguousarray(seq.coords, dtype="<f4")
    sid = seq.schema_id.encode("utf-8")
    header = (MAGIC + struct.pack("<H", len(sid)) + sid
              + struct.pack("<4I", *coords.shape)
              + struct.pack("<Bi", _QUALITY_CODE[seq.quality], seq.label))
    Path(path).write_bytes(header + coords.tobytes(order="C"))


def read_sequence(path, instance_id: str | None = None) -> SkeletonSequence:
    path = Path(path)
    if not path.is_file():
        raise MissingPayload(f"payload not found: {path}")
    buf = path.read_bytes()
    try:
        if buf[:4] != MAGIC:
            raise MalformedRecord(f"{path}: bad magic {buf[:4]!r}")
        (n,) = struct.unpack_from("<H", buf, 4)
        off = 6
        sid = buf[off:off + n].decode("utf-8")
        off += n
        shape = struct.unpack_from("<4I", buf, off)
        off += 16
        qcode, label = struct.unpack_from("<Bi", buf, off)
        off += 5
    except (struct.error, UnicodeDecodeError) as exc:
        raise MalformedRecord(f"{path}: truncated header ({exc})") from exc
    count = int(np.prod(shape))
    if len(buf) - off != 4 * count:
        raise MalformedRecord(f"{path}: expected {4 * count} payload bytes, found {len(buf) - off}")
    coords = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
    quality = {v: k for k, v in _QUALITY_CODE.items()}.get(qcode)
    if quality is None:
        raise MalformedRecord(f"{path}: unknown quality code {qcode}")
    return SkeletonSequence(instance_id or path.stem, sid, label, quality, coords)


def _record(seq: SkeletonSequence, role: str, file: str) -> dict:
    return {"instance_id": seq.instance_id, "label": int(seq.label), "quality": seq.quality,
            "schema_id": seq.schema_id, "role": role, "file": file}


def save_dataset(dataset: Dataset, path) -> Path:
    """Write payloads and a manifest under directory ``path``; returns the manifest path."""
    root = Path(path)
    for sub in ("high", "low"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for hi, lo in dataset.paired:
        for seq in (hi, lo):
            rel = f"{seq.quality}/{seq.instance_id}.skl"
            write_sequence(seq, root / rel)
            records.append(_record(seq, "paired", rel))
    for seq in dataset.solitary:
        rel = f"low/{seq.instance_id}.skl"
        write_sequence(seq, root / rel)
        records.append(_record(seq, "solitary", rel))
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "num_actions": dataset.num_actions, "records": records}
    out = root / MANIFEST_NAME
    out.write_text(json.dumps(manifest, indent=1))
    return out


_RECORD_FIELDS = {"instance_id": str, "label": int, "quality": str, "schema_id": str, "role": str, "file": str}


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingPayload(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
        num_actions = int(doc["num_actions"])
        records = list(doc["records"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{manifest_path}: unreadable manifest ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise MalformedRecord(f"{manifest_path}: not a {MANIFEST_FORMAT} document")

    root = manifest_path.parent
    highs, lows, solitary = {}, {}, []
    for k, rec in enumerate(records):
        if not isinstance(rec, dict) or any(not isinstance(rec.get(f), t) for f, t in _RECORD_FIELDS.items()):
            raise MalformedRecord(f"record {k}: expected fields {sorted(_RECORD_FIELDS)}")
        if rec["quality"] not in _QUALITY_CODE or rec["role"] not in ("paired", "solitary"):
            raise MalformedRecord(f"record {k}: bad quality/role {rec['quality']!r}/{rec['role']!r}")
        if not 0 <= rec["label"] < num_actions:
            raise ValidationError(f"record {rec['instance_id']}: label {rec['label']} outside [0, {num_actions})")
        seq = read_sequence(root / rec["file"], rec["instance_id"])
        if seq.schema_id != rec["schema_id"]:
            raise SchemaMismatch(f"record {rec['instance_id']}: manifest schema {rec['schema_id']} "
                                 f"but payload schema {seq.schema_id}")
        build_graph(seq.schema_id)
        if seq.label != rec["label"] or seq.quality != rec["quality"]:
            raise ValidationError(f"record {rec['instance_id']}: payload header disagrees with manifest")
        if rec["role"] == "solitary":
            solitary.append(seq)
        else:
            (highs if seq.quality == "high" else lows)[seq.instance_id] = seq
    if highs.keys() != lows.keys():
        raise ValidationError(f"unmatched paired records: {sorted(highs.keys() ^ lows.keys())}")
    paired = [(highs[i], lows[i]) for i in highs]
    ds = Dataset(paired, solitary, num_actions)
    ds.validate()
    return ds
