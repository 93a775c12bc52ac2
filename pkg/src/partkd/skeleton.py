"""Skeleton schemas, body-part maps, sequence containers and graph adjacency.

Schemas are shipped as YAML documents under ``partkd/schemas``. Each document
lists the joint names, the undirected bone edges and the five body parts; new
schemas can be added at runtime with :func:`register_schema_file`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
import yaml
from scipy.sparse.csgraph import shortest_path

from .errors import ConfigError, UnknownSchema, ValidationError

PART_NAMES = ("head", "left_arm", "right_arm", "left_leg", "right_leg")
NUM_PARTS = len(PART_NAMES)
QUALITIES = ("high", "low")
STRATEGIES = ("uniform", "distance", "spatial")


@dataclass(frozen=True)
class SkeletonGraph:
    schema_id: str
    joints: tuple
    edges: tuple
    dims: int = 3
    center: int = 0
    root: tuple = (0,)

    def __post_init__(self):
        V = len(self.joints)
        if V == 0:
            raise ConfigError(f"{self.schema_id}: schema has no joints")
        if self.dims not in (2, 3):
            raise ConfigError(f"{self.schema_id}: dims must be 2 or 3, got {self.dims}")
        for i, j in self.edges:
            if not (0 <= i < V and 0 <= j < V):
                raise ConfigError(f"{self.schema_id}: edge ({i}, {j}) out of range for V={V}")
            if i == j:
                raise ConfigError(f"{self.schema_id}: self-loop on joint {i}")
        for j in (self.center, *self.root):
            if not 0 <= j < V:
                raise ConfigError(f"{self.schema_id}: joint index {j} out of range")
        if not self.is_connected():
            raise ConfigError(f"{self.schema_id}: skeleton graph is not connected")

    @property
    def V(self) -> int:
        return len(self.joints)

    def adjacency(self) -> np.ndarray:
        """Binary symmetric bone adjacency without self-loops."""
        A = np.zeros((self.V, self.V))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def hop_distance(self) -> np.ndarray:
        return shortest_path(self.adjacency(), unweighted=True, directed=False)

    def is_connected(self) -> bool:
        return bool(np.isfinite(self.hop_distance()[0]).all())


@dataclass(frozen=True)
class PartMap:
    schema_id: str
    parts: tuple  # five tuples of joint indices, ordered as PART_NAMES

    def __post_init__(self):
        if len(self.parts) != NUM_PARTS:
            raise ConfigError(f"{self.schema_id}: expected {NUM_PARTS} parts, got {len(self.parts)}")
        if any(len(p) == 0 for p in self.parts):
            raise ConfigError(f"{self.schema_id}: every body part needs at least one joint")

    @property
    def num_joints(self) -> int:
        return sum(len(p) for p in self.parts)

    def sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.parts])

    def joint_to_part(self) -> np.ndarray:
        out = np.full(self.num_joints, -1, dtype=np.int64)
        for pid, joints in enumerate(self.parts):
            out[list(joints)] = pid
        return out

    def membership(self) -> np.ndarray:
        """(5, V) row-stochastic averaging matrix: row p is uniform over part p."""
        M = np.zeros((NUM_PARTS, self.num_joints))
        for pid, joints in enumerate(self.parts):
            M[pid, list(joints)] = 1.0 / len(joints)
        return M

    def check_partition(self, V: int) -> None:
        flat = [j for p in self.parts for j in p]
        if len(flat) != len(set(flat)):
            raise ConfigError(f"{self.schema_id}: body parts overlap")
        if sorted(flat) != list(range(V)):
            raise ConfigError(f"{self.schema_id}: body parts do not cover joints 0..{V - 1} exactly")


@dataclass
class SkeletonSequence:
    """One action instance. ``coords`` has shape (C_in, T_raw, V, M_bodies)."""

    instance_id: str
    schema_id: str
    label: int
    quality: str
    coords: np.ndarray

    @property
    def length(self) -> int:
        return self.coords.shape[1]

    @property
    def bodies(self) -> int:
        return self.coords.shape[3]

    @property
    def V(self) -> int:
        return self.coords.shape[2]

    def validate(self) -> None:
        graph = build_graph(self.schema_id)
        if self.quality not in QUALITIES:
            raise ValidationError(f"{self.instance_id}: quality must be one of {QUALITIES}")
        if self.coords.ndim != 4 or self.coords.shape[0] != 3:
            raise ValidationError(f"{self.instance_id}: coords must have shape (3, T, V, M), got {self.coords.shape}")
        if self.V != graph.V:
            raise ValidationError(f"{self.instance_id}: {self.V} joints but schema {self.schema_id} has {graph.V}")
        if self.bodies not in (1, 2):
            raise ValidationError(f"{self.instance_id}: body count must be 1 or 2")
        if not np.isfinite(self.coords).all():
            raise ValidationError(f"{self.instance_id}: non-finite coordinates")
        if self.label < 0:
            raise ValidationError(f"{self.instance_id}: negative label")

    def replace(self, **changes) -> "SkeletonSequence":
        kw = dict(instance_id=self.instance_id, schema_id=self.schema_id,
                  label=self.label, quality=self.quality, coords=self.coords)
        kw.update(changes)
        return SkeletonSequence(**kw)

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (self.instance_id == other.instance_id and self.schema_id == other.schema_id
                and self.label == other.label and self.quality == other.quality
                and self.coords.dtype == other.coords.dtype
                and np.array_equal(self.coords, other.coords))


@dataclass
class Dataset:
    paired: list = field(default_factory=list)    # list of (high, low) pairs
    solitary: list = field(default_factory=list)  # low-quality sequences only
    num_actions: int = 0

    @property
    def M(self) -> int:
        return len(self.paired)

    @property
    def N(self) -> int:
        return len(self.solitary)

    def high(self) -> list:
        return [h for h, _ in self.paired]

    def low(self) -> list:
        """All low-quality sequences: paired first, then solitary."""
        return [lo for _, lo in self.paired] + list(self.solitary)

    def validate(self) -> None:
        for hi, lo in self.paired:
            if hi.quality != "high" or lo.quality != "low":
                raise ValidationError(f"pair {hi.instance_id}: quality tags must be (high, low)")
            if hi.instance_id != lo.instance_id or hi.label != lo.label:
                raise ValidationError(f"pair {hi.instance_id}/{lo.instance_id}: instance id and label must match")
        for seq in self.solitary:
            if seq.quality != "low":
                raise ValidationError(f"solitary {seq.instance_id} must be low quality")
        for seq in [s for pair in self.paired for s in pair] + list(self.solitary):
            seq.validate()
            if seq.label >= self.num_actions:
                raise ValidationError(f"{seq.instance_id}: label {seq.label} >= num_actions {self.num_actions}")
        missing = set(range(self.num_actions)) - {hi.label for hi, _ in self.paired}
        if missing:
            raise ValidationError(f"actions without paired instances: {sorted(missing)}")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_actions == other.num_actions and self.paired == other.paired
                and self.solitary == other.solitary)


# --- schema registry -------------------------------------------------------

_GRAPHS: dict = {}
_PART_MAPS: dict = {}


def _parse_schema(doc: dict):
    try:
        sid = str(doc["schema_id"])
        graph = SkeletonGraph(
            schema_id=sid,
            joints=tuple(doc["joints"]),
            edges=tuple((int(i), int(j)) for i, j in doc["edges"]),
            dims=int(doc.get("dims", 3)),
            center=int(doc.get("center", 0)),
            root=tuple(int(j) for j in doc.get("root", [0])),
        )
        parts = tuple(tuple(int(j) for j in doc["parts"][name]) for name in PART_NAMES)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed schema document: {exc!r}") from exc
    pm = PartMap(sid, parts)
    pm.check_partition(graph.V)
    return graph, pm


def register_schema(doc: dict) -> SkeletonGraph:
    graph, pm = _parse_schema(doc)
    _GRAPHS[graph.schema_id] = graph
    _PART_MAPS[graph.schema_id] = pm
    return graph


def register_schema_file(path) -> SkeletonGraph:
    with open(path) as fh:
        return register_schema(yaml.safe_load(fh))


def _load_builtin():
    if _GRAPHS:
        return
    for entry in sorted(resources.files("partkd").joinpath("schemas").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml"):
            register_schema(yaml.safe_load(entry.read_text()))


def available_schemas() -> list:
    _load_builtin()
    return sorted(_GRAPHS)


def build_graph(schema_id: str) -> SkeletonGraph:
    _load_builtin()
    try:
        return _GRAPHS[schema_id]
    except KeyError:
        raise UnknownSchema(f"unknown skeleton schema {schema_id!r}; known: {sorted(_GRAPHS)}") from None


def build_part_map(schema_id: str) -> PartMap:
    build_graph(schema_id)
    return _PART_MAPS[schema_id]


# --- adjacency -------------------------------------------------------------

def _sym_normalize(A: np.ndarray) -> np.ndarray:
    d = A.sum(axis=1)
    inv = np.zeros_like(d)
    inv[d > 0] = d[d > 0] ** -0.5
    return inv[:, None] * A * inv[None, :]


def normalized_adjacency(graph: SkeletonGraph, strategy: str = "spatial") -> np.ndarray:
    """Stack of K normalized (V, V) matrices for graph convolution.

    Self-loops are added and the whole neighbourhood is normalized as
    D^-1/2 (A + I) D^-1/2; the strategy then splits that matrix into subsets
    (uniform: 1, distance: self/neighbour, spatial: root/centripetal/
    centrifugal w.r.t. the schema's center joint). The subsets always sum to
    the uniform matrix.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}")
    V = graph.V
    A = graph.adjacency()
    norm = _sym_normalize(A + np.eye(V))
    if strategy == "uniform":
        return norm[None]
    eye = np.eye(V, dtype=bool)
    if strategy == "distance":
        return np.stack([np.where(eye, norm, 0.0), np.where(eye, 0.0, norm)])

    to_center = graph.hop_distance()[graph.center]
    d_row = to_center[:, None]
    d_col = to_center[None, :]
    linked = norm > 0
    root = linked & (d_row == d_col)
    centripetal = linked & (d_row > d_col)   # column joint is closer to the center
    centrifugal = linked & (d_row < d_col)
    return np.stack([np.where(m, norm, 0.0) for m in (root, centripetal, centrifugal)])


def bone_table(schema_id: str) -> str:
    """Human-readable table of a schema's joints, parts and bones."""
    graph = build_graph(schema_id)
    pid = build_part_map(schema_id).joint_to_part()
    lines = [f"{'idx':>3}  {'joint':<16} {'part':<10} neighbours"]
    A = graph.adjacency()
    for j, name in enumerate(graph.joints):
        nb = ", ".join(graph.joints[k] for k in np.flatnonzero(A[j]))
        lines.append(f"{j:>3}  {name:<16} {PART_NAMES[pid[j]]:<10} {nb}")
    return "\n".join(lines)


def iter_sequences(dataset: Dataset) -> Iterable[SkeletonSequence]:
    for hi, lo in dataset.paired:
        yield hi
        yield lo
    yield from dataset.solitary


def stack_coords(seqs: Sequence[SkeletonSequence]) -> np.ndarray:
    return np.stack([s.coords for s in seqs])
