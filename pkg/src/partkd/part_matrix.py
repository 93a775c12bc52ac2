"""Action-specific part efficiency matrix.

Each high-quality training sequence is re-evaluated by the frozen teacher
five times, once with each body part zeroed. The raw entry for (action c,
part p) is the fraction of class-c sequences misclassified with p occluded;
rows are then softmax-normalized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingClass
from .skeleton import NUM_PARTS, PART_NAMES, PartMap

DUMP_FORMAT = "partkd-efficiency-matrix"
MATRIX_FILE = "efficiency_matrix.json"


@dataclass
class EfficiencyMatrix:
    raw: np.ndarray          # (C_actions, 5) misclassification ratios
    normalized: np.ndarray   # (C_actions, 5) row softmax of raw
    evaluated: np.ndarray    # (C_actions, 5) instance counts
    misclassified: np.ndarray
    action_names: tuple = ()

    @property
    def num_actions(self) -> int:
        return self.raw.shape[0]

    def rows(self, labels) -> np.ndarray:
        return self.normalized[np.asarray(labels)]

    def to_dict(self) -> dict:
        names = list(self.action_names) or [f"action_{c}" for c in range(self.num_actions)]
        return {"format": DUMP_FORMAT, "version": 1, "action_names": names, "part_names": list(PART_NAMES),
                "raw": self.raw.tolist(), "normalized": self.normalized.tolist(),
                "evaluated": self.evaluated.tolist(), "misclassified": self.misclassified.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "EfficiencyMatrix":
        if doc.get("format") != DUMP_FORMAT:
            raise ConfigError("not an efficiency-matrix dump")
        return cls(np.array(doc["raw"], dtype=np.float64), np.array(doc["normalized"], dtype=np.float64),
                   np.array(doc["evaluated"], dtype=np.int64), np.array(doc["misclassified"], dtype=np.int64),
                   tuple(doc["action_names"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "EfficiencyMatrix":
        """Load a dump; a directory is searched for ``efficiency_matrix.json``."""
        path = Path(path)
        if path.is_dir():
            path = path / MATRIX_FILE
        return cls.from_dict(json.loads(path.read_text()))


def raw_from_predictions(labels, part_predictions, num_actions: int):
    """Misclassification ratios from per-part predicted labels.

    ``part_predictions`` is (n_instances, 5): the teacher's label for each
    instance with the corresponding part occluded.
    """
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(part_predictions, dtype=np.int64)
    if preds.shape != (len(labels), NUM_PARTS):
        raise ConfigError(f"expected part predictions of shape ({len(labels)}, {NUM_PARTS}), got {preds.shape}")
    evaluated = np.zeros((num_actions, NUM_PARTS), dtype=np.int64)
    wrong = np.zeros((num_actions, NUM_PARTS), dtype=np.int64)
    np.add.at(evaluated, labels, 1)
    np.add.at(wrong, labels, (preds != labels[:, None]).astype(np.int64))
    missing = np.flatnonzero(evaluated[:, 0] == 0)
    if missing.size:
        raise MissingClass(f"no high-quality instances for actions {missing.tolist()}")
    return wrong / evaluated, evaluated, wrong


def normalize_matrix(raw, evaluated=None, misclassified=None, action_names=()) -> EfficiencyMatrix:
    raw = np.asarray(raw, dtype=np.float64)
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    normalized = e / e.sum(axis=1, keepdims=True)
    if evaluated is None:
        evaluated = np.zeros(raw.shape, dtype=np.int64)
        misclassified = np.zeros(raw.shape, dtype=np.int64)
    return EfficiencyMatrix(raw, normalized, np.asarray(evaluated), np.asarray(misclassified), tuple(action_names))


def raw_efficiency(teacher, hq_set, part_map: PartMap, frames: int, bodies: int = 2, batch_size: int = 64):
    """Occlude each part of every sequence, classify with the teacher, count errors.

    Returns (raw, evaluated, misclassified).
    """
    from .data import occlude_part
    from .training import predict

    if part_map.schema_id != teacher.graph.schema_id:
        raise ConfigError(f"teacher schema {teacher.graph.schema_id} does not match part map {part_map.schema_id}")
    hq_set = list(hq_set)
    labels = np.array([s.label for s in hq_set], dtype=np.int64)
    preds = np.empty((len(hq_set), NUM_PARTS), dtype=np.int64)
    for p in range(NUM_PARTS):
        occluded = [occlude_part(s, part_map, p) for s in hq_set]
        preds[:, p] = predict(teacher, occluded, frames, bodies, batch_size).argmax(1)
    return raw_from_predictions(labels, preds, teacher.num_actions)


def build_efficiency_matrix(teacher, hq_set, part_map, frames, bodies=2, action_names=()) -> EfficiencyMatrix:
    raw, evaluated, wrong = raw_efficiency(teacher, hq_set, part_map, frames, bodies)
    return normalize_matrix(raw, evaluated, wrong, action_names)


def heatmap_figure(E: EfficiencyMatrix, action_names):
    """Matplotlib figure of the normalized matrix: one row per action, one column per part."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(action_names)
    if len(names) != E.num_actions:
        raise ConfigError(f"{len(names)} action names for {E.num_actions} matrix rows")
    fig, ax = plt.subplots(figsize=(4 + 0.6 * NUM_PARTS, 1.5 + 0.35 * len(names)))
    im = ax.imshow(E.normalized, cmap="Blues", aspect="auto")   # darker = larger
    ax.set_xticks(range(NUM_PARTS), [p.replace("_", " ") for p in PART_NAMES], rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("body part")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return fig


def export_heatmap(E: EfficiencyMatrix, action_names, out_path) -> tuple:
    """Write a heatmap image and a JSON dump (same stem) of the matrix."""
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    if not out_path.parent.is_dir():
        raise IOError(f"output directory does not exist: {out_path.parent}")
    fig = heatmap_figure(E, action_names)
    try:
        fig.savefig(out_path, dpi=120)
    finally:
        plt.close(fig)
    dump = EfficiencyMatrix(E.raw, E.normalized, E.evaluated, E.misclassified, tuple(action_names))
    return out_path, dump.save(out_path.with_suffix(".json"))
