"""End-to-end experiment grid: synth -> teacher -> matrix -> students -> evaluation.

Two tables are produced. The occlusion table lists, per occlusion level, the
teacher (evaluated on occluded high-quality test data) and the students
trained without and with distillation. The pairing table lists, per pairing
fraction f, a teacher trained on the paired share, students without and
with distillation on the paired share only, and a distilled student that
also uses the solitary low-quality remainder.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, StageFailed
from .part_matrix import build_efficiency_matrix, export_heatmap
from .skeleton import Dataset, build_part_map
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, evaluate, matrix_split, train_student, train_teacher

log = logging.getLogger("partkd")

TEACHER = "Teacher"
STUDENT_NO_KD = "Student (w/o KD)"
STUDENT_KD = "Student (w/ KD)"


@dataclass
class ExperimentManifest:
    name: str = "default"
    seeds: tuple = (0,)
    profile: str = "fast"                 # fast | paper
    synth: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    test_samples_per_action: int = 100
    test_seed_offset: int = 1000
    occlusion_levels: tuple = (0.0, 0.3, 0.6)
    pairing_fractions: tuple = (0.7, 0.8, 1.0)
    pairing_occlusion_p: float = 0.6
    heatmap: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.occlusion_levels = tuple(float(p) for p in self.occlusion_levels)
        self.pairing_fractions = tuple(float(f) for f in self.pairing_fractions)

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("manifest needs at least one seed")
        if self.profile not in ("fast", "paper"):
            raise ConfigError(f"profile must be 'fast' or 'paper', got {self.profile!r}")
        if any(not 0 <= p <= 1 for p in self.occlusion_levels + (self.pairing_occlusion_p,)):
            raise ConfigError("occlusion levels must lie in [0, 1]")
        if any(not 0 < f <= 1 for f in self.pairing_fractions):
            raise ConfigError("pairing fractions must lie in (0, 1]")
        if self.test_samples_per_action < 1:
            raise ConfigError("test_samples_per_action must be positive")
        self.synth_config(self.seeds[0]).validate()
        self.train_config(self.seeds[0]).validate()

    def synth_config(self, seed: int, pairing: float = 1.0) -> SynthConfig:
        d = dict(self.synth)
        d.update(seed=seed, solitary_fraction=round(1.0 - pairing, 10))
        return SynthConfig.from_dict(d)

    def test_config(self, seed: int) -> SynthConfig:
        d = dict(self.synth)
        d.update(seed=seed + self.test_seed_offset, solitary_fraction=0.0,
                 samples_per_action=self.test_samples_per_action)
        return SynthConfig.from_dict(d)

    def train_config(self, seed: int, occlusion_p: float = 0.0) -> TrainConfig:
        base = TrainConfig.fast() if self.profile == "fast" else TrainConfig.paper()
        d = base.to_dict()
        for k, v in self.train.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        d.update(seed=seed, occlusion_p=occlusion_p)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("seeds", "occlusion_levels", "pairing_fractions"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown manifest fields: {sorted(unknown)}")
        m = cls(**d)
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: manifest must be a mapping")
        return cls.from_dict(doc)


@dataclass
class ResultRow:
    table: str                 # "occlusion" or "pairing"
    method: str
    profile: str
    occlusion_p: float
    paired: float              # fraction of low-quality instances with a high-quality match
    amount: float              # fraction of the low-quality training data used
    top1: float                # mean over seeds
    top5: float
    per_seed_top1: list
    per_seed_top5: list
    solitary_terms: int = 0


@dataclass
class Report:
    manifest: ExperimentManifest
    rows: list
    runtime_s: float
    artifacts: dict = field(default_factory=dict)

    def table(self, which: str) -> list:
        return [r for r in self.rows if r.table == which]

    def find(self, table: str, method: str, occlusion_p=None, paired=None, amount=None) -> ResultRow:
        for r in self.rows:
            if r.table == table and r.method == method and (occlusion_p is None or r.occlusion_p == occlusion_p) \
                    and (paired is None or r.paired == paired) and (amount is None or r.amount == amount):
                return r
        raise KeyError((table, method, occlusion_p, paired, amount))

    def to_dict(self) -> dict:
        return {"manifest": self.manifest.to_dict(), "runtime_s": self.runtime_s,
                "rows": [asdict(r) for r in self.rows], "artifacts": self.artifacts}


def format_table(rows, with_amount: bool = False) -> str:
    """Aligned plain-text table; accuracies in percent."""
    head = ["method", "skeleton profile", "occlusion p"] + (["paired", "amount"] if with_amount else []) + \
        ["top1", "top5"]
    body = []
    for r in rows:
        cells = [r.method, r.profile, f"{r.occlusion_p:g}"]
        if with_amount:
            cells += [f"{100 * r.paired:.0f}%", f"{100 * r.amount:.0f}%"]
        cells += [f"{100 * r.top1:.2f}", f"{100 * r.top5:.2f}"]
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(c) for c in body]) + "\n"


def render_report(report: Report) -> str:
    out = [f"# {report.manifest.name}  seeds={list(report.manifest.seeds)}  profile={report.manifest.profile}\n"]
    if report.table("occlusion"):
        out += ["\n## occlusion sweep\n", format_table(report.table("occlusion"))]
    if report.table("pairing"):
        out += ["\n## pairing fractions\n", format_table(report.table("pairing"), with_amount=True)]
    return "".join(out)


class _Stage:
    """Context manager tagging any failure with the stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageFailed) and isinstance(exc, Exception):
            raise StageFailed(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


def _paired_only(ds: Dataset) -> Dataset:
    return Dataset(list(ds.paired), [], ds.num_actions)


def run_seed(manifest: ExperimentManifest, seed: int, out_dir: Path | None = None) -> dict:
    """All grid cells for one seed -> {(table, method, p, amount): (top1, top5, solitary_terms)}."""
    cells = {}
    with _Stage(f"synth seed={seed}"):
        test = synth_generate(manifest.test_config(seed))
        train_full = synth_generate(manifest.synth_config(seed, 1.0))
    hq_schema = train_full.paired[0][0].schema_id
    frames = manifest.train_config(seed).frames

    def teacher_and_matrix(ds, tag):
        cfg = manifest.train_config(seed)
        with _Stage(f"train-teacher {tag} seed={seed}"):
            teacher = train_teacher(ds, cfg).model
        with _Stage(f"build-matrix {tag} seed={seed}"):
            E = build_efficiency_matrix(teacher, matrix_split(ds, cfg)[1], build_part_map(hq_schema), frames,
                                        cfg.bodies)
        return teacher, E

    def student(ds, p, teacher, E, tag):
        cfg = manifest.train_config(seed, p)
        with _Stage(f"train-student {tag} p={p} seed={seed}"):
            res = train_student(ds, cfg, teacher, E)
        with _Stage(f"eval {tag} p={p} seed={seed}"):
            m = evaluate(res.model, test.low(), p, cfg.eval_seed, cfg.frames, cfg.bodies, cfg.masked_pooling)
        return m.top1, m.top5, res.stats.solitary

    def teacher_eval(teacher, p):
        cfg = manifest.train_config(seed, p)
        with _Stage(f"eval teacher p={p} seed={seed}"):
            m = evaluate(teacher, test.high(), p, cfg.eval_seed, cfg.frames, cfg.bodies, cfg.masked_pooling)
        return m.top1, m.top5, 0

    full_teacher = full_E = None
    if manifest.occlusion_levels or 1.0 in manifest.pairing_fractions:
        full_teacher, full_E = teacher_and_matrix(train_full, "full")
        if out_dir is not None and manifest.heatmap and seed == manifest.seeds[0]:
            with _Stage("plot-matrix"):
                names = [f"action {c}" for c in range(full_E.num_actions)]
                export_heatmap(full_E, names, out_dir / "efficiency_matrix.png")

    for p in manifest.occlusion_levels:
        cells["occlusion", TEACHER, p, 1.0] = teacher_eval(full_teacher, p)
        cells["occlusion", STUDENT_NO_KD, p, 1.0] = student(train_full, p, None, None, "no-kd")
        cells["occlusion", STUDENT_KD, p, 1.0] = student(train_full, p, full_teacher, full_E, "kd")

    q = manifest.pairing_occlusion_p
    for f in manifest.pairing_fractions:
        if f == 1.0:
            reuse = q in manifest.occlusion_levels
            cells["pairing", TEACHER, q, f] = teacher_eval(full_teacher, q)
            cells["pairing", STUDENT_NO_KD, q, f] = cells["occlusion", STUDENT_NO_KD, q, 1.0] if reuse \
                else student(train_full, q, None, None, "no-kd")
            cells["pairing", STUDENT_KD, q, f] = cells["occlusion", STUDENT_KD, q, 1.0] if reuse \
                else student(train_full, q, full_teacher, full_E, "kd")
            continue
        with _Stage(f"synth pairing={f} seed={seed}"):
            ds = synth_generate(manifest.synth_config(seed, f))
        teacher, E = teacher_and_matrix(ds, f"pairing={f}")
        paired = _paired_only(ds)
        cells["pairing", TEACHER, q, f] = teacher_eval(teacher, q)
        cells["pairing", STUDENT_NO_KD, q, f] = student(paired, q, None, None, f"no-kd pairing={f}")
        cells["pairing", STUDENT_KD, q, f] = student(paired, q, teacher, E, f"kd pairing={f}")
        # all low-quality data: paired plus solitary
        cells["pairing", STUDENT_KD + " +solitary", q, f] = student(ds, q, teacher, E, f"kd+solitary pairing={f}")
    return cells


def run_experiment(manifest: ExperimentManifest, out_dir=None) -> Report:
    """Run every seed of the grid, average per cell, and write the report files."""
    manifest.validate()
    t0 = time.perf_counter()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=False))
        (out_dir / "train_config.yaml").write_text(
            yaml.safe_dump(manifest.train_config(manifest.seeds[0]).to_dict(), sort_keys=False))
    per_seed = [run_seed(manifest, s, out_dir) for s in manifest.seeds]

    hq = manifest.synth_config(0).teacher_schema
    lq = manifest.synth_config(0).student_schema
    rows = []
    for key in per_seed[0]:
        table, method, p, amount = key
        vals = np.array([cells[key] for cells in per_seed], dtype=np.float64)
        solitary = method.endswith("+solitary")
        profile = f"{hq} (high)" if method == TEACHER else f"{lq} (low)"
        rows.append(ResultRow(table, STUDENT_KD if solitary else method, profile, p, amount,
                              1.0 if solitary else amount, float(vals[:, 0].mean()), float(vals[:, 1].mean()),
                              vals[:, 0].tolist(), vals[:, 1].tolist(), int(vals[:, 2].sum())))
    report = Report(manifest, rows, time.perf_counter() - t0)
    if out_dir is not None:
        (out_dir / "results.txt").write_text(render_report(report))
        (out_dir / "results.json").write_text(json.dumps(report.to_dict(), indent=1))
        report.artifacts = {"results": str(out_dir / "results.txt"), "json": str(out_dir / "results.json")}
        if (out_dir / "efficiency_matrix.png").exists():
            report.artifacts["heatmap"] = str(out_dir / "efficiency_matrix.png")
    return report

