"""Teacher pre-training, student distillation, evaluation and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ActionModel, BackboneConfig, init_params
from .data import occlude_all, pad_or_truncate, stack_inputs
from .distill import BatchSampler, DistillConfig, LossStats, pmsc_loss, student_loss
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .heads import cross_entropy, global_pool, output_frame_mask, pool_parts
from .part_matrix import EfficiencyMatrix
from .skeleton import Dataset, build_graph, build_part_map

log = logging.getLogger("partkd")

CHECKPOINT_FORMAT = "partkd-checkpoint"
CHECKPOINT_VERSION = 1
EVAL_SEED = 777_001


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple = (30, 40, 50)
    lr_decay: float = 0.1
    seed: int = 0
    occlusion_p: float = 0.0
    eval_seed: int = EVAL_SEED
    frames: int = 300
    bodies: int = 2
    extractor: str = "stgcn"
    reocclude_per_epoch: bool = False
    masked_pooling: bool = False
    holdout_fraction: float = 0.0
    distill: DistillConfig = field(default_factory=DistillConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    def validate(self) -> None:
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ConfigError(f"lr_decay_epochs {d} must be strictly increasing and < epochs ({self.epochs})")
        if self.lr <= 0 or not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr must be positive and lr_decay must lie in (0, 1]")
        if not 0.0 <= self.occlusion_p <= 1.0:
            raise ConfigError("occlusion_p must lie in [0, 1]")
        if self.frames < 1 or self.bodies < 1:
            raise ConfigError("frames and bodies must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        self.distill.validate()
        self.backbone.validate()

    @classmethod
    def fast(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: 60 frames, 3-block backbone, 30 epochs."""
        base = dict(epochs=30, lr_decay_epochs=(15, 20, 25), frames=60, backbone=BackboneConfig.fast())
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        if isinstance(d.get("distill"), dict):
            d["distill"] = DistillConfig(**d["distill"])
        if isinstance(d.get("backbone"), dict):
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr * decay ** (number of decay epochs already reached)."""
    k = sum(epoch >= e for e in cfg.lr_decay_epochs)
    # dividing by the inverse keeps 0.1 -> 0.01 -> 0.001 exact in binary floating point
    return cfg.lr / (1.0 / cfg.lr_decay) ** k if k else cfg.lr


@dataclass
class Metrics:
    top1: float
    top5: float
    per_class: np.ndarray
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray

    def to_dict(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "per_class": self.per_class.tolist(),
                "confusion": self.confusion.tolist(), "predictions": self.predictions.tolist(),
                "labels": self.labels.tolist()}


@dataclass
class TrainResult:
    model: ActionModel
    history: list                      # one dict per epoch
    step_losses: list                  # total loss of every optimizer step
    stats: LossStats = field(default_factory=LossStats)


# --- helpers ---------------------------------------------------------------

def model_inputs(seqs, cfg: TrainConfig) -> tuple:
    return stack_inputs([pad_or_truncate(s, cfg.frames, cfg.bodies) for s in seqs])


def _forward(model: ActionModel, x: torch.Tensor, masked: bool):
    """Logits and joint feature map, optionally ignoring padded output steps."""
    z = model.extractor(x)
    mask = output_frame_mask(x, model.extractor.cfg.temporal_strides) if masked else None
    return model.fc(global_pool(z, mask)), z, mask


def predict(model: ActionModel, seqs, frames: int, bodies: int = 2, batch_size: int = 64,
            masked: bool = False) -> np.ndarray:
    """Logits for a list of sequences, computed in evaluation mode."""
    x, _ = stack_inputs([pad_or_truncate(s, frames, bodies) for s in seqs])
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for a in range(0, len(x), batch_size):
            logit, _, _ = _forward(model, torch.as_tensor(x[a:a + batch_size], dtype=dtype), masked)
            out.append(logit.double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_actions))


def part_features(model: ActionModel, seqs, cfg: TrainConfig, batch_size: int = 64) -> torch.Tensor:
    """Frozen (N, 5, C) part features of ``seqs``, computed in evaluation mode."""
    pm = build_part_map(model.graph.schema_id)
    x, _ = model_inputs(seqs, cfg)
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for a in range(0, len(x), batch_size):
            _, z, mask = _forward(model, torch.as_tensor(x[a:a + batch_size]), cfg.masked_pooling)
            out.append(pool_parts(z, pm, mask))
    model.train(was_training)
    return torch.cat(out)


def matrix_split(dataset: Dataset, cfg: TrainConfig) -> tuple:
    """(teacher sequences, efficiency-matrix sequences) from the paired high-quality side.

    With ``holdout_fraction`` = 0 both are the full paired set. Otherwise a
    per-class share (at least one instance per class) is withheld from the
    teacher and used only to measure the matrix.
    """
    highs = dataset.high()
    if cfg.holdout_fraction == 0:
        return highs, highs
    rng = np.random.default_rng([cfg.seed, 5])
    labels = np.array([s.label for s in highs])
    held = set()
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(cfg.holdout_fraction * len(idx))))
        if k >= len(idx):
            raise ConfigError(f"holdout leaves no teacher data for action {c}")
        held.update(int(i) for i in rng.choice(idx, size=k, replace=False))
    return ([s for i, s in enumerate(highs) if i not in held],
            [s for i, s in enumerate(highs) if i in held])


def _optimizer(model, cfg):
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _check_finite(value: float, where: str):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}")


# --- training loops --------------------------------------------------------

def train_teacher(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Cross-entropy training on the high-quality side of the paired data."""
    cfg.validate()
    seqs = matrix_split(dataset, cfg)[0] if dataset.paired else []
    if not seqs:
        raise ConfigError("teacher training needs paired high-quality sequences")
    graph = build_graph(seqs[0].schema_id)
    model = init_params(cfg.backbone, graph, cfg.seed, dataset.num_actions, cfg.extractor)
    X, Y = model_inputs(seqs, cfg)
    X, Y = torch.as_tensor(X), torch.as_tensor(Y)
    opt = _optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    bs = cfg.distill.batch_low
    history, steps = [], []
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        perm = rng.permutation(len(seqs))
        tot, correct = 0.0, 0
        for s, a in enumerate(range(0, len(perm), bs)):
            idx = torch.as_tensor(perm[a:a + bs])
            logit, _, _ = _forward(model, X[idx], cfg.masked_pooling)
            loss = cross_entropy(logit, Y[idx])
            value = loss.item()
            _check_finite(value, f"teacher epoch {epoch} step {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps.append(value)
            tot += value * len(idx)
            correct += int((logit.argmax(1) == Y[idx]).sum())
        history.append({"epoch": epoch, "lr": lr, "loss": tot / len(perm), "train_acc": correct / len(perm)})
        log.info("teacher epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, tot / len(perm), correct / len(perm))
    return TrainResult(model, history, steps)


def train_student(dataset: Dataset, cfg: TrainConfig, teacher: ActionModel | None = None,
                  E: EfficiencyMatrix | None = None) -> TrainResult:
    """Train on every low-quality sequence with L_c + alpha * L_pmsc.

    Without a teacher the PMSC term is dropped entirely (plain classifier
    baseline). With a teacher and alpha = 0 the PMSC term is still computed
    and logged but contributes nothing to the update.
    """
    cfg.validate()
    lows = dataset.low()
    if not lows:
        raise ConfigError("student training needs low-quality sequences")
    graph = build_graph(lows[0].schema_id)
    if any(s.schema_id != graph.schema_id for s in lows):
        raise ConfigError("low-quality sequences use more than one schema")
    pm = build_part_map(graph.schema_id)
    model = init_params(cfg.backbone, graph, cfg.seed, dataset.num_actions, cfg.extractor)

    kd = teacher is not None
    if kd:
        if E is None:
            raise ConfigError("distillation needs an efficiency matrix")
        if E.num_actions != dataset.num_actions or teacher.num_actions != dataset.num_actions:
            raise ConfigError("teacher / efficiency matrix / dataset disagree on the number of actions")
        if teacher.extractor.out_channels != model.extractor.out_channels:
            raise ConfigError("teacher and student feature widths differ")
        teacher.requires_grad_(False)
        f_high = part_features(teacher, dataset.high(), cfg).double()
        sampler = BatchSampler(dataset, cfg.distill)
        E_rows = torch.as_tensor(E.normalized)
    Y = torch.as_tensor(np.array([s.label for s in lows], dtype=np.int64))

    def occluded_inputs(epoch):
        seed = [cfg.seed, 2, epoch] if cfg.reocclude_per_epoch else [cfg.seed, 2]
        rng_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
        return torch.as_tensor(model_inputs(occlude_all(lows, cfg.occlusion_p, rng_seed), cfg)[0])

    X = occluded_inputs(0)
    opt = _optimizer(model, cfg)
    rng_low = np.random.default_rng([cfg.seed, 3])
    rng_high = np.random.default_rng([cfg.seed, 4])
    bs = cfg.distill.batch_low
    alpha = cfg.distill.alpha
    history, steps, stats = [], [], LossStats()
    model.train()
    for epoch in range(cfg.epochs):
        if cfg.reocclude_per_epoch and epoch > 0:
            X = occluded_inputs(epoch)
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        perm = rng_low.permutation(len(lows))
        sums = {"cls": 0.0, "pmsc": 0.0, "total": 0.0}
        correct, n_steps = 0, 0
        epoch_stats = LossStats()
        for s, a in enumerate(range(0, len(perm), bs)):
            idx = perm[a:a + bs]
            t_idx = torch.as_tensor(idx)
            logit, z, mask = _forward(model, X[t_idx], cfg.masked_pooling)
            cls = cross_entropy(logit, Y[t_idx])
            if kd:
                batch = sampler.batch_for(idx, rng_high)
                f_low = pool_parts(z, pm, mask)
                f_hi = f_high[torch.as_tensor([h.index for h in batch.high_items])]
                pmsc = pmsc_loss(batch, f_low, f_hi, E_rows, cfg.distill, epoch_stats)
                loss = student_loss(cls, pmsc, alpha)
                sums["pmsc"] += pmsc.item()
            else:
                loss = cls
            value = loss.item()
            _check_finite(value, f"student epoch {epoch} step {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps.append(value)
            sums["cls"] += cls.item()
            sums["total"] += value
            correct += int((logit.argmax(1) == Y[t_idx]).sum())
            n_steps += 1
        stats.add(epoch_stats)
        row = {"epoch": epoch, "lr": lr, "train_acc": correct / len(perm),
               "cls": sums["cls"] / n_steps, "pmsc": sums["pmsc"] / n_steps if kd else None,
               "total": sums["total"] / n_steps, "paired_terms": epoch_stats.paired,
               "solitary_terms": epoch_stats.solitary, "skipped_terms": epoch_stats.skipped}
        history.append(row)
        log.info("student epoch %d lr %.4g cls %.4f pmsc %s acc %.3f", epoch, lr, row["cls"],
                 "-" if row["pmsc"] is None else f"{row['pmsc']:.4f}", row["train_acc"])
    return TrainResult(model, history, steps, stats)


def evaluate(model: ActionModel, seqs, occlusion_p: float = 0.0, seed: int = EVAL_SEED,
             frames: int = 300, bodies: int = 2, masked: bool = False) -> Metrics:
    """Occlude the test sequences with a fixed seed, classify, and summarize."""
    seqs = list(seqs)
    if not seqs:
        raise ConfigError("empty test set")
    if any(s.schema_id != model.graph.schema_id for s in seqs):
        raise ConfigError(f"test sequences do not match model schema {model.graph.schema_id}")
    degraded = occlude_all(seqs, occlusion_p, seed)
    logit = predict(model, degraded, frames, bodies, masked=masked)
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return metrics_from_logits(logit, labels, model.num_actions)


def metrics_from_logits(logit, labels, num_actions: int) -> Metrics:
    logit = np.asarray(logit)
    labels = np.asarray(labels, dtype=np.int64)
    preds = logit.argmax(1)
    k = min(5, num_actions)
    topk = np.argsort(-logit, axis=1, kind="stable")[:, :k]
    confusion = np.zeros((num_actions, num_actions), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    counts = confusion.sum(1)
    per_class = np.divide(np.diag(confusion), counts, out=np.zeros(num_actions), where=counts > 0)
    return Metrics(top1=float((preds == labels).mean()), top5=float((topk == labels[:, None]).any(1).mean()),
                   per_class=per_class, confusion=confusion, predictions=preds, labels=labels)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: ActionModel, cfg: TrainConfig, role: str, **extra) -> Path:
    path = Path(path)
    torch.save({
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "role": role,
        "schema_id": model.graph.schema_id, "num_actions": model.num_actions,
        "extractor": cfg.extractor, "backbone": cfg.backbone.to_dict(), "train_config": cfg.to_dict(),
        "state_dict": model.state_dict(), "extra": extra,
    }, path)
    return path


def load_checkpoint(path, backbone: BackboneConfig | None = None) -> tuple:
    """Rebuild a model from a checkpoint; refuses a mismatching ``backbone`` config."""
    try:
        doc = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    saved = BackboneConfig.from_dict(doc["backbone"])
    if backbone is not None and backbone.to_dict() != saved.to_dict():
        raise CheckpointError(f"{path}: backbone config mismatch (saved {saved.to_dict()}, "
                              f"expected {backbone.to_dict()})")
    model = init_params(saved, build_graph(doc["schema_id"]), 0, doc["num_actions"], doc["extractor"])
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc
