"""Part-based skeleton matching: batch sampling and the part-level
multi-sample contrastive (PMSC) loss.

For a low-quality sample i and a high-quality sample j the part similarity
is ``C(i, j) = exp(sum_p cos(fL_ip, fH_jp) * E[y_i, p])``. Positives are the
same-label high-quality items other than i's own paired match, negatives the
other-label items. With mean similarities CP and CN:

    paired:    l_i = -log((C(i, i^H) + w CP) / (C(i, i^H) + w CP + CN))
    solitary:  l_i = -log(w CP / (w CP + CN))

An empty positive set contributes CP = 0; solitary samples without
positives (or with w = 0) and samples without negatives are skipped.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, SamplerError
from .skeleton import Dataset


@dataclass
class DistillConfig:
    w: float = 0.5
    alpha: float = 1.0
    batch_low: int = 16
    batch_high: int = 16
    epsilon_cos: float = 1e-12

    def validate(self) -> None:
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError(f"w must lie in [0, 1], got {self.w}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.batch_low < 1 or self.batch_high < 2:
            raise ConfigError("batch_low must be >= 1 and batch_high >= 2")
        if self.epsilon_cos <= 0:
            raise ConfigError("epsilon_cos must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LowItem:
    index: int          # position in dataset.low()
    label: int
    paired: bool
    pair_key: str | None


@dataclass
class HighItem:
    index: int          # position in dataset.paired
    label: int
    pair_key: str


@dataclass
class DistillBatch:
    low_items: list
    high_items: list

    @property
    def low_labels(self) -> np.ndarray:
        return np.array([it.label for it in self.low_items], dtype=np.int64)

    @property
    def high_labels(self) -> np.ndarray:
        return np.array([it.label for it in self.high_items], dtype=np.int64)

    def match_index(self) -> np.ndarray:
        """Position in high_items of each low item's paired match, -1 for solitary items."""
        where = {h.pair_key: k for k, h in enumerate(self.high_items)}
        out = np.full(len(self.low_items), -1, dtype=np.int64)
        for i, it in enumerate(self.low_items):
            if it.paired:
                out[i] = where[it.pair_key]
        return out


@dataclass
class LossStats:
    paired: int = 0
    solitary: int = 0
    skipped: int = 0
    empty_batches: int = 0

    def add(self, other: "LossStats") -> None:
        self.paired += other.paired
        self.solitary += other.solitary
        self.skipped += other.skipped
        self.empty_batches += other.empty_batches


# --- similarity ------------------------------------------------------------

def part_cosines(fL, fH, eps: float = 1e-12) -> torch.Tensor:
    """(BL, BH, P) cosine similarities between matching parts, in float64."""
    fL = torch.as_tensor(fL).double()
    fH = torch.as_tensor(fH).double()
    dots = torch.einsum("ipc,jpc->ijp", fL, fH)
    norms = torch.linalg.vector_norm(fL, dim=-1)[:, None, :] * torch.linalg.vector_norm(fH, dim=-1)[None, :, :]
    return dots / norms.clamp_min(eps)


def similarity_logits(fL, fH, e_rows, eps: float = 1e-12) -> torch.Tensor:
    """phi(i, j) = sum_p cos(fL_ip, fH_jp) * e_rows[i, p], shape (BL, BH)."""
    e_rows = torch.as_tensor(np.asarray(e_rows) if not torch.is_tensor(e_rows) else e_rows).double()
    return torch.einsum("ijp,ip->ij", part_cosines(fL, fH, eps), e_rows)


def part_similarity(fL, fH, e_row, eps: float = 1e-12) -> torch.Tensor:
    """C = exp(phi) for one low/high pair of (5, C) part feature sets."""
    fL = torch.as_tensor(fL)[None]
    fH = torch.as_tensor(fH)[None]
    e_row = torch.as_tensor(np.asarray(e_row) if not torch.is_tensor(e_row) else e_row)[None]
    return torch.exp(similarity_logits(fL, fH, e_row, eps)[0, 0])


# --- loss ------------------------------------------------------------------

def positive_negative_sets(batch: DistillBatch, i: int) -> tuple:
    y = batch.low_labels[i]
    own = batch.match_index()[i]
    hl = batch.high_labels
    pos = [j for j in range(len(hl)) if hl[j] == y and j != own]
    neg = [j for j in range(len(hl)) if hl[j] != y]
    return pos, neg


def sample_losses(sim: torch.Tensor, low_labels, high_labels, match, w: float):
    """Per-sample PMSC terms from a (BL, BH) similarity matrix C = exp(phi).

    Returns (losses, valid): ``losses`` is zero where ``valid`` is False.
    """
    yl = torch.as_tensor(low_labels)[:, None]
    yh = torch.as_tensor(high_labels)[None, :]
    match = torch.as_tensor(match)
    cols = torch.arange(sim.shape[1])[None, :]
    pos = (yl == yh) & (cols != match[:, None])
    neg = yl != yh
    n_pos = pos.sum(1)
    n_neg = neg.sum(1)
    zero = sim.new_zeros(())
    cp = torch.where(n_pos > 0, (sim * pos).sum(1) / n_pos.clamp_min(1), zero)
    cn = torch.where(n_neg > 0, (sim * neg).sum(1) / n_neg.clamp_min(1), zero)
    paired = match >= 0
    own = sim.gather(1, match.clamp_min(0)[:, None])[:, 0]
    num = torch.where(paired, own + w * cp, w * cp)
    valid = (num > 0) & (n_neg > 0)
    safe_num = torch.where(valid, num, torch.ones_like(num))
    losses = torch.log(safe_num + cn) - torch.log(safe_num)
    return torch.where(valid, losses, torch.zeros_like(losses)), valid


def sample_loss(i: int, batch: DistillBatch, fL, fH, E, cfg: DistillConfig) -> torch.Tensor:
    """Loss term of low item ``i`` (0 when the item is skipped)."""
    losses, _ = _batch_terms(batch, fL, fH, E, cfg)
    return losses[i]


def _batch_terms(batch, fL, fH, E, cfg):
    yl = batch.low_labels
    E = torch.as_tensor(np.asarray(E) if not torch.is_tensor(E) else E).double()
    sim = torch.exp(similarity_logits(fL, fH, E[torch.as_tensor(yl)], cfg.epsilon_cos))
    return sample_losses(sim, yl, batch.high_labels, batch.match_index(), cfg.w)


def pmsc_loss(batch: DistillBatch, fL, fH, E, cfg: DistillConfig, stats: LossStats | None = None) -> torch.Tensor:
    """Batch mean of the PMSC terms over non-skipped low items."""
    losses, valid = _batch_terms(batch, fL, fH, E, cfg)
    if stats is not None:
        paired = torch.as_tensor(batch.match_index() >= 0)
        stats.paired += int((valid & paired).sum())
        stats.solitary += int((valid & ~paired).sum())
        stats.skipped += int((~valid).sum())
    n = int(valid.sum())
    if n == 0:
        if stats is not None:
            stats.empty_batches += 1
        return losses.sum() * 0.0
    return losses.sum() / n


def student_loss(cls, pmsc, alpha: float):
    return cls + alpha * pmsc


# --- sampling --------------------------------------------------------------

class BatchSampler:
    """Builds DistillBatches: low items first, then a class-aware high batch.

    The high batch holds the paired matches of the low items, at least one
    extra same-label item per low label whenever the paired pool allows it,
    at least two distinct labels, and is topped up at random to ``batch_high``.
    """

    def __init__(self, dataset: Dataset, cfg: DistillConfig):
        cfg.validate()
        self.dataset = dataset
        self.cfg = cfg
        self.M = dataset.M
        self.low_labels = np.array([s.label for s in dataset.low()], dtype=np.int64)
        self.high_labels = np.array([h.label for h, _ in dataset.paired], dtype=np.int64)
        self.keys = [h.instance_id for h, _ in dataset.paired]
        self.by_label = {c: np.flatnonzero(self.high_labels == c) for c in np.unique(self.high_labels)}
        if len(self.by_label) < 2:
            raise SamplerError("at least two action labels are needed among paired high-quality samples")

    def low_item(self, k: int) -> LowItem:
        paired = k < self.M
        return LowItem(k, int(self.low_labels[k]), paired, self.keys[k] if paired else None)

    def highs_for(self, low_idx, rng: np.random.Generator) -> list:
        chosen = [int(k) for k in low_idx if k < self.M]
        taken = set(chosen)
        present = {}
        for h in chosen:
            present[self.high_labels[h]] = present.get(self.high_labels[h], 0) + 1
        for k in low_idx:
            y = self.low_labels[k]
            own = k if k < self.M else -1
            have = present.get(y, 0) - (1 if own in taken else 0)
            if have >= 1:
                continue
            pool = [h for h in self.by_label.get(y, ()) if h not in taken and h != own]
            if not pool:
                continue
            h = int(rng.choice(pool))
            chosen.append(h)
            taken.add(h)
            present[y] = present.get(y, 0) + 1
        if len(present) < 2:
            others = [h for h in range(self.M) if self.high_labels[h] not in present]
            h = int(rng.choice(others))
            chosen.append(h)
            taken.add(h)
            present[self.high_labels[h]] = 1
        need = self.cfg.batch_high - len(chosen)
        if need > 0:
            rest = np.setdiff1d(np.arange(self.M), np.fromiter(taken, dtype=np.int64))
            extra = rng.choice(rest, size=min(need, len(rest)), replace=False)
            chosen.extend(int(h) for h in extra)
        return [HighItem(h, int(self.high_labels[h]), self.keys[h]) for h in chosen]

    def batch_for(self, low_idx, rng: np.random.Generator) -> DistillBatch:
        return DistillBatch([self.low_item(int(k)) for k in low_idx], self.highs_for(low_idx, rng))

    def sample(self, rng: np.random.Generator) -> DistillBatch:
        n = len(self.low_labels)
        low_idx = rng.choice(n, size=min(self.cfg.batch_low, n), replace=False)
        return self.batch_for(low_idx, rng)


def build_batch(dataset: Dataset, cfg: DistillConfig, rng: np.random.Generator) -> DistillBatch:
    return BatchSampler(dataset, cfg).sample(rng)
