"""Scalar reference implementations used as test oracles.

Written with plain Python floats and loops, independent of the vectorized
torch code under test.
"""
import math

import numpy as np

from partkd.distill import DistillBatch, HighItem, LowItem


def cosine(a, b, eps=1e-12):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / max(na * nb, eps)


def phi_reference(fL_i, fH_j, e_row, eps=1e-12):
    """Weighted sum over the 5 parts of part-wise cosine similarities."""
    return sum(cosine(fL_i[p], fH_j[p], eps) * float(e_row[p]) for p in range(len(e_row)))


def pmsc_reference(fL, fH, E, low_labels, high_labels, match, w, eps=1e-12):
    """Per-item losses (None when skipped), their mean, and the phi table.

    ``match[i]`` is the position of item i's paired high-quality sample or -1.
    """
    BL, BH = len(low_labels), len(high_labels)
    phi = [[phi_reference(fL[i], fH[j], E[low_labels[i]], eps) for j in range(BH)] for i in range(BL)]
    losses = []
    for i in range(BL):
        pos = [j for j in range(BH) if high_labels[j] == low_labels[i] and j != match[i]]
        neg = [j for j in range(BH) if high_labels[j] != low_labels[i]]
        cp = sum(math.exp(phi[i][j]) for j in pos) / len(pos) if pos else 0.0
        if not neg:
            losses.append(None)
            continue
        cn = sum(math.exp(phi[i][j]) for j in neg) / len(neg)
        if match[i] >= 0:
            num = math.exp(phi[i][match[i]]) + w * cp
        else:
            num = w * cp
        if num <= 0:
            losses.append(None)
            continue
        losses.append(-math.log(num / (num + cn)))
    kept = [x for x in losses if x is not None]
    mean = sum(kept) / len(kept) if kept else 0.0
    return losses, mean, phi


def random_batch(rng, n_low=8, n_high=8, C=16, classes=6, solitary_share=0.3):
    """A random DistillBatch with features and a normalized E.

    Some low items are solitary; paired items are linked to distinct high
    items; remaining high items are random extra samples.
    """
    high_labels = rng.integers(0, classes, n_high)
    n_paired = min(n_low, n_high, max(1, int(round(n_low * (1 - solitary_share)))))
    paired_slots = rng.choice(n_high, size=n_paired, replace=False)
    low_items = []
    for i in range(n_low):
        if i < n_paired:
            h = int(paired_slots[i])
            low_items.append(LowItem(i, int(high_labels[h]), True, f"k{h}"))
        else:
            low_items.append(LowItem(i, int(rng.integers(0, classes)), False, None))
    high_items = [HighItem(j, int(high_labels[j]), f"k{j}") for j in range(n_high)]
    batch = DistillBatch(low_items, high_items)
    fL = rng.normal(size=(n_low, 5, C))
    fH = rng.normal(size=(n_high, 5, C))
    raw = rng.uniform(0, 1, size=(classes, 5))
    E = np.exp(raw) / np.exp(raw).sum(1, keepdims=True)
    return batch, fL, fH, E


def fd_max_rel_error(fn, x, analytic, h=1e-5):
    """Central-difference check of d fn / d x; error relative to the largest gradient entry."""
    x = np.array(x, dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = fn(x)
        flat[k] = old - h
        down = fn(x)
        flat[k] = old
        nflat[k] = (up - down) / (2 * h)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(np.asarray(analytic) - numeric).max() / scale)
