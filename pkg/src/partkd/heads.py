"""Part pooling, global pooling and classification on joint feature maps.

Feature maps are (N, C, T, V) tensors; a single (C, T, V) map is accepted
and returns unbatched results.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .skeleton import PartMap


def _batched(z):
    z = torch.as_tensor(z)
    if z.dim() == 3:
        return z.unsqueeze(0), True
    if z.dim() != 4:
        raise ShapeError(f"expected a (N, C, T, V) or (C, T, V) feature map, got {tuple(z.shape)}")
    return z, False


def _time_weights(z, frame_mask):
    """(N, T) averaging weights over output steps; uniform when no mask is given."""
    N, _, T, _ = z.shape
    if frame_mask is None:
        return torch.full((N, T), 1.0 / T, dtype=z.dtype, device=z.device)
    m = torch.as_tensor(frame_mask, dtype=z.dtype, device=z.device)
    if m.shape != (N, T):
        raise ShapeError(f"frame mask {tuple(m.shape)} does not match feature map ({N}, {T})")
    return m / m.sum(1, keepdim=True).clamp_min(1)


def pool_parts(z, part_map: PartMap, frame_mask=None) -> torch.Tensor:
    """Average features over time and over the joints of each body part -> (N, 5, C)."""
    zb, single = _batched(z)
    V = zb.shape[-1]
    if part_map.num_joints != V:
        raise ShapeError(f"part map {part_map.schema_id} covers {part_map.num_joints} joints, feature map has {V}")
    member = torch.as_tensor(part_map.membership(), dtype=zb.dtype, device=zb.device)
    out = torch.einsum("nctv,nt,pv->npc", zb, _time_weights(zb, frame_mask), member)
    return out[0] if single else out


def global_pool(z, frame_mask=None) -> torch.Tensor:
    """Global average pooling over time and joints -> (N, C)."""
    zb, single = _batched(z)
    out = torch.einsum("nctv,nt->nc", zb, _time_weights(zb, frame_mask)) / zb.shape[-1]
    return out[0] if single else out


def output_frame_mask(x, strides) -> torch.Tensor:
    """Map a (N, 3, T, V, M) input to a (N, T_out) mask of output steps that saw a non-empty frame."""
    x = torch.as_tensor(x)
    valid = (x != 0).flatten(start_dim=3).any(-1).any(1).to(torch.float32)  # (N, T)
    m = valid[:, None]
    for s in strides:
        if s > 1:
            m = F.max_pool1d(m, kernel_size=s, stride=s, ceil_mode=True)
    return m[:, 0]


def logits(g, weight, bias) -> torch.Tensor:
    g = torch.as_tensor(g)
    weight = torch.as_tensor(weight, dtype=g.dtype)
    bias = torch.as_tensor(bias, dtype=g.dtype)
    if weight.dim() != 2 or g.shape[-1] != weight.shape[1] or bias.shape != weight.shape[:1]:
        raise ShapeError(f"classifier weight {tuple(weight.shape)} / bias {tuple(bias.shape)} "
                         f"incompatible with feature {tuple(g.shape)}")
    return g @ weight.T + bias


def classify(g, weight, bias) -> torch.Tensor:
    """Affine map followed by softmax: class probabilities for a global feature."""
    return torch.softmax(logits(g, weight, bias), dim=-1)


def cross_entropy(logit, labels) -> torch.Tensor:
    """Mean negative log-likelihood of the true labels, evaluated via log-softmax."""
    logit = torch.as_tensor(logit)
    labels = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels, dtype=torch.long)
    if logit.dim() != 2 or labels.shape != logit.shape[:1]:
        raise ShapeError(f"logits {tuple(logit.shape)} do not match labels {tuple(labels.shape)}")
    return -torch.log_softmax(logit, dim=1).gather(1, labels[:, None]).mean()
