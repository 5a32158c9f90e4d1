"""Contrastive objectives: intra-modal NT-Xent between two augmented point
views, cross-modal NT-Xent between the view prototype and the image
feature, and their sum. Indices are 0-based.

Every denominator holds the in-batch negatives from the anchor's own table
(k != i) plus the full other table (k = 1..N, positive included), so each
pairwise term is >= 0 and an N=1 batch gives exactly 0.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

DEFAULT_TAU = 0.1


@dataclass(eq=False)
class ProjectedBatch:
    """Projected features of one mini-batch: two point views and the images."""

    z_t1: object
    z_t2: object
    h: object
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.z_t1, self.z_t2, self.h = (T.as_tensor(x) for x in (self.z_t1, self.z_t2, self.h))
        shapes = {self.z_t1.shape, self.z_t2.shape, self.h.shape}
        if len(shapes) != 1 or self.z_t1.ndim != 2:
            raise ShapeError(f"Z_t1, Z_t2 and H must share an N x d shape, got {sorted(shapes)}")
        if not self.tau > 0:
            raise DomainError("temperature must be positive")

    @property
    def n(self):
        return self.z_t1.shape[0]


def _require_nonzero_rows(x):
    if (np.sqrt((x.data * x.data).sum(axis=1)) == 0).any():
        raise DomainError("cosine similarity of a zero vector")


def cosine_similarity(u, v):
    """u.v / (|u||v|) for two vectors (Tensors or arrays), as a 1-element Tensor."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError("cosine similarity needs two vectors of equal length")
    nu = T.sqrt((u * u).sum())
    nv = T.sqrt((v * v).sum())
    if nu.item() == 0 or nv.item() == 0:
        raise DomainError("cosine similarity of a zero vector")
    return (u * v).sum() / (nu * nv)


def normalize_rows(x):
    _require_nonzero_rows(x)
    return x / T.sqrt((x * x).sum(axis=1, keepdims=True))


def ntxent_terms(anchor, other, tau):
    """Per-row pairwise terms -log(e^{s(a_i,o_i)/tau} / D_i) as an N-vector.

    D_i = sum_{k != i} e^{s(a_i,a_k)/tau} + sum_k e^{s(a_i,o_k)/tau}, evaluated
    with the row maximum factored out of the exponentials.
    """
    anchor, other = T.as_tensor(anchor), T.as_tensor(other)
    n = anchor.shape[0]
    a, o = normalize_rows(anchor), normalize_rows(other)
    s_aa = (a @ T.transpose(a)) / tau
    s_ao = (a @ T.transpose(o)) / tau
    off = 1.0 - np.eye(n)
    # row maximum over the entries that enter D_i, held constant
    masked = np.where(off > 0, s_aa.data, -np.inf)
    m = np.maximum(masked.max(axis=1), s_ao.data.max(axis=1))[:, None]
    e_aa = T.exp((s_aa - m) * off) * off
    e_ao = T.exp(s_ao - m)
    denom = e_aa.sum(axis=1) + e_ao.sum(axis=1)
    positive = (s_ao * np.eye(n)).sum(axis=1)
    return T.log(denom) - (positive - m.reshape(-1))


def prototype(z_t1, z_t2):
    """Mean of the two views' projected vectors."""
    z_t1, z_t2 = T.as_tensor(z_t1), T.as_tensor(z_t2)
    if z_t1.shape != z_t2.shape:
        raise ShapeError("prototype needs equal-length vectors")
    return (z_t1 + z_t2) * 0.5


def ntxent_pair(batch, i, anchor="t1"):
    """l(i, t1, t2) (anchor="t1") or l(i, t2, t1) (anchor="t2") as a float."""
    a, o = (batch.z_t1, batch.z_t2) if anchor == "t1" else (batch.z_t2, batch.z_t1)
    return float(ntxent_terms(a, o, batch.tau).data[i])


def cmid_pair(batch, i, anchor="prototype"):
    """c(i, z, h) (anchor="prototype") or c(i, h, z) (anchor="image") as a float."""
    zbar = prototype(batch.z_t1, batch.z_t2)
    a, o = (zbar, batch.h) if anchor == "prototype" else (batch.h, zbar)
    return float(ntxent_terms(a, o, batch.tau).data[i])


def imid_loss(batch):
    n = batch.n
    terms = ntxent_terms(batch.z_t1, batch.z_t2, batch.tau).sum() + ntxent_terms(
        batch.z_t2, batch.z_t1, batch.tau
    ).sum()
    return terms / (2.0 * n)


def cmid_from_prototypes(zbar, h, tau):
    n = zbar.shape[0]
    terms = ntxent_terms(zbar, h, tau).sum() + ntxent_terms(h, zbar, tau).sum()
    return terms / (2.0 * n)


def cmid_loss(batch):
    return cmid_from_prototypes(prototype(batch.z_t1, batch.z_t2), batch.h, batch.tau)


def joint_loss(batch):
    """(L, L_imid, L_cmid) with L = L_imid + L_cmid."""
    li = imid_loss(batch)
    lc = cmid_loss(batch)
    return li + lc, li, lc


def multi_image_feature(h_list):
    """Componentwise mean of several projected image features (one returned as is)."""
    if not h_list:
        raise ShapeError("need at least one image feature")
    if len(h_list) == 1:
        return T.as_tensor(h_list[0])
    first = T.as_tensor(h_list[0])
    total = first
    for h in h_list[1:]:
        h = T.as_tensor(h)
        if h.shape != first.shape:
            raise ShapeError("image features differ in shape")
        total = total + h
    return total * (1.0 / len(h_list))


# ---------------------------------------------------------------------------
# literal scalar oracle


def _cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        raise DomainError("cosine similarity of a zero vector")
    return dot / (nu * nv)


def _pair_oracle(i, a_rows, o_rows, tau):
    n = len(a_rows)
    num = math.exp(_cos(a_rows[i], o_rows[i]) / tau)
    den = 0.0
    for k in range(n):
        if k != i:
            den += math.exp(_cos(a_rows[i], a_rows[k]) / tau)
    for k in range(n):
        den += math.exp(_cos(a_rows[i], o_rows[k]) / tau)
    return -math.log(num / den)


def naive_oracle(batch, which="joint"):
    """Per-index scalar loops straight from the definitions; no vectorization,
    no stability tricks."""
    z1 = [list(map(float, r)) for r in T.as_tensor(batch.z_t1).data]
    z2 = [list(map(float, r)) for r in T.as_tensor(batch.z_t2).data]
    h = [list(map(float, r)) for r in T.as_tensor(batch.h).data]
    tau = batch.tau
    n = len(z1)
    if which not in ("imid", "cmid", "joint"):
        raise ValueError(f"unknown objective {which!r}")
    imid = cmid = 0.0
    if which in ("imid", "joint"):
        s = 0.0
        for i in range(n):
            s += _pair_oracle(i, z1, z2, tau) + _pair_oracle(i, z2, z1, tau)
        imid = s / (2 * n)
    if which in ("cmid", "joint"):
        zbar = [[(a + b) / 2 for a, b in zip(z1[i], z2[i])] for i in range(n)]
        s = 0.0
        for i in range(n):
            s += _pair_oracle(i, zbar, h, tau) + _pair_oracle(i, h, zbar, tau)
        cmid = s / (2 * n)
    return {"imid": imid, "cmid": cmid, "joint": imid + cmid}[which]
