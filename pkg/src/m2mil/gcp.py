"""Global contrast pooling.

A bag of instance vectors is summarised by one number per learnable
concept: the largest cosine similarity between that concept and any
instance.  Gradients reach only the maximising instance of each concept
(lowest index on ties).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, from_op

COS_EPS = 1e-8
NORM_EPS = 1e-12


@dataclass
class ConceptBank:
    """A ``[p, d]`` concept matrix kept at unit row norm."""

    concepts: Tensor

    @property
    def p(self) -> int:
        return self.concepts.shape[0]

    @property
    def d(self) -> int:
        return self.concepts.shape[1]

    @classmethod
    def random(cls, p: int, d: int, rng: np.random.Generator) -> ConceptBank:
        w = rng.standard_normal((p, d))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return cls(Tensor(w, requires_grad=True))


def _ordered_sum(terms) -> np.ndarray:
    # left-to-right accumulation over the feature axis, so the result does not
    # depend on how a BLAS kernel happens to group the additions
    it = iter(terms)
    acc = next(it).copy()
    for t in it:
        acc += t
    return acc


def gcp_forward(instances: Tensor, concepts: Tensor) -> Tensor:
    """Pool ``instances`` of shape ``[k, d]`` (one bag) or ``[B, k, d]`` (B bags
    of equal size) against ``concepts[p, d]``, giving ``[p]`` or ``[B, p]``."""
    single = instances.ndim == 2
    phi = instances.data[None] if single else instances.data
    if phi.ndim != 3:
        raise ValueError(f"gcp_forward: instances must be [k, d] or [B, k, d], got {instances.shape}")
    b, k, d = phi.shape
    if k == 0:
        raise ValueError("gcp_forward: empty bag")
    if concepts.ndim != 2 or concepts.shape[1] != d:
        raise ValueError(f"gcp_forward: instance dim {d} does not match concepts {concepts.shape}")
    w = concepts.data
    p = w.shape[0]

    wn = np.sqrt(_ordered_sum(w[:, j] * w[:, j] for j in range(d)))
    fn = np.sqrt(_ordered_sum(phi[:, :, j] * phi[:, :, j] for j in range(d)))
    dots = _ordered_sum(phi[:, :, j, None] * w[None, None, :, j] for j in range(d))
    denom = fn[:, :, None] * wn[None, None, :] + COS_EPS
    cos = dots / denom
    arg = cos.argmax(axis=1)  # [B, p], first maximiser
    out = np.take_along_axis(cos, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        g = g[None] if single else g
        bi = np.repeat(np.arange(b), p)
        ki = arg.reshape(-1)
        mi = np.tile(np.arange(p), b)
        x = phi[bi, ki]               # [B*p, d] selected instances
        a = dots[bi, ki, mi]
        den = denom[bi, ki, mi]
        xn = fn[bi, ki]
        wsel = w[mi]
        wnm = wn[mi]
        gv = g.reshape(-1)
        # d/dx of a / (|x||w| + eps)
        x_unit = np.divide(x, xn[:, None], out=np.zeros_like(x), where=xn[:, None] > 0)
        w_unit = np.divide(wsel, wnm[:, None], out=np.zeros_like(wsel), where=wnm[:, None] > 0)
        coef = (gv / den)[:, None]
        corr = (gv * a / den ** 2)[:, None]
        gx_rows = coef * wsel - corr * wnm[:, None] * x_unit
        gw_rows = coef * x - corr * xn[:, None] * w_unit
        gphi = gw = None
        if instances.requires_grad:
            gphi = np.zeros_like(phi)
            np.add.at(gphi, (bi, ki), gx_rows)
            if single:
                gphi = gphi[0]
        if concepts.requires_grad:
            gw = np.zeros_like(w)
            np.add.at(gw, mi, gw_rows)
        return gphi, gw

    return from_op(out[0] if single else out, (instances, concepts), backward)


def gcp_regularize(bank) -> None:
    """Rescale every concept row to unit Euclidean norm, in place.

    Rows with norm below ``NORM_EPS`` are replaced by the first basis vector.
    """
    t = bank.concepts if isinstance(bank, ConceptBank) else bank
    w = t.data
    norms = np.linalg.norm(w, axis=1)
    tiny = norms < NORM_EPS
    w[~tiny] /= norms[~tiny, None]
    if tiny.any():
        w[tiny] = 0.0
        w[tiny, 0] = 1.0
