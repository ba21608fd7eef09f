"""Fusion of the three encoder outputs: concatenation or sequential bilinear pooling."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .features import EncodedFeatures
from .nn_core import Dense, Module, prefixed

SQRT_SMOOTHING = 1e-4


def fuse_concat(e: EncodedFeatures) -> np.ndarray:
    return np.concatenate([e.e_vis, e.e_ocr, e.e_node], axis=-1)


def outer_flatten(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``a ⊗ b`` flattened with ``b`` varying fastest."""
    return (a[..., :, None] * b[..., None, :]).reshape(*a.shape[:-1], a.shape[-1] * b.shape[-1])


def bilinear_pool(a: np.ndarray, b: np.ndarray, proj: Dense) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if proj.in_dim != a.shape[-1] * b.shape[-1]:
        raise DimensionError(f"projection expects {proj.in_dim} inputs, got {a.shape[-1]}x{b.shape[-1]}")
    return proj(outer_flatten(a, b))


def signed_sqrt(x: np.ndarray) -> np.ndarray:
    # smoothed so the derivative stays bounded at 0
    return np.sign(x) * (np.sqrt(np.abs(x) + SQRT_SMOOTHING) - np.sqrt(SQRT_SMOOTHING))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def fuse_bilinear(e: EncodedFeatures, proj1: Dense, proj2: Dense) -> np.ndarray:
    pooled = bilinear_pool(e.e_vis, e.e_ocr, proj1)
    return l2_normalize(signed_sqrt(bilinear_pool(pooled, e.e_node, proj2)))


class Fusion(Module):
    def __init__(
        self,
        method: str,
        vis_dim: int,
        ocr_dim: int,
        node_dim: int,
        proj_dim: int = 128,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if method not in ("concat", "bilinear"):
            raise ValueError(f"unknown fusion method {method!r}")
        self.method = method
        self.dims = (vis_dim, ocr_dim, node_dim)
        if method == "bilinear":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.proj1 = Dense(vis_dim * ocr_dim, proj_dim, bias=False, rng=rng)
            self.proj2 = Dense(proj_dim * node_dim, proj_dim, bias=False, rng=rng)
            self.children.update(proj1=self.proj1, proj2=self.proj2)
            self.out_dim = proj_dim
        else:
            self.out_dim = vis_dim + ocr_dim + node_dim

    def forward(self, e: EncodedFeatures):
        if self.method == "concat":
            return fuse_concat(e), None
        p1, c1 = self.proj1.forward(outer_flatten(e.e_vis, e.e_ocr))
        o2 = outer_flatten(p1, e.e_node)
        p2, c2 = self.proj2.forward(o2)
        s = signed_sqrt(p2)
        norm = np.linalg.norm(s, axis=-1, keepdims=True)
        y = np.divide(s, norm, out=np.zeros_like(s), where=norm > 0)
        return y, (e, p1, c1, c2, p2, norm, y)

    def backward(self, dy: np.ndarray, cache):
        if self.method == "concat":
            v, o, _ = self.dims
            return EncodedFeatures(dy[:, :v], dy[:, v:v + o], dy[:, v + o:]), {}
        e, p1, c1, c2, p2, norm, y = cache
        safe = np.where(norm > 0, norm, 1.0)
        ds = np.where(norm > 0, (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / safe, 0.0)
        dp2 = ds * 0.5 / np.sqrt(np.abs(p2) + SQRT_SMOOTHING)
        do2, g2 = self.proj2.backward(dp2, c2)
        do2 = do2.reshape(len(dy), p1.shape[-1], e.e_node.shape[-1])
        dp1 = np.einsum("npk,nk->np", do2, e.e_node)
        d_node = np.einsum("npk,np->nk", do2, p1)
        do1, g1 = self.proj1.backward(dp1, c1)
        do1 = do1.reshape(len(dy), e.e_vis.shape[-1], e.e_ocr.shape[-1])
        d_vis = np.einsum("nmk,nk->nm", do1, e.e_ocr)
        d_ocr = np.einsum("nmk,nm->nk", do1, e.e_vis)
        grads = prefixed(g1, "proj1")
        grads.update(prefixed(g2, "proj2"))
        return EncodedFeatures(d_vis, d_ocr, d_node), grads
