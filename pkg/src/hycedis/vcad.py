"""Document-level anomaly detector.

Image descriptors are embedded by a dense network trained with a triplet loss
so that documents of one layout category cluster together. A VAE is then fit
to the embeddings of inlier (training) documents; the L1 reconstruction error
of a new document, min-max scaled by the range seen on the training inliers
and clamped, is its anomaly score.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, StateError
from .nn_core import MLP, Adam, Dense, Module, gaussian_kl, gaussian_kl_grad, prefixed, triplet_loss_grad

log = logging.getLogger(__name__)


@dataclass
class VcadConfig:
    emb_dim: int = 16
    embed_hidden: int = 32
    latent_dim: int = 4
    vae_hidden: int = 64
    margin: float = 0.2
    embed_epochs: int = 200
    vae_epochs: int = 200
    batch_size: int = 32
    lr: float = 3e-3
    n_samples: int = 1


class Embedder(MLP):
    def __init__(self, img_dim: int, hidden: int, emb_dim: int, rng=None):
        super().__init__([img_dim, hidden, emb_dim], ["relu", "identity"], rng)


def embed_image(embedder: MLP, feature: np.ndarray) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != embedder.in_dim:
        raise DimensionError(f"embedder expects {embedder.in_dim} features, got {feature.shape[-1]}")
    return embedder(feature)


def train_embedder(
    embedder: MLP,
    features: np.ndarray,
    categories: np.ndarray,
    margin: float = 0.2,
    epochs: int = 200,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> list[float]:
    """Fit ``embedder`` in place with uniformly mined triplets; returns mean loss per epoch."""
    features = np.asarray(features, dtype=np.float64)
    categories = np.asarray(categories)
    groups = {c: np.flatnonzero(categories == c) for c in np.unique(categories)}
    if len(groups) < 2:
        raise DataError("triplet training needs at least 2 categories")
    for c, idx in groups.items():
        if len(idx) < 2:
            raise DataError(f"category {c} has fewer than 2 samples")
    rng = np.random.default_rng(seed)
    opt = Adam(embedder.named_parameters(), lr=lr)
    n = len(features)
    history = []
    for _ in range(epochs):
        anchors = rng.permutation(n)
        pos = np.empty(n, dtype=np.int64)
        neg = np.empty(n, dtype=np.int64)
        for j, a in enumerate(anchors):
            same = groups[categories[a]]
            p = same[rng.integers(len(same) - 1)]
            pos[j] = p if p != a else same[-1]
            while True:
                m = rng.integers(n)
                if categories[m] != categories[a]:
                    break
            neg[j] = m
        total = 0.0
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            idx = np.concatenate([anchors[sl], pos[sl], neg[sl]])
            emb, cache = embedder.forward(features[idx])
            k = len(emb) // 3
            loss, ga, gp, gn = triplet_loss_grad(emb[:k], emb[k:2 * k], emb[2 * k:], margin)
            total += loss.sum()
            if not np.any(loss > 0):
                continue
            _, grads = embedder.backward(np.concatenate([ga, gp, gn]) / k, cache)
            opt.step(grads)
        history.append(total / n)
    return history


class VAE(Module):
    def __init__(self, in_dim: int, hidden: int, latent: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if latent >= in_dim:
            raise DimensionError("latent dimension must be smaller than the embedding dimension")
        self.in_dim, self.latent = in_dim, latent
        self.enc = Dense(in_dim, hidden, "relu", rng=rng)
        self.mu = Dense(hidden, latent, rng=rng)
        self.log_var = Dense(hidden, latent, rng=rng)
        self.dec = MLP([latent, hidden, in_dim], ["relu", "identity"], rng)
        self.children.update(enc=self.enc, mu=self.mu, log_var=self.log_var, dec=self.dec)

    def encode(self, x):
        h = self.enc(x)
        return self.mu(h), self.log_var(h)

    def reconstruct(self, x):
        """Deterministic reconstruction through the latent mean."""
        mu, _ = self.encode(x)
        return self.dec(mu)

    def loss(self, x: np.ndarray, noise: np.ndarray):
        """Mean (total, kl, recon) over the batch plus gradients for every parameter.

        ``noise`` has shape (L, N, latent): L reparameterized samples per input.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        noise = np.asarray(noise, dtype=np.float64).reshape(-1, *x.shape[:-1], self.latent)
        n, n_samples = len(x), len(noise)
        h, ch = self.enc.forward(x)
        mu, cmu = self.mu.forward(h)
        lv, clv = self.log_var.forward(h)
        kl = gaussian_kl(mu, lv)
        std = np.exp(0.5 * lv)
        dmu_acc = np.zeros_like(mu)
        dlv_acc = np.zeros_like(lv)
        grads: dict[str, np.ndarray] = {}
        recon = np.zeros(n)
        for eps in noise:
            z = mu + std * eps
            xr, cdec = self.dec.forward(z)
            diff = xr - x
            recon += np.abs(diff).sum(axis=-1) / n_samples
            dz, gdec = self.dec.backward(np.sign(diff) / (n * n_samples), cdec)
            for k, v in prefixed(gdec, "dec").items():
                grads[k] = grads.get(k, 0.0) + v
            dmu_acc += dz
            dlv_acc += dz * eps * 0.5 * std
        gmu, glv = gaussian_kl_grad(mu, lv)
        dmu_acc += gmu / n
        dlv_acc += glv / n
        dh_mu, g_mu = self.mu.backward(dmu_acc, cmu)
        dh_lv, g_lv = self.log_var.backward(dlv_acc, clv)
        _, g_enc = self.enc.backward(dh_mu + dh_lv, ch)
        grads.update(prefixed(g_mu, "mu"))
        grads.update(prefixed(g_lv, "log_var"))
        grads.update(prefixed(g_enc, "enc"))
        kl_m, recon_m = float(kl.mean()), float(recon.mean())
        return (kl_m + recon_m, kl_m, recon_m), grads


def vae_loss(model: VAE, x: np.ndarray, noise: np.ndarray) -> tuple[float, float, float]:
    return model.loss(x, noise)[0]


def reconstruction_loss(model: VAE, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.abs(model.reconstruct(x) - x).sum(axis=-1)


class VcadModel(Module):
    """Embedder + VAE + fitted score range."""

    def __init__(self, img_dim: int, config: VcadConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or VcadConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        self.img_dim = img_dim
        self.embedder = Embedder(img_dim, c.embed_hidden, c.emb_dim, rng)
        self.vae = VAE(c.emb_dim, c.vae_hidden, c.latent_dim, rng)
        self.children.update(embedder=self.embedder, vae=self.vae)
        # input standardization and score range are fitted, not trained
        self.params["feature_mean"] = np.zeros(img_dim)
        self.params["feature_std"] = np.ones(img_dim)
        self.params["score_range"] = np.array([np.nan, np.nan])

    @property
    def fitted(self) -> bool:
        lo, hi = self.params["score_range"]
        return bool(np.isfinite(lo) and np.isfinite(hi))

    @property
    def score_min(self) -> float:
        return float(self.params["score_range"][0])

    @property
    def score_max(self) -> float:
        return float(self.params["score_range"][1])

    def _standardize(self, features):
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if f.shape[-1] != self.img_dim:
            raise DimensionError(f"expected {self.img_dim} image features, got {f.shape[-1]}")
        return (f - self.params["feature_mean"]) / self.params["feature_std"]

    def embed(self, features) -> np.ndarray:
        return self.embedder(self._standardize(features))

    def reconstruction_loss(self, features) -> np.ndarray:
        return reconstruction_loss(self.vae, self.embed(features))

    def fit(self, features: np.ndarray, categories: np.ndarray, seed: int = 0) -> dict:
        """Train embedder then VAE on inlier documents; returns a training log."""
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        self.params["feature_mean"][:] = features.mean(axis=0)
        self.params["feature_std"][:] = np.where(std > 1e-12, std, 1.0)
        c = self.config
        emb_hist = train_embedder(self.embedder, self._standardize(features), categories,
                                  c.margin, c.embed_epochs, seed, c.batch_size, c.lr)
        vae_hist = train_vae(self, self.embed(features), c.vae_epochs, seed + 1)
        return {"embedder_loss": emb_hist, "vae_loss": vae_hist,
                "score_min": self.score_min, "score_max": self.score_max}

    def score(self, features) -> np.ndarray:
        """Anomaly scores in [0, 1]."""
        if not self.fitted:
            raise StateError("VCAD model has not been trained")
        loss = self.reconstruction_loss(features)
        span = self.score_max - self.score_min
        return np.clip((loss - self.score_min) / span, 0.0, 1.0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def train_vae(model: VcadModel, embeddings: np.ndarray, epochs: int = 200, seed: int = 0) -> list[float]:
    """Fit the VAE by minimizing KL + L1 reconstruction, then fit the score range."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) < 10:
        raise DataError("VAE training needs at least 10 inliers")
    vae, c = model.vae, model.config
    rng = np.random.default_rng(seed)
    opt = Adam(vae.named_parameters(), lr=c.lr)
    n = len(embeddings)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, c.batch_size):
            idx = order[start:start + c.batch_size]
            noise = rng.normal(size=(c.n_samples, len(idx), vae.latent))
            (loss, _, _), grads = vae.loss(embeddings[idx], noise)
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / n)
    losses = reconstruction_loss(vae, embeddings)
    lo, hi = float(losses.min()), float(losses.max())
    if not hi > lo:
        hi = lo + 1e-12
    model.params["score_range"][:] = (lo, hi)
    return history


def anomaly_score(model: VcadModel, feature: np.ndarray) -> float:
    return float(model.score(feature)[0])
