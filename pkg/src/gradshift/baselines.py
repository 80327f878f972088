"""Latent-space density and boundary baselines: KDE and Isolation Forest.

Both are fit on encoder latents of the training corpus and score test
latents; higher = more anomalous for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def scott_bandwidth(latents: np.ndarray) -> float:
    """Scott's factor N^(-1/(d+4)) times the geometric mean of per-dim stds."""
    n, d = latents.shape
    if n < 2:
        raise ValueError("bandwidth estimation needs >= 2 training rows")
    stds = latents.std(axis=0, ddof=1)
    stds = stds[stds > 0]
    if stds.size == 0:
        raise ValueError("all latent dimensions are constant; "
                         "pass an explicit bandwidth")
    geo = float(np.exp(np.log(stds).mean()))
    return float(n ** (-1.0 / (d + 4))) * geo


class KernelDensityModel:
    """Isotropic Gaussian KDE over training latents; score is -log density."""

    def __init__(self, latents, bandwidth: float | None = None):
        self.latents = np.asarray(latents, dtype=np.float64)
        if self.latents.ndim != 2:
            raise ValueError("latents must be (N, d)")
        self.n, self.d = self.latents.shape
        if bandwidth is None:
            bandwidth = scott_bandwidth(self.latents)
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth = float(bandwidth)

    def log_density(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        h = self.bandwidth
        # log[(1/N) sum_i N(z; z_i, h^2 I)] via logsumexp over training rows
        sq = ((z[:, None, :] - self.latents[None]) ** 2).sum(-1)
        expo = -0.5 * sq / (h * h)
        m = expo.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(expo - m).sum(axis=1))
        norm = math.log(self.n) + self.d * math.log(h) \
            + 0.5 * self.d * math.log(2 * math.pi)
        return lse - norm

    def score(self, z) -> float:
        return float(-self.log_density(z)[0])

    def score_many(self, latents, chunk: int = 512) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        out = np.empty(len(latents))
        for start in range(0, len(latents), chunk):
            out[start:start + chunk] = \
                -self.log_density(latents[start:start + chunk])
        return out


# ----------------------------------------------------------------------
# isolation forest
# ----------------------------------------------------------------------

def harmonic(n: int) -> float:
    return float(sum(1.0 / i for i in range(1, n + 1)))


def average_path_length(n: int) -> float:
    """c(n) = 2 H(n-1) - 2 (n-1)/n, the BST unsuccessful-search average."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def anomaly_score(mean_path: float, psi: int) -> float:
    return float(2.0 ** (-mean_path / average_path_length(psi)))


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    size: int = 0              # leaf only

    @property
    def is_leaf(self):
        return self.left is None


def _grow(x, rng, depth, limit) -> _TreeNode:
    n = len(x)
    if depth >= limit or n <= 1:
        return _TreeNode(size=n)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    usable = np.flatnonzero(hi > lo)   # constant features cannot split
    if usable.size == 0:
        return _TreeNode(size=n)
    feature = int(rng.choice(usable))
    threshold = float(rng.uniform(lo[feature], hi[feature]))
    mask = x[:, feature] < threshold
    if not mask.any() or mask.all():
        return _TreeNode(size=n)
    return _TreeNode(feature, threshold,
                     _grow(x[mask], rng, depth + 1, limit),
                     _grow(x[~mask], rng, depth + 1, limit))


class IsolationForest:
    """Random axis/threshold isolation trees with the standard 2^(-E[h]/c)
    anomaly score. Deterministic for a fixed seed."""

    def __init__(self, latents, n_trees: int = 100, subsample: int = 256,
                 seed: int = 0):
        latents = np.asarray(latents, dtype=np.float64)
        n = len(latents)
        self.psi = min(int(subsample), n)
        if self.psi < 2:
            raise ValueError("isolation forest needs subsample >= 2")
        self.n_trees = int(n_trees)
        self.height_limit = math.ceil(math.log2(self.psi))
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1F0)))
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.choice(n, size=self.psi, replace=False)
            self.trees.append(_grow(latents[idx], rng, 0, self.height_limit))

    def _path(self, tree: _TreeNode, z) -> float:
        depth = 0
        node = tree
        while not node.is_leaf:
            node = node.left if z[node.feature] < node.threshold else node.right
            depth += 1
        return depth + average_path_length(node.size)

    def score(self, z) -> float:
        z = np.asarray(z, dtype=np.float64)
        mean_path = sum(self._path(t, z) for t in self.trees) / self.n_trees
        return anomaly_score(mean_path, self.psi)

    def score_many(self, latents) -> np.ndarray:
        return np.array([self.score(z) for z in np.asarray(latents)])


# ----------------------------------------------------------------------
# encoder latents for baseline fitting/scoring
# ----------------------------------------------------------------------

def corpus_latents(encoder, corpus, n_past: int) -> np.ndarray:
    """z = encoder(full observed history) for every trajectory."""
    from .autodiff import Tape

    pts = np.stack([t.head(n_past).points for t in corpus])
    ctx = None
    if encoder.config.ctx_channels:
        ctx = np.stack([t.head(n_past).context for t in corpus])
    z, _ = encoder.encode(Tape(), pts, ctx)
    return z.value
