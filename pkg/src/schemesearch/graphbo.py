"""Weisfeiler-Lehman graph kernel, GP surrogate and expected improvement."""
from __future__ import annotations

import math
import threading
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .space import SchemeGraph, UnifiedScheme, to_graph


@dataclass(frozen=True)
class WLConfig:
    iterations: int = 2
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.weights is not None:
            if len(self.weights) != self.iterations + 1 or min(self.weights) <= 0:
                raise ValueError("need iterations+1 positive weights")

    @property
    def w(self) -> tuple[float, ...]:
        if self.weights is not None:
            return self.weights
        return (1.0 / (self.iterations + 1),) * (self.iterations + 1)


class LabelDictionary:
    """Compressed relabeling shared by every graph compared with it.

    A refined label is the integer assigned to ``(own label, sorted
    successor labels)`` at that iteration; assignment is first-come.
    """

    def __init__(self):
        self._maps: list[dict] = []
        self._lock = threading.Lock()

    def relabel(self, h: int, key: tuple) -> int:
        with self._lock:
            while len(self._maps) < h:
                self._maps.append({})
            m = self._maps[h - 1]
            if key not in m:
                m[key] = len(m)
            return m[key]


_SHARED = LabelDictionary()


def wl_features(g: SchemeGraph, H: int, labels: LabelDictionary | None = None) -> list[Counter]:
    """Label histograms for iterations 0..H."""
    labels = labels or _SHARED
    succ = g.successors()
    cur = list(g.labels)
    feats = [Counter(cur)]
    for h in range(1, H + 1):
        cur = [labels.relabel(h, (cur[v], tuple(sorted(cur[u] for u in succ[v]))))
               for v in range(len(cur))]
        feats.append(Counter(cur))
    return feats


def _dot(a: Counter, b: Counter) -> int:
    if len(a) > len(b):
        a, b = b, a
    return sum(c * b[k] for k, c in a.items() if k in b)


def kernel_from_features(fa: list[Counter], fb: list[Counter], cfg: WLConfig) -> float:
    return float(sum(w * _dot(a, b) for w, a, b in zip(cfg.w, fa, fb)))


def wl_kernel(g1: SchemeGraph, g2: SchemeGraph, cfg: WLConfig = WLConfig()) -> float:
    return kernel_from_features(wl_features(g1, cfg.iterations), wl_features(g2, cfg.iterations), cfg)


def gram(feats_a: Sequence, feats_b: Sequence, cfg: WLConfig) -> np.ndarray:
    return np.array([[kernel_from_features(a, b, cfg) for b in feats_b] for a in feats_a],
                    dtype=np.float64).reshape(len(feats_a), len(feats_b))


def _as_graph(x) -> SchemeGraph:
    return to_graph(x) if isinstance(x, UnifiedScheme) else x


def normal_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2))


@dataclass
class GPSurrogate:
    """Zero-mean GP on standardized rewards with a normalized WL kernel."""
    cfg: WLConfig = field(default_factory=WLConfig)
    noise: float = 1e-4
    graphs: list = field(default_factory=list)
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter: float = 0.0
    _feats: list = field(default_factory=list, repr=False)
    _self_k: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    _chol: tuple | None = field(default=None, repr=False)
    _alpha: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.graphs)

    def standardize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def _features(self, g):
        return wl_features(g, self.cfg.iterations)

    def normalized_cross(self, feats: list) -> tuple[np.ndarray, np.ndarray]:
        """(k_hat between observations and queries, k_hat(query, query))."""
        k = gram(self._feats, feats, self.cfg)
        kqq = np.array([kernel_from_features(f, f, self.cfg) for f in feats])
        denom = np.sqrt(np.outer(self._self_k, kqq))
        with np.errstate(invalid="ignore", divide="ignore"):
            khat = np.where(denom > 0, k / np.where(denom > 0, denom, 1), 0.0)
        return khat, np.where(kqq > 0, 1.0, 0.0)

    def predict(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in reward units."""
        graphs = [_as_graph(q) for q in queries]
        feats = [self._features(g) for g in graphs]
        if self.n == 0:
            return np.zeros(len(graphs)), np.ones(len(graphs))
        khat, prior = self.normalized_cross(feats)
        mu = khat.T @ self._alpha
        v = cho_solve(self._chol, khat)
        var = np.maximum(prior - np.einsum("ij,ij->j", khat, v), 0.0)
        return self.y_mean + self.y_std * mu, self.y_std * np.sqrt(var)

    def predict_std(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance on the standardized scale."""
        mu, sd = self.predict(queries)
        return (mu - self.y_mean) / self.y_std, (sd / self.y_std) ** 2


def gp_fit(observations, noise: float = 1e-4, cfg: WLConfig = WLConfig(),
           max_jitter: float = 1e-4) -> GPSurrogate:
    """Fit on ``(scheme or graph, reward)`` pairs; empty input gives the prior."""
    gp = GPSurrogate(cfg=cfg, noise=noise)
    obs = list(observations)
    if not obs:
        return gp
    gp.graphs = [_as_graph(g) for g, _ in obs]
    y = np.array([float(r) for _, r in obs])
    if not np.isfinite(y).all():
        raise ValueError("non-finite reward in observations")
    gp.y_mean = float(y.mean())
    gp.y_std = max(float(y.std()), 1e-6)
    gp.y = gp.standardize(y)
    gp._feats = [gp._features(g) for g in gp.graphs]
    k = gram(gp._feats, gp._feats, cfg)
    gp._self_k = np.diag(k).copy()
    d = np.sqrt(gp._self_k)
    khat = k / np.outer(d, d)
    eye = np.eye(len(y))
    jitter = 0.0
    while True:
        try:
            gp._chol = cho_factor(khat + (noise + jitter) * eye, lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0 else jitter * 10
            if jitter > max_jitter:
                raise np.linalg.LinAlgError(
                    "WL Gram matrix is not positive definite after jitter escalation") from None
    gp.jitter = jitter
    gp._alpha = cho_solve(gp._chol, gp.y)
    return gp


def expected_improvement(mu: float, sigma: float, best: float, xi: float = 0.01) -> float:
    """EI for maximization; reduces to max(0, mu - best - xi) when sigma == 0."""
    imp = mu - best - xi
    if sigma <= 0:
        return max(0.0, imp)
    z = imp / sigma
    return max(0.0, imp * normal_cdf(z) + sigma * normal_pdf(z))


@dataclass
class BatchSelection:
    selected: list[int]
    surrogate: dict[int, float]       # pool index -> surrogate reward
    ei: np.ndarray
    mu: np.ndarray
    prior_only: bool = False


def rank_by_ei(ei, mu, B: int) -> tuple[list[int], list[int]]:
    """Split pool indices into the top-B (sorted) and the rest."""
    order = sorted(range(len(ei)), key=lambda i: (-ei[i], -mu[i], i))
    return sorted(order[:B]), order[B:]


def select_batch(gp: GPSurrogate, pool: Sequence, B: int, best: float | None = None,
                 xi: float = 0.01, clamp: tuple[float, float] = (-1.0, 1.0)) -> BatchSelection:
    """Top-B pool members by EI (ties: higher mean, then pool index).

    The rest receive the posterior mean, clamped, as a surrogate reward.
    """
    K = len(pool)
    if not 0 < B <= K:
        raise ValueError(f"need 0 < B <= K, got B={B}, K={K}")
    if gp.n == 0:
        warnings.warn("empty GP: selecting the first B pool members", RuntimeWarning,
                      stacklevel=2)
        return BatchSelection(list(range(B)), {i: 0.0 for i in range(B, K)},
                              np.zeros(K), np.zeros(K), prior_only=True)
    mu, sd = gp.predict(pool)
    if best is None:
        best = float(gp.y_mean + gp.y_std * gp.y.max())
    ei = np.array([expected_improvement(m, s, best, xi) for m, s in zip(mu, sd)])
    chosen, rest = rank_by_ei(ei, mu, B)
    sur = {i: float(np.clip(mu[i], *clamp)) for i in sorted(rest)}
    return BatchSelection(chosen, sur, ei, mu)
