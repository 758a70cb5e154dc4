"""Data generators and ground-truth oracles: 2-D toy densities, the circle
inverse problem, the linear Gaussian-mixture inverse problem with its
analytic posterior, and the relaxed-uniform prior density."""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError

TOY_NAMES = ("eight_modes", "two_moons", "two_circles", "checkerboard")

# toy parameterizations (documented defaults; the literature fixes none)
EIGHT_MODES_RADIUS = 2.0
EIGHT_MODES_STD = 0.15
TWO_MOONS_NOISE = 0.1
TWO_CIRCLES_RADII = (1.0, 2.0)
TWO_CIRCLES_NOISE = 0.08
CHECKERBOARD_HALF_WIDTH = 2.0


def sample_toy(name, count, rng):
    """i.i.d. samples in R^2 from one of the named toy densities."""
    if count <= 0:
        raise ValueError("count must be positive")
    if name == "eight_modes":
        angles = 2.0 * math.pi * rng.integers(0, 8, size=count) / 8.0
        centers = EIGHT_MODES_RADIUS * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1)
        return centers + EIGHT_MODES_STD * rng.standard_normal((count, 2))
    if name == "two_moons":
        t = math.pi * rng.random(count)
        lower = rng.integers(0, 2, size=count).astype(bool)
        x = np.where(lower, 1.0 - np.cos(t), np.cos(t))
        y = np.where(lower, 0.5 - np.sin(t), np.sin(t))
        pts = np.stack([x - 0.5, y - 0.25], axis=1)
        return pts + TWO_MOONS_NOISE * rng.standard_normal((count, 2))
    if name == "two_circles":
        radius = np.where(rng.integers(0, 2, size=count).astype(bool),
                          TWO_CIRCLES_RADII[0], TWO_CIRCLES_RADII[1])
        r = radius + TWO_CIRCLES_NOISE * rng.standard_normal(count)
        theta = 2.0 * math.pi * rng.random(count)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if name == "checkerboard":
        w = CHECKERBOARD_HALF_WIDTH
        # 4x4 unit cells on [-2, 2]^2, (i+j) even cells active
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        idx = rng.integers(0, len(cells), size=count)
        corners = np.array(cells, dtype=float)[idx] - w
        return corners + rng.random((count, 2))
    raise ValueError(f"unknown toy density {name!r}; choose from {TOY_NAMES}")


@dataclass
class GaussianMixture:
    """Equal-dimension Gaussian mixture; weights sum to 1, covariances SPD."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        for c in self.covs:
            np.linalg.cholesky(c)  # raises if not SPD

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def mean(self):
        return self.weights @ self.means


def gmm_sample(mix, count, rng):
    """Categorical component choice, then a Gaussian draw; (count, n) rows."""
    comp = rng.choice(mix.n_components, size=count, p=mix.weights)
    chols = [np.linalg.cholesky(c) for c in mix.covs]
    eps = rng.standard_normal((count, mix.dim))
    out = np.empty((count, mix.dim))
    for k in range(mix.n_components):
        sel = comp == k
        out[sel] = mix.means[k] + eps[sel] @ chols[k].T
    return out


def gmm_logpdf(mix, x):
    """Log-density via log-sum-exp; x is one point or (count, n) rows."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = mix.dim
    parts = []
    for k in range(mix.n_components):
        chol = np.linalg.cholesky(mix.covs[k])
        diff = x - mix.means[k]
        sol = np.linalg.solve(chol, diff.T)
        quad = np.sum(sol ** 2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        logw = math.log(mix.weights[k]) if mix.weights[k] > 0 else -math.inf
        parts.append(logw - 0.5 * (n * math.log(2 * math.pi) + logdet + quad))
    stacked = np.stack(parts, axis=0)
    top = np.max(stacked, axis=0)
    out = top + np.log(np.sum(np.exp(stacked - top), axis=0))
    return out if out.size > 1 else float(out[0])


@dataclass
class InverseProblemSpec:
    """Forward operator, Gaussian noise law, and prior sampler/oracle for
    Y = F(X) + eta."""

    name: str
    dim_x: int
    dim_y: int
    forward: Callable[[np.ndarray], np.ndarray]
    noise_std: float
    prior_sample: Callable[[np.random.Generator, int], np.ndarray]
    prior: Optional[GaussianMixture] = None
    forward_matrix: Optional[np.ndarray] = None

    def sample_pairs(self, rng, count):
        """(count, d+n) rows laid out as (y..., x...) with y = F(x) + eta."""
        x = self.prior_sample(rng, count)
        y = self.forward(x) + self.noise_std * rng.standard_normal(
            (count, self.dim_y))
        return np.concatenate([y, x], axis=1)


def circle_problem():
    """Noisy unit circle prior, first-coordinate forward map, noise 0.02."""

    def prior_sample(rng, count):
        theta = 2.0 * math.pi * rng.random(count)
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return pts + 0.1 * rng.standard_normal((count, 2))

    return InverseProblemSpec(
        name="circle", dim_x=2, dim_y=1,
        forward=lambda x: np.atleast_2d(x)[:, :1],
        noise_std=0.02,
        prior_sample=prior_sample)


def mixture_problem(n=50, components=5, rng=None):
    """F(x) = Ax with A = 0.1 diag(1, 1/2, ..., 1/n); mixture prior with
    means ~ U[-1,1]^n, covariances 0.01^2 I, equal weights; noise 0.05."""
    if rng is None:
        raise ValueError("mixture_problem needs an rng to draw the means")
    a_diag = 0.1 / np.arange(1, n + 1)
    a = np.diag(a_diag)
    means = rng.uniform(-1.0, 1.0, size=(components, n))
    covs = np.broadcast_to(0.01 ** 2 * np.eye(n), (components, n, n)).copy()
    prior = GaussianMixture(np.full(components, 1.0 / components), means, covs)

    return InverseProblemSpec(
        name="mixture", dim_x=n, dim_y=n,
        forward=lambda x: np.atleast_2d(x) @ a.T,
        noise_std=0.05,
        prior_sample=lambda rng_, count: gmm_sample(prior, count, rng_),
        prior=prior,
        forward_matrix=a)


def mixture_posterior(problem, y):
    """Analytic posterior mixture for a linear-Gaussian forward model.

    Component updates: Sigma~ = (Sigma^-1 + A^T A / s^2)^-1,
    m~ = Sigma~ (Sigma^-1 m + A^T y / s^2),
    w~ proportional to w * N(y; A m, A Sigma A^T + s^2 I).
    """
    prior = problem.prior
    a = problem.forward_matrix
    if prior is None or a is None:
        raise ValueError("analytic posterior needs a mixture prior and a "
                         "linear forward matrix")
    y = np.asarray(y, dtype=float).reshape(-1)
    s2 = problem.noise_std ** 2
    n = prior.dim
    info = a.T @ a / s2
    new_means, new_covs, logws = [], [], []
    for k in range(prior.n_components):
        prec = np.linalg.inv(prior.covs[k]) + info
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"posterior covariance of component {k} is not SPD") from exc
        mean = cov @ (np.linalg.solve(prior.covs[k], prior.means[k])
                      + a.T @ y / s2)
        # marginal likelihood of y under component k
        marg_cov = a @ prior.covs[k] @ a.T + s2 * np.eye(problem.dim_y)
        chol = np.linalg.cholesky(marg_cov)
        diff = y - a @ prior.means[k]
        sol = np.linalg.solve(chol, diff)
        loglik = -0.5 * (problem.dim_y * math.log(2 * math.pi)
                         + 2.0 * np.sum(np.log(np.diag(chol)))
                         + float(sol @ sol))
        logws.append(math.log(prior.weights[k]) + loglik)
        new_means.append(mean)
        new_covs.append(cov)
    logws = np.asarray(logws)
    logws -= logws.max()
    w = np.exp(logws)
    w /= w.sum()
    return GaussianMixture(w, np.asarray(new_means), np.asarray(new_covs))


def relaxed_uniform_logpdf(x, alpha):
    """Product of relaxed-uniform densities on [-1, 1] with exponential
    tails: q = alpha/(2 alpha + 2) inside, decaying exp(-alpha * dist)
    outside; integrates to one by construction."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    log_level = math.log(alpha / (2.0 * alpha + 2.0))
    dist = np.maximum(np.abs(x) - 1.0, 0.0)
    return float(x.size * log_level - alpha * np.sum(dist))
