"""Stochastic gates over the influence matrix.

Influence is parameterized as ``A = Z * S`` with gates
``z = clamp(mu + eps, 0, 1)``, ``eps ~ N(0, sigma^2)``.  The expected number of
open gates, ``sum Phi(mu / sigma)``, is the sparsity penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import gaussian_cdf, gaussian_pdf

#: Name of the bit generator and normal transform used for every draw.
PRNG_NAME = "numpy.PCG64/ziggurat-normal"


def make_rng(seed) -> np.random.Generator:
    """``seed`` is an int or a sequence of ints (mixed by SeedSequence)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class GateParams:
    M: np.ndarray
    S: np.ndarray
    sigma: float = 0.5

    def __post_init__(self) -> None:
        if self.M.shape != self.S.shape:
            raise ValueError(f"gate means {self.M.shape} and magnitudes {self.S.shape} differ")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class GateSample:
    Z: np.ndarray
    eps: np.ndarray


def draw_noise(shape: tuple[int, int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma * rng.standard_normal(shape)


def sample_gates(params: GateParams, rng: np.random.Generator) -> GateSample:
    """One relaxed-Bernoulli draw for every (n, c) entry."""
    eps = draw_noise(params.M.shape, params.sigma, rng)
    return GateSample(Z=np.clip(params.M + eps, 0.0, 1.0), eps=eps)


def deterministic_gates(params: GateParams) -> np.ndarray:
    """Evaluation-time gate openness ``clamp(mu, 0, 1)``."""
    return np.clip(params.M, 0.0, 1.0)


def effective_influence(params: GateParams) -> np.ndarray:
    """Evaluation-time coefficients: gate openness times signed magnitude."""
    return deterministic_gates(params) * params.S


def gate_regularizer(params: GateParams) -> tuple[float, np.ndarray]:
    """Expected open-gate count and its gradient with respect to the means.

    The gradient with respect to ``S`` is identically zero and not returned.
    """
    if not params.sigma > 0:
        raise ValueError(f"sigma must be positive, got {params.sigma}")
    u = params.M / params.sigma
    return float(gaussian_cdf(u).sum()), gaussian_pdf(u) / params.sigma


def open_gate_count(params: GateParams) -> int:
    return int(np.count_nonzero(deterministic_gates(params) > 0.0))
