"""Tractable two-component 1-D Gaussian-mixture EM testbed.

Soft EM here is exactly computable, which makes it the place to check the
free-energy bookkeeping numerically: the bound matches the log-likelihood
right after an exact E-step, and the likelihood never decreases across
iterations. Hard (thresholded plug-in) E-steps are run through the same
machinery so the gap between the two can be measured rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class MixtureParams:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=np.float64))
        if self.weights.shape != (2,) or self.means.shape != (2,) or self.stds.shape != (2,):
            raise ValueError("mixture is restricted to exactly two components")
        if abs(self.weights.sum() - 1.0) > 1e-12 or (self.weights < 0).any():
            raise ValueError("weights must be nonnegative and sum to 1")
        if (self.stds < STD_FLOOR).any():
            raise ValueError(f"stds must be >= {STD_FLOOR}")


@dataclass
class EMIteration:
    log_likelihood: float
    free_energy: float
    params: MixtureParams
    assignments: np.ndarray
    flags: list[str] = field(default_factory=list)
    classification_log_likelihood: float | None = None


@dataclass
class EMTrace:
    mode: str
    iterations: list[EMIteration]
    final_params: MixtureParams

    def log_likelihoods(self):
        return np.array([it.log_likelihood for it in self.iterations])

    def free_energies(self):
        return np.array([it.free_energy for it in self.iterations])


def _log_joint(data, params: MixtureParams):
    """log( w_k * N(x_i; mu_k, sigma_k) ) as an (N, 2) array."""
    x = np.asarray(data, dtype=np.float64)[:, None]
    return np.log(params.weights)[None, :] + norm.logpdf(x, params.means[None, :], params.stds[None, :])


def log_likelihood(data, params: MixtureParams) -> float:
    return float(logsumexp(_log_joint(data, params), axis=1).sum())


def e_step_soft(data, params: MixtureParams):
    """Exact posterior responsibilities; rows sum to 1."""
    if len(np.asarray(data)) < 2:
        raise ValueError("need at least 2 data points")
    log_joint = _log_joint(data, params)
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


def e_step_hard(data, params: MixtureParams, threshold=0.5):
    """Plug-in labels: 1 where the responsibility of component 1 strictly
    exceeds ``threshold`` (0.5 reproduces the argmax rule)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (e_step_soft(data, params)[:, 1] > threshold).astype(np.int64)


def _as_soft(assignments):
    q = np.asarray(assignments, dtype=np.float64)
    if q.ndim == 1:  # hard labels -> one-hot
        onehot = np.zeros((q.shape[0], 2))
        onehot[np.arange(q.shape[0]), q.astype(np.int64)] = 1.0
        return onehot
    return q


def m_step(data, assignments, prev_params: MixtureParams | None = None):
    """Weighted maximum-likelihood update; accepts soft or hard assignments.

    Returns (params, flags). A component with zero assignment mass keeps its
    previous parameters (flagged); a collapsing component hits the std floor
    (flagged) instead of the likelihood singularity.
    """
    x = np.asarray(data, dtype=np.float64)
    q = _as_soft(assignments)
    flags = []
    mass = q.sum(axis=0)
    weights = np.empty(2)
    means = np.empty(2)
    stds = np.empty(2)
    for k in range(2):
        if mass[k] <= 0.0:
            if prev_params is None:
                raise ValueError(f"component {k} has zero mass and no previous parameters to keep")
            flags.append(f"component {k}: empty, previous parameters kept")
            weights[k] = prev_params.weights[k]
            means[k] = prev_params.means[k]
            stds[k] = prev_params.stds[k]
            continue
        weights[k] = mass[k] / len(x)
        means[k] = (q[:, k] * x).sum() / mass[k]
        variance = (q[:, k] * (x - means[k]) ** 2).sum() / mass[k]
        stds[k] = np.sqrt(variance)
        if stds[k] < STD_FLOOR:
            flags.append(f"component {k}: std floored at {STD_FLOOR}")
            stds[k] = STD_FLOOR
    weights = weights / weights.sum()
    return MixtureParams(weights, means, stds), flags


def free_energy(data, params: MixtureParams, assignments) -> float:
    """sum_i sum_k q_ik (log w_k + log N(x_i) - log q_ik), with 0*log(0) = 0."""
    q = _as_soft(assignments)
    log_joint = _log_joint(data, params)
    entropy_term = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return float((q * log_joint - entropy_term).sum())


def classification_log_likelihood(data, params: MixtureParams, labels) -> float:
    """Hard-assignment objective: sum_i log( w_{z_i} N(x_i; mu_{z_i}, sigma_{z_i}) )."""
    z = np.asarray(labels, dtype=np.int64)
    return float(_log_joint(data, params)[np.arange(len(z)), z].sum())


def run_em(data, init: MixtureParams, mode="soft", threshold=0.5, iters=30) -> EMTrace:
    """Alternate E and M steps, recording likelihood and free energy per iteration.

    Each trace entry holds the parameters entering the iteration, the exact
    log-likelihood under them, and the free energy evaluated with that
    iteration's assignments (soft responsibilities or thresholded labels). In
    hard mode the classification objective is tracked alongside; marginal
    likelihood monotonicity is only guaranteed for exact soft E-steps.
    """
    if mode not in ("soft", "hard"):
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    params = init
    iterations = []
    for _ in range(iters):
        if mode == "soft":
            assignments = e_step_soft(data, params)
            cls_ll = None
        else:
            assignments = e_step_hard(data, params, threshold)
            cls_ll = classification_log_likelihood(data, params, assignments)
        entry = EMIteration(
            log_likelihood=log_likelihood(data, params),
            free_energy=free_energy(data, params, assignments),
            params=params,
            assignments=assignments,
            classification_log_likelihood=cls_ll,
        )
        params, flags = m_step(data, assignments, prev_params=params)
        entry.flags = flags
        iterations.append(entry)
    return EMTrace(mode=mode, iterations=iterations, final_params=params)


def sample_mixture(n, params: MixtureParams, seed=0):
    """Draw a synthetic dataset from the mixture (for demos and tests)."""
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < params.weights[1]
    return np.where(
        labels,
        rng.normal(params.means[1], params.stds[1], size=n),
        rng.normal(params.means[0], params.stds[0], size=n),
    )


def trace_rows(trace: EMTrace):
    """Delimited-output rows for the demo CSV."""
    rows = []
    for i, it in enumerate(trace.iterations):
        rows.append({
            "iter": i,
            "log_likelihood": it.log_likelihood,
            "free_energy": it.free_energy,
            "classification_log_likelihood": (
                "" if it.classification_log_likelihood is None else it.classification_log_likelihood
            ),
            "weight_0": it.params.weights[0],
            "weight_1": it.params.weights[1],
            "mean_0": it.params.means[0],
            "mean_1": it.params.means[1],
            "std_0": it.params.stds[0],
            "std_1": it.params.stds[1],
            "flags": ";".join(it.flags),
        })
    return rows
