"""Gaussian-emission hidden Markov models over 2D fixation sequences.

All recursions run in log space; exact zeros in the initial vector or the
transition matrix become -inf and are never floored here.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .errors import ModelError, ValidationError
from .gaze_io import ModelRecord, validate_model

LOG_2PI = math.log(2.0 * math.pi)
COV_FLOOR = 1e-6


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _lse(a, axis=-1):
    """log-sum-exp along one axis; all -inf slices give -inf."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", under="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _ro(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianHmm:
    """Validated HMM with exactly stochastic ``prior`` and ``transition`` rows.

    ``means`` is (K, d), ``covs`` is (K, d, d).
    """
    prior: np.ndarray
    transition: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    label: str | None = None
    roi_names: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pi = np.array(self.prior, dtype=float).ravel()
        A = np.array(self.transition, dtype=float)
        mu = np.array(self.means, dtype=float)
        cov = np.array(self.covs, dtype=float)
        K = pi.size
        if mu.ndim == 1:
            mu = mu.reshape(K, -1)
        d = mu.shape[-1] if mu.ndim == 2 else -1
        if A.shape != (K, K) or mu.shape != (K, d) or cov.shape != (K, d, d) or K == 0:
            raise ModelError(f"inconsistent shapes: prior {pi.shape}, transition {A.shape}, "
                             f"means {mu.shape}, covs {cov.shape}")
        rec = ModelRecord(K, d, pi, A, mu, cov)
        violations = validate_model(rec)
        if violations:
            raise ModelError("invalid model: " + "; ".join(map(str, violations)))
        pi = pi / pi.sum()
        A = A / A.sum(axis=1, keepdims=True)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        min_eig = np.linalg.eigvalsh(cov).min(axis=1)
        # slack absorbs eigh rounding on matrices floored at exactly COV_FLOOR
        if np.any(min_eig < COV_FLOOR * (1 - 1e-6)):
            k = int(np.argmin(min_eig))
            raise ModelError(f"covariance {k} has eigenvalue {min_eig[k]:.3g} < {COV_FLOOR:g}")
        object.__setattr__(self, "prior", _ro(pi))
        object.__setattr__(self, "transition", _ro(A))
        object.__setattr__(self, "means", _ro(mu))
        object.__setattr__(self, "covs", _ro(cov))
        if self.roi_names is not None:
            object.__setattr__(self, "roi_names", tuple(self.roi_names))

    @property
    def n_states(self) -> int:
        return self.prior.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_record(cls, rec: ModelRecord) -> "GaussianHmm":
        return cls(rec.prior, rec.transition, rec.means, rec.covs,
                   label=rec.label, roi_names=rec.roi_names, meta=dict(rec.meta))

    def to_record(self) -> ModelRecord:
        return ModelRecord(self.n_states, self.dim, self.prior, self.transition, self.means,
                           self.covs, label=self.label, roi_names=self.roi_names,
                           meta=dict(self.meta))

    def permuted(self, perm) -> "GaussianHmm":
        """Relabel states so that new state i is old state perm[i]."""
        perm = np.asarray(perm, dtype=int)
        names = None if self.roi_names is None else tuple(self.roi_names[i] for i in perm)
        return replace(self, prior=self.prior[perm], transition=self.transition[np.ix_(perm, perm)],
                       means=self.means[perm], covs=self.covs[perm], roi_names=names)

    def with_meta(self, **kw) -> "GaussianHmm":
        return replace(self, meta={**self.meta, **kw})


def as_model(m) -> GaussianHmm:
    return m if isinstance(m, GaussianHmm) else GaussianHmm.from_record(m)


# ---------------------------------------------------------------------------
# emissions


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ModelError("covariance is singular or not positive definite") from None


def gaussian_logpdf(point, mean, cov) -> float:
    """Log density of a multivariate normal at one point."""
    y = np.asarray(point, dtype=float) - np.asarray(mean, dtype=float)
    L = _chol(np.asarray(cov, dtype=float))
    z = np.linalg.solve(L, y)
    d = y.size
    return float(-0.5 * d * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * z @ z)


def emission_logprob(model: GaussianHmm, X) -> np.ndarray:
    """log N(x_t; mu_k, Sigma_k) for every row of X, shape (..., K)."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != model.dim:
        raise ModelError(f"observations have dimension {X.shape[-1]}, model has {model.dim}")
    L = np.linalg.cholesky(model.covs)
    half_logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    diff = X[..., None, :] - model.means  # (..., K, d)
    z = np.linalg.solve(L, diff[..., None])[..., 0]
    return -0.5 * model.dim * LOG_2PI - half_logdet - 0.5 * np.sum(z * z, axis=-1)


def _as_seq(seq, dim=2) -> np.ndarray:
    X = np.asarray(seq, dtype=float)
    if X.ndim == 1 and X.size == dim:
        X = X.reshape(1, dim)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ModelError("observation sequence must be a non-empty (T, d) array")
    if X.shape[1] != dim:
        raise ModelError(f"observations have dimension {X.shape[1]}, model has {dim}")
    if not np.all(np.isfinite(X)):
        raise ModelError("observation sequence contains non-finite values")
    return X


# ---------------------------------------------------------------------------
# inference


def _forward(log_pi, log_A, logB):
    """logB: (S, T, K). Returns log alpha (S, T, K)."""
    S, T, K = logB.shape
    la = np.empty_like(logB)
    la[:, 0] = log_pi + logB[:, 0]
    for t in range(1, T):
        la[:, t] = _lse(la[:, t - 1, :, None] + log_A, axis=1) + logB[:, t]
    return la


def _backward(log_A, logB):
    S, T, K = logB.shape
    lb = np.zeros_like(logB)
    for t in range(T - 2, -1, -1):
        lb[:, t] = _lse(log_A + (logB[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
    return lb


def log_likelihood(model, seq) -> float:
    """Exact log p(seq | model) by the forward recursion."""
    model = as_model(model)
    X = _as_seq(seq, model.dim)
    logB = emission_logprob(model, X)[None]
    la = _forward(_log(model.prior), _log(model.transition), logB)
    return float(_lse(la[0, -1], axis=0))


def viterbi(model, seq) -> tuple[np.ndarray, float]:
    """Most probable state path and its joint log probability.

    Ties go to the lower state index at the final step and at every
    backpointer.
    """
    model = as_model(model)
    X = _as_seq(seq, model.dim)
    logB = emission_logprob(model, X)
    log_A = _log(model.transition)
    T, K = logB.shape
    delta = _log(model.prior) + logB[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        scores = delta[:, None] + log_A
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(K)] + logB[t]
    last = int(np.argmax(delta))
    score = float(delta[last])
    if not np.isfinite(score):
        raise ModelError("no admissible path")
    path = np.empty(T, dtype=int)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


class Posteriors(NamedTuple):
    gamma: np.ndarray   # (T, K)
    xi: np.ndarray      # (T-1, K, K)
    loglik: float


def _posteriors_batch(log_pi, log_A, logB):
    la = _forward(log_pi, log_A, logB)
    lb = _backward(log_A, logB)
    ll = _lse(la[:, -1], axis=1)  # (S,)
    if not np.all(np.isfinite(ll)):
        raise ModelError("sequence has zero probability under the model")
    with np.errstate(under="ignore"):
        gamma = np.exp(la + lb - ll[:, None, None])
        gamma /= gamma.sum(axis=2, keepdims=True)
        lx = (la[:, :-1, :, None] + log_A + (logB[:, 1:] + lb[:, 1:])[:, :, None, :]
              - ll[:, None, None, None])
        xi = np.exp(lx)
        xi /= xi.sum(axis=(2, 3), keepdims=True)
    return gamma, xi, ll


def posteriors(model, seq) -> Posteriors:
    """Forward-backward state and pairwise posteriors."""
    model = as_model(model)
    X = _as_seq(seq, model.dim)
    logB = emission_logprob(model, X)[None]
    gamma, xi, ll = _posteriors_batch(_log(model.prior), _log(model.transition), logB)
    return Posteriors(gamma[0], xi[0], float(ll[0]))


def _batches(seqs):
    """Group sequence indices by length so forward-backward can vectorize."""
    groups: dict[int, list[int]] = {}
    for i, X in enumerate(seqs):
        groups.setdefault(len(X), []).append(i)
    return [(idx, np.stack([seqs[i] for i in idx])) for _, idx in sorted(groups.items())]


def sequence_loglik(model, seqs) -> np.ndarray:
    """log p(seq | model) for many sequences at once."""
    model = as_model(model)
    seqs = [_as_seq(s, model.dim) for s in seqs]
    out = np.empty(len(seqs))
    log_pi, log_A = _log(model.prior), _log(model.transition)
    for idx, X in _batches(seqs):
        la = _forward(log_pi, log_A, emission_logprob(model, X))
        out[idx] = _lse(la[:, -1], axis=1)
    return out


# ---------------------------------------------------------------------------
# MAP training


@dataclass(frozen=True)
class TrainConfig:
    n_states: int = 3
    dirichlet_alpha: float = 0.01
    prior_cov_std: float = 14.0
    prior_cov_strength: float = 1.0
    max_iters: int = 200
    tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if not self.prior_cov_std > 0:
            raise ValueError("prior_cov_std must be > 0")
        if self.prior_cov_strength < 0:
            raise ValueError("prior_cov_strength must be >= 0")
        if self.max_iters < 1 or self.n_restarts < 1:
            raise ValueError("max_iters and n_restarts must be >= 1")


def _log_dirichlet_kernel(p, alpha):
    """log Dir(p; alpha + 1): the prior whose mode is (count + alpha)/(total + K alpha)."""
    K = p.shape[-1]
    a = alpha + 1.0
    with np.errstate(divide="ignore"):
        return gammaln(K * a) - K * gammaln(a) + alpha * np.sum(np.log(p), axis=-1)


def log_prior(model: GaussianHmm, config: TrainConfig) -> float:
    """Log prior density used by the MAP objective.

    Dirichlet terms on the initial vector and each transition row, plus an
    inverse-Wishart-style covariance kernel
    -nu0/2 log|S| - nu0 s0^2 / 2 tr(S^-1) (unnormalized).
    """
    a = config.dirichlet_alpha
    total = _log_dirichlet_kernel(model.prior, a) + np.sum(_log_dirichlet_kernel(model.transition, a))
    nu = config.prior_cov_strength
    if nu > 0:
        s2 = config.prior_cov_std ** 2
        _, logdet = np.linalg.slogdet(model.covs)
        tr_inv = np.trace(np.linalg.inv(model.covs), axis1=1, axis2=2)
        total += np.sum(-0.5 * nu * logdet - 0.5 * nu * s2 * tr_inv)
    return float(total)


def map_objective(model, sequences, config: TrainConfig) -> float:
    model = as_model(model)
    return float(np.sum(sequence_loglik(model, sequences)) + log_prior(model, config))


def _e_step(model, batches, n_seq):
    log_pi, log_A = _log(model.prior), _log(model.transition)
    K = model.n_states
    first = np.zeros(K)
    trans = np.zeros((K, K))
    X_all, G_all = [], []
    ll = 0.0
    for _, X in batches:
        gamma, xi, lls = _posteriors_batch(log_pi, log_A, emission_logprob(model, X))
        first += gamma[:, 0].sum(axis=0)
        trans += xi.sum(axis=(0, 1))
        X_all.append(X.reshape(-1, X.shape[-1]))
        G_all.append(gamma.reshape(-1, K))
        ll += float(lls.sum())
    return first, trans, np.concatenate(X_all), np.concatenate(G_all), ll


def _floor_cov(cov):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, COV_FLOOR)
    return (V * w) @ V.T


def _m_step(model, stats, n_seq, config: TrainConfig) -> GaussianHmm:
    first, trans, X, G, _ = stats
    K = model.n_states
    d = X.shape[1]
    a = config.dirichlet_alpha
    nu = config.prior_cov_strength
    s2 = config.prior_cov_std ** 2
    pi = (first + a) / (n_seq + K * a)
    A = (trans + a) / (trans.sum(axis=1, keepdims=True) + K * a)
    Nk = G.sum(axis=0)
    means = model.means.copy()
    covs = model.covs.copy()
    for k in range(K):
        if Nk[k] <= 1e-300:
            if nu > 0:
                covs[k] = _floor_cov(s2 * np.eye(d))
            continue
        mu = G[:, k] @ X / Nk[k]
        diff = X - mu
        scatter = (G[:, k, None] * diff).T @ diff
        means[k] = mu
        covs[k] = _floor_cov((scatter + nu * s2 * np.eye(d)) / (Nk[k] + nu))
    return GaussianHmm(pi, A, means, covs)


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
        else:
            centers.append(X[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _initial_model(X, config: TrainConfig, rng) -> GaussianHmm:
    K = config.n_states
    d = X.shape[1]
    nu = config.prior_cov_strength
    s2 = config.prior_cov_std ** 2
    centers = _kmeanspp(X, K, rng)
    nearest = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    covs = np.empty((K, d, d))
    for k in range(K):
        pts = X[nearest == k]
        if len(pts) + nu <= 0 or (nu == 0 and len(pts) < 2):
            covs[k] = s2 * np.eye(d)
            continue
        diff = pts - centers[k]
        covs[k] = _floor_cov((diff.T @ diff + nu * s2 * np.eye(d)) / (len(pts) + nu))
    A = np.full((K, K), 0.2 / (K - 1)) if K > 1 else np.ones((1, 1))
    if K > 1:
        np.fill_diagonal(A, 0.8)
    return GaussianHmm(np.full(K, 1.0 / K), A, centers, covs)


def _run_em(model, batches, n_seq, config):
    trace = []
    stats = None
    for _ in range(config.max_iters):
        stats = _e_step(model, batches, n_seq)
        obj = stats[4] + log_prior(model, config)
        if trace and abs(obj - trace[-1]) <= config.tol * abs(trace[-1]):
            trace.append(obj)
            break
        trace.append(obj)
        model = _m_step(model, stats, n_seq, config)
    else:
        # the last M-step produced a model whose objective is not yet traced
        stats = _e_step(model, batches, n_seq)
        trace.append(stats[4] + log_prior(model, config))
    occupancy = stats[3].sum(axis=0)
    return model, trace, occupancy


def fit_map(sequences, config: TrainConfig = TrainConfig()) -> tuple[GaussianHmm, list[float]]:
    """MAP Baum-Welch over several observation sequences.

    Runs ``n_restarts`` seeded EM restarts and returns the model with the
    highest final objective together with that restart's objective trace.
    States are reordered by descending expected occupancy.
    """
    seqs = [_as_seq(s, np.asarray(s).shape[-1]) for s in sequences]
    if not seqs:
        raise ValidationError("no training sequences")
    dims = {X.shape[1] for X in seqs}
    if len(dims) != 1:
        raise ValidationError(f"sequences have mixed dimensions {sorted(dims)}")
    X_all = np.concatenate(seqs)
    if len(X_all) < config.n_states:
        raise ValidationError(f"{len(X_all)} observations cannot support {config.n_states} states")
    batches = _batches(seqs)
    best = None
    for r, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_restarts)):
        rng = np.random.default_rng(child)
        init = _initial_model(X_all, config, rng)
        model, trace, occ = _run_em(init, batches, len(seqs), config)
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, occ, r)
    model, trace, occ, r = best
    order = np.argsort(-occ, kind="stable")
    model = model.permuted(order).with_meta(
        objective=trace[-1], n_iter=len(trace), best_restart=r, seed=config.seed)
    return model, trace


# ---------------------------------------------------------------------------
# sampling


def sample(model, T: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sample of length T: (observations (T, d), hidden path (T,))."""
    model = as_model(model)
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    cum_pi = np.cumsum(model.prior).tolist()
    cum_A = [np.cumsum(row).tolist() for row in model.transition]
    K = model.n_states
    u = rng.random(T).tolist()
    path = np.empty(T, dtype=int)
    s = min(bisect.bisect_right(cum_pi, u[0] * cum_pi[-1]), K - 1)
    path[0] = s
    for t in range(1, T):
        row = cum_A[s]
        s = min(bisect.bisect_right(row, u[t] * row[-1]), K - 1)
        path[t] = s
    L = np.linalg.cholesky(model.covs)
    z = rng.standard_normal((T, model.dim))
    obs = model.means[path] + np.einsum("tij,tj->ti", L[path], z)
    return obs, path


def stationary_distribution(model) -> np.ndarray:
    model = as_model(model)
    w, V = np.linalg.eig(model.transition.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    return v / v.sum()
