"""Variational hierarchical EM: cluster a population of Gaussian HMMs into a
few representative HMMs.

Each base model is summarized by ``virtual_count`` virtual sequences of
length ``virtual_len``; the expected log-likelihood of those sequences under
a reduced model is replaced by a variational lower bound computed with a
backward recursion over (base state, reduced state) pairs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import softmax

from .errors import ModelError, ValidationError
from .gaze_io import record_from_dict, record_to_dict
from .hmm import LOG_2PI, GaussianHmm, _floor_cov, _log, _lse, as_model

PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class VhemConfig:
    n_reduced: int = 1
    virtual_len: int = 19
    virtual_count: int = 40
    max_iters: int = 100
    tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_reduced", "virtual_len", "virtual_count", "max_iters", "n_restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")


@dataclass(frozen=True, eq=False)
class HmmMixture:
    models: list[GaussianHmm]
    weights: np.ndarray
    assignments: np.ndarray     # (n_base, n_reduced) responsibilities
    elbo: float
    trace: list[float] = field(default_factory=list)


def expected_gauss_loglik(mean_b, cov_b, mean_r, cov_r) -> float:
    """E over y ~ N(mean_b, cov_b) of log N(y; mean_r, cov_r)."""
    mean_b = np.asarray(mean_b, dtype=float)
    cov_b = np.asarray(cov_b, dtype=float)
    try:
        L = np.linalg.cholesky(np.asarray(cov_r, dtype=float))
    except np.linalg.LinAlgError:
        raise ModelError("reduced covariance is singular or not positive definite") from None
    d = mean_b.size
    diff = np.linalg.solve(L, mean_b - np.asarray(mean_r, dtype=float))
    Linv = np.linalg.solve(L, np.eye(d))
    tr = float(np.trace(Linv @ cov_b @ Linv.T))
    half_logdet = float(np.sum(np.log(np.diag(L))))
    return -0.5 * d * LOG_2PI - half_logdet - 0.5 * (tr + diff @ diff)


class _BaseStack(NamedTuple):
    prior: np.ndarray   # (I, Kb)
    trans: np.ndarray   # (I, Kb, Kb)
    means: np.ndarray   # (I, Kb, d)
    covs: np.ndarray    # (I, Kb, d, d)


def _stack(models) -> _BaseStack:
    return _BaseStack(np.stack([m.prior for m in models]),
                      np.stack([m.transition for m in models]),
                      np.stack([m.means for m in models]),
                      np.stack([m.covs for m in models]))


def _expected_ll_table(base: _BaseStack, red: GaussianHmm) -> np.ndarray:
    """ell[i, beta, rho] for every base state against every reduced state."""
    d = red.dim
    L = np.linalg.cholesky(red.covs)                       # (Kr, d, d)
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(d), L.shape))
    P = np.swapaxes(Linv, 1, 2) @ Linv                     # precision (Kr, d, d)
    half_logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    tr = np.einsum("rjk,nbkj->nbr", P, base.covs)
    diff = base.means[:, :, None, :] - red.means[None, None]  # (I, Kb, Kr, d)
    maha = np.einsum("ibrj,rjk,ibrk->ibr", diff, P, diff)
    return -0.5 * d * LOG_2PI - half_logdet - 0.5 * (tr + maha)


class _Bound(NamedTuple):
    E: np.ndarray        # (I,)
    phi1: np.ndarray     # (I, Kb, Kr)
    phi: np.ndarray      # (tau-1, I, Kb, Kr, Kr): [t, i, beta', rho, rho']
    ell: np.ndarray      # (I, Kb, Kr)


def _bound(base: _BaseStack, red: GaussianHmm, tau: int) -> _Bound:
    if base.means.shape[-1] != red.dim:
        raise ModelError(f"base dimension {base.means.shape[-1]} != reduced dimension {red.dim}")
    ell = _expected_ll_table(base, red)
    log_pi_r = _log(red.prior)
    log_A_r = _log(red.transition)
    I, Kb, Kr = ell.shape
    phi = np.empty((max(tau - 1, 0), I, Kb, Kr, Kr))
    L = ell.copy()                                          # L_tau
    for t in range(tau - 1, 0, -1):
        # L currently holds L_{t+1}
        scores = log_A_r[None, None] + L[:, :, None, :]     # (I, beta', rho, rho')
        phi[t - 1] = softmax(scores, axis=-1)
        M = _lse(scores, axis=-1)                           # (I, beta', rho)
        L = ell + np.einsum("ibc,icr->ibr", base.trans, M)
    init_scores = log_pi_r + L                              # (I, Kb, Kr)
    phi1 = softmax(init_scores, axis=-1)
    lse1 = _lse(init_scores, axis=-1)
    with np.errstate(invalid="ignore"):
        E = np.where(base.prior > 0, base.prior * lse1, 0.0).sum(axis=1)
    return _Bound(E, phi1, phi, ell)


def elbo_pair(base, reduced, tau: int):
    """Lower bound on E_base[log p(Y | reduced)] for length-tau sequences.

    Returns ``(E, phi1, phi)`` where phi1[beta, rho] is the initial
    assignment and phi[t-2, beta', rho, rho'] the transition assignment used
    at step t = 2..tau.
    """
    base, reduced = as_model(base), as_model(reduced)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    b = _bound(_stack([base]), reduced, tau)
    return float(b.E[0]), b.phi1[0], b.phi[:, 0]


class _Stats(NamedTuple):
    init: np.ndarray     # (I, Kr)
    trans: np.ndarray    # (I, Kr, Kr)
    occ: np.ndarray      # (I, Kb, Kr) summed over t


def _occupancy(base: _BaseStack, b: _Bound, tau: int) -> _Stats:
    nu = base.prior[:, :, None] * b.phi1                    # (I, Kb, Kr)
    init = nu.sum(axis=1)
    occ = nu.copy()
    trans = np.zeros(init.shape + init.shape[-1:])
    for t in range(tau - 1):
        q = np.einsum("ibr,ibc->icr", nu, base.trans)       # (I, beta', rho)
        trans += np.einsum("icr,icrs->irs", q, b.phi[t])
        nu = np.einsum("icr,icrs->ics", q, b.phi[t])
        occ += nu
    return _Stats(init, trans, occ)


def _renorm_floor(p, axis=-1):
    p = p / p.sum(axis=axis, keepdims=True)
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=axis, keepdims=True)


def _m_step(red: GaussianHmm, groups, stats_j, c_j) -> GaussianHmm:
    """Re-estimate one reduced model.

    ``stats_j[g]`` are the occupancy statistics of K-group g against this
    model and ``c_j`` the per-base weights z_ij * w_i.
    """
    Kr = red.n_states
    init = np.zeros(Kr)
    trans = np.zeros((Kr, Kr))
    wsum = np.zeros(Kr)
    msum = np.zeros((Kr, red.dim))
    for (idx, stack), st in zip(groups, stats_j):
        W = c_j[idx, None, None] * st.occ                  # (I, Kb, Kr)
        init += c_j[idx] @ st.init
        trans += np.einsum("i,irs->rs", c_j[idx], st.trans)
        wsum += W.sum(axis=(0, 1))
        msum += np.einsum("ibr,ibd->rd", W, stack.means)
    live = wsum > 1e-300
    means = red.means.copy()
    means[live] = msum[live] / wsum[live, None]
    scatter = np.zeros_like(red.covs)
    for (idx, stack), st in zip(groups, stats_j):
        W = c_j[idx, None, None] * st.occ
        diff = stack.means[:, :, None, :] - means[None, None]     # (I, Kb, Kr, d)
        spread = stack.covs[:, :, None] + diff[..., :, None] * diff[..., None, :]
        scatter += np.einsum("ibr,ibrjk->rjk", W, spread)
    covs = red.covs.copy()
    for r in np.nonzero(live)[0]:
        covs[r] = _floor_cov(scatter[r] / wsum[r])
    prior = _renorm_floor(init) if init.sum() > 0 else red.prior
    A = red.transition.copy()
    rows = trans.sum(axis=1) > 0
    A[rows] = _renorm_floor(trans[rows])
    return GaussianHmm(prior, A, means, covs, label=red.label, roi_names=red.roi_names)


def _group_by_k(models):
    groups: dict[int, list[int]] = {}
    for i, m in enumerate(models):
        groups.setdefault(m.n_states, []).append(i)
    return [(np.array(idx), _stack([models[i] for i in idx])) for _, idx in sorted(groups.items())]


def _all_bounds(groups, n_base, reduced, tau, with_stats=False):
    E = np.empty((n_base, len(reduced)))
    stats = [[None] * len(reduced) for _ in groups]
    for g, (idx, stack) in enumerate(groups):
        for j, red in enumerate(reduced):
            b = _bound(stack, red, tau)
            E[idx, j] = b.E
            if with_stats:
                stats[g][j] = _occupancy(stack, b, tau)
    return E, stats


def pairwise_bounds(models, tau: int) -> np.ndarray:
    """E[i, k]: bound of base i's virtual data under model k."""
    models = [as_model(m) for m in models]
    E, _ = _all_bounds(_group_by_k(models), len(models), models, tau)
    return E


def _farthest_first(E, k):
    diag = np.diag(E)
    D = 0.5 * ((diag[:, None] - E) + (diag[None, :] - E.T))
    chosen = [int(np.argmin(D.sum(axis=1)))]
    while len(chosen) < k:
        dmin = D[:, chosen].min(axis=1)
        dmin[chosen] = -np.inf
        chosen.append(int(np.argmax(dmin)))
    return chosen


def _objective(E, log_w, base_w, nv):
    scores = log_w[None, :] + nv * E
    return float(base_w @ _lse(scores, axis=1)), softmax(scores, axis=1)


def _canonical_order(models):
    keys = [tuple(np.round(np.concatenate([m.prior, m.transition.ravel(), m.means.ravel(),
                                           m.covs.ravel()]), 9)) for m in models]
    return sorted(range(len(models)), key=lambda i: (len(keys[i]), keys[i]))


def _run(models, groups, base_w, init, config):
    reduced = [m for m in init]
    n_base = len(models)
    Kr = len(reduced)
    log_w = np.full(Kr, -math.log(Kr))
    nv, tau = config.virtual_count, config.virtual_len
    trace = []
    for _ in range(config.max_iters):
        E, stats = _all_bounds(groups, n_base, reduced, tau, with_stats=True)
        obj, z = _objective(E, log_w, base_w, nv)
        done = bool(trace) and abs(obj - trace[-1]) <= config.tol * abs(trace[-1])
        trace.append(obj)
        if done:
            break
        c = z * base_w[:, None]
        wj = c.sum(axis=0)
        log_w = _log(wj / wj.sum())
        new = []
        for j, red in enumerate(reduced):
            if wj[j] <= 0:
                new.append(red)
            else:
                new.append(_m_step(red, groups, [st[j] for st in stats], c[:, j]))
        reduced = new
    else:
        E, stats = _all_bounds(groups, n_base, reduced, tau, with_stats=True)
        obj, z = _objective(E, log_w, base_w, nv)
        trace.append(obj)
    return reduced, np.exp(log_w), z, trace, stats


def reduce(base_models, base_weights=None, config: VhemConfig = VhemConfig()) -> HmmMixture:
    """Cluster ``base_models`` into ``config.n_reduced`` representative HMMs.

    Restart 0 is seeded by farthest-first traversal over the pairwise
    bounds; later restarts start from randomly chosen base models. The
    restart with the highest final bound wins.
    """
    models = [as_model(m) for m in base_models]
    n = len(models)
    if n == 0:
        raise ValidationError("no base models")
    if config.n_reduced > n:
        raise ValidationError(f"cannot reduce {n} models to {config.n_reduced} clusters")
    dims = {m.dim for m in models}
    if len(dims) != 1:
        raise ValidationError(f"base models have mixed dimensions {sorted(dims)}")
    w = np.ones(n) if base_weights is None else np.asarray(base_weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("base_weights must be n non-negative values with positive sum")
    w = w / w.sum()

    # work in a content-defined order so results do not depend on input order
    order = _canonical_order(models)
    models_c = [models[i] for i in order]
    w_c = w[order]
    groups = _group_by_k(models_c)
    Kr = config.n_reduced

    pair_E = None
    best = None
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    for r, child in enumerate(seeds):
        if r == 0:
            pair_E, _ = _all_bounds(groups, n, models_c, config.virtual_len)
            chosen = _farthest_first(pair_E, Kr)
        else:
            rng = np.random.default_rng(child)
            chosen = sorted(rng.choice(n, size=Kr, replace=False).tolist())
        init = [models_c[i] for i in chosen]
        result = _run(models_c, groups, w_c, init, config)
        if best is None or result[3][-1] > best[3][-1]:
            best = result
    reduced, weights, z, trace, stats = best

    out_models = []
    for j, red in enumerate(reduced):
        occ = np.zeros(red.n_states)
        for g, (idx, _) in enumerate(groups):
            occ += np.einsum("i,ibr->r", z[idx, j] * w_c[idx], stats[g][j].occ)
        red = red.permuted(np.argsort(-occ, kind="stable"))
        out_models.append(red.with_meta(source="vhem", cluster=j, seed=config.seed))

    assignments = np.empty_like(z)
    assignments[order] = z
    return HmmMixture(out_models, weights, assignments, float(trace[-1]), trace)


def hard_assignments(mixture: HmmMixture) -> np.ndarray:
    """Cluster index per base model; ties go to the lower index."""
    return np.argmax(np.asarray(mixture.assignments), axis=1)


def mixture_to_json(mixture: HmmMixture, base_names=None, meta: dict | None = None) -> str:
    obj = {
        "models": [record_to_dict(m.to_record()) for m in mixture.models],
        "weights": [float(f"{w:.10g}") for w in mixture.weights],
        "assignments": [[float(f"{v:.10g}") for v in row] for row in mixture.assignments],
        "elbo": float(f"{mixture.elbo:.10g}"),
        "trace": [float(f"{v:.10g}") for v in mixture.trace],
    }
    if base_names is not None:
        obj["base_models"] = list(base_names)
    if meta:
        obj["meta"] = meta
    return json.dumps(obj, indent=2) + "\n"


def mixture_from_json(text) -> HmmMixture:
    obj = json.loads(text)
    models = [GaussianHmm.from_record(record_from_dict(m)) for m in obj["models"]]
    return HmmMixture(models, np.array(obj["weights"], dtype=float),
                      np.array(obj["assignments"], dtype=float), float(obj["elbo"]),
                      list(obj.get("trace", [])))
