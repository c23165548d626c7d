"""Gradients, partial Fisher blocks, update rules and the training loop.

Every parameter block (lambda, one logistic head, one factor row) has a
quadratic log-posterior once the Polya-Gamma means are frozen.  For each
block three matrices appear:

* the *precision* of that quadratic, weighted by the PG means (``omega_hat``,
  ``nu_hat``), which is also its negative Hessian;
* the *partial Fisher information*, the same outer-product form weighted by
  the logistic variances ``sigma * (1 - sigma)``;
* the prior precision on the diagonal of both.

The natural backend preconditions with the Fisher block.  The EM backend
does exact coordinate-wise maximization of the frozen quadratic, so it uses
the precision.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .pgmath import kappa as _kappa
from .pgmath import label_weight, logistic_weight, pg_mean
from .state import (
    LabelSet,
    MissingHeadError,
    ModelState,
    PriorState,
    TrainConfig,
    init_state,
    iterations_per_epoch,
    n_iterations,
    update_delta_tau,
    update_mu2,
    update_rho2,
)
from .tensor import MiniBatch, SparseBinaryTensor, sample_minibatch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Numerical failure during training; ``iteration`` locates it."""

    def __init__(self, msg, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            msg = f"iteration {iteration}: {msg}"
        super().__init__(msg)


def learning_rate(t, cfg):
    if t < 1:
        raise ValueError("iteration counter starts at 1")
    return 1.0 / (cfg.tau_p + t) ** cfg.theta


# -- lambda ---------------------------------------------------------------------


def batch_rows(batch: MiniBatch, state: ModelState):
    """Gathered factor rows ``G`` (B, K, R), products ``A`` and leave-one-out products ``P``."""
    G = np.stack([state.factors[k][batch.index[:, k]] for k in range(batch.index.shape[1])], axis=1)
    A, P = _kernels.row_products(G)
    return G, A, P


def _batch_stats(batch, state, kappa_mode):
    _, A, P = batch_rows(batch, state)
    phi = A @ state.lam
    return A, P, phi, pg_mean(phi), _kappa(phi, batch.y, kappa_mode)


def grad_lambda(batch: MiniBatch, state: ModelState, prior: PriorState, kappa_mode="observed"):
    if not len(batch):
        raise ValueError("empty batch")
    A, _, _, omega, kap = _batch_stats(batch, state, kappa_mode)
    return A.T @ kap - (A.T @ (omega[:, None] * A)) @ state.lam - state.lam / prior.tau


def precision_lambda(batch, state, prior):
    A, _, _, omega, _ = _batch_stats(batch, state, "observed")
    return A.T @ (omega[:, None] * A) + np.diag(1.0 / prior.tau)


def fisher_lambda(batch, state, prior):
    if not len(batch):
        return np.diag(1.0 / prior.tau)
    _, A, _ = batch_rows(batch, state)
    N = logistic_weight(A @ state.lam)
    return A.T @ (N[:, None] * A) + np.diag(1.0 / prior.tau)


def objective_lambda(lam, batch, state, prior, omega, kappa_mode="observed"):
    """Frozen-``omega`` log-posterior of lambda (up to a constant)."""
    _, A, _ = batch_rows(batch, state)
    phi = A @ lam
    kap = _kappa(A @ state.lam, batch.y, kappa_mode)
    return float(np.sum(kap * phi - 0.5 * omega * phi * phi) - 0.5 * np.sum(lam * lam / prior.tau))


def marginal_grad_lambda(batch, state, prior):
    """Gradient of the Bernoulli-logistic log-posterior, with no augmentation."""
    _, A, _ = batch_rows(batch, state)
    phi = A @ state.lam
    return A.T @ (batch.y - 1.0 / (1.0 + np.exp(-phi))) - state.lam / prior.tau


# -- logistic heads ---------------------------------------------------------------


def _head_design(mode, labels, state):
    if mode not in state.betas:
        raise MissingHeadError(f"mode {mode} has no logistic head")
    ids = labels.ids(mode)
    U = np.hstack([np.ones((len(ids), 1)), state.factors[mode][ids]])
    return U, labels.z(mode)


def grad_beta(mode, labels: LabelSet, state, prior, kappa_mode="observed"):
    U, z = _head_design(mode, labels, state)
    beta = state.betas[mode]
    psi = U @ beta
    nu = pg_mean(psi)
    ez = label_weight(psi, z, kappa_mode)
    return U.T @ (0.5 * ez) - (U.T @ (nu[:, None] * U)) @ beta - beta / prior.rho2[mode]


def precision_beta(mode, labels, state, prior):
    U, _ = _head_design(mode, labels, state)
    nu = pg_mean(U @ state.betas[mode])
    return U.T @ (nu[:, None] * U) + np.diag(1.0 / prior.rho2[mode])


def fisher_beta(mode, labels, state, prior):
    U, _ = _head_design(mode, labels, state)
    N = logistic_weight(U @ state.betas[mode])
    return U.T @ (N[:, None] * U) + np.diag(1.0 / prior.rho2[mode])


def objective_beta(beta, mode, labels, state, prior, nu, kappa_mode="observed"):
    U, z = _head_design(mode, labels, state)
    psi = U @ beta
    ez = label_weight(U @ state.betas[mode], z, kappa_mode)
    return float(np.sum(0.5 * ez * psi - 0.5 * nu * psi * psi) - 0.5 * np.sum(beta * beta / prior.rho2[mode]))


# -- factor rows ------------------------------------------------------------------


def _label_of(labels, mode, entity):
    if labels is None or mode not in labels.by_mode:
        return None
    ids = labels.ids(mode)
    pos = np.searchsorted(ids, entity)
    if pos < len(ids) and ids[pos] == entity:
        return labels.z(mode)[pos]
    return None


def _row_design(mode, entity, batch, state):
    sel = batch.index[:, mode] == entity
    sub = MiniBatch(batch.index[sel], batch.y[sel], batch.iteration)
    if not len(sub):
        return np.zeros((0, state.R)), sub
    _, _, P = batch_rows(sub, state)
    return state.lam * P[:, mode], sub


def grad_u(mode, entity, batch, state, prior, labels=None, kappa_mode="observed"):
    """Gradient of the frozen log-posterior of one factor row.

    With ``labels`` given for ``mode`` the row also enters the logistic head
    as a covariate.  Passing labels for a mode that has no head raises.
    """
    if labels is not None and mode not in state.betas:
        raise MissingHeadError(f"mode {mode} has no logistic head")
    u = state.factors[mode][entity]
    C, sub = _row_design(mode, entity, batch, state)
    phi = C @ u
    omega = pg_mean(phi)
    kap = _kappa(phi, sub.y, kappa_mode)
    g = C.T @ kap - (C.T @ (omega[:, None] * C)) @ u - u / prior.mu2[mode][entity]
    z = _label_of(labels, mode, entity)
    if z is not None:
        beta = state.betas[mode]
        psi = beta[0] + beta[1:] @ u
        g = g + 0.5 * label_weight(psi, z, kappa_mode) * beta[1:] - pg_mean(psi) * psi * beta[1:]
    return g


def fisher_u(mode, entity, batch, state, prior, labels=None):
    if labels is not None and mode not in state.betas:
        raise MissingHeadError(f"mode {mode} has no logistic head")
    u = state.factors[mode][entity]
    C, _ = _row_design(mode, entity, batch, state)
    N = logistic_weight(C @ u)
    F = C.T @ (N[:, None] * C) + np.diag(1.0 / prior.mu2[mode][entity])
    z = _label_of(labels, mode, entity)
    if z is not None:
        beta = state.betas[mode]
        F = F + logistic_weight(beta[0] + beta[1:] @ u) * np.outer(beta[1:], beta[1:])
    return F


def objective_u(u, mode, entity, batch, state, prior, omega, labels=None, nu=None,
                kappa_mode="observed"):
    """Frozen log-posterior of one factor row, without the non-negativity multipliers."""
    u0 = state.factors[mode][entity]
    C, sub = _row_design(mode, entity, batch, state)
    phi = C @ u
    kap = _kappa(C @ u0, sub.y, kappa_mode)
    val = np.sum(kap * phi - 0.5 * omega * phi * phi) - 0.5 * np.sum(u * u / prior.mu2[mode][entity])
    z = _label_of(labels, mode, entity)
    if z is not None:
        beta = state.betas[mode]
        psi0 = beta[0] + beta[1:] @ u0
        psi = beta[0] + beta[1:] @ u
        val += 0.5 * label_weight(psi0, z, kappa_mode) * (beta[1:] @ u) - 0.5 * nu * psi * psi
    return float(val)


# -- update rules -----------------------------------------------------------------


def natural_step(param, grad, fisher, gamma):
    """``param + gamma * fisher^{-1} grad`` via a Cholesky solve.  Batched over a leading axis."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    fisher = np.asarray(fisher, dtype=np.float64)
    single = param.ndim == 1
    if single:
        grad, fisher = grad[None], fisher[None]
    step = _kernels.spd_solve(fisher, grad)
    return param + gamma * (step[0] if single else step)


def sgd_step(param, grad, gamma):
    return np.asarray(param, dtype=np.float64) + gamma * np.asarray(grad, dtype=np.float64)


def em_step(param, grad, precision, gamma):
    """Coordinate-wise exact maximization of the frozen quadratic, blended by ``gamma``.

    ``precision`` is the quadratic's negative Hessian.  Coordinates are
    visited in ascending order with the gradient refreshed after each move.
    """
    param = np.asarray(param, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    single = param.ndim == 1
    x, g, H = (param[None], np.asarray(grad, dtype=np.float64)[None], precision[None]) if single \
        else (param, np.asarray(grad, dtype=np.float64), precision)
    assert np.all(np.diagonal(H, axis1=1, axis2=2) > 0)
    out = _kernels.em_sweep(np.ascontiguousarray(x), np.ascontiguousarray(g),
                            np.ascontiguousarray(H), float(gamma))
    return out[0] if single else out


def project_nonnegative(u):
    return np.maximum(u, 0.0)


def _apply(backend, param, grad, fisher, precision, gamma, n_terms=1):
    if backend == "natural":
        return natural_step(param, grad, fisher, gamma)
    if backend == "sgd":
        # mean over contributing data terms; the raw sum diverges at these step sizes
        n = np.maximum(np.asarray(n_terms, dtype=np.float64), 1.0)
        return sgd_step(param, grad / (n[..., None] if n.ndim else n), gamma)
    return em_step(param, grad, precision, gamma)


# -- training ---------------------------------------------------------------------


@dataclass
class StepRecord:
    iteration: int
    gamma: float
    grad_norms: dict
    lam: np.ndarray
    n_shrunk: int
    metrics: dict = field(default_factory=dict)


def shrunk_count(lam, threshold):
    a = np.abs(lam)
    top = a.max()
    if top == 0:
        return len(lam)
    return int(np.sum(a < threshold * top))


class _HeadCache:
    """Per-mode label lookup: sorted labeled ids and their labels."""

    def __init__(self, labels: LabelSet, K):
        self.ids = {}
        self.z = {}
        for k in range(K):
            if k in labels.by_mode:
                self.ids[k] = labels.ids(k)
                self.z[k] = labels.z(k)

    def lookup(self, mode, entities):
        ids = self.ids[mode]
        pos = np.minimum(np.searchsorted(ids, entities), len(ids) - 1)
        hit = ids[pos] == entities
        return hit, self.z[mode][pos]


def _update_head(k, labels, state, prior, cfg, gamma, backend, fisher_monitor):
    U, z = _head_design(k, labels, state)
    beta = state.betas[k]
    psi = U @ beta
    nu = pg_mean(psi)
    prior_prec = 1.0 / prior.rho2[k]
    g = U.T @ (0.5 * label_weight(psi, z, cfg.kappa_mode)) - (U.T @ (nu[:, None] * U)) @ beta - beta * prior_prec
    F = U.T @ (logistic_weight(psi)[:, None] * U) + np.diag(prior_prec)
    H = U.T @ (nu[:, None] * U) + np.diag(prior_prec) if backend == "em" else None
    if fisher_monitor is not None:
        fisher_monitor("beta", F[None], np.array([prior_prec.min()]))
    state.betas[k] = _apply(backend, beta, g, F, H, gamma, len(z))
    prior.rho2[k] = update_rho2(beta, cfg)
    return float(np.linalg.norm(g))


def _update_mode(k, batch, state, prior, cfg, heads, gamma, fisher_monitor):
    backend = cfg.backend
    _, A, P = batch_rows(batch, state)
    phi = A @ state.lam
    omega = pg_mean(phi)
    N = logistic_weight(phi)
    kap = _kappa(phi, batch.y, cfg.kappa_mode)
    C = state.lam * P[:, k]
    ent, inv = np.unique(batch.index[:, k], return_inverse=True)
    lin, prec, fish = _kernels.accumulate(np.ascontiguousarray(C), inv.astype(np.int64), len(ent),
                                          kap, omega, N)
    u = state.factors[k][ent]
    mu2 = prior.mu2[k][ent]
    prior_prec = 1.0 / mu2
    g = lin - np.einsum("jrs,js->jr", prec, u) - u * prior_prec
    diag = np.arange(state.R)
    fish[:, diag, diag] += prior_prec
    prec[:, diag, diag] += prior_prec
    if k in heads.ids:
        hit, z = heads.lookup(k, ent)
        if hit.any():
            beta = state.betas[k]
            bh = beta[1:]
            psi = beta[0] + u[hit] @ bh
            nu = pg_mean(psi)
            g[hit] += np.outer(0.5 * label_weight(psi, z[hit], cfg.kappa_mode) - nu * psi, bh)
            outer = np.outer(bh, bh)
            fish[hit] += logistic_weight(psi)[:, None, None] * outer
            prec[hit] += nu[:, None, None] * outer
    if fisher_monitor is not None:
        fisher_monitor(f"u{k}", fish, prior_prec.min(axis=1))
    new = _apply(backend, u, g, fish, prec, gamma, np.bincount(inv, minlength=len(ent)))
    if k not in heads.ids:
        new = project_nonnegative(new)
    state.factors[k][ent] = new
    prior.mu2[k][ent] = update_mu2(u, k in heads.ids, cfg)
    return float(np.linalg.norm(g))


def _update_lambda(batch, state, prior, cfg, gamma, fisher_monitor):
    _, A, _ = batch_rows(batch, state)
    phi = A @ state.lam
    omega = pg_mean(phi)
    prior_prec = 1.0 / prior.tau
    g = A.T @ _kappa(phi, batch.y, cfg.kappa_mode) - (A.T @ (omega[:, None] * A)) @ state.lam - state.lam * prior_prec
    F = A.T @ (logistic_weight(phi)[:, None] * A) + np.diag(prior_prec)
    H = A.T @ (omega[:, None] * A) + np.diag(prior_prec) if cfg.backend == "em" else None
    if fisher_monitor is not None:
        fisher_monitor("lambda", F[None], np.array([prior_prec.min()]))
    state.lam = _apply(cfg.backend, state.lam, g, F, H, gamma, len(batch))
    return float(np.linalg.norm(g))


def train_iteration(t, tensor, labels, state, prior, cfg, rng, heads=None, fisher_monitor=None):
    """One pass of the update sequence: heads, factor rows, lambda, then MGP variances."""
    if heads is None:
        heads = _HeadCache(labels, tensor.K)
    gamma = learning_rate(t, cfg)
    batch = sample_minibatch(tensor, cfg.batch_size, cfg.neg_ratio, rng, iteration=t)
    norms = {}
    for k in range(tensor.K):
        if k in state.betas:
            norms[f"beta{k}"] = _update_head(k, labels, state, prior, cfg, gamma, cfg.backend, fisher_monitor)
        norms[f"u{k}"] = _update_mode(k, batch, state, prior, cfg, heads, gamma, fisher_monitor)
    norms["lambda"] = _update_lambda(batch, state, prior, cfg, gamma, fisher_monitor)
    prior.delta, prior.tau = update_delta_tau(state.lam, prior.delta)
    return gamma, norms


def train(tensor: SparseBinaryTensor, labels: LabelSet | None, cfg: TrainConfig, rng=None,
          on_epoch=None, fisher_monitor=None, state=None, prior=None):
    """Run stochastic inference and return ``(state, prior, records)``.

    ``on_epoch(epoch, state)`` may return a dict of metrics; it is merged
    into the record of the last iteration of that epoch.  ``fisher_monitor``
    receives ``(block_name, stacked_fisher, min_prior_precision)`` for
    every Fisher block built.
    """
    cfg.validate()
    labels = labels if labels is not None else LabelSet()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if state is None:
        state, prior = init_state(tensor.shape, labels, cfg, rng)
    heads = _HeadCache(labels, tensor.K)
    total = n_iterations(tensor.nnz, cfg)
    per_epoch = iterations_per_epoch(tensor.nnz, cfg)
    records = []
    for t in range(1, total + 1):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                gamma, norms = train_iteration(t, tensor, labels, state, prior, cfg, rng, heads, fisher_monitor)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise TrainingError(f"{type(exc).__name__}: {exc}", iteration=t) from exc
        if not (np.all(np.isfinite(state.lam)) and all(np.all(np.isfinite(u)) for u in state.factors)):
            raise TrainingError("non-finite parameters", iteration=t)
        rec = StepRecord(t, gamma, norms, state.lam.copy(), shrunk_count(state.lam, cfg.shrink_threshold))
        if on_epoch is not None and t % per_epoch == 0:
            rec.metrics.update(on_epoch(t // per_epoch, state) or {})
        records.append(rec)
    return state, prior, records


def write_curves(records, path):
    """StepRecord stream as CSV, one row per iteration."""
    if not records:
        open(path, "w").close()
        return
    norm_keys = list(records[0].grad_norms)
    metric_keys = sorted({key for r in records for key in r.metrics})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "gamma", *[f"gnorm_{k}" for k in norm_keys], "n_shrunk", *metric_keys])
        for r in records:
            w.writerow([r.iteration, repr(r.gamma), *[repr(r.grad_norms[k]) for k in norm_keys],
                        r.n_shrunk, *[repr(r.metrics[k]) if k in r.metrics else "" for k in metric_keys]])
