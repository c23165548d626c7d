"""Latent-variable containers, priors and the closed-form hyperparameter updates."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class MissingHeadError(KeyError):
    pass


BACKENDS = ("natural", "sgd", "em")
KAPPA_MODES = ("observed", "expected")


@dataclass
class TrainConfig:
    rank: int = 8
    a_c: float = 1.0
    b1: float = 0.6
    b2: float = 9.0
    tau_p: float = 256.0
    theta: float = 0.61
    batch_size: int = 512
    neg_ratio: float = 0.5
    epochs: int = 6
    iterations: int | None = None  # overrides epochs when set
    backend: str = "natural"
    kappa_mode: str = "observed"
    init_scale: float = 1.0
    init_loc: float = 1.0
    shrink_threshold: float = 1e-2
    seed: int = 0

    def validate(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigError(f"rank must be a positive integer, got {self.rank}")
        if not 0.5 < self.theta <= 1.0:
            raise ConfigError(f"theta must lie in (0.5, 1], got {self.theta}")
        for name in ("a_c", "b1", "b2", "init_scale", "shrink_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tau_p < 0:
            raise ConfigError(f"tau_p must be non-negative, got {self.tau_p}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.neg_ratio <= 1.0:
            raise ConfigError(f"neg_ratio must lie in [0, 1], got {self.neg_ratio}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.kappa_mode not in KAPPA_MODES:
            raise ConfigError(f"kappa_mode must be one of {KAPPA_MODES}, got {self.kappa_mode!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class LabelSet:
    """Partial +/-1 labels, per mode: ``{mode: (entity_ids, z)}``."""

    by_mode: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from ``(mode, entity, z)`` triples."""
        tmp = {}
        for mode, ent, z in pairs:
            z = int(z)
            if z not in (1, -1):
                raise ValueError(f"label must be +1 or -1, got {z}")
            tmp.setdefault(int(mode), {})[int(ent)] = z
        by_mode = {}
        for mode in sorted(tmp):
            ids = np.array(sorted(tmp[mode]), dtype=np.int64)
            by_mode[mode] = (ids, np.array([tmp[mode][i] for i in ids], dtype=np.float64))
        return cls(by_mode)

    @property
    def modes(self):
        return sorted(self.by_mode)

    def ids(self, mode):
        return self.by_mode[mode][0]

    def z(self, mode):
        return self.by_mode[mode][1]

    def count(self, mode):
        return len(self.by_mode[mode][0]) if mode in self.by_mode else 0

    def as_dict(self, mode):
        ids, z = self.by_mode.get(mode, ((), ()))
        return {int(i): int(v) for i, v in zip(ids, z)}

    def check(self, shape):
        for mode, (ids, _) in self.by_mode.items():
            if not 0 <= mode < len(shape):
                raise ValueError(f"label mode {mode} outside tensor with {len(shape)} modes")
            if len(ids) and (ids.min() < 0 or ids.max() >= shape[mode]):
                raise ValueError(f"label entity out of range for mode {mode} of size {shape[mode]}")
            if len(ids) >= shape[mode]:
                raise ValueError(f"mode {mode}: every entity labeled, expected a strict subset")

    def triples(self):
        for mode in self.modes:
            ids, z = self.by_mode[mode]
            for i, v in zip(ids, z):
                yield mode, int(i), int(v)

    def __bool__(self):
        return bool(self.by_mode)


def load_labels(path) -> LabelSet:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            if len(toks) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 'mode entity label'")
            pairs.append(tuple(int(t) for t in toks))
    return LabelSet.from_pairs(pairs)


def save_labels(labels: LabelSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        for mode, ent, z in labels.triples():
            fh.write(f"{mode} {ent} {z:+d}\n")


@dataclass
class ModelState:
    lam: np.ndarray
    factors: list
    betas: dict  # mode -> (R+1,), bias first

    @property
    def R(self):
        return len(self.lam)

    def copy(self):
        return ModelState(self.lam.copy(), [u.copy() for u in self.factors],
                          {k: b.copy() for k, b in self.betas.items()})


@dataclass
class PriorState:
    delta: np.ndarray
    tau: np.ndarray
    rho2: dict  # mode -> (R+1,)
    mu2: list  # per mode (n_k, R)

    def copy(self):
        return PriorState(self.delta.copy(), self.tau.copy(),
                          {k: r.copy() for k, r in self.rho2.items()},
                          [m.copy() for m in self.mu2])


def mgp_schedule(R):
    """Inverse-gamma shapes ``a_r = 1 + (r - 1) / R``."""
    if R < 1:
        raise ValueError("R must be >= 1")
    return 1.0 + np.arange(R) / R


def variance_floor(b, cfg):
    return 2.0 * b / (2.0 * cfg.a_c + 3.0)


def init_state(shape, labels: LabelSet, cfg: TrainConfig, rng):
    """Random initial latent variables and priors at their floor values.

    Factors of unlabeled modes are drawn as ``|N(loc, s^2)|`` so that they start
    feasible for the non-negativity constraint.
    """
    cfg.validate()
    labels.check(shape)
    R = cfg.rank
    s = cfg.init_scale
    lam = rng.normal(0.0, s, R)
    factors = []
    for k, n in enumerate(shape):
        u = rng.normal(cfg.init_loc, s, (n, R))
        if k not in labels.by_mode:
            u = np.abs(u)
        factors.append(u)
    betas = {k: rng.normal(0.0, s, R + 1) for k in labels.modes}
    a = mgp_schedule(R)
    # mode of Inv-Gamma(a, 1); the mean is infinite for a_1 = 1
    delta = 1.0 / (a + 1.0)
    prior = PriorState(
        delta=delta,
        tau=np.cumprod(delta),
        rho2={k: np.full(R + 1, variance_floor(cfg.b1, cfg)) for k in labels.modes},
        mu2=[np.full((n, R), variance_floor(cfg.b1 if k in labels.by_mode else cfg.b2, cfg))
             for k, n in enumerate(shape)],
    )
    return ModelState(lam, factors, betas), prior


def update_delta_tau(lam, delta, a=None):
    """One ascending in-place sweep of the MGP variance updates.

    Returns ``(delta, tau)`` as new arrays; ``tau`` is the running product of
    ``delta``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    delta = np.array(delta, dtype=np.float64)
    R = len(lam)
    if a is None:
        a = mgp_schedule(R)
    half_sq = 0.5 * lam * lam
    for r in range(R):
        # prod_{l<=h, l!=r} 1/delta_l for h >= r
        inv = 1.0 / delta
        inv[r] = 1.0
        prods = np.cumprod(inv)[r:]
        num = 1.0 + np.dot(half_sq[r:], prods)
        den = 0.5 * (R - r) + a[r] + 1.0
        delta[r] = num / den
        assert delta[r] > 0
    return delta, np.cumprod(delta)


def update_rho2(beta, cfg):
    beta = np.asarray(beta, dtype=np.float64)
    return (beta * beta + 2.0 * cfg.b1) / (2.0 * cfg.a_c + 3.0)


def update_mu2(u, labeled, cfg):
    u = np.asarray(u, dtype=np.float64)
    b = cfg.b1 if labeled else cfg.b2
    return (u * u + 2.0 * b) / (2.0 * cfg.a_c + 3.0)


def compute_phi(index, state: ModelState):
    """``(phi, A)`` for one index tuple; ``A[r]`` is the product of the entry's factor rows."""
    A = np.ones(state.R)
    for k, i in enumerate(index):
        A = A * state.factors[k][i]
    return float(state.lam @ A), A


def compute_psi(mode, entity, state: ModelState):
    if mode not in state.betas:
        raise MissingHeadError(f"mode {mode} has no logistic head")
    beta = state.betas[mode]
    return float(beta[0] + beta[1:] @ state.factors[mode][entity])


# -- checkpoints -----------------------------------------------------------------


def _rows(a):
    return np.asarray(a, dtype=np.float64).tolist()


def state_to_dict(state: ModelState, prior: PriorState, shape):
    return {
        "R": state.R,
        "shape": list(shape),
        "lambda": _rows(state.lam),
        "factors": [_rows(u) for u in state.factors],
        "betas": {str(k): _rows(b) for k, b in sorted(state.betas.items())},
        "prior": {
            "delta": _rows(prior.delta),
            "tau": _rows(prior.tau),
            "rho2": {str(k): _rows(r) for k, r in sorted(prior.rho2.items())},
            "mu2": [_rows(m) for m in prior.mu2],
        },
    }


def state_from_dict(d):
    R = int(d["R"])
    shape = tuple(d["shape"])
    state = ModelState(
        lam=np.array(d["lambda"], dtype=np.float64),
        factors=[np.array(u, dtype=np.float64).reshape(n, R) for u, n in zip(d["factors"], shape)],
        betas={int(k): np.array(b, dtype=np.float64) for k, b in d["betas"].items()},
    )
    p = d["prior"]
    prior = PriorState(
        delta=np.array(p["delta"], dtype=np.float64),
        tau=np.array(p["tau"], dtype=np.float64),
        rho2={int(k): np.array(r, dtype=np.float64) for k, r in p["rho2"].items()},
        mu2=[np.array(m, dtype=np.float64).reshape(n, R) for m, n in zip(p["mu2"], shape)],
    )
    return state, prior, shape


def save_checkpoint(path, state, prior, shape, extra=None):
    d = state_to_dict(state, prior, shape)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    return state_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def check_finite(state: ModelState):
    arrays = [state.lam, *state.factors, *state.betas.values()]
    return all(np.all(np.isfinite(a)) for a in arrays)


def n_iterations(nnz, cfg: TrainConfig):
    if cfg.iterations is not None:
        return int(cfg.iterations)
    return cfg.epochs * iterations_per_epoch(nnz, cfg)


def iterations_per_epoch(nnz, cfg: TrainConfig):
    return max(math.ceil(nnz * (1.0 + cfg.neg_ratio) / cfg.batch_size), 1)
