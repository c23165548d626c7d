"""Entity scores and ranking metrics on held-out labels."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .state import LabelSet, MissingHeadError, ModelState

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredEntities:
    mode: int
    scores: np.ndarray  # score of entity n at position n

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def ranking(self, ids=None):
        """Entity ids by descending score, ties broken by ascending id."""
        ids = np.arange(len(self.scores)) if ids is None else np.asarray(ids)
        order = np.lexsort((ids, -self.scores[ids]))
        return ids[order]


def score_supervised(state: ModelState, mode) -> ScoredEntities:
    """Logistic-head probability ``sigma(beta_0 + beta_hat . u)`` per entity."""
    if mode not in state.betas:
        raise MissingHeadError(f"mode {mode} was not trained with labels")
    beta = state.betas[mode]
    return ScoredEntities(mode, expit(beta[0] + state.factors[mode] @ beta[1:]))


def score_unsupervised(state: ModelState, mode) -> ScoredEntities:
    """Largest single-component contribution an entity can make to ``phi``.

    Each factor column of every mode is rescaled to unit max-abs and the scale
    is folded into ``|lambda_r|``, so the score does not depend on how a
    component's magnitude is split between ``lambda`` and the factors.
    """
    R = state.R
    weight = np.abs(state.lam).copy()
    for k, u in enumerate(state.factors):
        colmax = np.abs(u).max(axis=0) if len(u) else np.ones(R)
        if k == mode:
            own = np.where(colmax > 0, colmax, 1.0)
        else:
            weight *= colmax
    rel = np.abs(state.factors[mode]) / own
    return ScoredEntities(mode, (rel * weight).max(axis=1))


def _split(scores: ScoredEntities, labels: LabelSet):
    ids = labels.ids(scores.mode) if scores.mode in labels.by_mode else np.empty(0, np.int64)
    z = labels.z(scores.mode) if scores.mode in labels.by_mode else np.empty(0)
    return ids, z


def roc_auc(scores: ScoredEntities, labels: LabelSet) -> float:
    """Mann-Whitney AUC over the labeled entities; ties count one half."""
    ids, z = _split(scores, labels)
    pos = z > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores.scores[ids])
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_at_n(scores: ScoredEntities, labels: LabelSet, n):
    """Precision and recall of the top ``n`` labeled entities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ids, z = _split(scores, labels)
    if n > len(ids):
        log.warning("n=%d exceeds the %d scored entities; clamping", n, len(ids))
        n = len(ids)
    n_pos = int(np.sum(z > 0))
    if n == 0:
        return 0.0, 0.0
    top = scores.ranking(ids)[:n]
    truth = dict(zip(ids.tolist(), z.tolist()))
    tp = sum(1 for i in top.tolist() if truth[i] > 0)
    return tp / n, (tp / n_pos if n_pos else 0.0)


def metrics(scores, labels, n):
    p, r = precision_recall_at_n(scores, labels, n)
    return {"auc": roc_auc(scores, labels), "precision_at_n": p, "recall_at_n": r,
            "n": min(n, labels.count(scores.mode))}


def write_metrics(m, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(m, fh, sort_keys=True)
        fh.write("\n")


def write_ranking(scores: ScoredEntities, path, labels: LabelSet | None = None):
    truth = labels.as_dict(scores.mode) if labels is not None else {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "entity", "score", "label"])
        for rank, ent in enumerate(scores.ranking().tolist(), start=1):
            w.writerow([rank, ent, repr(float(scores.scores[ent])), truth.get(ent, "")])
