"""Synthetic binary tensors with planted dense blocks and partial entity labels.

A block is an axis-aligned cross-product of entity subsets, one subset per
mode, filled i.i.d. at its own density.  If the tensor has a time mode, a
block's subset on that mode must be a contiguous window.  Blocks flagged
``abusive`` supply the positive entities of the label mode.  Non-abusive
("benign") blocks are dense too but count as negatives, so density alone does
not identify abuse.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .state import ConfigError, LabelSet, save_labels
from .tensor import SparseBinaryTensor, save_tensor


@dataclass
class Block:
    members: list  # per mode: sorted entity ids
    density: float
    abusive: bool = True

    def n_cells(self):
        return math.prod(len(m) for m in self.members)


@dataclass
class PlantConfig:
    shape: tuple
    blocks: list = field(default_factory=list)
    background_density: float = 0.0
    label_mode: int = 0
    label_fraction: float = 0.1
    time_mode: int | None = None
    seed: int = 0

    def validate(self):
        shape = tuple(self.shape)
        if len(shape) < 2 or any(int(d) != d or d < 1 for d in shape):
            raise ConfigError(f"shape: need >= 2 positive integer dims, got {list(shape)}")
        if not 0.0 <= self.background_density <= 1.0:
            raise ConfigError(f"background_density: must lie in [0, 1], got {self.background_density}")
        if not 0 <= self.label_mode < len(shape):
            raise ConfigError(f"label_mode: {self.label_mode} is not a mode of a {len(shape)}-mode tensor")
        if not 0.0 < self.label_fraction < 1.0:
            raise ConfigError(f"label_fraction: must lie in (0, 1), got {self.label_fraction}")
        if self.time_mode is not None and not 0 <= self.time_mode < len(shape):
            raise ConfigError(f"time_mode: {self.time_mode} is not a mode")
        for b, blk in enumerate(self.blocks):
            if len(blk.members) != len(shape):
                raise ConfigError(f"blocks[{b}].members: need one subset per mode")
            if not 0.0 < blk.density <= 1.0:
                raise ConfigError(f"blocks[{b}].density: must lie in (0, 1], got {blk.density}")
            for k, m in enumerate(blk.members):
                m = np.asarray(m)
                if not len(m):
                    raise ConfigError(f"blocks[{b}].members[{k}]: empty subset")
                if m.min() < 0 or m.max() >= shape[k]:
                    raise ConfigError(f"blocks[{b}].members[{k}]: entity out of range for size {shape[k]}")
            if self.time_mode is not None:
                w = np.sort(np.asarray(blk.members[self.time_mode]))
                if np.any(np.diff(w) != 1):
                    raise ConfigError(f"blocks[{b}].members[{self.time_mode}]: time window must be contiguous")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            blocks = [Block(members=[_expand(m) for m in b["members"]], density=float(b["density"]),
                            abusive=bool(b.get("abusive", True))) for b in d.pop("blocks", [])]
            cfg = cls(shape=tuple(d.pop("shape")), blocks=blocks, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"synthetic: {exc}") from None
        return cfg.validate()

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "blocks": [{"members": [list(map(int, m)) for m in b.members], "density": b.density,
                        "abusive": b.abusive} for b in self.blocks],
            "background_density": self.background_density,
            "label_mode": self.label_mode,
            "label_fraction": self.label_fraction,
            "time_mode": self.time_mode,
            "seed": self.seed,
        }


def _expand(m):
    """A subset is a list of ids or ``{"start": a, "stop": b}`` (half-open)."""
    if isinstance(m, dict):
        return list(range(int(m["start"]), int(m["stop"])))
    return sorted(int(i) for i in m)


@dataclass
class GroundTruth:
    shape: tuple
    label_mode: int
    blocks: list  # list of Block
    train_labels: LabelSet

    def positives(self, mode=None):
        mode = self.label_mode if mode is None else mode
        pos = set()
        for b in self.blocks:
            if b.abusive:
                pos.update(int(i) for i in b.members[mode])
        return sorted(pos)

    def membership(self, mode):
        """``(n_mode,)`` int array: index of the first block containing the entity, or -1."""
        out = np.full(self.shape[mode], -1)
        for j, b in reversed(list(enumerate(self.blocks))):
            out[np.asarray(b.members[mode])] = j
        return out

    def held_out_labels(self):
        """Every label-mode entity not used for training, labeled from the truth."""
        k = self.label_mode
        pos = set(self.positives())
        used = set(int(i) for i in self.train_labels.ids(k)) if k in self.train_labels.by_mode else set()
        return LabelSet.from_pairs((k, n, 1 if n in pos else -1)
                                   for n in range(self.shape[k]) if n not in used)

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "label_mode": self.label_mode,
            "blocks": [{"members": [list(map(int, m)) for m in b.members], "density": b.density,
                        "abusive": b.abusive} for b in self.blocks],
            "positives": self.positives(),
            "train_labels": [list(t) for t in self.train_labels.triples()],
        }

    @classmethod
    def from_dict(cls, d):
        blocks = [Block(b["members"], b["density"], b["abusive"]) for b in d["blocks"]]
        return cls(tuple(d["shape"]), d["label_mode"], blocks,
                   LabelSet.from_pairs(tuple(t) for t in d["train_labels"]))


def _sample_background(shape, density, rng):
    size = math.prod(shape)
    if density <= 0:
        return np.empty((0, len(shape)), np.int64)
    count = rng.binomial(size, density)
    keys = rng.choice(size, size=count, replace=False)
    return np.stack(np.unravel_index(np.sort(keys), shape), axis=1).astype(np.int64)


def _sample_block(block, rng):
    dims = tuple(len(m) for m in block.members)
    hit = np.flatnonzero(rng.random(math.prod(dims)) < block.density)
    local = np.unravel_index(hit, dims)
    return np.stack([np.asarray(m, dtype=np.int64)[loc] for m, loc in zip(block.members, local)], axis=1)


def generate(cfg: PlantConfig):
    """Return ``(tensor, train_labels, ground_truth)``; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(int(d) for d in cfg.shape)
    parts = [_sample_background(shape, cfg.background_density, rng)]
    parts += [_sample_block(b, rng) for b in cfg.blocks]
    tensor = SparseBinaryTensor(shape, np.concatenate(parts))
    object.__setattr__(tensor, "n_collapsed", 0)  # overlaps between parts are not input duplicates

    k = cfg.label_mode
    gt = GroundTruth(shape, k, cfg.blocks, LabelSet())
    pos = np.array(gt.positives(), dtype=np.int64)
    neg = np.setdiff1d(np.arange(shape[k]), pos)
    n_lab = max(1, round(cfg.label_fraction * len(pos))) if len(pos) else 0
    n_lab = min(n_lab, len(pos), len(neg))
    lab_pos = rng.choice(pos, size=n_lab, replace=False) if n_lab else []
    lab_neg = rng.choice(neg, size=n_lab, replace=False) if n_lab else []
    labels = LabelSet.from_pairs([(k, int(i), 1) for i in lab_pos] + [(k, int(i), -1) for i in lab_neg])
    gt.train_labels = labels
    return tensor, labels, gt


# reviewer x product x seller x rating x week
DESK_SHAPE = (200, 300, 150, 5, 20)


def desk_preset(seed=0, label_fraction=0.1):
    """Desk-scale five-mode preset with one abusive and one benign planted core.

    The abusive core is a tight burst: a reviewer ring giving top ratings to
    a seller group's products over four weeks.  The benign core is a denser
    cluster of organic activity around a popular seller group.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    n_rev, n_prod, n_sell, n_rate, n_week = DESK_SHAPE

    rev = rng.permutation(n_rev)
    prod = rng.permutation(n_prod)
    sell = rng.permutation(n_sell)
    start = int(rng.integers(0, n_week - 4))
    abusive = Block(
        members=[sorted(rev[:30].tolist()), sorted(prod[:40].tolist()), sorted(sell[:40].tolist()),
                 [4], list(range(start, start + 4))],
        density=0.15,
    )
    benign = Block(
        members=[sorted(rev[30:60].tolist()), sorted(prod[40:70].tolist()), sorted(sell[40:70].tolist()),
                 [1, 2, 3], list(range(0, n_week))],
        density=0.02,
        abusive=False,
    )
    return PlantConfig(
        shape=DESK_SHAPE,
        blocks=[abusive, benign],
        background_density=5e-6,
        label_mode=2,
        label_fraction=label_fraction,
        time_mode=4,
        seed=seed,
    )


def write_outputs(out_dir, tensor, labels, gt):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "tensor": out / "tensor.txt",
        "labels": out / "labels.txt",
        "test_labels": out / "test_labels.txt",
        "ground_truth": out / "ground_truth.json",
    }
    save_tensor(tensor, paths["tensor"])
    save_labels(labels, paths["labels"])
    save_labels(gt.held_out_labels(), paths["test_labels"])
    paths["ground_truth"].write_text(json.dumps(gt.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return paths
