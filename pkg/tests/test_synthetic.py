import json
import math

import pytest

from pgtensor.state import ConfigError, load_labels
from pgtensor.synthetic import (DESK_SHAPE, Block, GroundTruth, PlantConfig, desk_preset, generate,
                                write_outputs)
from pgtensor.tensor import load_tensor


def small_cfg(**kw):
    base = dict(
        shape=(30, 40, 10),
        blocks=[Block([list(range(5)), list(range(6)), [2, 3, 4]], 0.5),
                Block([list(range(10, 15)), list(range(20, 26)), list(range(10))], 0.1, abusive=False)],
        background_density=0.01, label_mode=0, label_fraction=0.4, time_mode=2, seed=3)
    base.update(kw)
    return PlantConfig(**base)


def test_deterministic():
    a, la, _ = generate(small_cfg())
    b, lb, _ = generate(small_cfg())
    assert a.same_coordinates(b)
    assert la.as_dict(0) == lb.as_dict(0)
    c, _, _ = generate(small_cfg(seed=4))
    assert not a.same_coordinates(c)


def test_block_cells_inside_members():
    cfg = small_cfg(background_density=0.0)
    t, _, _ = generate(cfg)
    members = [set().union(*(b.members[k] for b in cfg.blocks)) for k in range(3)]
    for row in t.ones:
        assert all(int(row[k]) in members[k] for k in range(3))


def test_background_count_within_4_sigma():
    cfg = small_cfg(blocks=[], background_density=0.02)
    size = math.prod(cfg.shape)
    for seed in range(5):
        cfg.seed = seed
        t, _, _ = generate(cfg)
        mean = size * 0.02
        assert abs(t.nnz - mean) < 4 * math.sqrt(mean * 0.98)


def test_block_density():
    cfg = small_cfg(background_density=0.0, blocks=[Block([list(range(20)), list(range(30)), [0, 1, 2]], 0.3)])
    t, _, _ = generate(cfg)
    n = 20 * 30 * 3
    assert abs(t.nnz - 0.3 * n) < 4 * math.sqrt(n * 0.3 * 0.7)


def test_labels_balanced_subset_of_truth():
    _, labels, gt = generate(small_cfg())
    d = labels.as_dict(0)
    pos = set(gt.positives())
    assert pos == set(range(5))
    assert sum(v == 1 for v in d.values()) == sum(v == -1 for v in d.values()) == 2
    assert all((v == 1) == (i in pos) for i, v in d.items())
    held = gt.held_out_labels()
    assert not set(held.as_dict(0)) & set(d)
    assert len(held.as_dict(0)) + len(d) == 30


def test_membership():
    _, _, gt = generate(small_cfg())
    m = gt.membership(0)
    assert (m[:5] == 0).all() and (m[10:15] == 1).all() and m[20] == -1


@pytest.mark.parametrize("kw,field", [
    ({"shape": (5,)}, "shape"),
    ({"background_density": 1.5}, "background_density"),
    ({"label_mode": 3}, "label_mode"),
    ({"label_fraction": 0.0}, "label_fraction"),
    ({"blocks": [Block([[0], [0], [1, 3]], 0.5)]}, "time window"),
    ({"blocks": [Block([[0], [99], [1]], 0.5)]}, "members[1]"),
    ({"blocks": [Block([[0], [1], [1]], 0.0)]}, "density"),
])
def test_invalid(kw, field):
    with pytest.raises(ConfigError, match=field.replace("[", r"\[").replace("]", r"\]")):
        small_cfg(**kw).validate()


def test_dict_roundtrip():
    cfg = small_cfg()
    d = cfg.to_dict()
    d["blocks"][0]["members"][2] = {"start": 2, "stop": 5}
    back = PlantConfig.from_dict(d)
    assert back.blocks[0].members[2] == [2, 3, 4]
    assert generate(back)[0].same_coordinates(generate(cfg)[0])


def test_desk_preset():
    cfg = desk_preset(0)
    assert cfg.shape == DESK_SHAPE == (200, 300, 150, 5, 20)
    assert len(cfg.blocks) == 2
    t, labels, gt = generate(cfg)
    assert 30_000 < t.nnz < 100_000
    assert labels.count(2) == 2 * round(0.1 * len(gt.positives()))


def test_write_outputs(tmp_path):
    t, labels, gt = generate(small_cfg())
    paths = write_outputs(tmp_path, t, labels, gt)
    assert load_tensor(paths["tensor"]).same_coordinates(t)
    assert load_labels(paths["labels"]).as_dict(0) == labels.as_dict(0)
    back = GroundTruth.from_dict(json.loads(paths["ground_truth"].read_text()))
    assert back.positives() == gt.positives()
    assert load_labels(paths["test_labels"]).as_dict(0) == gt.held_out_labels().as_dict(0)
