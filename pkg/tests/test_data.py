import json

import numpy as np
import pytest

from fedniam.data import (
    GenerationError,
    PartitionError,
    Sample,
    TaskSpec,
    base_novel_split,
    class_proportions,
    dataset_snapshot,
    dirichlet_partition,
    generate_task,
    leave_one_domain_out,
    sample_anchors,
)
from fedniam.numerics import RngStream


def task(**kw):
    spec = TaskSpec(**{"n_classes": 4, "d_embed": 8, "n_domains": 1, "samples_per_class_per_domain": 10,
                       "test_per_class_per_domain": 0, **kw})
    return generate_task(spec, seed=3)


class TestGenerateTask:
    def test_counts(self):
        ds = task()
        assert len(ds) == 40
        assert [s.sample_id for s in ds.samples] == list(range(40))

    def test_deterministic(self):
        a, b = task(sigma=0.4), task(sigma=0.4)
        np.testing.assert_array_equal(a.features, b.features)
        assert a.samples == b.samples

    def test_noiseless_classes_collapse(self):
        ds = task(sigma=0.0)
        for c in range(4):
            f = ds.feature_matrix(ds.select(classes=[c]))
            assert np.all(f == f[0])
            np.testing.assert_array_equal(f[0], ds.backbone.anchors[c])

    def test_anchor_separation_respected(self):
        anchors = sample_anchors(TaskSpec(n_classes=6, d_embed=8, anchor_separation=1.2), RngStream(0))
        dist = np.linalg.norm(anchors[:, None] - anchors[None], axis=-1)
        assert dist[np.triu_indices(6, 1)].min() >= 1.2
        np.testing.assert_allclose(np.linalg.norm(anchors, axis=1), 1.0)

    def test_anchor_alignment_with_text_directions(self):
        spec = TaskSpec(n_classes=5, d_embed=8, text_alignment=0.6, anchor_separation=0.1)
        dirs = np.random.default_rng(0).normal(size=(5, 8))
        anchors = sample_anchors(spec, RngStream(1), dirs)
        cos = (anchors * dirs).sum(1) / np.linalg.norm(dirs, axis=1)
        np.testing.assert_allclose(cos, 0.6, atol=1e-12)

    def test_infeasible_separation(self):
        with pytest.raises(GenerationError):
            sample_anchors(TaskSpec(n_classes=10, d_embed=2, anchor_separation=1.9, max_retries=5), RngStream(0))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            TaskSpec(n_classes=1)


class TestDirichlet:
    def test_single_client_gets_everything(self):
        ds = task()
        shards = dirichlet_partition(ds.samples, 1, 0.5, RngStream(0))
        assert sorted(shards[0].samples, key=lambda s: s.sample_id) == ds.samples

    @pytest.mark.parametrize("beta", [0.1, 0.5, 5.0])
    def test_exact_partition(self, beta):
        ds = task()
        shards = dirichlet_partition(ds.samples, 5, beta, RngStream(1))
        ids = [s.sample_id for sh in shards for s in sh.samples]
        assert sorted(ids) == list(range(len(ds)))
        assert all(sh.size > 0 for sh in shards)
        np.testing.assert_allclose(class_proportions(shards, range(4)).sum(axis=1), 1.0)

    def test_concentration_controls_skew(self):
        ds = task(samples_per_class_per_domain=50)
        var = {}
        for beta in (100.0, 0.1):
            v = [class_proportions(dirichlet_partition(ds.samples, 5, beta, RngStream(s)), range(4)).var(axis=1).mean()
                 for s in range(20)]
            var[beta] = np.mean(v)
        assert var[100.0] < var[0.1]

    def test_rejects_bad_arguments(self):
        ds = task()
        with pytest.raises(PartitionError):
            dirichlet_partition(ds.samples, 3, 0.0, RngStream(0))
        with pytest.raises(PartitionError):
            dirichlet_partition(ds.samples, 0, 1.0, RngStream(0))
        with pytest.raises(PartitionError):
            dirichlet_partition(ds.samples[:2], 3, 1.0, RngStream(0))

    def test_empty_shards_repaired(self):
        samples = [Sample(i, 0, 0, "train") for i in range(6)]
        shards = dirichlet_partition(samples, 6, 0.01, RngStream(2))
        assert [sh.size for sh in shards] == [1] * 6


class TestSplits:
    def test_half_split(self):
        s = base_novel_split(10, 0.5)
        assert s.base == (0, 1, 2, 3, 4) and s.novel == (5, 6, 7, 8, 9)

    def test_odd_split_rounds_up(self):
        s = base_novel_split(3, 0.5)
        assert s.base == (0, 1) and s.novel == (2,)

    def test_split_ignores_seed(self):
        assert base_novel_split(7) == base_novel_split(7)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 0.99])
    def test_degenerate(self, fraction):
        with pytest.raises(ValueError):
            base_novel_split(4, fraction)

    def test_leave_one_domain_out(self):
        ds = generate_task(TaskSpec(n_classes=3, d_embed=8, n_domains=4, samples_per_class_per_domain=6,
                                    test_per_class_per_domain=2), 0)
        split = leave_one_domain_out(ds, 2, 3, RngStream(0))
        assert split.train_domains == (0, 1, 3)
        assert len(split.shards) == 9
        held = {s.domain for sh in split.shards for s in sh.samples}
        assert 2 not in held
        assert all(s.split == "train" for sh in split.shards for s in sh.samples)
        ids = [s.sample_id for sh in split.shards for s in sh.samples]
        assert len(ids) == len(set(ids)) == 3 * 18

    def test_lodo_unknown_domain(self):
        ds = generate_task(TaskSpec(n_classes=2, d_embed=4, n_domains=2, samples_per_class_per_domain=2), 0)
        with pytest.raises(KeyError):
            leave_one_domain_out(ds, 5, 3, RngStream(0))

    def test_lodo_needs_two_domains(self):
        with pytest.raises(ValueError):
            leave_one_domain_out(task(), 0, 3, RngStream(0))


def test_snapshot_is_json_and_replays_backbone():
    ds = task()
    shards = dirichlet_partition(ds.samples, 2, 0.5, RngStream(0))
    snap = json.loads(json.dumps(dataset_snapshot(ds, shards)))
    assert len(snap["samples"]) == 40
    assert sorted(i for v in snap["shards"].values() for i in v) == list(range(40))
    np.testing.assert_array_equal(np.array(snap["backbone"]["anchors"]), ds.backbone.anchors)
