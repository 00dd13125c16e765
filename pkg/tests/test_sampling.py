import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcron.numerics import InvalidArgument
from lcron.sampling import (
    CascadeLog,
    DatasetFormatError,
    SchemaVersionError,
    SynthConfig,
    _make_world,
    assign_labels,
    generate_dataset,
    read_dataset,
    true_utility,
    write_dataset,
)

SMALL = dict(n_users=40, n_items=400, feature_dim=6, pool_size=60, n_days=3, impressions_per_day=20)


def lexicographic_ok(stages, ranks, grades) -> bool:
    for i, j in itertools.permutations(range(len(grades)), 2):
        better = stages[i] > stages[j] or (stages[i] == stages[j] and ranks[i] > ranks[j])
        if (grades[i] > grades[j]) != better:
            return False
    return True


class TestAssignLabels:
    def test_example(self):
        # gt_pos=3, rank_neg=2, prerank_neg=1
        assert assign_labels([3, 3, 2, 1], [2, 1, 1, 1]).tolist() == [4, 3, 2, 1]

    def test_single_item(self):
        assert assign_labels([2], [1]).tolist() == [1]

    def test_duplicate_pair(self):
        with pytest.raises(InvalidArgument):
            assign_labels([1, 1], [2, 2])

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 30)), min_size=1, max_size=20, unique=True),
           st.randoms(use_true_random=False))
    def test_order_law_and_equivariance(self, pairs, rnd):
        stages = np.array([p[0] for p in pairs])
        ranks = np.array([p[1] for p in pairs])
        g = assign_labels(stages, ranks)
        assert lexicographic_ok(stages, ranks, g)
        assert g.min() == 1 and len(set(g.tolist())) == len(g)
        perm = list(range(len(pairs)))
        rnd.shuffle(perm)
        assert assign_labels(stages[perm], ranks[perm]).tolist() == g[perm].tolist()

    def test_collapsed_negatives(self):
        g = assign_labels([0, 0, 1, 1, 2, 2], [1, 2, 1, 2, 1, 2], collapse_negatives=True)
        assert g.tolist() == [1, 1, 2, 2, 3, 4]


class TestGenerator:
    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(**SMALL, seed=3)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(a, generate_dataset(cfg))
        write_dataset(b, generate_dataset(cfg))
        assert a.read_bytes() == b.read_bytes()
        write_dataset(b, generate_dataset(SynthConfig(**SMALL, seed=4)))
        assert a.read_bytes() != b.read_bytes()

    def test_sample_invariants(self):
        log = generate_dataset(SynthConfig(**SMALL))
        gt_tag = len(log.stage_names) - 1
        np.testing.assert_array_equal(log.gt, (log.stages == gt_tag).astype(int))
        for m in range(len(log)):
            counts = np.bincount(log.stages[m], minlength=4)
            assert counts.tolist() == [5, 5, 5, 5]
            assert lexicographic_ok(log.stages[m], log.ranks[m], log.grades[m])

    def test_stage_counts_set_item_count(self):
        cfg = SynthConfig(**SMALL | {"pool_size": 100}, stage_counts=(5, 5, 8, 2), reference_quotas=(60, 20, 2))
        log = generate_dataset(cfg)
        assert log.n_items == 20
        assert np.all(log.gt.sum(axis=1) == 2)

    def test_noiseless_ground_truth_is_true_top_k(self):
        cfg = SynthConfig(**SMALL, noise_scales=(0.0, 0.0, 0.0))
        log = generate_dataset(cfg)
        world = _make_world(cfg)
        for m in range(len(log)):
            # rebuild the candidate pool exactly as the generator drew it
            rng = np.random.default_rng([cfg.seed, m])
            uid = int(rng.integers(cfg.n_users))
            pool = rng.choice(cfg.n_items, size=cfg.pool_size, replace=False)
            util = true_utility(world.users[uid], world.items[pool], world.interaction_weights, cfg.interaction)
            top = set(pool[np.argsort(-util)[: cfg.k]].tolist())
            assert set(log.item_ids[m][log.gt[m] == 1].tolist()) == top

    def test_ground_truth_beats_early_negatives(self):
        log = generate_dataset(SynthConfig(**SMALL | {"n_days": 1, "impressions_per_day": 1000}))
        gt_mean = log.utility[log.stages == 3].mean()
        early = log.utility[log.stages == 1].mean()
        assert gt_mean > early

    def test_days_partition(self):
        log = generate_dataset(SynthConfig(**SMALL))
        assert log.day_numbers() == [0, 1, 2]
        parts = [log.select_days([d]) for d in log.day_numbers()]
        assert sum(len(p) for p in parts) == len(log)
        assert all(np.all(p.days == d) for d, p in zip(log.day_numbers(), parts))

    @pytest.mark.parametrize("bad", [
        dict(stage_counts=(40, 30)),
        dict(feature_dim=1),
        dict(pool_size=10),
        dict(stage_counts=(5, 5, 5, 0)),
        dict(noise_scales=(1.0,)),
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(InvalidArgument):
            generate_dataset(SynthConfig(**SMALL | bad))


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        log = generate_dataset(SynthConfig(**SMALL))
        path = tmp_path / "d.jsonl"
        write_dataset(path, log)
        samples, names = read_dataset(path)
        assert names == log.stage_names
        assert samples == log.to_samples()
        back = CascadeLog.from_samples(samples, names)
        np.testing.assert_array_equal(back.item_features, log.item_features)
        np.testing.assert_array_equal(back.grades, log.grades)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_dataset(path)[0] == []

    def _one_line(self, tmp_path, mutate):
        log = generate_dataset(SynthConfig(**SMALL | {"n_days": 1, "impressions_per_day": 2}))
        path = tmp_path / "d.jsonl"
        write_dataset(path, log)
        lines = path.read_text().splitlines()
        mutate(lines)
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_missing_grade_names_field_and_line(self, tmp_path):
        def drop(lines):
            rec = json.loads(lines[2])
            del rec["items"][3]["grade"]
            lines[2] = json.dumps(rec)
        with pytest.raises(DatasetFormatError, match=r"line 3.*'grade'"):
            read_dataset(self._one_line(tmp_path, drop))

    def test_bad_json_line(self, tmp_path):
        def corrupt(lines):
            lines[1] = lines[1][:-5]
        with pytest.raises(DatasetFormatError, match="line 2"):
            read_dataset(self._one_line(tmp_path, corrupt))

    def test_schema_version(self, tmp_path):
        def bump(lines):
            head = json.loads(lines[0])
            head["schema_version"] = 2
            lines[0] = json.dumps(head)
        with pytest.raises(SchemaVersionError):
            read_dataset(self._one_line(tmp_path, bump))
