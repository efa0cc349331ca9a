import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adabn.data import DomainDataset, ShiftSpec, make_blobs, shift_domain
from adabn.engine import (
    SIMULTANEOUS,
    BnStats,
    BnStatsBank,
    SmallTargetWarning,
    WelfordAccumulator,
    adapt,
    apply_domain,
    bank_from_running,
    estimate_domain_stats,
    feature_rows,
    welford_update,
)
from adabn.errors import DegenerateStatisticsError, DimensionError, IncompleteBankError, PreconditionError
from adabn.layers import cnn, mlp
from helpers import two_pass_moments


def _stream(rows, sizes):
    acc = WelfordAccumulator.empty(rows.shape[1])
    start = 0
    for size in sizes:
        acc = welford_update(acc, rows[start:start + size])
        start += size
    return welford_update(acc, rows[start:])


class TestWelford:
    def test_single_sample(self):
        acc = welford_update(WelfordAccumulator.empty(2), np.array([[5.0, -1.0]]))
        assert acc.count == 1
        assert acc.mean.tolist() == [5.0, -1.0]
        assert acc.variance.tolist() == [0.0, 0.0]

    def test_two_samples_one_at_a_time(self):
        acc = WelfordAccumulator.empty(1)
        for v in (0.0, 2.0):
            acc = welford_update(acc, np.array([[v]]))
        assert (acc.mean[0], acc.variance[0]) == (1.0, 1.0)

    def test_batches_of_seven_match_two_pass(self, rng):
        rows = rng.normal(4.0, 3.0, size=(1000, 5))
        acc = _stream(rows, [7] * (1000 // 7))
        mean, var = two_pass_moments(rows)
        assert acc.count == 1000
        assert np.max(np.abs(acc.mean - mean)) < 1e-9
        assert np.max(np.abs(acc.variance - var)) < 1e-9

    def test_empty_accumulator_is_zero(self):
        acc = WelfordAccumulator.empty(3)
        assert acc.count == 0 and not acc.mean.any() and not acc.m2.any()

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            welford_update(WelfordAccumulator.empty(3), np.ones((2, 4)))

    def test_random_partitions_match_two_pass(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(2, 400))
            rows = rng.normal(rng.normal(0, 50), rng.uniform(0.1, 20), size=(n, 3))
            cuts = np.sort(rng.choice(np.arange(1, n), size=min(n - 1, int(rng.integers(1, 12))), replace=False))
            acc = _stream(rows, np.diff(np.concatenate([[0], cuts])))
            mean, var = two_pass_moments(rows)
            assert acc.count == n
            assert np.max(np.abs(acc.mean - mean)) < 1e-9
            assert np.max(np.abs(acc.variance - var)) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=3, max_size=3), st.integers(0, 2 ** 31))
    def test_merge_associative_and_commutative(self, sizes, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (WelfordAccumulator.empty(2).update(rng.normal(3, 2, size=(s, 2))) for s in sizes)
        left = a.merge(b).merge(c)
        right = a.merge(b.merge(c))
        swapped = c.merge(a).merge(b)
        for other in (right, swapped):
            assert left.count == other.count
            np.testing.assert_allclose(left.mean, other.mean, atol=1e-9)
            np.testing.assert_allclose(left.m2, other.m2, atol=1e-9)
        assert np.all(left.m2 >= 0)

    def test_feature_rows_pools_spatial_axes(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        rows = feature_rows(x)
        assert rows.shape == (40, 3)
        np.testing.assert_allclose(rows.mean(axis=0), x.mean(axis=(0, 2, 3)))


def _blobs_model(seed=0):
    return mlp(6, 3, (8, 8), seed=seed)


class TestEstimate:
    def test_one_entry_per_bn_layer(self, rng):
        stats = estimate_domain_stats(_blobs_model(), rng.normal(size=(100, 6)))
        assert list(stats) == ["bn1", "bn2"]
        assert all(s.count == 100 for s in stats.values())

    def test_conv_counts_spatial_positions(self, rng):
        stats = estimate_domain_stats(cnn(1, 8, 10), rng.normal(size=(70, 1, 8, 8)))
        assert stats["bn1"].count == 70 * 6 * 6
        assert stats["bn2"].count == 70 * 2 * 2

    def test_resubstitution_matches_running_stats(self):
        # running stats from many training-mode batches of one distribution
        model = mlp(6, 3, (8,), seed=0, momentum=0.002)
        rng = np.random.default_rng(5)
        for _ in range(4000):
            model.forward(rng.normal(size=(64, 6)), training=True)
        n = 4000
        est = estimate_domain_stats(model, rng.normal(size=(n, 6)))["bn1"]
        bound = 3 * np.sqrt(est.var) / np.sqrt(n)
        assert np.all(np.abs(est.mean - model["bn1"].running_mean) < bound)

    def test_repeated_sample(self, rng):
        model = _blobs_model()
        sample = rng.normal(size=6)
        stats = estimate_domain_stats(model, np.tile(sample, (80, 1)))
        assert all(not s.var.any() for s in stats.values())
        np.testing.assert_allclose(stats["bn1"].mean, model.run_range(sample[None, :], 0, 1)[0], atol=1e-12)
        # sequential estimation: bn2 sees the sample through bn1's new statistics
        adapted, _ = adapt(model, np.tile(sample, (80, 1)), "t")
        np.testing.assert_allclose(stats["bn2"].mean, adapted.run_range(sample[None, :], 0, 4)[0], atol=1e-12)

    def test_shift_propagates_through_first_linear_map(self):
        # blob centres are zero-mean with unit noise, so the population input mean is exactly zero
        model = _blobs_model()
        delta = np.array([3.0, -2.0, 0.5, 0.0, 1.0, 4.0])
        target = shift_domain(make_blobs(3, 2000, 6, 4.0, seed=9), ShiftSpec(input_shift=delta), "t")
        est = estimate_domain_stats(model, target, up_to_layer="bn1")["bn1"]
        expected = delta @ model["fc1"].weight + model["fc1"].bias
        assert np.all(np.abs(est.mean - expected) < 3 * np.sqrt(est.var) / np.sqrt(len(target)))

    def test_labels_ignored(self):
        data = make_blobs(3, 50, 6, 4.0, seed=1)
        a = estimate_domain_stats(_blobs_model(), data)
        b = estimate_domain_stats(_blobs_model(), data.unlabeled())
        assert all(np.array_equal(a[k].mean, b[k].mean) and np.array_equal(a[k].var, b[k].var) for k in a)

    def test_sequential_differs_from_simultaneous_on_shifted_data(self, rng):
        x = rng.normal(5.0, 3.0, size=(200, 6))
        seq = estimate_domain_stats(_blobs_model(), x)
        sim = estimate_domain_stats(_blobs_model(), x, mode=SIMULTANEOUS)
        np.testing.assert_allclose(seq["bn1"].mean, sim["bn1"].mean, atol=1e-12)
        assert not np.allclose(seq["bn2"].mean, sim["bn2"].mean)

    def test_chunking_does_not_matter(self, rng):
        x = rng.normal(size=(300, 6))
        a = estimate_domain_stats(_blobs_model(), x, chunk_size=7)
        b = estimate_domain_stats(_blobs_model(), x, chunk_size=1000)
        for k in a:
            np.testing.assert_allclose(a[k].mean, b[k].mean, atol=1e-9)
            np.testing.assert_allclose(a[k].var, b[k].var, atol=1e-9)

    def test_does_not_touch_model(self, rng):
        model = _blobs_model()
        before = {k: v.copy() for k, v in {**model.named_parameters(), **model.named_buffers()}.items()}
        estimate_domain_stats(model, rng.normal(3, 2, size=(100, 6)))
        after = {**model.named_parameters(), **model.named_buffers()}
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_empty_dataset(self):
        with pytest.raises(PreconditionError):
            estimate_domain_stats(_blobs_model(), np.zeros((0, 6)))

    def test_single_sample_is_degenerate(self):
        with pytest.raises(DegenerateStatisticsError):
            estimate_domain_stats(_blobs_model(), np.zeros((1, 6)))

    def test_small_target_warns(self, rng):
        with pytest.warns(SmallTargetWarning):
            estimate_domain_stats(_blobs_model(), rng.normal(size=(10, 6)))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            estimate_domain_stats(_blobs_model(), rng.normal(size=(64, 6)))


class TestApplyDomain:
    def test_source_bank_is_identity_swap(self, rng):
        model = _blobs_model()
        model.forward(rng.normal(2, 1, size=(64, 6)), training=True)
        bank = bank_from_running(model, "source")
        x = rng.normal(size=(50, 6))
        np.testing.assert_array_equal(apply_domain(model, bank, "source").forward(x), model.forward(x))

    def test_missing_layer_names_it(self, rng):
        model = _blobs_model()
        bank = BnStatsBank()
        bank.put("bn1", "t", BnStats(np.zeros(8), np.ones(8), 1))
        with pytest.raises(IncompleteBankError, match="bn2"):
            apply_domain(model, bank, "t")

    def test_last_write_wins(self, rng):
        model = _blobs_model()
        _, bank = adapt(model, rng.normal(1, 2, size=(100, 6)), "t1")
        _, bank = adapt(model, rng.normal(-3, 1, size=(100, 6)), "t2", bank=bank)
        x = rng.normal(size=(20, 6))
        chained = apply_domain(apply_domain(model, bank, "t1"), bank, "t2")
        np.testing.assert_array_equal(chained.forward(x), apply_domain(model, bank, "t2").forward(x))

    def test_normalization_effect_on_estimation_data(self):
        model = _blobs_model()
        target = shift_domain(make_blobs(3, 200, 6, 4.0, seed=2), ShiftSpec(input_shift=5.0, input_scale=3.0), "t")
        adapted, _ = adapt(model, target, "t")
        bn = adapted["bn1"]
        h = adapted.run_range(target.inputs, 0, adapted.index("bn1"))
        mean, var = bn.eval_stats
        normed = (h - mean) / np.sqrt(var + bn.eps)
        m_out, v_out = two_pass_moments(normed)
        assert np.max(np.abs(m_out)) < 1e-6
        assert np.max(np.abs(v_out - var / (var + bn.eps))) < 1e-4

    def test_normalization_on_held_out_target(self):
        model = _blobs_model()
        spec = ShiftSpec(input_shift=5.0, input_scale=3.0)
        # one draw split in two, so both halves share the class centres
        target = shift_domain(make_blobs(3, 800, 6, 4.0, seed=2), spec, "t")
        adapted, _ = adapt(model, target.subset(np.arange(1200)), "t")
        held_out = target.inputs[1200:]
        bn = adapted["bn1"]
        mean, var = bn.eval_stats
        normed = (adapted.run_range(held_out, 0, adapted.index("bn1")) - mean) / np.sqrt(var + bn.eps)
        m_out, v_out = two_pass_moments(normed)
        assert np.max(np.abs(m_out)) < 0.05
        assert np.max(np.abs(v_out - 1)) < 0.1

    def test_bank_width_mismatch(self):
        bank = BnStatsBank()
        for name in ("bn1", "bn2"):
            bank.put(name, "t", BnStats(np.zeros(3), np.ones(3), 1))
        with pytest.raises(DimensionError):
            apply_domain(_blobs_model(), bank, "t")


class TestAdapt:
    def test_weights_preserved_bit_for_bit(self, rng):
        model = _blobs_model()
        before = {k: v.tobytes() for k, v in model.named_parameters().items()}
        adapted, _ = adapt(model, rng.normal(4, 2, size=(128, 6)), "t")
        for k, v in adapted.named_parameters().items():
            assert v.tobytes() == before[k]
        assert {k: v.tobytes() for k, v in model.named_parameters().items()} == before

    def test_no_parameters_introduced(self, rng):
        model = _blobs_model()
        adapted, _ = adapt(model, rng.normal(size=(100, 6)), "t")
        assert adapted.named_parameters().keys() == model.named_parameters().keys()

    def test_deterministic(self, rng):
        model = _blobs_model()
        x = rng.normal(2, 3, size=(150, 6))
        assert adapt(model, x, "t")[1] == adapt(model, x, "t")[1]

    def test_source_data_close_to_eval_model(self):
        model = _blobs_model()
        rng = np.random.default_rng(3)
        for _ in range(300):
            model.forward(rng.normal(size=(64, 6)), training=True)
        probe = rng.normal(size=(32, 6))
        adapted, _ = adapt(model, rng.normal(size=(5000, 6)), "source")
        gap = np.max(np.abs(adapted.forward(probe) - model.forward(probe)))
        assert gap < 0.25 * np.max(np.abs(model.forward(probe)))

    def test_input_bank_not_mutated(self, rng):
        model = _blobs_model()
        bank = bank_from_running(model, "source")
        copy = bank.copy()
        adapt(model, rng.normal(size=(100, 6)), "t", bank=bank)
        assert bank == copy and bank.domains() == ["source"]

    def test_three_domains_isolated(self, rng):
        model = _blobs_model()
        data = {f"d{i}": rng.normal(i * 2.0, 1 + i, size=(100, 6)) for i in range(3)}
        bank = None
        for name, x in data.items():
            _, bank = adapt(model, x, name, bank=bank)
        probe = rng.normal(size=(10, 6))
        outputs = {name: apply_domain(model, bank, name).forward(probe) for name in data}
        # each domain matches an adapt run that saw only its own data
        for name, x in data.items():
            np.testing.assert_array_equal(outputs[name], adapt(model, x, name)[0].forward(probe))
        perturbed = bank.copy()
        perturbed.put("bn1", "d0", BnStats(np.full(8, 9.0), np.full(8, 4.0), 1))
        assert not np.array_equal(apply_domain(model, perturbed, "d0").forward(probe), outputs["d0"])
        for name in ("d1", "d2"):
            np.testing.assert_array_equal(apply_domain(model, perturbed, name).forward(probe), outputs[name])


class TestBank:
    def test_negative_variance_rejected(self):
        with pytest.raises(PreconditionError):
            BnStatsBank().put("bn1", "t", BnStats(np.zeros(2), np.array([1.0, -1e-3]), 2))

    def test_validate_against_model(self):
        bank = BnStatsBank()
        bank.put("bn9", "t", BnStats(np.zeros(8), np.ones(8), 2))
        with pytest.raises(DimensionError, match="bn9"):
            bank.validate(_blobs_model())

    def test_incomplete_bank_is_key_error(self):
        with pytest.raises(KeyError):
            BnStatsBank().get("bn1", "t")

    def test_dataset_object_accepted(self, rng):
        ds = DomainDataset("t", rng.normal(size=(80, 6)))
        _, bank = adapt(_blobs_model(), ds, "t")
        assert ("bn1", "t") in bank and len(bank) == 2
