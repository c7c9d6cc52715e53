import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pifs.data import IGNORE_INDEX, LabeledImage, SegDataset, SyntheticSpec
from pifs.methods import ABLATION_ROWS, METHODS, get_method
from pifs.protocol import (
    SGD,
    ModelConfig,
    ProtocolConfig,
    TrainerConfig,
    derive_rng,
    eval_mask,
    filter_base_dataset,
    make_folds,
    make_pools,
    poly_lr,
    relabel_strict,
    run_base_step,
    run_experiment,
    run_fsl_step,
    run_trial,
    sample_fsl_dataset,
    sample_step_dataset,
    sgd_step,
    summarize,
    training_mask,
)
from pifs.protolearn import DistillVariant, LossConfig, build_teacher, entropy, imprint, loss_terms
from pifs.tensor import Tensor

SPEC = SyntheticSpec(height=16, width=16)


def tiny_config(**kw):
    trainer = TrainerConfig(iters_base=30, iters_fsl=10)
    base = dict(trials=2, n_train_pool=150, n_base_images=40, n_val_images=20, trainer=trainer)
    base.update(kw)
    return ProtocolConfig(**base)


@pytest.fixture(scope="module")
def cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def pools(cfg):
    return make_pools(cfg, SPEC)


@pytest.fixture(scope="module")
def split():
    return make_folds(SPEC.n_classes, 2)


@pytest.fixture(scope="module")
def base(cfg, split, pools):
    return run_base_step(cfg, split, pools.train, 0)


def one_image_pool(masks):
    return SegDataset(tuple(LabeledImage(np.zeros((3, *m.shape)), np.asarray(m), i) for i, m in enumerate(masks)))


class TestFolds:
    def test_voc_layout(self):
        split = make_folds(21, 5)
        assert len(split.folds) == 4
        assert split.new_classes(0) == (1, 2, 3, 4, 5)
        assert sorted(c for f in split.folds for c in f) == list(range(1, 21))

    def test_base_is_complement(self):
        split = make_folds(9, 2)
        assert split.base_classes(1) == (0, 1, 2, 5, 6, 7, 8)

    def test_uneven_split_rejected(self):
        with pytest.raises(ValueError):
            make_folds(9, 3)

    def test_fold_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            make_folds(9, 2).new_classes(4)


class TestSelection:
    def test_filter_keeps_clean_pool(self):
        pool = one_image_pool([np.zeros((2, 2), int), np.ones((2, 2), int)])
        assert filter_base_dataset(pool, [5]).ids == [0, 1]

    def test_filter_drops_single_pixel(self):
        m = np.zeros((3, 3), int)
        m[2, 2] = 5
        pool = one_image_pool([m, np.zeros((3, 3), int)])
        assert filter_base_dataset(pool, [5]).ids == [1]

    def test_filter_matches_pixel_scan(self, pools):
        new = {3, 4}
        expected = []
        for it in pools.train:
            clean = True
            for v in it.mask.ravel():
                if int(v) in new:
                    clean = False
                    break
            if clean:
                expected.append(it.id)
        assert filter_base_dataset(pools.train, new).ids == expected

    def test_single_eligible_image(self):
        m = np.zeros((2, 2), int)
        m[0, 0] = 3
        pool = one_image_pool([np.zeros((2, 2), int), m])
        assert sample_fsl_dataset(pool, 3, 1, np.random.default_rng(0)).ids == [1]

    def test_sampling_deterministic(self, pools):
        a = sample_fsl_dataset(pools.train, 2, 5, derive_rng(0, 1))
        b = sample_fsl_dataset(pools.train, 2, 5, derive_rng(0, 1))
        assert a.ids == b.ids and len(set(a.ids)) == 5

    def test_too_few_eligible(self):
        with pytest.raises(ValueError, match="short"):
            sample_fsl_dataset(one_image_pool([np.zeros((2, 2), int)]), 3, 1, np.random.default_rng(0))

    def test_sampling_frequencies_uniform(self):
        m = np.full((2, 2), 4)
        pool = one_image_pool([m] * 8)
        rng = np.random.default_rng(123)
        n, shots = 10000, 2
        counts = np.zeros(8)
        for _ in range(n):
            for i in sample_fsl_dataset(pool, 4, shots, rng).ids:
                counts[i] += 1
        p = shots / 8
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma)

    def test_step_dataset_has_no_duplicates(self):
        both = np.array([[1, 2]])
        pool = one_image_pool([both, both])
        ds = sample_step_dataset(pool, [1, 2], 2, np.random.default_rng(0))
        assert sorted(ds.ids) == [0, 1]


class TestMasks:
    def test_strict_example(self):
        assert relabel_strict(np.array([[1, 16], [0, 16]]), {1}).tolist() == [[0, 16], [0, 16]]

    def test_strict_without_old_classes(self):
        m = np.array([[0, 5], [5, 255]])
        assert np.array_equal(relabel_strict(m, {1, 2}), m)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1))
    def test_strict_idempotent(self, seed):
        r = np.random.default_rng(seed)
        m = r.integers(0, 9, size=(6, 6))
        old = set(r.choice(9, size=3, replace=False).tolist())
        once = relabel_strict(m, old)
        assert np.array_equal(relabel_strict(once, old), once)

    def test_training_mask_future_classes_are_background(self):
        m = np.array([[1, 3, 5, 255]])
        assert training_mask(m, known=[0, 1, 3], old=[0, 1], strict=False).tolist() == [[1, 3, 0, 255]]

    def test_training_mask_strict(self):
        m = np.array([[1, 3, 5, 255]])
        assert training_mask(m, known=[0, 1, 3], old=[0, 1], strict=True).tolist() == [[0, 3, 0, 255]]

    def test_eval_mask_ignores_unseen(self):
        assert eval_mask(np.array([[0, 2, 7]]), [0, 2]).tolist() == [[0, 2, IGNORE_INDEX]]


class TestSchedule:
    def test_poly_endpoints(self):
        assert poly_lr(0, 100, 0.01) == 0.01
        assert poly_lr(100, 100, 0.01) == 0.0

    def test_poly_midpoint(self):
        assert abs(poly_lr(50, 100, 1.0) - 0.5**0.9) < 1e-12
        assert poly_lr(50, 100, 1.0) == pytest.approx(0.535887, abs=1e-6)

    def test_poly_past_end(self):
        with pytest.raises(ValueError):
            poly_lr(101, 100, 0.01)

    @settings(max_examples=100)
    @given(st.integers(1, 5000), st.data())
    def test_poly_monotone(self, max_iter, data):
        a = data.draw(st.integers(0, max_iter))
        b = data.draw(st.integers(a, max_iter))
        assert poly_lr(b, max_iter, 0.1) <= poly_lr(a, max_iter, 0.1)

    def test_ms_schedule_ascending(self):
        cfg = ProtocolConfig(setting="ms", fold_size=4, ms_steps=2, ms_classes_per_step=2)
        assert cfg.schedule([8, 5, 7, 6]) == [[5, 6], [7, 8]]

    def test_ms_arithmetic_checked(self):
        with pytest.raises(ValueError, match="cover"):
            ProtocolConfig(setting="ms", fold_size=2, ms_steps=3, ms_classes_per_step=1)

    def test_invalid_shots(self):
        with pytest.raises(ValueError, match="1, 2, 5"):
            ProtocolConfig(shots=3)

    def test_fsl_batch_rule(self):
        tr = TrainerConfig()
        assert [tr.fsl_batch_size(n) for n in (1, 2, 10, 25)] == [1, 2, 10, 10]


class TestSGD:
    def test_zero_everything_is_noop(self):
        p = Tensor([1.0, -2.0])
        v = [np.zeros(2)]
        sgd_step([p], [np.zeros(2)], 0.1, v, momentum=0.9, weight_decay=0.0)
        assert p.data.tolist() == [1.0, -2.0]

    def test_hand_update(self):
        p = Tensor([1.0])
        sgd_step([p], [np.array([1.0])], 0.1, [np.zeros(1)], momentum=0.9, weight_decay=0.0)
        assert p.data.tolist() == [0.9]

    def test_momentum_and_decay(self):
        p = Tensor([1.0])
        v = [np.zeros(1)]
        sgd_step([p], [np.array([1.0])], 0.1, v, momentum=0.9, weight_decay=0.5)
        sgd_step([p], [np.array([1.0])], 0.1, v, momentum=0.9, weight_decay=0.5)
        # v1 = 1.5, p1 = 0.85; v2 = 0.9*1.5 + 1 + 0.425 = 2.775, p2 = 0.85 - 0.2775
        assert p.data[0] == pytest.approx(0.5725, abs=1e-15)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            r = np.random.default_rng(0)
            p = Tensor(r.normal(size=5))
            opt = SGD([p])
            for _ in range(10):
                p.grad = r.normal(size=5)
                opt.step(0.01)
            runs.append(p.data.tobytes())
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([Tensor([1.0])], [np.zeros(2)], 0.1, [np.zeros(1)])


class TestMethods:
    def test_pifs_definition(self):
        m = get_method("pifs")
        assert m.imprint and m.finetune and m.norm_mode.value == "br"
        assert m.distill is DistillVariant.PD and m.lam == 10

    def test_ft_definition(self):
        m = get_method("FT")
        assert not m.imprint and m.finetune and m.norm_mode.value == "bn" and m.distill is DistillVariant.NONE

    def test_alias(self):
        assert METHODS["wi_ft_br_pd"] is METHODS["pifs"]

    def test_ablation_rows(self):
        assert len(ABLATION_ROWS) == 10 and ABLATION_ROWS[-1] == ("FT+WI+BR+PD", "pifs")

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown method"):
            get_method("nope")


class TestBaseStep:
    def test_initial_loss_near_uniform(self, split, pools):
        # with a small temperature the random-init model predicts nearly uniformly
        cfg = tiny_config(model=ModelConfig(tau=1.0), trainer=TrainerConfig(iters_base=1))
        state = run_base_step(cfg, split, pools.train, 0)
        assert abs(state.log.ce[0] - math.log(7)) < 0.2 * math.log(7)

    def test_loss_decreases(self, base):
        assert np.mean(base.log.total[-5:]) < base.log.total[0]

    def test_state_after_base(self, base, split):
        assert base.step == 0 and base.norm_frozen
        assert base.classes == split.base_classes(0)
        assert all(n.frozen for n in base.model.extractor.norm_layers)

    def test_base_data_has_no_new_class(self, base):
        assert not base.dataset.classes_present() & {1, 2}


class TestFSLStep:
    def fsl(self, pools, base, cfg, classes=(1, 2)):
        raw = sample_step_dataset(pools.train, classes, 1, derive_rng(0, 0, 1, 0))
        known = base.classes + tuple(classes)
        return raw.map_masks(lambda m: training_mask(m, known, base.classes, cfg.strict))

    def test_wi_keeps_extractor(self, pools, base, cfg):
        state = run_fsl_step(base, self.fsl(pools, base, cfg), get_method("wi"), [1, 2], cfg.trainer)
        for a, b in zip(base.model.extractor.parameters(), state.model.extractor.parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        assert state.log is None
        assert state.classes == base.classes + (1, 2)

    def test_prototype_count_grows(self, pools, base, cfg):
        state = run_fsl_step(base, self.fsl(pools, base, cfg), get_method("pifs"), [1, 2], cfg.trainer)
        assert state.model.classifier.weight.shape[1] == len(state.classes) == 9
        assert set(base.classes) < set(state.classes)
        assert state.dataset is not base.dataset and state.prev_model is base.model

    def test_pifs_starts_at_teacher_entropy(self, pools, base, cfg):
        data = self.fsl(pools, base, cfg)
        student = imprint(base.model, data, [1, 2])
        student.extractor.set_norm_mode(get_method("pifs").norm_mode)
        teacher = build_teacher(base.model, data, [1, 2])
        x, y = data.images(), data.masks()
        terms = loss_terms(x, y, student, teacher, LossConfig(10.0, DistillVariant.PD), training=True)
        assert terms.distill.item() == pytest.approx(entropy(teacher(Tensor(x)).data), abs=1e-9)

    def test_lambda_zero_matches_no_distillation(self, pools, base, cfg):
        data = self.fsl(pools, base, cfg)
        a = run_fsl_step(base, data, get_method("pifs").with_lambda(0.0), [1, 2], cfg.trainer, derive_rng(1), derive_rng(2))
        b = run_fsl_step(base, data, get_method("wi_ft_br"), [1, 2], cfg.trainer, derive_rng(1), derive_rng(2))
        assert a.log.total == b.log.total
        for (_, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert pa.tobytes() == pb.tobytes()

    def test_norm_stats_frozen(self, pools, base, cfg):
        before = [(n.mu_r.copy(), n.sigma_r.copy()) for n in base.model.extractor.norm_layers]
        state = run_fsl_step(base, self.fsl(pools, base, cfg), get_method("wi_ft"), [1, 2], cfg.trainer)
        for (mu, sigma), n in zip(before, state.model.extractor.norm_layers):
            assert n.mu_r.tobytes() == mu.tobytes() and n.sigma_r.tobytes() == sigma.tobytes()

    def test_batch_size_is_dataset_size(self, pools, base, cfg):
        state = run_fsl_step(base, self.fsl(pools, base, cfg), get_method("ft"), [1, 2], cfg.trainer)
        assert set(state.log.batch_sizes) == {len(state.dataset)}

    def test_base_model_untouched(self, pools, base, cfg):
        snapshot = [a.copy() for _, a in base.model.named_parameters()]
        run_fsl_step(base, self.fsl(pools, base, cfg), get_method("ft"), [1, 2], cfg.trainer)
        for a, (_, b) in zip(snapshot, base.model.named_parameters()):
            assert a.tobytes() == b.tobytes()


class TestExperiment:
    def test_ss_single_step(self, cfg, split, pools, base):
        r = run_trial(cfg, split, get_method("wi"), 0, 0, base, pools, SPEC.n_classes)
        assert len(r.reports) == 1 and r.reports[0].new_classes == (1, 2)

    def test_ms_steps_and_frozen_stats(self, split, pools, base):
        cfg = tiny_config(setting="ms", ms_steps=2, ms_classes_per_step=1)
        r = run_trial(cfg, split, get_method("pifs"), 0, 0, base, pools, SPEC.n_classes)
        assert [rep.step_index for rep in r.reports] == [1, 2]
        assert r.reports[0].new_classes == (1,) and r.reports[1].new_classes == (1, 2)
        first = r.norm_stats[0]
        for stats in r.norm_stats[1:]:
            for (m0, s0), (m1, s1) in zip(first, stats):
                assert m0.tobytes() == m1.tobytes() and s0.tobytes() == s1.tobytes()

    def test_ss_and_ms_learn_same_classes(self, cfg, split, pools, base):
        ms = tiny_config(setting="ms", ms_steps=2, ms_classes_per_step=1)
        a = run_trial(cfg, split, get_method("wi"), 0, 0, base, pools, SPEC.n_classes)
        b = run_trial(ms, split, get_method("wi"), 0, 0, base, pools, SPEC.n_classes)
        assert a.final_model.classes == b.final_model.classes

    def test_strict_masks_have_no_old_labels(self, split, pools, base):
        cfg = tiny_config(strict=True)
        r = run_trial(cfg, split, get_method("ft"), 0, 0, base, pools, SPEC.n_classes)
        old = set(base.classes) - {0}
        assert r.fsl_masks and all(not (set(np.unique(m).tolist()) & old) for m in r.fsl_masks)

    def test_bit_identical_reruns(self, cfg, pools):
        a, _ = run_experiment(cfg, [get_method("pifs")], SPEC, pools=pools)
        b, _ = run_experiment(cfg, [get_method("pifs")], SPEC, pools=pools)
        assert [r.reports[0].as_dict() for r in a] == [r.reports[0].as_dict() for r in b]

    def test_summarize(self, cfg, split, pools, base):
        results = [run_trial(cfg, split, get_method("wi"), 0, t, base, pools, SPEC.n_classes) for t in range(2)]
        s = summarize(results)
        assert s.miou_base == pytest.approx(np.mean([r.reports[0].miou_base for r in results]))
