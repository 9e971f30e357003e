import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from cgmd.prior import PriorSet
from cgmd.synth import SynthConfig, generate
from cgmd.tabular import CohortTable, Scaler
from cgmd.trainer import (
    TrainConfig,
    TrainingError,
    ablation_grid,
    aggregate_reports,
    fit_fold,
    format_aggregate,
    parse_aggregate,
    preprocess_fold,
    relation_graph,
    run_cv,
    run_fold,
    stratified_kfold,
    teacher_priors,
)

SMALL = SynthConfig(n_mri=60, n_fundus=40, teacher_dim=8, feature_dim=8, seed=3)
FAST = TrainConfig(epochs=3, k_mri=5, k_fundus=3, embed_dim=8, hidden_dim=8, bio_dim=4)


@pytest.fixture(scope="module")
def cohorts():
    return generate(SMALL)


@pytest.fixture(scope="module")
def split(cohorts):
    return stratified_kfold(cohorts.fundus.labels, 5, 0, ids=cohorts.fundus.ids)[0]


def params_bytes(params):
    return b"".join(a.tobytes() for a in params.arrays().values())


def random_priors(rng, n, d):
    p = rng.standard_normal((n, d))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return PriorSet(priors=p, gated=np.ones(n, bool), neighbor_ids=[[] for _ in range(n)])


class TestStratifiedKFold:
    def test_one_of_each_class_per_fold(self):
        labels = [0] * 5 + [1] * 5
        for s in stratified_kfold(labels, 5, 7):
            assert sorted(np.asarray(labels)[s.val_index]) == [0, 1]

    def test_same_seed_same_splits(self):
        labels = np.tile([0, 1, 1], 10)
        a, b = stratified_kfold(labels, 5, 4), stratified_kfold(labels, 5, 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.val_index, y.val_index)

    def test_class_too_small(self):
        with pytest.raises(ValueError):
            stratified_kfold([0, 0, 0, 1, 1, 1, 1, 1, 1, 1], 5, 0)

    def test_needs_two_folds(self):
        with pytest.raises(ValueError):
            stratified_kfold([0, 1, 0, 1], 1, 0)

    def test_patient_ids_carried(self):
        ids = [f"p{i}" for i in range(10)]
        s = stratified_kfold([0, 1] * 5, 5, 0, ids=ids)[2]
        assert s.val_patient_ids == tuple(ids[i] for i in s.val_index)
        assert set(s.train_patient_ids) | set(s.val_patient_ids) == set(ids)

    @settings(max_examples=60, deadline=None)
    @given(
        n0=st.integers(5, 40), n1=st.integers(5, 40), k=st.integers(2, 5), seed=st.integers(0, 2**16)
    )
    def test_partition_and_balance(self, n0, n1, k, seed):
        labels = np.array([0] * n0 + [1] * n1)
        rng = np.random.default_rng(seed)
        labels = rng.permutation(labels)
        splits = stratified_kfold(labels, k, seed)
        seen = np.concatenate([s.val_index for s in splits])
        assert sorted(seen.tolist()) == list(range(labels.size))
        for s in splits:
            assert not set(s.train_index) & set(s.val_index)
            for c, n_c in ((0, n0), (1, n1)):
                got = int(np.sum(labels[s.val_index] == c))
                assert abs(got - n_c / k) <= 1


class TestFitFold:
    def test_deterministic(self, cohorts, split):
        a = run_fold(cohorts.mri, cohorts.fundus, split, FAST)
        b = run_fold(cohorts.mri, cohorts.fundus, split, FAST)
        assert params_bytes(a.fit.params) == params_bytes(b.fit.params)
        assert a.fit.threshold == b.fit.threshold
        assert a.fit.train_loss_curve == b.fit.train_loss_curve
        assert a.fit.eval == b.fit.eval

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_zero_learning_rate_keeps_init(self, cohorts, split, optimizer):
        from cgmd.student import init_student

        cfg = replace(FAST, learning_rate=0.0, optimizer=optimizer)
        out = run_fold(cohorts.mri, cohorts.fundus, split, cfg)
        x = cohorts.fundus.features
        init = init_student(x.shape[1], cfg.embed_dim, out.fit.params.dims["m"], cfg.bio_dim, cfg.seed, cfg.hidden_dim)
        assert params_bytes(out.fit.params) == params_bytes(init)

    def test_loss_decreases_on_separable_data(self):
        rng = np.random.default_rng(0)
        n = 64
        labels = np.repeat([0, 1], n // 2)
        x = rng.standard_normal((n, 6)) + 2.0 * (2 * labels[:, None] - 1)
        c = rng.standard_normal((n, 3)) + (2 * labels[:, None] - 1)
        scaler = Scaler((), np.zeros(0), np.zeros(0), (), ())
        table = CohortTable([f"p{i}" for i in range(n)], labels, c, scaler, features=x)
        cfg = TrainConfig(epochs=5, distill=False, embed_dim=8, hidden_dim=8, bio_dim=4)
        curve = fit_fold(table, None, None, cfg).train_loss_curve
        assert all(b < a for a, b in zip(curve, curve[1:]))

    def test_distill_off_ignores_priors(self, cohorts, split):
        cfg = replace(FAST, distill=False)
        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, cfg)
        rng = np.random.default_rng(1)
        a = fit_fold(data.train, None, None, cfg)
        b = fit_fold(data.train, random_priors(rng, len(data.train), cfg.embed_dim), None, cfg)
        c = fit_fold(data.train, random_priors(rng, len(data.train), cfg.embed_dim), None, cfg)
        assert params_bytes(a.params) == params_bytes(b.params) == params_bytes(c.params)
        assert a.threshold == b.threshold == c.threshold

    def test_distill_off_run_fold_ignores_teacher(self, cohorts, split):
        cfg = replace(FAST, distill=False)
        a = run_fold(cohorts.mri, cohorts.fundus, split, cfg)
        mri = cohorts.mri.take(np.arange(len(cohorts.mri)))
        mri.embeddings = np.random.default_rng(5).standard_normal(mri.embeddings.shape)
        b = run_fold(mri, cohorts.fundus, split, cfg)
        assert params_bytes(a.fit.params) == params_bytes(b.fit.params)

    def test_missing_priors_rejected(self, cohorts, split):
        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, FAST)
        with pytest.raises(TrainingError):
            fit_fold(data.train, None, None, FAST)

    def test_nan_loss_aborts_with_step(self, cohorts, split):
        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, replace(FAST, distill=False))
        data.train.features = data.train.features.copy()
        data.train.features[0, 0] = np.nan
        with pytest.raises(TrainingError, match="step"):
            fit_fold(data.train, None, None, replace(FAST, distill=False))

    def test_threshold_from_train_split(self, cohorts, split):
        from cgmd.metrics import youden_threshold
        from cgmd.student import predict_proba

        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, FAST)
        out = run_fold(cohorts.mri, cohorts.fundus, split, FAST)
        scores = predict_proba(out.fit.params, data.train.features, data.train.biomarkers)
        assert out.fit.threshold == youden_threshold(scores, data.train.labels)


class TestNoLeakage:
    def test_corrupting_validation_rows(self, cohorts, split):
        clean = run_fold(cohorts.mri, cohorts.fundus, split, FAST)
        bad = cohorts.fundus.take(np.arange(len(cohorts.fundus)))
        v = split.val_index
        bad.labels = bad.labels.copy()
        bad.labels[v] = 1 - bad.labels[v]
        bad.features = bad.features.copy()
        bad.features[v] = 1e3
        bad.numeric = bad.numeric.copy()
        bad.numeric[v] = -50.0
        corrupted = run_fold(cohorts.mri, bad, split, FAST)
        assert params_bytes(clean.fit.params) == params_bytes(corrupted.fit.params)
        assert clean.fit.threshold == corrupted.fit.threshold

    def test_relation_graph_spans_train_only(self, cohorts, split):
        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, FAST)
        g = relation_graph(data.train, FAST)
        assert g.n_nodes == len(split.train_index)
        nodes = {u for u, v, _ in g.edges} | {v for u, v, _ in g.edges}
        ids = {data.train.ids[i] for i in nodes}
        assert not ids & set(split.val_patient_ids)
        assert set(data.train.ids) == set(split.train_patient_ids)


class TestPipeline:
    def test_smooth_off_uses_raw_embeddings(self, cohorts, split):
        cfg = replace(FAST, smooth=False)
        data = preprocess_fold(cohorts.mri, cohorts.fundus, split, cfg)
        np.testing.assert_array_equal(teacher_priors(data.mri, None, cfg), data.mri.embeddings)

    def test_aggregate_is_fold_mean(self, cohorts):
        res = run_cv(cohorts.mri, cohorts.fundus, FAST)
        assert len(res.folds) == 5
        aucs = res.metric("auc")
        assert res.aggregate["auc"][0] == pytest.approx(aucs.mean(), abs=1e-15)
        assert res.aggregate["auc"][1] == pytest.approx(aucs.std(), abs=1e-15)

    def test_parallel_matches_serial(self, cohorts):
        a = run_cv(cohorts.mri, cohorts.fundus, FAST, jobs=1)
        b = run_cv(cohorts.mri, cohorts.fundus, FAST, jobs=2)
        assert format_aggregate(a.aggregate) == format_aggregate(b.aggregate)

    def test_aggregate_round_trip(self, cohorts):
        res = run_cv(cohorts.mri, cohorts.fundus, FAST)
        assert parse_aggregate(format_aggregate(res.aggregate)) == res.aggregate

    def test_aggregate_reports_empty_std(self):
        from cgmd.metrics import EvalReport

        r = EvalReport(0.7, 0.6, 0.5, 0.4, 0.3, 0.5, 3, 4)
        agg = aggregate_reports([r, r])
        assert agg["auc"] == (0.7, 0.0)

    def test_ablation_grid_rows(self):
        rows = ablation_grid(TrainConfig())
        names = [n for n, _ in rows]
        assert names[0] == "Supervised" and len(rows) == 9
        assert not rows[0][1].distill
        full = dict(rows)["Distill+Smooth+Rel"]
        assert full == dict(rows)["kNN (gated)"]
        assert dict(rows)["Distill"].smooth is False and dict(rows)["Distill"].rel is False
        assert dict(rows)["Global Mean"].prior_mode == "global_mean"


class TestConfig:
    def test_distill_off_zeroes_both_distillation_terms(self):
        w = TrainConfig(distill=False).weights
        assert (w.prior, w.rel) == (0.0, 0.0) and w.cls == 1.0

    def test_rel_switch(self):
        assert TrainConfig(rel=False).weights.rel == 0.0

    @pytest.mark.parametrize(
        "kw", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1.0), dict(prior_mode="x"), dict(optimizer="x")]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
