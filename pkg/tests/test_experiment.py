import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepfuse.dsp import MelConfig
from sleepfuse.encoders import EncoderConfig
from sleepfuse.errors import ConfigError, DataError, InvariantError
from sleepfuse.experiment import (
    ConfusionMatrix,
    EvalReport,
    FoldPlan,
    Hyperparameters,
    accuracy,
    evaluate,
    macro_f1,
    plan_folds,
    render_report,
    run_crossval,
    sweep,
    train_fold,
)
from sleepfuse.fusion import FeatureExtractor, build_fusion_model, parameter_checksums
from sleepfuse.ingest import STAGE_COUNT

from conftest import DESK_ENCODER, DESK_MEL, make_epochs


def definitional_macro_f1(counts):
    """Independent oracle, straight from the per-class definitions."""
    scores = []
    for c in range(STAGE_COUNT):
        tp = float(counts[c][c])
        predicted = float(sum(counts[r][c] for r in range(STAGE_COUNT)))
        actual = float(sum(counts[c]))
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / actual if actual > 0 else 0.0
        if precision + recall > 0:
            scores.append(2.0 * precision * recall / (precision + recall))
        else:
            scores.append(0.0)
    return sum(scores) / STAGE_COUNT


def definitional_accuracy(counts):
    total = sum(sum(row) for row in counts)
    return sum(counts[i][i] for i in range(STAGE_COUNT)) / total


def random_confusion(rng):
    counts = rng.integers(0, 40, size=(STAGE_COUNT, STAGE_COUNT))
    # knock out rows/columns to hit the zero-denominator paths
    for _ in range(rng.integers(0, 3)):
        counts[rng.integers(0, STAGE_COUNT), :] = 0
    for _ in range(rng.integers(0, 3)):
        counts[:, rng.integers(0, STAGE_COUNT)] = 0
    if counts.sum() == 0:
        counts[0, 0] = 1
    return counts


class TestPlanFolds:
    def test_85_patients_give_five_folds_of_17(self):
        plan = plan_folds([f"p{i:03d}" for i in range(85)], k=5, seed=1)
        assert [len(f) for f in plan.folds] == [17] * 5

    def test_seven_patients_round_robin_sizes(self):
        plan = plan_folds([f"p{i}" for i in range(7)], k=5, seed=0)
        assert sorted(len(f) for f in plan.folds) == [1, 1, 1, 2, 2]

    def test_same_seed_identical_plan(self):
        ids = [f"p{i}" for i in range(20)]
        assert plan_folds(ids, 5, seed=3).folds == plan_folds(ids, 5, seed=3).folds

    def test_different_seeds_differ_somewhere(self):
        ids = [f"p{i}" for i in range(20)]
        base = plan_folds(ids, 5, seed=0).folds
        assert any(plan_folds(ids, 5, seed=s).folds != base for s in range(1, 10))

    def test_input_order_does_not_matter(self):
        ids = [f"p{i}" for i in range(12)]
        shuffled = list(reversed(ids))
        assert plan_folds(ids, 4, seed=2).folds == plan_folds(shuffled, 4, seed=2).folds

    def test_k_larger_than_cohort_rejected(self):
        with pytest.raises(ConfigError):
            plan_folds(["a", "b"], k=5, seed=0)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            plan_folds(["a", "a", "b"], k=2, seed=0)

    def test_validate_flags_overlap(self):
        plan = FoldPlan(k=2, folds=[["a", "b"], ["b"]], seed=0)
        with pytest.raises(InvariantError):
            plan.validate()


class TestMetrics:
    def test_diagonal_matrix_scores_one(self):
        cm = ConfusionMatrix(counts=np.diag([5, 3, 9, 2, 4]).astype(np.int64))
        assert accuracy(cm) == 1.0
        assert macro_f1(cm) == 1.0

    def test_single_populated_class_macro_is_one_fifth(self):
        # oracle: class 0 has P=R=F1=1; the other four contribute 0
        counts = np.zeros((5, 5), dtype=np.int64)
        counts[0, 0] = 5
        cm = ConfusionMatrix(counts=counts)
        assert macro_f1(cm) == pytest.approx(0.2, abs=0.0)

    def test_constant_predictor_on_balanced_set(self):
        true = np.repeat(np.arange(5), 10)
        pred = np.zeros(50, dtype=np.int64)
        cm = ConfusionMatrix.from_pairs(true, pred)
        assert accuracy(cm) == pytest.approx(0.2, abs=0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_definitional_oracle_exactly(self, seed):
        counts = random_confusion(np.random.default_rng(seed))
        cm = ConfusionMatrix(counts=counts)
        assert macro_f1(cm) == definitional_macro_f1(counts.tolist())
        assert accuracy(cm) == definitional_accuracy(counts.tolist())

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_oracle_equivalence_property(self, seed):
        counts = random_confusion(np.random.default_rng(seed))
        cm = ConfusionMatrix(counts=counts)
        assert macro_f1(cm) == definitional_macro_f1(counts.tolist())

    def test_row_sums_equal_support(self):
        rng = np.random.default_rng(0)
        true = rng.integers(0, 5, size=200)
        pred = rng.integers(0, 5, size=200)
        cm = ConfusionMatrix.from_pairs(true, pred)
        assert cm.total == 200
        assert np.array_equal(cm.counts.sum(axis=1), np.bincount(true, minlength=5))

    def test_empty_matrix_rejected(self):
        with pytest.raises(DataError):
            accuracy(ConfusionMatrix(counts=np.zeros((5, 5), dtype=np.int64)))


class _StubModel:
    """Duck-typed stand-in producing fixed predictions."""

    def __init__(self, predict_fn):
        self.predict_fn = predict_fn

    def logits_batch(self, inputs):
        import numpy as np

        from sleepfuse.nn import Tensor

        logits = np.zeros((len(inputs), STAGE_COUNT))
        for i, inp in enumerate(inputs):
            logits[i, self.predict_fn(inp)] = 10.0
        return Tensor(logits)


def _fake_inputs(labels, patient="px"):
    from sleepfuse.fusion import EpochInputs

    return [
        EpochInputs(key=(patient, i), label_code=int(lab))
        for i, lab in enumerate(labels)
    ]


class TestEvaluate:
    def test_perfect_predictor(self):
        inputs = _fake_inputs([0, 1, 2, 3, 4] * 4)
        report = evaluate(_StubModel(lambda inp: inp.label_code), inputs)
        assert report.accuracy == 1.0
        assert report.macro_f1 == 1.0
        assert np.array_equal(np.diag(report.confusion.counts), [4, 4, 4, 4, 4])

    def test_constant_wake_predictor_on_balanced_set(self):
        inputs = _fake_inputs([0, 1, 2, 3, 4] * 10)
        report = evaluate(_StubModel(lambda inp: 0), inputs)
        assert report.accuracy == pytest.approx(0.2, abs=0.0)

    def test_empty_test_set_rejected(self):
        with pytest.raises(DataError):
            evaluate(_StubModel(lambda inp: 0), [])


def desk_setup(records, mode="fused", regime="fine_tune", lr=3e-3, epochs=2, seed=0):
    hp = Hyperparameters(
        initial_lr=lr,
        weight_decay=0.005,
        batch_size=12,
        epochs=epochs,
        seed=seed,
        mode=mode,
        regime=regime,
    )
    encoder_cfg = EncoderConfig(**DESK_ENCODER)
    mel_cfg = MelConfig(**DESK_MEL)
    model = build_fusion_model(mode, regime, encoder_cfg, mel_cfg, seed=seed)
    extractor = FeatureExtractor(model, mel_cfg)
    inputs = [extractor.extract(e) for e in records]
    return hp, model, inputs, encoder_cfg, mel_cfg


class TestTrainFold:
    def test_zero_lr_leaves_model_bit_identical(self):
        records = make_epochs(n_patients=2, n_epochs=3)
        hp, model, inputs, _, _ = desk_setup(records, lr=0.0, epochs=1)
        before = parameter_checksums(model.parameters())
        train_fold(model, inputs, hp)
        assert parameter_checksums(model.parameters()) == before

    def test_step_count_ceil_times_epochs(self):
        records = make_epochs(n_patients=2, n_epochs=3)
        hp, model, inputs, _, _ = desk_setup(records, epochs=6)
        # 100 synthetic feature rows, batch 12 -> ceil = 9 batches per pass
        inputs = (inputs * 20)[:100]
        for i, inp in enumerate(inputs):
            inputs[i] = type(inp)(
                key=(inp.key[0], i), label_code=inp.label_code,
                audio_tokens=inp.audio_tokens, video_tokens=inp.video_tokens,
            )
        history = train_fold(model, inputs, hp)
        assert len(history) == 54  # ceil(100 / 12) * 6

    def test_loss_decreases_on_separable_data(self):
        records = make_epochs(n_patients=3, n_epochs=6, noise=0.1)
        hp, model, inputs, _, _ = desk_setup(records, epochs=3)
        history = train_fold(model, inputs, hp)
        assert history[-1] < history[0]

    def test_regime_mismatch_rejected(self):
        records = make_epochs(n_patients=2, n_epochs=2)
        hp, model, inputs, _, _ = desk_setup(records, regime="fine_tune")
        probe_hp = Hyperparameters(mode="fused", regime="linear_probe")
        with pytest.raises(ConfigError):
            train_fold(model, inputs, probe_hp)

    def test_probe_keeps_encoders_frozen_and_learns(self):
        records = make_epochs(n_patients=3, n_epochs=6, noise=0.1)
        hp, model, inputs, _, _ = desk_setup(
            records, regime="linear_probe", lr=0.05, epochs=4
        )
        frozen_before = parameter_checksums(model.encoder_parameters())
        history = train_fold(model, inputs, hp)
        assert parameter_checksums(model.encoder_parameters()) == frozen_before
        assert history[-1] < history[0]


class TestRunCrossval:
    def _records(self, n_patients=4, n_epochs=5, noise=0.2):
        return make_epochs(n_patients=n_patients, n_epochs=n_epochs, noise=noise)

    def test_fold_report_cardinality(self):
        records = self._records()
        hp = Hyperparameters(initial_lr=2e-3, epochs=1, seed=0, mode="fused", regime="fine_tune")
        plan = plan_folds(sorted({r.patient_id for r in records}), k=4, seed=0)
        result = run_crossval(records, hp, plan, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL))
        assert len(result.per_fold) == 4
        assert len(result.models) == 4

    def test_average_is_unweighted_mean(self):
        reports = [
            EvalReport(
                confusion=ConfusionMatrix(counts=np.zeros((5, 5), dtype=np.int64)),
                accuracy=a,
                macro_f1=a,
                n_epochs=10,
            )
            for a in (0.7, 0.7, 0.7, 0.8, 0.8)
        ]
        assert float(np.mean([r.accuracy for r in reports])) == pytest.approx(0.74)

    def test_record_order_does_not_change_result(self):
        records = self._records()
        hp = Hyperparameters(initial_lr=2e-3, epochs=1, seed=3, mode="fused", regime="fine_tune")
        plan = plan_folds(sorted({r.patient_id for r in records}), k=2, seed=1)
        kwargs = dict(encoder_cfg=EncoderConfig(**DESK_ENCODER), mel_cfg=MelConfig(**DESK_MEL))
        a = run_crossval(records, hp, plan, **kwargs)
        b = run_crossval(list(reversed(records)), hp, plan, **kwargs)
        assert a.mean_accuracy == b.mean_accuracy
        assert a.mean_macro_f1 == b.mean_macro_f1
        assert np.array_equal(a.total_confusion.counts, b.total_confusion.counts)

    def test_leakage_plan_mismatch_rejected(self):
        records = self._records(n_patients=3)
        hp = Hyperparameters(mode="fused", regime="fine_tune")
        bad_plan = FoldPlan(k=2, folds=[["p00"], ["p01"]], seed=0)  # misses p02
        with pytest.raises(InvariantError):
            run_crossval(records, hp, bad_plan, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL))

    def test_threads_match_serial_results(self):
        records = self._records()
        hp = Hyperparameters(initial_lr=2e-3, epochs=1, seed=0, mode="eog_only", regime="fine_tune")
        plan = plan_folds(sorted({r.patient_id for r in records}), k=2, seed=0)
        kwargs = dict(encoder_cfg=EncoderConfig(**DESK_ENCODER), mel_cfg=MelConfig(**DESK_MEL))
        serial = run_crossval(records, hp, plan, threads=1, **kwargs)
        threaded = run_crossval(records, hp, plan, threads=2, **kwargs)
        assert serial.mean_accuracy == threaded.mean_accuracy
        assert np.array_equal(serial.total_confusion.counts, threaded.total_confusion.counts)


class TestSweep:
    def test_picks_highest_mean_accuracy(self):
        records = make_epochs(n_patients=3, n_epochs=4, noise=0.2)
        hp = Hyperparameters(mode="eog_only", regime="fine_tune", seed=0, batch_size=12)
        plan = plan_folds(sorted({r.patient_id for r in records}), k=3, seed=0)
        best, results = sweep(
            records, hp, plan,
            lr_grid=[0.0, 3e-3], wd_grid=[0.005], epochs_grid=[2],
            encoder_cfg=EncoderConfig(**DESK_ENCODER), mel_cfg=MelConfig(**DESK_MEL),
        )
        assert len(results) == 2
        assert best.mean_accuracy == max(r.mean_accuracy for r in results)
        assert best.config["swept"] is True


class TestRenderReport:
    def _doc(self, label="fused/fine_tune", acc=0.74, f1=0.7, mode="fused", regime="fine_tune"):
        counts = np.zeros((5, 5), dtype=np.int64)
        counts[np.diag_indices(5)] = [20, 10, 30, 8, 6]
        counts[0, 1] = 26
        return {
            "schema_version": 1,
            "label": label,
            "mode": mode,
            "regime": regime,
            "config": {},
            "fingerprint": "f" * 16,
            "folds": [],
            "mean_accuracy": acc,
            "mean_macro_f1": f1,
            "total_confusion": counts.tolist(),
        }

    def test_one_report_renders_one_row(self):
        text = render_report([self._doc()], include_reference=False)
        assert text.count("fused/fine_tune") >= 1
        assert "0.740" in text

    def test_two_reports_two_rows(self):
        text = render_report(
            [self._doc(), self._doc(label="eog/fine_tune", mode="eog_only", acc=0.71)],
            include_reference=False,
        )
        assert "fused/fine_tune" in text and "eog/fine_tune" in text
        assert "0.710" in text

    def test_reference_rows_present_by_default(self):
        text = render_report([self._doc()])
        assert "0.745" in text and "0.683" in text

    def test_confusion_matrices_rendered_with_percentages(self):
        text = render_report([self._doc()], include_reference=False)
        assert "row-normalized %" in text
        assert "Wake" in text and "REM" in text

    def test_sweep_footer_caveat(self):
        doc = self._doc()
        doc["config"] = {"swept": True}
        text = render_report([doc], include_reference=False)
        assert "optimistic" in text

    def test_empty_docs_rejected(self):
        with pytest.raises(DataError):
            render_report([])

    def test_report_doc_is_json_serializable(self):
        records = make_epochs(n_patients=2, n_epochs=3)
        hp = Hyperparameters(initial_lr=1e-3, epochs=1, seed=0, mode="fused", regime="fine_tune")
        plan = plan_folds(sorted({r.patient_id for r in records}), k=2, seed=0)
        result = run_crossval(records, hp, plan, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL))
        doc = result.to_report_doc()
        json.dumps(doc)
        assert doc["mean_accuracy"] == result.mean_accuracy
