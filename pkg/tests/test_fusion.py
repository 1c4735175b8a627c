import numpy as np
import pytest

from sleepfuse.dsp import MelConfig
from sleepfuse.encoders import EmbeddingVector, EncoderConfig, ExternalEmbeddingStore
from sleepfuse.errors import ConfigError, DataError
from sleepfuse.fusion import (
    EpochInputs,
    FeatureExtractor,
    StagePrediction,
    build_fusion_model,
    classify,
    fuse,
    mel_frames_for_epoch,
    model_meta,
    parameter_checksums,
    save_model,
    load_model,
    trainable_parameters,
)
from sleepfuse.ingest import SleepStage

from conftest import DESK_ENCODER, DESK_MEL, make_epochs


def desk_model(mode="fused", regime="fine_tune", seed=0, **stores):
    return build_fusion_model(
        mode, regime, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL), seed=seed, **stores
    )


def desk_inputs(model, n_epochs=4, seed=0):
    epochs = make_epochs(n_patients=2, n_epochs=n_epochs, seed=seed)
    extractor = FeatureExtractor(model, MelConfig(**DESK_MEL))
    return [extractor.extract(e) for e in epochs]


class TestFuse:
    def test_two_1024d_vectors_give_2048(self):
        a = EmbeddingVector(np.zeros(1024), "external")
        b = EmbeddingVector(np.ones(1024), "external")
        assert fuse(a, b).dim == 2048

    def test_concatenation_order_eog_first(self):
        a = EmbeddingVector(np.array([1.0, 2.0]), "toy_audio")
        b = EmbeddingVector(np.array([3.0]), "toy_video")
        assert fuse(a, b).values.tolist() == [1.0, 2.0, 3.0]

    def test_order_matters(self):
        a = EmbeddingVector(np.array([1.0, 2.0]), "toy_audio")
        b = EmbeddingVector(np.array([3.0, 4.0]), "toy_video")
        assert not np.array_equal(fuse(a, b).values, fuse(b, a).values)

    def test_missing_modality_rejected(self):
        a = EmbeddingVector(np.ones(4), "toy_audio")
        with pytest.raises(DataError):
            fuse(a, None)


class TestStagePrediction:
    def test_zero_head_gives_uniform_probabilities_and_wake(self):
        pred = StagePrediction.from_logits(np.zeros(5))
        assert np.allclose(pred.probabilities, 0.2, atol=1e-12)
        assert abs(pred.probabilities.sum() - 1.0) <= 1e-9
        assert pred.predicted is SleepStage.WAKE  # tie broken to lowest code

    def test_bias_argmax(self):
        pred = StagePrediction.from_logits(np.array([0.0, 0.0, 10.0, 0.0, 0.0]))
        assert pred.predicted is SleepStage.NREM2

    def test_monotone_transform_preserves_prediction(self):
        logits = np.array([0.3, -1.2, 2.0, 0.9, -0.5])
        base = StagePrediction.from_logits(logits)
        warped = StagePrediction.from_logits(3.0 * logits + 7.0)
        assert warped.predicted is base.predicted


class TestClassify:
    def test_zero_head_uniform(self):
        model = desk_model()
        model.head.weight.data = np.zeros_like(model.head.weight.data)
        model.head.bias.data = np.zeros(5)
        pred = classify(model, desk_inputs(model, n_epochs=1)[0])
        assert np.allclose(pred.probabilities, 0.2, atol=1e-12)
        assert pred.predicted is SleepStage.WAKE

    def test_bias_only_head_predicts_from_bias(self):
        model = desk_model()
        model.head.weight.data = np.zeros_like(model.head.weight.data)
        model.head.bias.data = np.array([0.0, 0.0, 10.0, 0.0, 0.0])
        pred = classify(model, desk_inputs(model, n_epochs=1)[0])
        assert pred.predicted is SleepStage.NREM2

    def test_fused_differs_from_eog_only(self):
        fused = desk_model(mode="fused", seed=1)
        eog = desk_model(mode="eog_only", seed=1)
        # share the audio branch so only the PSM contribution differs
        for p_src, p_dst in zip(
            fused.audio_encoder.parameters(), eog.audio_encoder.parameters()
        ):
            p_dst.data = p_src.data.copy()
        inputs = desk_inputs(fused, n_epochs=1)
        fused_logits = fused.logits_batch(inputs).data
        eog_logits = eog.logits_batch(inputs).data
        assert not np.allclose(fused_logits, eog_logits)

    def test_logits_affine_in_embedding(self):
        from sleepfuse.nn import Tensor

        model = desk_model()
        emb = np.random.default_rng(0).normal(size=(3, model.head.d_in))
        alpha = 2.5
        scaled = model.head_logits(Tensor(alpha * emb)).data
        direct = alpha * (emb @ model.head.weight.data) + model.head.bias.data
        assert np.allclose(scaled, direct, atol=1e-10)

    def test_dim_mismatch_rejected(self):
        from sleepfuse.nn import Tensor

        model = desk_model()
        with pytest.raises(DataError):
            model.head_logits(Tensor(np.zeros((1, model.head.d_in + 1))))


class TestTrainableParameters:
    def test_linear_probe_trains_only_the_head(self):
        model = desk_model(regime="linear_probe")
        assert trainable_parameters(model) == ["head.weight", "head.bias"]

    def test_fine_tune_trains_head_and_encoders(self):
        model = desk_model(regime="fine_tune")
        ids = trainable_parameters(model)
        encoder_ids = {p.name for p in model.encoder_parameters()}
        assert encoder_ids.issubset(set(ids))
        assert {"head.weight", "head.bias"}.issubset(set(ids))
        assert len(ids) == len(encoder_ids) + 2

    def test_fine_tune_with_external_store_rejected(self):
        store = ExternalEmbeddingStore(dim=8, modality="eog_audio")
        with pytest.raises(ConfigError):
            desk_model(regime="fine_tune", eog_store=store)

    def test_probe_with_external_store_uses_store_dim(self):
        store = ExternalEmbeddingStore(dim=1024, modality="eog_audio")
        model = desk_model(mode="eog_only", regime="linear_probe", eog_store=store)
        assert model.head.d_in == 1024


class TestHeadWidth:
    def test_head_width_matches_mode(self):
        dim = DESK_ENCODER["embedding_dim"]
        assert desk_model(mode="fused").head.d_in == 2 * dim
        assert desk_model(mode="eog_only").head.d_in == dim
        assert desk_model(mode="psm_only").head.d_in == dim

    def test_mixed_store_and_toy_widths_add_up(self):
        store = ExternalEmbeddingStore(dim=1024, modality="eog_audio")
        model = desk_model(mode="fused", regime="linear_probe", eog_store=store)
        assert model.head.d_in == 1024 + DESK_ENCODER["embedding_dim"]


class TestMelFramesForEpoch:
    def test_default_config_gives_2998(self):
        assert mel_frames_for_epoch(MelConfig()) == 2998

    def test_desk_config(self):
        cfg = MelConfig(**DESK_MEL)
        assert mel_frames_for_epoch(cfg) == 1 + (30 * 200 - 100) // 50


class TestPersistence:
    def test_save_load_round_trip_bit_exact(self, tmp_path):
        model = desk_model(seed=4)
        meta = model_meta(model, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL), "abc123")
        path = tmp_path / "model.ckpt"
        save_model(path, model, meta)
        loaded, loaded_meta = load_model(path)
        assert loaded_meta["config_hash"] == "abc123"
        before = parameter_checksums(model.parameters())
        after = parameter_checksums(loaded.parameters())
        assert before == after

    def test_loaded_model_predicts_identically(self, tmp_path):
        model = desk_model(seed=4)
        meta = model_meta(model, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL), "x")
        path = tmp_path / "model.ckpt"
        save_model(path, model, meta)
        loaded, _ = load_model(path)
        inputs = desk_inputs(model, n_epochs=2)
        assert np.array_equal(
            model.logits_batch(inputs).data, loaded.logits_batch(inputs).data
        )

    def test_missing_store_at_load_rejected(self, tmp_path):
        store = ExternalEmbeddingStore(dim=8, modality="eog_audio")
        store.vectors[("p00", 0)] = np.zeros(8, dtype=np.float32)
        model = desk_model(mode="eog_only", regime="linear_probe", eog_store=store)
        meta = model_meta(model, EncoderConfig(**DESK_ENCODER), MelConfig(**DESK_MEL), "x")
        path = tmp_path / "model.ckpt"
        save_model(path, model, meta)
        with pytest.raises(ConfigError, match="external"):
            load_model(path)
