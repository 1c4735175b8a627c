"""Patient-grouped five-fold cross-validation, training, metrics, reports."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sleepfuse.dsp import MelConfig
from sleepfuse.encoders import EncoderConfig, ExternalEmbeddingStore
from sleepfuse.errors import ConfigError, DataError, InvariantError, TrainingError
from sleepfuse.fusion import (
    FeatureExtractor,
    FusionModel,
    build_fusion_model,
    parameter_checksums,
)
from sleepfuse.ingest import STAGE_COUNT, SleepStage
from sleepfuse.nn import AdamW, Tensor, cross_entropy_loss, lr_schedule

REPORT_SCHEMA_VERSION = 1

# fixed tags mixed into derived random seeds
_SEED_TAG_FOLDS = 11
_SEED_TAG_SHUFFLE = 23


@dataclass(frozen=True)
class Hyperparameters:
    """Training configuration; defaults follow the published recipe."""

    initial_lr: float = 1.4e-7
    weight_decay: float = 0.005
    batch_size: int = 12
    epochs: int = 6
    seed: int = 0
    mode: str = "fused"
    regime: str = "fine_tune"

    def validate(self) -> None:
        if self.initial_lr < 0:
            raise ConfigError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class FoldPlan:
    """Patient-grouped assignment of all patients to k disjoint test folds."""

    k: int
    folds: list  # list of lists of patient ids
    seed: int

    def validate(self, patient_ids=None) -> None:
        seen = set()
        for fold in self.folds:
            for pid in fold:
                if pid in seen:
                    raise InvariantError(f"patient {pid!r} appears in two folds")
                seen.add(pid)
        sizes = [len(f) for f in self.folds]
        if len(self.folds) != self.k:
            raise InvariantError(f"plan has {len(self.folds)} folds, expected {self.k}")
        if sizes and max(sizes) - min(sizes) > 1:
            raise InvariantError(f"fold sizes differ by more than one: {sizes}")
        if patient_ids is not None and seen != set(patient_ids):
            raise InvariantError("fold plan does not cover exactly the dataset patients")


def plan_folds(patient_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle plus round-robin assignment, grouped by patient.

    Independent of input ordering: ids are sorted before shuffling.
    """
    ids = sorted(set(patient_ids))
    if len(ids) != len(list(patient_ids)):
        raise DataError("patient ids must be unique")
    if k < 1 or k > len(ids):
        raise ConfigError(f"k={k} must be in [1, {len(ids)}]")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_TAG_FOLDS)))
    order = rng.permutation(len(ids))
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    plan = FoldPlan(k=k, folds=folds, seed=seed)
    plan.validate(ids)
    return plan


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Rows = true stage, columns = predicted stage."""

    counts: np.ndarray

    @classmethod
    def from_pairs(cls, true_codes, pred_codes) -> "ConfusionMatrix":
        counts = np.zeros((STAGE_COUNT, STAGE_COUNT), dtype=np.int64)
        for t, p in zip(true_codes, pred_codes):
            counts[int(t), int(p)] += 1
        return cls(counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_normalized_percent(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        safe = np.where(rows == 0, 1, rows)
        return 100.0 * self.counts / safe

    def to_lists(self) -> list:
        return [[int(v) for v in row] for row in self.counts]


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("accuracy undefined on an empty confusion matrix")
    return float(np.trace(cm.counts)) / float(cm.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1; zero denominators contribute 0."""
    counts = np.asarray(cm.counts)
    f1_sum = 0.0
    for c in range(STAGE_COUNT):
        tp = float(counts[c, c])
        col = float(counts[:, c].sum())
        row = float(counts[c, :].sum())
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        if precision + recall > 0:
            f1_sum += 2.0 * precision * recall / (precision + recall)
    return f1_sum / STAGE_COUNT


@dataclass
class EvalReport:
    """Metrics for one model on one evaluation set."""

    confusion: ConfusionMatrix
    accuracy: float
    macro_f1: float
    n_epochs: int
    test_patients: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "n_epochs": self.n_epochs,
            "test_patients": list(self.test_patients),
            "confusion": self.confusion.to_lists(),
        }


def predict_codes(model: FusionModel, inputs: list, batch_size: int = 64) -> np.ndarray:
    """Argmax stage codes for a list of epoch inputs."""
    preds = np.empty(len(inputs), dtype=np.int64)
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        logits = model.logits_batch(chunk).data
        preds[start : start + len(chunk)] = logits.argmax(axis=1)
    return preds


def evaluate(model, inputs: list) -> EvalReport:
    """One prediction per epoch; confusion, accuracy, and macro-F1."""
    if not inputs:
        raise DataError("cannot evaluate on an empty test set")
    true_codes = np.array([inp.label_code for inp in inputs], dtype=np.int64)
    pred = predict_codes(model, inputs)
    cm = ConfusionMatrix.from_pairs(true_codes, pred)
    patients = sorted({inp.key[0] for inp in inputs})
    return EvalReport(
        confusion=cm,
        accuracy=accuracy(cm),
        macro_f1=macro_f1(cm),
        n_epochs=len(inputs),
        test_patients=patients,
    )


# ---------------------------------------------------------------------------
# training


def train_fold(
    model: FusionModel,
    train_inputs: list,
    hp: Hyperparameters,
    shuffle_seed=None,
) -> list:
    """Mini-batch AdamW training with the cosine schedule; returns the
    per-step loss history.

    Deterministic given the seed: epochs are sorted by identity before the
    seeded shuffle, so dataset ordering does not matter.  The last partial
    batch is kept.  In linear_probe the frozen embeddings are computed once
    and only the head sees the optimizer.
    """
    hp.validate()
    if not train_inputs:
        raise DataError("training set is empty")
    if model.regime != hp.regime:
        raise ConfigError(
            f"model regime {model.regime!r} does not match hyperparameters "
            f"regime {hp.regime!r}"
        )
    if shuffle_seed is None:
        shuffle_seed = (hp.seed,)
    elif isinstance(shuffle_seed, int):
        shuffle_seed = (shuffle_seed,)
    inputs = sorted(train_inputs, key=lambda inp: inp.key)
    n = len(inputs)
    labels = np.array([inp.label_code for inp in inputs], dtype=np.int64)

    frozen_before = parameter_checksums(model.encoder_parameters())
    params = model.trainable_parameters()
    optimizer = AdamW(params, lr=hp.initial_lr, weight_decay=hp.weight_decay)

    cached_embeddings = None
    if model.regime == "linear_probe":
        chunks = []
        for start in range(0, n, 256):
            chunks.append(model.embed_batch(inputs[start : start + 256]).data)
        cached_embeddings = np.concatenate(chunks, axis=0)

    steps_per_epoch = math.ceil(n / hp.batch_size)
    total_steps = steps_per_epoch * hp.epochs
    rng = np.random.default_rng(
        np.random.SeedSequence((*shuffle_seed, _SEED_TAG_SHUFFLE))
    )

    history = []
    step = 0
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch_idx = order[b * hp.batch_size : (b + 1) * hp.batch_size]
            batch_labels = labels[batch_idx]
            if cached_embeddings is not None:
                logits = model.head_logits(Tensor(cached_embeddings[batch_idx]))
            else:
                logits = model.logits_batch([inputs[i] for i in batch_idx])
            loss = cross_entropy_loss(logits, batch_labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr=lr_schedule(step, total_steps, hp.initial_lr))
            history.append(loss_value)
            step += 1

    if model.regime == "linear_probe":
        after = parameter_checksums(model.encoder_parameters())
        changed = [name for name, digest in after.items() if frozen_before[name] != digest]
        if changed:
            raise InvariantError(
                f"linear_probe training modified encoder parameters: {changed}"
            )
    return history


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CrossvalResult:
    per_fold: list  # EvalReport per fold
    models: list  # trained FusionModel per fold
    loss_histories: list
    mean_accuracy: float
    mean_macro_f1: float
    total_confusion: ConfusionMatrix
    fingerprint: str
    config: dict

    def to_report_doc(self, label: str | None = None) -> dict:
        cfg = self.config
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "label": label or f"{cfg['mode']}/{cfg['regime']}",
            "mode": cfg["mode"],
            "regime": cfg["regime"],
            "config": cfg,
            "fingerprint": self.fingerprint,
            "folds": [
                dict(fold=i, **report.to_dict())
                for i, report in enumerate(self.per_fold)
            ],
            "mean_accuracy": self.mean_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
            "total_confusion": self.total_confusion.to_lists(),
        }


def config_fingerprint(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def crossval_config(
    hp: Hyperparameters, encoder_cfg: EncoderConfig, mel_cfg: MelConfig, plan: FoldPlan
) -> dict:
    return {
        "mode": hp.mode,
        "regime": hp.regime,
        "initial_lr": hp.initial_lr,
        "weight_decay": hp.weight_decay,
        "batch_size": hp.batch_size,
        "epochs": hp.epochs,
        "seed": hp.seed,
        "fold_seed": plan.seed,
        "k": plan.k,
        "encoder": vars(encoder_cfg).copy(),
        "mel": {
            "target_rate_hz": mel_cfg.target_rate_hz,
            "n_mels": mel_cfg.n_mels,
            "window_length_s": mel_cfg.window_length_s,
            "hop_length_s": mel_cfg.hop_length_s,
            "fft_size": mel_cfg.fft_size,
            "f_min_hz": mel_cfg.f_min_hz,
            "f_max_hz": mel_cfg.f_max_hz,
            "log_floor": mel_cfg.log_floor,
        },
    }


def extract_all_features(
    records: list,
    hp: Hyperparameters,
    encoder_cfg: EncoderConfig,
    mel_cfg: MelConfig,
    eog_store: ExternalEmbeddingStore | None = None,
    psm_store: ExternalEmbeddingStore | None = None,
    threads: int = 1,
) -> dict:
    """Tokenize every epoch once (token geometry is parameter-free)."""
    template = build_fusion_model(
        hp.mode, hp.regime, encoder_cfg, mel_cfg, seed=hp.seed,
        eog_store=eog_store, psm_store=psm_store,
    )
    extractor = FeatureExtractor(template, mel_cfg)
    records = sorted(records, key=lambda r: r.key)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            features = list(pool.map(extractor.extract, records))
    else:
        features = [extractor.extract(r) for r in records]
    return {inp.key: inp for inp in features}


def run_crossval(
    records: list,
    hp: Hyperparameters,
    plan: FoldPlan,
    encoder_cfg: EncoderConfig | None = None,
    mel_cfg: MelConfig | None = None,
    eog_store: ExternalEmbeddingStore | None = None,
    psm_store: ExternalEmbeddingStore | None = None,
    threads: int = 1,
    features: dict | None = None,
) -> CrossvalResult:
    """Train on k-1 folds and evaluate on the held-out fold, k times.

    Patient grouping is asserted on every fold; metric averages are
    unweighted means over folds.
    """
    hp.validate()
    encoder_cfg = encoder_cfg or EncoderConfig()
    mel_cfg = mel_cfg or MelConfig()
    dataset_patients = {r.patient_id for r in records} if records else set()
    if features is None:
        if not records:
            raise DataError("no epoch records to cross-validate")
        plan.validate(dataset_patients)
        features = extract_all_features(
            records, hp, encoder_cfg, mel_cfg, eog_store, psm_store, threads=threads
        )
    else:
        plan.validate({key[0] for key in features})
    all_inputs = sorted(features.values(), key=lambda inp: inp.key)

    def run_one_fold(fold_index: int):
        test_patients = set(plan.folds[fold_index])
        train_inputs = [i for i in all_inputs if i.key[0] not in test_patients]
        test_inputs = [i for i in all_inputs if i.key[0] in test_patients]
        train_patients = {i.key[0] for i in train_inputs}
        if train_patients & test_patients:
            raise InvariantError(
                f"fold {fold_index}: train/test patient overlap "
                f"{sorted(train_patients & test_patients)}"
            )
        if not test_inputs:
            raise DataError(f"fold {fold_index} has no test epochs")
        model = build_fusion_model(
            hp.mode,
            hp.regime,
            encoder_cfg,
            mel_cfg,
            seed=(hp.seed, fold_index),
            eog_store=eog_store,
            psm_store=psm_store,
        )
        history = train_fold(model, train_inputs, hp, shuffle_seed=(hp.seed, fold_index))
        report = evaluate(model, test_inputs)
        return model, history, report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one_fold, range(plan.k)))
    else:
        outcomes = [run_one_fold(i) for i in range(plan.k)]

    models = [o[0] for o in outcomes]
    histories = [o[1] for o in outcomes]
    reports = [o[2] for o in outcomes]
    total = ConfusionMatrix(
        counts=np.sum([r.confusion.counts for r in reports], axis=0)
    )
    config = crossval_config(hp, encoder_cfg, mel_cfg, plan)
    return CrossvalResult(
        per_fold=reports,
        models=models,
        loss_histories=histories,
        mean_accuracy=float(np.mean([r.accuracy for r in reports])),
        mean_macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        total_confusion=total,
        fingerprint=config_fingerprint(config),
        config=config,
    )


def sweep(
    records: list,
    base_hp: Hyperparameters,
    plan: FoldPlan,
    lr_grid: list,
    wd_grid: list,
    epochs_grid: list,
    **kwargs,
) -> tuple:
    """Grid over {lr, weight decay, epochs}; the winner has the highest
    fold-averaged accuracy.  Returns (best_result, all_results)."""
    results = []
    for lr in lr_grid:
        for wd in wd_grid:
            for n_epochs in epochs_grid:
                hp = Hyperparameters(
                    initial_lr=lr,
                    weight_decay=wd,
                    batch_size=base_hp.batch_size,
                    epochs=n_epochs,
                    seed=base_hp.seed,
                    mode=base_hp.mode,
                    regime=base_hp.regime,
                )
                result = run_crossval(records, hp, plan, **kwargs)
                result.config["swept"] = True
                results.append(result)
    best = max(results, key=lambda r: r.mean_accuracy)
    return best, results


# ---------------------------------------------------------------------------
# rendering

STAGE_NAMES = [SleepStage(i).token for i in range(STAGE_COUNT)]

# published clinical numbers for the same task, shown as context rows only;
# they are not reproducible targets for this desk-scale artifact
REFERENCE_ROWS = [
    ("ViViT (published clinical)", "PSM video", "fine-tuned", 0.399, 0.164),
    ("MBT (published clinical)", "PSM + 1-ch EOG", "fine-tuned", 0.631, 0.543),
    ("DeepSleepNet (published clinical)", "1-ch EOG", "fine-tuned", 0.743, 0.682),
    ("ImageBind (published clinical)", "PSM + 2-ch EOG", "fine-tuned", 0.745, 0.683),
    ("ImageBind (published clinical)", "2-ch EOG", "fine-tuned", 0.710, 0.636),
    ("ImageBind (published clinical)", "PSM + 2-ch EOG", "linear probe", 0.690, 0.614),
]

_MODALITY_LABELS = {
    "fused": "PSM + 2-ch EOG",
    "eog_only": "2-ch EOG",
    "psm_only": "PSM video",
}
_REGIME_LABELS = {"fine_tune": "fine-tuned", "linear_probe": "linear probe"}


def _format_confusion(cm_counts: np.ndarray) -> str:
    cm = ConfusionMatrix(counts=np.asarray(cm_counts, dtype=np.int64))
    pct = cm.row_normalized_percent()
    header = "            " + "".join(f"{name:>9}" for name in STAGE_NAMES)
    lines = [header + "   (columns = predicted)"]
    for i, name in enumerate(STAGE_NAMES):
        counts_row = "".join(f"{int(v):>9d}" for v in cm.counts[i])
        lines.append(f"{name:>10}  {counts_row}")
    lines.append("row-normalized %:")
    for i, name in enumerate(STAGE_NAMES):
        pct_row = "".join(f"{v:>9.1f}" for v in pct[i])
        lines.append(f"{name:>10}  {pct_row}")
    return "\n".join(lines)


def render_report(docs: list, include_reference: bool = True) -> str:
    """Plain-text comparison table plus confusion matrices."""
    if not docs:
        raise DataError("no reports to render")
    rows = []
    for doc in docs:
        rows.append(
            (
                doc["label"],
                _MODALITY_LABELS.get(doc["mode"], doc["mode"]),
                _REGIME_LABELS.get(doc["regime"], doc["regime"]),
                doc["mean_accuracy"],
                doc["mean_macro_f1"],
            )
        )
    widths = [
        max(len("method"), *(len(r[0]) for r in rows + (REFERENCE_ROWS if include_reference else []))),
        max(len("modality"), *(len(r[1]) for r in rows + (REFERENCE_ROWS if include_reference else []))),
        max(len("regime"), *(len(r[2]) for r in rows + (REFERENCE_ROWS if include_reference else []))),
    ]
    lines = []
    header = (
        f"{'method':<{widths[0]}}  {'modality':<{widths[1]}}  "
        f"{'regime':<{widths[2]}}  accuracy  F1 (macro)"
    )
    lines.append(header)
    lines.append("-" * len(header))
    for label, modality, regime, acc, f1 in rows:
        lines.append(
            f"{label:<{widths[0]}}  {modality:<{widths[1]}}  {regime:<{widths[2]}}  "
            f"{acc:>8.3f}  {f1:>10.3f}"
        )
    if include_reference:
        lines.append("")
        lines.append("published clinical reference points (context only):")
        for label, modality, regime, acc, f1 in REFERENCE_ROWS:
            lines.append(
                f"{label:<{widths[0]}}  {modality:<{widths[1]}}  {regime:<{widths[2]}}  "
                f"{acc:>8.3f}  {f1:>10.3f}"
            )
    for doc in docs:
        lines.append("")
        lines.append(f"confusion matrix: {doc['label']} (fingerprint {doc['fingerprint']})")
        lines.append(_format_confusion(np.asarray(doc["total_confusion"])))
    if any(doc.get("config", {}).get("swept") for doc in docs):
        lines.append("")
        lines.append(
            "note: hyperparameters were selected by repeated cross-validation, "
            "which can overfit the folds; treat swept scores as optimistic "
            "until confirmed on unseen patients."
        )
    lines.append("")
    return "\n".join(lines)
