"""Experiment orchestration: splits, AUC metrics, phase protocol, ablations.

Outcome tasks (score, per-question) run stratified k-fold cross-validation
over the training partition's students, with the ingest-designated test
partition held fixed across folds. IRT tasks split (student, question) pairs
instead, using greedy iterative multi-label stratification that balances both
the per-student and per-question proportions. Every reported number is
traceable to a config hash, a seed, and a fold.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .baseline_ae import AEConfig, AEStudentModel, SequenceAutoencoder, ae_train
from .config import config_hash, derive_seed, parse_bool
from .errors import ConfigError, ContractViolation, DataError, StratificationError, UndefinedMetricError
from .ingest import NormalizedDataset
from .irt import BehaviorIRTModel, IRTConfig, PairExample, fit_base, fit_behavior, irt_prob
from .pretrain import PhaseHistory, PretrainConfig, PretrainHeads, run_pretraining
from .process_model import EncoderConfig, ProcessEncoder
from .transfer import (
    StudentLevelModel,
    StudentVectorModel,
    TransferConfig,
    build_student_examples,
    build_visit_examples,
    fine_tune,
    per_question_labels,
    score_labels,
    train_transfer_frozen,
)

TASKS = ("score", "per_question", "irt", "irt_behavior")
MODELS = ("main", "ae_baseline")

ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("none", {}),
    ("skip_event_type", {"skip_event_type": True}),
    ("skip_time", {"skip_time": True}),
    ("skip_status", {"skip_status": True}),
    ("skip_all_pretrain", {"skip_all_pretrain": True}),
    ("no_attention", {"no_attention": True}),
    ("no_finetune", {"no_finetune": True}),
)

ABLATION_FLAGS = tuple(name for name, _ in ABLATION_ROWS[1:]) + ("no_status_input",)


def auc(scores, labels) -> float:
    """Area under the ROC curve via midranks; ties count half.

    Agrees exactly with the O(n^2) pairwise comparison definition: all
    intermediate quantities are small multiples of one half, which float64
    represents without rounding.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractViolation("scores and labels must align")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be binary")
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both classes present")

    n = len(scores)
    order = np.argsort(scores, kind="mergesort")
    s_sorted = scores[order]
    ranks = np.empty(n, dtype=float)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0)


def macro_auc(
    scores_by_question: Mapping[str, Sequence[float]],
    labels_by_question: Mapping[str, Sequence[int]],
) -> tuple[float, list[str]]:
    """Unweighted mean AUC over questions; single-class questions are excluded
    and returned so callers can log the exclusions."""
    values = []
    excluded = []
    for question in sorted(scores_by_question):
        try:
            values.append(auc(scores_by_question[question], labels_by_question[question]))
        except UndefinedMetricError:
            excluded.append(question)
    if not values:
        raise UndefinedMetricError("every question was single-class")
    return float(np.mean(values)), excluded


def stratified_kfold(
    labels: Sequence, k: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deal each class round-robin into k folds after a seeded shuffle."""
    if k < 2:
        raise ConfigError("k must be at least 2")
    by_class: dict = {}
    for i, label in enumerate(labels):
        by_class.setdefault(label, []).append(i)
    for label, members in sorted(by_class.items()):
        if len(members) < k:
            raise StratificationError(
                f"class {label!r} has {len(members)} member(s); needs at least {k}"
            )
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for label in sorted(by_class):
        members = np.array(by_class[label])
        rng.shuffle(members)
        for pos, idx in enumerate(members):
            folds[pos % k].append(int(idx))
    out = []
    all_idx = set(range(len(labels)))
    for fold in folds:
        val = np.array(sorted(fold), dtype=int)
        train = np.array(sorted(all_idx - set(fold)), dtype=int)
        out.append((train, val))
    return out


def iterative_stratify(
    pair_labels: Sequence[tuple[str, str]], proportions: Sequence[float], seed: int
) -> np.ndarray:
    """Greedy iterative stratification of two-label examples into splits.

    Processes the rarest label first; each of its unassigned examples goes to
    the split that most wants that label, breaking ties by total remaining
    demand and then by seeded draw.
    """
    proportions = np.asarray(proportions, dtype=float)
    if not np.isclose(proportions.sum(), 1.0):
        raise ConfigError("split proportions must sum to 1")
    n_splits = len(proportions)
    rng = np.random.default_rng(seed)

    counts: dict[str, int] = {}
    members: dict[str, set[int]] = {}
    for idx, (la, lb) in enumerate(pair_labels):
        for label in (la, lb):
            counts[label] = counts.get(label, 0) + 1
            members.setdefault(label, set()).add(idx)
    desired = {
        label: [counts[label] * p for p in proportions] for label in counts
    }
    assignment = np.full(len(pair_labels), -1, dtype=int)

    unassigned_total = len(pair_labels)
    while unassigned_total:
        label = min(
            (l for l in members if members[l]), key=lambda l: (len(members[l]), l)
        )
        for idx in sorted(members[label]):
            la, lb = pair_labels[idx]
            want = desired[label]
            best_want = max(want)
            candidates = [s for s in range(n_splits) if want[s] == best_want]
            if len(candidates) > 1:
                totals = [desired[la][s] + desired[lb][s] for s in candidates]
                best_total = max(totals)
                candidates = [s for s, t in zip(candidates, totals) if t == best_total]
            split = candidates[0] if len(candidates) == 1 else int(rng.choice(candidates))
            assignment[idx] = split
            desired[la][split] -= 1
            desired[lb][split] -= 1
            members[la].discard(idx)
            members[lb].discard(idx)
            unassigned_total -= 1
        members = {l: m for l, m in members.items() if m}
    return assignment


@dataclass
class SplitReport:
    students_missing_train: list[str]
    students_missing_test: list[str]
    questions_moved: int


def multilabel_stratified_split(
    pairs: Sequence[tuple[str, str]], test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray, SplitReport]:
    """Split (student, question) pairs, keeping every question in both sides.

    Students too sparse to appear in both splits are reported, not fatal.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    labels = [(f"s:{s}", f"q:{q}") for s, q in pairs]
    assignment = iterative_stratify(labels, [1.0 - test_fraction, test_fraction], seed)

    moved = 0
    questions = sorted({q for _, q in pairs})
    for question in questions:
        q_idx = [i for i, (_, q) in enumerate(pairs) if q == question]
        in_test = [i for i in q_idx if assignment[i] == 1]
        in_train = [i for i in q_idx if assignment[i] == 0]
        if len(q_idx) < 2:
            continue  # a single-pair question cannot cover both splits
        if not in_test:
            assignment[max(in_train)] = 1
            moved += 1
        elif not in_train:
            assignment[min(in_test)] = 0
            moved += 1

    train_idx = np.flatnonzero(assignment == 0)
    test_idx = np.flatnonzero(assignment == 1)
    train_students = {pairs[i][0] for i in train_idx}
    test_students = {pairs[i][0] for i in test_idx}
    all_students = sorted({s for s, _ in pairs})
    report = SplitReport(
        students_missing_train=[s for s in all_students if s not in train_students],
        students_missing_test=[s for s in all_students if s not in test_students],
        questions_moved=moved,
    )
    return train_idx, test_idx, report


def multilabel_stratified_kfold(
    pairs: Sequence[tuple[str, str]], k: int, seed: int
) -> list[np.ndarray]:
    """Validation-fold indices per fold, stratified on both pair labels."""
    if k < 2:
        raise ConfigError("k must be at least 2")
    labels = [(f"s:{s}", f"q:{q}") for s, q in pairs]
    assignment = iterative_stratify(labels, [1.0 / k] * k, seed)
    return [np.flatnonzero(assignment == f) for f in range(k)]


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "score"
    model: str = "main"
    skip_event_type: bool = False
    skip_time: bool = False
    skip_status: bool = False
    skip_all_pretrain: bool = False
    no_attention: bool = False
    no_finetune: bool = False
    no_status_input: bool = False
    student_level: bool = False
    folds: int = 5
    seed: int = 0
    dim_event: int = 16
    dim_question: int = 16
    hidden: int = 64
    aggregator_hidden: int = 64
    head_hidden: int = 256
    dropout: float = 0.25
    pretrain_epochs: int = 10
    transfer_epochs: int = 20
    finetune_epochs: int = 10
    batch_size: int = 64
    transfer_batch_size: int = 32
    lr: float = 1e-3
    finetune_lr_scale: float = 0.1
    irt_lr: float = 0.05
    irt_max_epochs: int = 3000
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.model == "ae_baseline" and self.task in ("irt", "irt_behavior"):
            raise ConfigError("the autoencoder baseline does not support IRT tasks")
        if self.student_level and (self.task != "score" or self.model != "main"):
            raise ConfigError("the student-level variant applies to the main score task only")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")

    @property
    def include_status(self) -> bool:
        # the behavior-IRT pipeline is status-free by definition
        return not (self.no_status_input or self.task == "irt_behavior")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_values(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        kwargs: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type == "bool":
                kwargs[f.name] = parse_bool(raw)
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment configuration: {exc}") from exc


@dataclass
class FoldResult:
    fold: int
    val_metric: float
    test_auc: float
    phases: list[dict]
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "val_metric": self.val_metric,
            "test_auc": self.test_auc,
            "phases": self.phases,
            "notes": self.notes,
        }


@dataclass
class ExperimentResult:
    config: dict
    config_hash: str
    seed: int
    folds: list[FoldResult]
    summary: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "folds": [f.to_dict() for f in self.folds],
            "summary": self.summary,
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentResult":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            config=data["config"],
            config_hash=data["config_hash"],
            seed=data["seed"],
            folds=[
                FoldResult(
                    fold=f["fold"],
                    val_metric=f["val_metric"],
                    test_auc=f["test_auc"],
                    phases=f["phases"],
                    notes=f.get("notes", {}),
                )
                for f in data["folds"]
            ],
            summary=data["summary"],
            meta=data.get("meta", {}),
        )


def _phase_provenance(histories: Sequence[PhaseHistory]) -> list[dict]:
    return [
        {
            "phase": h.phase,
            "epochs": len(h.records) - 1,
            "best_epoch": h.best_epoch,
            "best_val_loss": h.best_val_loss,
        }
        for h in histories
    ]


def _encoder_config(dataset: NormalizedDataset, config: ExperimentConfig) -> EncoderConfig:
    return EncoderConfig(
        n_event_types=len(dataset.vocab.event_types),
        n_questions=len(dataset.vocab.questions),
        dim_event=config.dim_event,
        dim_question=config.dim_question,
        hidden=config.hidden,
        include_status=config.include_status,
        block_time_limit=dataset.block_time_limit,
    )


def _transfer_config(config: ExperimentConfig) -> TransferConfig:
    return TransferConfig(
        epochs_frozen=config.transfer_epochs,
        epochs_finetune=config.finetune_epochs,
        batch_size=config.transfer_batch_size,
        lr=config.lr,
        finetune_lr_scale=config.finetune_lr_scale,
        head_hidden=config.head_hidden,
        dropout=config.dropout,
    )


def _pretrain_config(config: ExperimentConfig) -> PretrainConfig:
    return PretrainConfig(
        enable_event_type=not config.skip_event_type,
        enable_time=not config.skip_time,
        enable_status=config.include_status and not config.skip_status,
        enable_question_id=config.student_level,
        epochs=config.pretrain_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
    )


def _fit_main(
    dataset: NormalizedDataset,
    config: ExperimentConfig,
    train_students: list[str],
    val_students: list[str],
    fold_seed: int,
    out_dim: int,
):
    torch.manual_seed(derive_seed(fold_seed, "torch"))
    encoder = ProcessEncoder(_encoder_config(dataset, config))
    phases: list[PhaseHistory] = []
    if not config.skip_all_pretrain:
        pt_cfg = _pretrain_config(config)
        heads = PretrainHeads(
            encoder.context_dim,
            len(dataset.vocab.event_types),
            n_questions=len(dataset.vocab.questions) if config.student_level else None,
        )
        phases.append(
            run_pretraining(
                encoder,
                heads,
                dataset.sequences_for(train_students, blocks=("A",)),
                dataset.sequences_for(val_students, blocks=("A",)),
                pt_cfg,
                fold_seed,
            )
        )

    t_cfg = _transfer_config(config)
    if config.student_level:
        model = StudentLevelModel(encoder, aggregator_hidden=config.aggregator_hidden, out_dim=out_dim)
        train_examples = build_visit_examples(dataset, train_students)
        val_examples = build_visit_examples(dataset, val_students)
    else:
        model = StudentVectorModel(
            encoder,
            dataset.block_a_questions,
            dataset.vocab.question_index,
            out_dim,
            head_hidden=config.head_hidden,
            dropout=config.dropout,
            no_attention=config.no_attention,
        )
        train_examples = build_student_examples(dataset, train_students)
        val_examples = build_student_examples(dataset, val_students)

    label_fn = score_labels if config.task == "score" else per_question_labels
    train_labels = label_fn(dataset, train_students)
    val_labels = label_fn(dataset, val_students)
    phases.append(
        train_transfer_frozen(
            model, train_examples, train_labels, val_examples, val_labels, t_cfg, fold_seed
        )
    )
    if not config.no_finetune:
        phases.append(
            fine_tune(
                model, train_examples, train_labels, val_examples, val_labels, t_cfg, fold_seed
            )
        )
    return model, phases


def _fit_ae(
    dataset: NormalizedDataset,
    config: ExperimentConfig,
    train_students: list[str],
    val_students: list[str],
    fold_seed: int,
    out_dim: int,
):
    torch.manual_seed(derive_seed(fold_seed, "torch"))
    ae_cfg = AEConfig(
        n_event_types=len(dataset.vocab.event_types),
        n_questions=len(dataset.vocab.questions),
        dim_event=config.dim_event,
        dim_question=config.dim_question,
        bottleneck=2 * config.hidden,
        include_status=config.include_status,
        block_time_limit=dataset.block_time_limit,
        epochs=config.pretrain_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
    )
    autoencoder = SequenceAutoencoder(ae_cfg)
    phases = [
        ae_train(
            autoencoder,
            dataset.sequences_for(train_students, blocks=("A",)),
            dataset.sequences_for(val_students, blocks=("A",)),
            fold_seed,
        )
    ]
    model = AEStudentModel(
        autoencoder,
        dataset.block_a_questions,
        dataset.vocab.question_index,
        out_dim,
        head_hidden=config.head_hidden,
        dropout=config.dropout,
    )
    t_cfg = _transfer_config(config)
    train_examples = build_student_examples(dataset, train_students)
    val_examples = build_student_examples(dataset, val_students)
    label_fn = score_labels if config.task == "score" else per_question_labels
    phases.append(
        train_transfer_frozen(
            model,
            train_examples,
            label_fn(dataset, train_students),
            val_examples,
            label_fn(dataset, val_students),
            t_cfg,
            fold_seed,
        )
    )
    return model, phases


def _run_outcome_task(dataset: NormalizedDataset, config: ExperimentConfig) -> list[FoldResult]:
    train_students = dataset.students_in("train")
    test_students = dataset.students_in("test")
    if not test_students:
        raise DataError("dataset has no test partition")
    out_dim = 1 if config.task == "score" else len(dataset.labels.block_b_questions)

    strat_labels = [dataset.labels.score[s] for s in train_students]
    folds = stratified_kfold(strat_labels, config.folds, derive_seed(config.seed, "folds"))

    if config.student_level:
        test_examples = build_visit_examples(dataset, test_students)
    else:
        test_examples = build_student_examples(dataset, test_students)

    results = []
    for f, (tr_idx, va_idx) in enumerate(folds):
        tr = [train_students[i] for i in tr_idx]
        va = [train_students[i] for i in va_idx]
        fold_seed = derive_seed(config.seed, "fold", f)
        if config.model == "main":
            model, phases = _fit_main(dataset, config, tr, va, fold_seed, out_dim)
        else:
            model, phases = _fit_ae(dataset, config, tr, va, fold_seed, out_dim)
        probs = model.predict_proba(test_examples)

        notes: dict = {}
        if config.task == "score":
            test_auc = auc(probs, [dataset.labels.score[s] for s in test_students])
        else:
            questions = dataset.labels.block_b_questions
            scores_by_q = {q: probs[:, i] for i, q in enumerate(questions)}
            labels_by_q = {
                q: [dataset.labels.per_question[s][q] for s in test_students]
                for q in questions
            }
            test_auc, excluded = macro_auc(scores_by_q, labels_by_q)
            if excluded:
                notes["excluded_single_class_questions"] = excluded
        results.append(
            FoldResult(
                fold=f,
                val_metric=phases[-1].best_val_loss,
                test_auc=test_auc,
                phases=_phase_provenance(phases),
                notes=notes,
            )
        )
    return results


def _bce(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.clip(probs, 1e-12, 1 - 1e-12)
    return float(-np.mean(labels * np.log(probs) + (1 - labels) * np.log(1 - probs)))


def _run_irt_task(dataset: NormalizedDataset, config: ExperimentConfig) -> list[FoldResult]:
    raw_pairs = dataset.irt_pairs()
    pair_objs = [PairExample(s, q, y, seq) for s, q, y, seq in raw_pairs]
    keys = [(p.student_id, p.question_id) for p in pair_objs]
    train_idx, test_idx, report = multilabel_stratified_split(
        keys, config.test_fraction, derive_seed(config.seed, "irt-test")
    )
    train_all = [pair_objs[i] for i in train_idx]
    test_pairs = [pair_objs[i] for i in test_idx]
    test_labels = np.array([p.label for p in test_pairs])

    fold_vals = multilabel_stratified_kfold(
        [(p.student_id, p.question_id) for p in train_all],
        config.folds,
        derive_seed(config.seed, "irt-folds"),
    )

    results = []
    for f, val_indices in enumerate(fold_vals):
        val_set = set(val_indices.tolist())
        tr = [p for i, p in enumerate(train_all) if i not in val_set]
        va = [p for i, p in enumerate(train_all) if i in val_set]
        fold_seed = derive_seed(config.seed, "fold", f)
        notes: dict = {
            "students_missing_from_train_split": report.students_missing_train,
            "students_missing_from_test_split": report.students_missing_test,
        }

        if config.task == "irt":
            params, history = fit_base(
                [(p.student_id, p.question_id, p.label) for p in tr],
                IRTConfig(lr=config.irt_lr, max_epochs=config.irt_max_epochs),
            )
            val_probs = np.array(
                [params.predict(p.student_id, p.question_id) for p in va]
            )
            val_metric = _bce(val_probs, np.array([p.label for p in va]))
            test_probs = np.array(
                [params.predict(p.student_id, p.question_id) for p in test_pairs]
            )
            phases = [
                {
                    "phase": "irt_fit",
                    "epochs": len(history),
                    "best_epoch": len(history),
                    "best_val_loss": val_metric,
                }
            ]
        else:
            torch.manual_seed(derive_seed(fold_seed, "torch"))
            encoder = ProcessEncoder(_encoder_config(dataset, config))
            histories: list[PhaseHistory] = []
            if not config.skip_all_pretrain:
                heads = PretrainHeads(encoder.context_dim, len(dataset.vocab.event_types))
                histories.append(
                    run_pretraining(
                        encoder,
                        heads,
                        [p.sequence for p in tr],
                        [p.sequence for p in va],
                        _pretrain_config(config),
                        fold_seed,
                    )
                )
            model = BehaviorIRTModel(encoder, dataset.students, dataset.vocab.questions)
            histories.extend(
                fit_behavior(
                    model, tr, va, _transfer_config(config), fold_seed,
                    skip_finetune=config.no_finetune,
                )
            )
            test_probs = model.predict_proba(test_pairs)
            val_metric = histories[-1].best_val_loss
            phases = _phase_provenance(histories)

        results.append(
            FoldResult(
                fold=f,
                val_metric=val_metric,
                test_auc=auc(test_probs, test_labels),
                phases=phases,
                notes=notes,
            )
        )
    return results


def run_experiment(dataset: NormalizedDataset, config: ExperimentConfig) -> ExperimentResult:
    """Run the configured task end to end and aggregate fold results."""
    if config.task in ("score", "per_question"):
        folds = _run_outcome_task(dataset, config)
    else:
        folds = _run_irt_task(dataset, config)
    aucs = [f.test_auc for f in folds]
    summary = {
        "mean_test_auc": float(np.mean(aucs)),
        "std_test_auc": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0,
    }
    return ExperimentResult(
        config=config.to_dict(),
        config_hash=config_hash(config.to_dict()),
        seed=config.seed,
        folds=folds,
        summary=summary,
        meta={
            "event_vocab_hash": dataset.vocab.event_hash(),
            "question_vocab_hash": dataset.vocab.question_hash(),
            "dataset_meta": dataset.meta,
        },
    )


def run_ablation_matrix(
    dataset: NormalizedDataset,
    base_config: ExperimentConfig,
    out_dir: str | Path | None = None,
) -> dict[str, ExperimentResult]:
    """Run the seven-row ablation matrix on the score task."""
    results = {}
    for name, flags in ABLATION_ROWS:
        row_config = dataclasses.replace(base_config, task="score", **flags)
        result = run_experiment(dataset, row_config)
        results[name] = result
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            result.save(out_dir / f"ablation_{name}.json")
    return results
