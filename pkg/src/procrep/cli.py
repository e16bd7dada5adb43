"""Command-line entry point wiring configs to pipeline stages.

Every command is reproducible from (config, seed): outputs embed the config
hash and seed that produced them, as comment lines in delimited text, fields
in JSON and checkpoints, and metadata in images.

Exit codes: 0 success, 1 usage or invalid configuration, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluate as ev
from .baseline_ae import AEConfig, SequenceAutoencoder, ae_train
from .config import config_hash, derive_seed, load_config
from .errors import (
    ConfigError,
    ContractViolation,
    ProcrepError,
    TrainingDivergedError,
)
from .ingest import NormalizedDataset, build_dataset, load_answer_key, load_block_map, parse_log
from .irt import BehaviorIRTModel, IRTConfig, PairExample, export_params, fit_base, fit_behavior
from .pretrain import PretrainHeads, run_pretraining
from .process_model import ProcessEncoder, load_checkpoint, save_checkpoint
from .schema import DEFAULT_SCHEMA, LogSchema
from .synthgen import SynthConfig, generate_cohort, write_cohort
from .transfer import (
    StudentLevelModel,
    StudentVectorModel,
    build_student_examples,
    build_visit_examples,
    fine_tune,
    per_question_labels,
    score_labels,
    train_transfer_frozen,
)
from .viz import (
    embed_2d,
    export_question_vectors,
    export_student_vectors,
    load_vector_table,
    render_plot,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors instead of argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_values(path: str | None) -> dict[str, str]:
    return load_config(path) if path else {}


def _write_history(path: str | Path, histories, meta: dict) -> None:
    rows = [row for history in histories for row in history.to_rows()]
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        for key, value in sorted(meta.items()):
            handle.write(f"# {key}={value}\n")
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _split_train_val(students: list[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(students))
    n_val = max(1, int(round(val_fraction * len(students))))
    val = sorted(students[i] for i in order[:n_val])
    train = sorted(students[i] for i in order[n_val:])
    if not train:
        raise ConfigError("validation fraction leaves no training students")
    return train, val


def _cmd_generate(args) -> int:
    values = _load_values(args.config)
    cfg = SynthConfig.from_values(values)
    cohort = generate_cohort(cfg, args.seed)
    paths = write_cohort(cohort, args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    schema = LogSchema.load(args.schema) if args.schema else DEFAULT_SCHEMA
    key = load_answer_key(args.answer_key)
    block_map = load_block_map(args.block_map)
    groups, issues = parse_log(args.log, schema)
    params = {
        "log": str(args.log),
        "block_time_limit": args.block_time_limit,
        "test_fraction": args.test_fraction,
    }
    chash = config_hash(params)
    dataset = build_dataset(
        groups,
        key,
        block_map,
        schema,
        block_time_limit=args.block_time_limit,
        test_fraction=args.test_fraction,
        seed=args.seed,
        meta={"config_hash": chash, "seed": args.seed},
    )
    dataset.save(args.out)
    if args.issues:
        with Path(args.issues).open("w", encoding="utf-8", newline="") as handle:
            handle.write(f"# config_hash={chash}\n")
            handle.write(f"# seed={args.seed}\n")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["row", "column", "message"])
            for issue in issues:
                writer.writerow([issue.row, issue.column, issue.message])
    print(
        f"dataset: {args.out} ({len(dataset.students)} students, "
        f"{len(issues)} malformed row(s) skipped)"
    )
    return EXIT_OK


def _experiment_config(args, values: dict[str, str]) -> ev.ExperimentConfig:
    merged = dict(values)
    if getattr(args, "task", None):
        merged["task"] = args.task
    if getattr(args, "model", None):
        merged["model"] = args.model
    if getattr(args, "folds", None):
        merged["folds"] = str(args.folds)
    merged["seed"] = str(args.seed)
    if getattr(args, "student_level", False):
        merged["student_level"] = "true"
    for flag in getattr(args, "ablate", None) or []:
        if flag not in ev.ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation flag {flag!r}; expected one of {sorted(ev.ABLATION_FLAGS)}"
            )
        merged[flag] = "true"
    return ev.ExperimentConfig.from_values(merged)


def _cmd_pretrain(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    values = _load_values(args.config)
    config = _experiment_config(args, values)
    train, val = _split_train_val(
        dataset.students_in("train"), args.val_fraction, derive_seed(args.seed, "pretrain-val")
    )
    torch.manual_seed(derive_seed(args.seed, "torch"))
    encoder = ProcessEncoder(ev._encoder_config(dataset, config))
    heads = PretrainHeads(
        encoder.context_dim,
        len(dataset.vocab.event_types),
        n_questions=len(dataset.vocab.questions) if config.student_level else None,
    )
    history = run_pretraining(
        encoder,
        heads,
        dataset.sequences_for(train, blocks=("A",)),
        dataset.sequences_for(val, blocks=("A",)),
        ev._pretrain_config(config),
        args.seed,
    )
    meta = {
        "config_hash": config_hash(config.to_dict()),
        "seed": args.seed,
        "variant": "encoder",
        "phase": "pretrain",
        "best_epoch": history.best_epoch,
    }
    save_checkpoint(args.out, encoder, dataset.vocab, extras={"pretrain_heads": heads}, meta=meta)
    if args.history:
        _write_history(args.history, [history], meta)
    print(f"checkpoint: {args.out} (best epoch {history.best_epoch}, val {history.best_val_loss:.6f})")
    return EXIT_OK


def _cmd_transfer(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    values = _load_values(args.config)
    config = _experiment_config(args, values)
    torch.manual_seed(derive_seed(args.seed, "torch"))
    if args.checkpoint:
        bundle = load_checkpoint(args.checkpoint, dataset.vocab)
        encoder = bundle.encoder
    else:
        encoder = ProcessEncoder(ev._encoder_config(dataset, config))

    train, val = _split_train_val(
        dataset.students_in("train"), args.val_fraction, derive_seed(args.seed, "transfer-val")
    )
    out_dim = 1 if config.task == "score" else len(dataset.labels.block_b_questions)
    if config.student_level:
        model = StudentLevelModel(
            encoder, aggregator_hidden=config.aggregator_hidden, out_dim=out_dim
        )
        train_examples = build_visit_examples(dataset, train)
        val_examples = build_visit_examples(dataset, val)
        test_examples = build_visit_examples(dataset, dataset.students_in("test"))
        variant = "student_level"
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
        train_examples = build_student_examples(dataset, train)
        val_examples = build_student_examples(dataset, val)
        test_examples = build_student_examples(dataset, dataset.students_in("test"))
        variant = "transfer"

    label_fn = score_labels if config.task == "score" else per_question_labels
    t_cfg = ev._transfer_config(config)
    histories = [
        train_transfer_frozen(
            model, train_examples, label_fn(dataset, train),
            val_examples, label_fn(dataset, val), t_cfg, args.seed,
        )
    ]
    if not config.no_finetune:
        histories.append(
            fine_tune(
                model, train_examples, label_fn(dataset, train),
                val_examples, label_fn(dataset, val), t_cfg, args.seed,
            )
        )

    meta = {
        "config_hash": config_hash(config.to_dict()),
        "seed": args.seed,
        "variant": variant,
        "task": config.task,
        "out_dim": out_dim,
        "aggregator_hidden": config.aggregator_hidden,
        "head_hidden": config.head_hidden,
        "dropout": config.dropout,
        "no_attention": config.no_attention,
    }
    save_checkpoint(args.out, encoder, dataset.vocab, extras={"model": model}, meta=meta)
    if args.history:
        _write_history(args.history, histories, meta)

    test_students = dataset.students_in("test")
    if test_students:
        probs = model.predict_proba(test_examples)
        if config.task == "score":
            test_auc = ev.auc(probs, [dataset.labels.score[s] for s in test_students])
            print(f"test AUC: {test_auc:.4f}")
        else:
            questions = dataset.labels.block_b_questions
            value, excluded = ev.macro_auc(
                {q: probs[:, i] for i, q in enumerate(questions)},
                {q: [dataset.labels.per_question[s][q] for s in test_students] for q in questions},
            )
            print(f"test macro AUC: {value:.4f} ({len(excluded)} question(s) excluded)")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_irt(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    values = _load_values(args.config)
    config = _experiment_config(args, values)
    pairs = [PairExample(s, q, y, seq) for s, q, y, seq in dataset.irt_pairs()]
    meta = {"config_hash": config_hash(config.to_dict()), "seed": args.seed}

    if not args.behavior:
        params, history = fit_base(
            [(p.student_id, p.question_id, p.label) for p in pairs],
            IRTConfig(lr=config.irt_lr, max_epochs=config.irt_max_epochs),
        )
        export_params(params, args.out, meta)
        print(f"parameters: {args.out} (fit loss {history[-1]:.6f}, {len(history)} epochs)")
        return EXIT_OK

    torch.manual_seed(derive_seed(args.seed, "torch"))
    if args.checkpoint:
        bundle = load_checkpoint(args.checkpoint, dataset.vocab)
        encoder = bundle.encoder
    else:
        behavior_config = dataclasses.replace(config, task="irt_behavior")
        encoder = ProcessEncoder(ev._encoder_config(dataset, behavior_config))
    keys = [(p.student_id, p.question_id) for p in pairs]
    train_idx, val_idx, _ = ev.multilabel_stratified_split(
        keys, args.val_fraction, derive_seed(args.seed, "irt-val")
    )
    tr = [pairs[i] for i in train_idx]
    va = [pairs[i] for i in val_idx]
    model = BehaviorIRTModel(encoder, dataset.students, dataset.vocab.questions)
    histories = fit_behavior(
        model, tr, va, ev._transfer_config(config), args.seed,
        skip_finetune=config.no_finetune,
    )
    export_params(model.params(), args.out, meta)
    ckpt_meta = {**meta, "variant": "irt_behavior", "students": list(dataset.students)}
    if args.model_out:
        save_checkpoint(args.model_out, encoder, dataset.vocab, extras={"model": model}, meta=ckpt_meta)
        print(f"model checkpoint: {args.model_out}")
    if args.history:
        _write_history(args.history, histories, ckpt_meta)
    print(f"parameters: {args.out} (val loss {histories[-1].best_val_loss:.6f})")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    values = _load_values(args.config)
    config = _experiment_config(args, values)
    train, val = _split_train_val(
        dataset.students_in("train"), args.val_fraction, derive_seed(args.seed, "ae-val")
    )
    torch.manual_seed(derive_seed(args.seed, "torch"))
    ae = SequenceAutoencoder(
        AEConfig(
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
    )
    history = ae_train(
        ae,
        dataset.sequences_for(train, blocks=("A",)),
        dataset.sequences_for(val, blocks=("A",)),
        args.seed,
    )
    meta = {
        "config_hash": config_hash(config.to_dict()),
        "seed": args.seed,
        "variant": "ae",
        "best_epoch": history.best_epoch,
    }
    torch.save(
        {
            "format_version": 1,
            "ae_config": ae.config.__dict__,
            "state": ae.state_dict(),
            "event_vocab_hash": dataset.vocab.event_hash(),
            "question_vocab_hash": dataset.vocab.question_hash(),
            "meta": meta,
        },
        args.out,
    )
    if args.history:
        _write_history(args.history, [history], meta)
    print(f"checkpoint: {args.out} (best epoch {history.best_epoch}, val {history.best_val_loss:.6f})")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    values = _load_values(args.config)
    config = _experiment_config(args, values)
    if args.matrix:
        if not args.out_dir:
            raise ConfigError("--matrix requires --out-dir")
        results = ev.run_ablation_matrix(dataset, config, args.out_dir)
        for name, result in results.items():
            summary = result.summary
            print(
                f"{name}: test AUC {summary['mean_test_auc']:.4f} "
                f"± {summary['std_test_auc']:.4f}"
            )
        return EXIT_OK
    result = ev.run_experiment(dataset, config)
    if args.out:
        result.save(args.out)
        print(f"results: {args.out}")
    summary = result.summary
    print(
        f"{config.task}/{config.model}: test AUC {summary['mean_test_auc']:.4f} "
        f"± {summary['std_test_auc']:.4f} over {config.folds} folds"
    )
    return EXIT_OK


def _cmd_export_vectors(args) -> int:
    dataset = NormalizedDataset.load(args.dataset)
    bundle = load_checkpoint(args.checkpoint, dataset.vocab)
    variant = bundle.meta.get("variant")
    meta = {
        "config_hash": bundle.meta.get("config_hash", ""),
        "seed": bundle.meta.get("seed", ""),
    }
    if args.level == "question":
        if variant != "irt_behavior":
            raise ContractViolation(
                f"question-level export needs a behavior-model checkpoint, got {variant!r}"
            )
        students = bundle.meta.get("students", dataset.students)
        model = BehaviorIRTModel(bundle.encoder, students, dataset.vocab.questions)
        model.load_state_dict(bundle.extras["model"])
        pairs = [PairExample(s, q, y, seq) for s, q, y, seq in dataset.irt_pairs()]
        export_question_vectors(model, pairs, args.out, meta)
    else:
        if variant != "student_level":
            raise ContractViolation(
                f"student-level export needs a student-level checkpoint, got {variant!r}"
            )
        model = StudentLevelModel(
            bundle.encoder,
            aggregator_hidden=int(bundle.meta.get("aggregator_hidden", 64)),
            out_dim=int(bundle.meta.get("out_dim", 1)),
        )
        model.load_state_dict(bundle.extras["model"])
        examples = build_visit_examples(dataset, dataset.students)
        export_student_vectors(model, examples, dataset.labels.score, args.out, meta)
    print(f"vectors: {args.out}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    table = load_vector_table(args.vectors)
    coords = embed_2d(table.vectors, perplexity=args.perplexity, seed=args.seed)
    meta = {
        "config_hash": table.meta.get("config_hash", ""),
        "seed": args.seed,
    }
    color_by = args.color or ("behavior" if table.level == "question" else "label")
    render_plot(
        coords,
        table,
        args.out,
        color_by=color_by,
        subsample=args.subsample,
        seed=args.seed,
        meta=meta,
    )
    print(f"plot: {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="procrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort with planted truth")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("ingest", help="parse a raw log into a normalized dataset")
    p.add_argument("--log", required=True)
    p.add_argument("--answer-key", required=True)
    p.add_argument("--block-map", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.add_argument("--issues")
    p.add_argument("--block-time-limit", type=float, default=1800.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("pretrain", help="self-supervised pre-training of the encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--ablate", action="append")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("transfer", help="train the outcome-prediction transfer model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=("score", "per_question"), default="score")
    p.add_argument("--student-level", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--ablate", action="append")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("irt", help="fit item response models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--behavior", action="store_true")
    p.add_argument("--checkpoint")
    p.add_argument("--model-out")
    p.add_argument("--history")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--ablate", action="append")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_irt)

    p = sub.add_parser("baseline", help="train the sequence-autoencoder baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("evaluate", help="run cross-validated experiments")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--task", choices=ev.TASKS)
    p.add_argument("--model", choices=ev.MODELS)
    p.add_argument("--folds", type=int)
    p.add_argument("--ablate", action="append")
    p.add_argument("--out")
    p.add_argument("--matrix", action="store_true")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export-vectors", help="export representation vectors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--level", choices=("question", "student"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_export_vectors)

    p = sub.add_parser("plot", help="embed exported vectors in 2-D and plot")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--color", choices=("behavior", "label"))
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ProcrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
