"""Synthetic cohort generator with planted ground truth.

Students get abilities and questions get difficulties drawn from N(0, 1).
Each student belongs to a behavioral archetype that shapes pacing, event
volume, revisits, and tool usage. On top of the 1PL correctness model,
per-(student, question) behavior acts perturb the outcome: using a tool adds
a bonus to the logit and rushing subtracts a penalty, and both leave visible
traces in the event stream. Because the acts are resampled per question they
cannot be absorbed into a per-student ability term.

Planted response statuses are not asserted independently: the generator
replays its own emitted events through the same segmentation and replay
engine used at ingestion, so a parsed log reproduces the planted statuses
exactly by construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import config_hash, derive_seed, parse_weights
from .errors import ConfigError, GenerationError
from .ingest import (
    AnswerKeyEntry,
    RawEvent,
    ResponseStatus,
    assign_statuses,
    final_statuses,
    save_answer_key,
    save_block_map,
    segment_visits,
)
from .schema import DEFAULT_SCHEMA, LogSchema


@dataclass(frozen=True)
class ArchetypeParams:
    gap_mean: float
    gap_sigma: float
    event_mult: float
    revisit_prob: float
    tool_affinity: float
    rush_prob: float
    overtime: bool = False


ARCHETYPES: dict[str, ArchetypeParams] = {
    "rapid": ArchetypeParams(2.0, 0.45, 0.7, 0.05, 0.10, 0.50),
    "tool_user": ArchetypeParams(5.0, 0.50, 1.0, 0.10, 0.85, 0.10),
    "checker": ArchetypeParams(4.5, 0.50, 1.1, 0.55, 0.15, 0.08),
    "time_runner_out": ArchetypeParams(9.0, 0.60, 1.25, 0.10, 0.15, 0.10, overtime=True),
    "high_effort": ArchetypeParams(6.5, 0.50, 1.6, 0.20, 0.20, 0.03),
}

DEFAULT_MIX = "rapid:1,tool_user:1,checker:1,time_runner_out:1,high_effort:1"

QUESTION_TYPE_CYCLE = ("multiple_choice", "fill_in", "matching")


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 100
    n_questions_a: int = 12
    n_questions_b: int = 12
    block_time_limit: float = 1800.0
    archetype_mix: str = DEFAULT_MIX
    tool_bonus: float = 1.5
    rush_penalty: float = 1.5
    behavior_scale: float = 1.0
    ability_sd: float = 1.0
    difficulty_sd: float = 1.0

    def __post_init__(self) -> None:
        if self.n_students < 1:
            raise ConfigError("n_students must be positive")
        if self.n_questions_a < 1 or self.n_questions_b < 1:
            raise ConfigError("each block needs at least one question")
        if self.block_time_limit <= 0:
            raise ConfigError("block_time_limit must be positive")
        if self.ability_sd < 0 or self.difficulty_sd < 0:
            raise ConfigError("ability_sd and difficulty_sd must be nonnegative")
        for name in parse_weights(self.archetype_mix):
            if name not in ARCHETYPES:
                raise ConfigError(f"unknown archetype {name!r}")

    @classmethod
    def from_values(cls, values: Mapping[str, str]) -> "SynthConfig":
        kwargs = {}
        for name, caster in (
            ("n_students", int),
            ("n_questions_a", int),
            ("n_questions_b", int),
            ("block_time_limit", float),
            ("archetype_mix", str),
            ("tool_bonus", float),
            ("rush_penalty", float),
            ("behavior_scale", float),
            ("ability_sd", float),
            ("difficulty_sd", float),
        ):
            if name in values:
                try:
                    kwargs[name] = caster(values[name])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {name}: {values[name]!r}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "n_students": self.n_students,
            "n_questions_a": self.n_questions_a,
            "n_questions_b": self.n_questions_b,
            "block_time_limit": self.block_time_limit,
            "archetype_mix": self.archetype_mix,
            "tool_bonus": self.tool_bonus,
            "rush_penalty": self.rush_penalty,
            "behavior_scale": self.behavior_scale,
            "ability_sd": self.ability_sd,
            "difficulty_sd": self.difficulty_sd,
        }


@dataclass
class GroundTruth:
    abilities: dict[str, float]
    difficulties: dict[str, float]
    archetypes: dict[str, str]
    acts: dict[str, dict[str, dict[str, int]]]
    b_effects: dict[str, dict[str, float]]
    intended: dict[str, dict[str, str]]
    planted: dict[str, dict[str, str]]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "abilities": dict(sorted(self.abilities.items())),
            "difficulties": dict(sorted(self.difficulties.items())),
            "archetypes": dict(sorted(self.archetypes.items())),
            "acts": {s: dict(sorted(v.items())) for s, v in sorted(self.acts.items())},
            "b_effects": {s: dict(sorted(v.items())) for s, v in sorted(self.b_effects.items())},
            "intended": {s: dict(sorted(v.items())) for s, v in sorted(self.intended.items())},
            "planted": {s: dict(sorted(v.items())) for s, v in sorted(self.planted.items())},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            abilities=data["abilities"],
            difficulties=data["difficulties"],
            archetypes=data["archetypes"],
            acts=data["acts"],
            b_effects=data["b_effects"],
            intended=data["intended"],
            planted=data["planted"],
            meta=data.get("meta", {}),
        )


@dataclass
class Cohort:
    config: SynthConfig
    seed: int
    groups: dict[str, list[RawEvent]]
    answer_key: dict[str, AnswerKeyEntry]
    block_map: dict[str, str]
    truth: GroundTruth
    schema: LogSchema


@dataclass
class _Question:
    qid: str
    block: str
    qtype: str
    correct: dict[str, str]
    wrong: dict[str, str]
    required: tuple[str, ...]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def _build_questions(config: SynthConfig, rng: np.random.Generator) -> list[_Question]:
    questions = []
    specs = [("A", i) for i in range(config.n_questions_a)] + [
        ("B", i) for i in range(config.n_questions_b)
    ]
    for block, i in specs:
        qid = f"q{block.lower()}{i:03d}"
        qtype = QUESTION_TYPE_CYCLE[i % len(QUESTION_TYPE_CYCLE)]
        if qtype == "multiple_choice":
            correct_idx = int(rng.integers(0, 4))
            wrong_idx = (correct_idx + 1 + int(rng.integers(0, 3))) % 4
            questions.append(
                _Question(
                    qid,
                    block,
                    qtype,
                    correct={"response": f"choice_{correct_idx}"},
                    wrong={"response": f"choice_{wrong_idx}"},
                    required=("response",),
                )
            )
        elif qtype == "fill_in":
            answer = f"ans_{qid}_{int(rng.integers(10, 100))}"
            # wrong answer differs at position 0 so no partial prefix of either
            # can replay to the other under event truncation
            questions.append(
                _Question(
                    qid,
                    block,
                    qtype,
                    correct={"text": answer},
                    wrong={"text": "z" + answer[1:]},
                    required=("text",),
                )
            )
        else:
            values = [f"m{j}" for j in rng.permutation(4)[:2]]
            questions.append(
                _Question(
                    qid,
                    block,
                    qtype,
                    correct={"slot_0": values[0], "slot_1": values[1]},
                    wrong={"slot_0": values[1], "slot_1": values[0]},
                    required=("slot_0", "slot_1"),
                )
            )
    return questions


def _answer_events(
    question: _Question, target: Mapping[str, str], rng: np.random.Generator
) -> list[tuple[str, dict]]:
    """Events that carry the working response to ``target`` for this question."""
    if question.qtype == "multiple_choice":
        return [("select_choice", {"field": "response", "value": target["response"]})]
    if question.qtype == "matching":
        return [
            ("place_match", {"field": "slot_0", "value": target["slot_0"]}),
            ("place_match", {"field": "slot_1", "value": target["slot_1"]}),
        ]
    text = target["text"]
    n_chunks = int(rng.integers(1, 4))
    cuts = sorted(rng.choice(np.arange(1, len(text)), size=n_chunks - 1, replace=False)) if n_chunks > 1 else []
    pieces, prev = [], 0
    for cut in [*cuts, len(text)]:
        pieces.append(text[prev:cut])
        prev = cut
    return [("type_text", {"field": "text", "value": piece}) for piece in pieces]


def _retype_events(
    question: _Question, target: Mapping[str, str], rng: np.random.Generator
) -> list[tuple[str, dict]]:
    """Correction events: reset appended text first, then answer fresh."""
    events: list[tuple[str, dict]] = []
    if question.qtype == "fill_in":
        events.append(("clear_text", {"field": "text"}))
    events.extend(_answer_events(question, target, rng))
    return events


def _visit_plan(
    question: _Question,
    target: Mapping[str, str],
    params: ArchetypeParams,
    tool_act: bool,
    rush_act: bool,
    rng: np.random.Generator,
    correction: bool = False,
) -> list[tuple[str, dict]]:
    events: list[tuple[str, dict]] = [("view_question", {})]
    if tool_act:
        events.append(("open_tool", {}))
        if rng.random() < 0.7:
            events.append(("close_tool", {}))
    n_scratch = rng.binomial(3, min(1.0, 0.25 * params.event_mult))
    if rush_act:
        n_scratch = 0
    events.extend([("scratch_work", {})] * int(n_scratch))
    if correction:
        events.extend(_retype_events(question, target, rng))
    else:
        events.extend(_answer_events(question, target, rng))
    if not rush_act and rng.random() < 0.15 * params.event_mult:
        events.append(("flag_item", {}))
    return events


def generate_cohort(config: SynthConfig, seed: int) -> Cohort:
    """Generate a full synthetic cohort with planted, replay-derived statuses."""
    rng = np.random.default_rng(derive_seed(seed, "synthgen"))
    questions = _build_questions(config, rng)
    by_block = {
        "A": [q for q in questions if q.block == "A"],
        "B": [q for q in questions if q.block == "B"],
    }
    block_map = {q.qid: q.block for q in questions}
    answer_key = {
        q.qid: AnswerKeyEntry(required_fields=q.required, acceptable_answers=(dict(q.correct),))
        for q in questions
    }

    mix = parse_weights(config.archetype_mix)
    names = sorted(mix)
    probs = np.array([mix[n] for n in names], dtype=float)
    probs /= probs.sum()

    abilities = {
        f"s{i:04d}": config.ability_sd * float(rng.standard_normal())
        for i in range(config.n_students)
    }
    difficulties = {
        q.qid: config.difficulty_sd * float(rng.standard_normal()) for q in questions
    }

    archetypes: dict[str, str] = {}
    acts: dict[str, dict[str, dict[str, int]]] = {}
    b_effects: dict[str, dict[str, float]] = {}
    intended: dict[str, dict[str, str]] = {}
    groups: dict[str, list[RawEvent]] = {}
    truncated: set[tuple[str, str]] = set()
    block_starts = {"A": 0.0, "B": config.block_time_limit}

    for student in sorted(abilities):
        srng = np.random.default_rng(derive_seed(seed, "student", student))
        archetype = names[int(srng.choice(len(names), p=probs))]
        params = ARCHETYPES[archetype]
        archetypes[student] = archetype
        acts[student] = {}
        b_effects[student] = {}
        intended[student] = {}
        events: list[RawEvent] = []

        for block in ("A", "B"):
            block_questions = by_block[block]
            # plan visits first (events without times), then lay out the clock
            planned: list[list[tuple[str, dict]]] = []
            visit_meta: list[_Question] = []
            revisit_queue: list[tuple[_Question, Mapping[str, str]]] = []
            for question in block_questions:
                tool_act = int(srng.random() < params.tool_affinity)
                rush_act = int(srng.random() < params.rush_prob)
                acts[student][question.qid] = {"tool_use": tool_act, "rush": rush_act}
                b_ij = config.behavior_scale * (
                    config.tool_bonus * tool_act - config.rush_penalty * rush_act
                )
                b_effects[student][question.qid] = b_ij
                p = _sigmoid(abilities[student] - difficulties[question.qid] + b_ij)
                target_status = "correct" if srng.random() < p else "incorrect"
                intended[student][question.qid] = target_status
                final = question.correct if target_status == "correct" else question.wrong

                # overtime students never get back to fix answers
                will_revisit = srng.random() < params.revisit_prob and not params.overtime
                if will_revisit:
                    provisional = question.wrong if target_status == "correct" else question.correct
                    planned.append(
                        _visit_plan(question, provisional, params, tool_act, rush_act, srng)
                    )
                    revisit_queue.append((question, final))
                else:
                    planned.append(_visit_plan(question, final, params, tool_act, rush_act, srng))
                visit_meta.append(question)
            for question, final in revisit_queue:
                planned.append(
                    _visit_plan(question, final, params, False, False, srng, correction=True)
                )
                visit_meta.append(question)

            # convert plans to timestamps that fill a target share of the block
            gaps: list[float] = []
            for vi, plan in enumerate(planned):
                qid = visit_meta[vi].qid
                rushed = bool(acts[student][qid]["rush"])
                scale = 0.35 if rushed else 1.0
                gaps.append(float(srng.lognormal(np.log(3.0), 0.4)))  # transition gap
                for _ in plan:
                    gaps.append(scale * float(srng.lognormal(np.log(params.gap_mean), params.gap_sigma)))
            if params.overtime:
                fill = float(srng.uniform(1.15, 1.35))
            else:
                fill = float(srng.uniform(0.55, 0.90))
            total = sum(gaps)
            time_scale = fill * config.block_time_limit / total
            cutoff = block_starts[block] + config.block_time_limit - 0.5

            clock = block_starts[block]
            gap_iter = iter(gaps)
            for vi, plan in enumerate(planned):
                question = visit_meta[vi]
                clock += next(gap_iter) * time_scale
                for event_type, extra in plan:
                    clock += next(gap_iter) * time_scale
                    if clock > cutoff:
                        truncated.add((student, question.qid))
                        continue  # out of time: event never happens
                    events.append(
                        RawEvent(
                            student_id=student,
                            question_id=question.qid,
                            question_type=question.qtype,
                            event_type=event_type,
                            timestamp=round(clock, 3),
                        extra=dict(extra),
                        )
                    )

        events.sort(key=lambda e: e.timestamp)
        for first, second in zip(events, events[1:]):
            if second.timestamp <= first.timestamp:
                second.timestamp = round(first.timestamp + 0.001, 3)
        groups[student] = events

    # replay the emitted events through the shared engine; what it says IS the truth
    planted: dict[str, dict[str, str]] = {}
    schema = DEFAULT_SCHEMA
    for student, events in groups.items():
        visits = segment_visits(events)
        assign_statuses(visits, answer_key, schema)
        finals = final_statuses(visits).get(student, {})
        planted[student] = {q: status.label for q, status in finals.items()}
        for qid, status in finals.items():
            if (student, qid) in truncated:
                continue  # ran out of time: replay result stands as truth
            wanted = intended[student][qid]
            if status.label != wanted:
                raise GenerationError(
                    f"{student}/{qid}: emitted events replay to {status.label}, "
                    f"but {wanted} was intended"
                )

    truth = GroundTruth(
        abilities=abilities,
        difficulties=difficulties,
        archetypes=archetypes,
        acts=acts,
        b_effects=b_effects,
        intended=intended,
        planted=planted,
        meta={"seed": seed, "config": config.to_dict(), "config_hash": config_hash(config.to_dict())},
    )
    return Cohort(
        config=config,
        seed=seed,
        groups=groups,
        answer_key=answer_key,
        block_map=block_map,
        truth=truth,
        schema=schema,
    )


def write_cohort(cohort: Cohort, outdir: str | Path) -> dict[str, Path]:
    """Write the cohort artifacts: raw log, answer key, block map, truth, schema."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cohort.config.to_dict())
    meta = {"seed": cohort.seed, "config_hash": chash}

    log_path = outdir / "log.csv"
    with log_path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# config_hash={chash}\n")
        handle.write(f"# seed={cohort.seed}\n")
        handle.write(",".join(cohort.schema.columns) + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        for student in sorted(cohort.groups):
            for event in cohort.groups[student]:
                writer.writerow(
                    [
                        event.student_id,
                        event.question_id,
                        event.question_type,
                        event.event_type,
                        repr(event.timestamp),
                        json.dumps(event.extra, sort_keys=True) if event.extra else "",
                    ]
                )

    paths = {"log": log_path}
    paths["answer_key"] = outdir / "answer_key.json"
    save_answer_key(cohort.answer_key, paths["answer_key"], meta=meta)
    paths["block_map"] = outdir / "block_map.json"
    save_block_map(cohort.block_map, paths["block_map"], meta=meta)
    paths["ground_truth"] = outdir / "ground_truth.json"
    cohort.truth.save(paths["ground_truth"])
    paths["schema"] = outdir / "schema.json"
    cohort.schema.save(paths["schema"])
    return paths
