"""Clickstream log ingestion: parsing, visit segmentation, response replay, labels.

The pipeline is: ``parse_log`` groups raw rows per student, ``segment_visits``
cuts each student's log into contiguous per-question visits, response statuses
are replayed against the answer key (the working response state persists across
revisits of the same question), and ``build_dataset`` indexes everything into a
normalized, versioned dataset with embedded vocabularies.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DataError, EncodingError, ParseError
from .schema import LogSchema, apply_mutation

DATASET_FORMAT_VERSION = 1

UNK_EVENT = "<unk>"


class ResponseStatus(IntEnum):
    CORRECT = 0
    INCORRECT = 1
    INCOMPLETE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "ResponseStatus":
        try:
            return cls[label.upper()]
        except KeyError as exc:
            raise DataError(f"unknown response status {label!r}") from exc


@dataclass
class RawEvent:
    """One logged student action, as read from the raw log."""

    student_id: str
    question_id: str
    question_type: str
    event_type: str
    timestamp: float
    extra: dict[str, object] = field(default_factory=dict)


@dataclass
class ParseIssue:
    row: int
    column: str
    message: str


@dataclass(frozen=True)
class AnswerKeyEntry:
    required_fields: tuple[str, ...]
    acceptable_answers: tuple[Mapping[str, str], ...]


@dataclass
class Visit:
    """A maximal contiguous run of one student's events on one question."""

    student_id: str
    question_id: str
    question_type: str
    events: list[RawEvent]
    status: ResponseStatus | None = None


@dataclass
class ProcEvent:
    """Normalized event: vocabulary indices, block-relative time, status."""

    a: int
    m: float
    q: int
    c: int


@dataclass
class QuestionSequence:
    """All of one student's visits to one question, concatenated in visit order."""

    student_id: str
    question_id: str
    block: str
    events: list[ProcEvent]
    visit_slices: list[tuple[int, int]]

    def visits(self) -> list[list[ProcEvent]]:
        return [self.events[a:b] for a, b in self.visit_slices]


@dataclass(frozen=True)
class Vocabulary:
    """Event-type and question-id vocabularies; event index 0 is reserved for UNK."""

    event_types: tuple[str, ...]
    questions: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.event_types or self.event_types[0] != UNK_EVENT:
            raise ConfigError("event vocabulary must reserve index 0 for UNK")

    def event_index(self, event_type: str) -> int:
        try:
            return self._event_lookup[event_type]
        except KeyError:
            return 0

    def question_index(self, question_id: str) -> int:
        try:
            return self._question_lookup[question_id]
        except KeyError as exc:
            raise EncodingError(f"question {question_id!r} not in vocabulary") from exc

    @property
    def _event_lookup(self) -> dict[str, int]:
        lookup = self.__dict__.get("_event_lookup_cache")
        if lookup is None:
            lookup = {name: i for i, name in enumerate(self.event_types)}
            self.__dict__["_event_lookup_cache"] = lookup
        return lookup

    @property
    def _question_lookup(self) -> dict[str, int]:
        lookup = self.__dict__.get("_question_lookup_cache")
        if lookup is None:
            lookup = {name: i for i, name in enumerate(self.questions)}
            self.__dict__["_question_lookup_cache"] = lookup
        return lookup

    def event_hash(self) -> str:
        return _hash_entries(self.event_types)

    def question_hash(self) -> str:
        return _hash_entries(self.questions)


def _hash_entries(entries: Iterable[str]) -> str:
    joined = "\x1f".join(entries)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def load_answer_key(path: str | Path) -> dict[str, AnswerKeyEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"answer key not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    key: dict[str, AnswerKeyEntry] = {}
    for qid, entry in data["questions"].items():
        if qid in key:
            raise DataError(f"question {qid} appears twice in answer key")
        key[qid] = AnswerKeyEntry(
            required_fields=tuple(entry["required_fields"]),
            acceptable_answers=tuple(
                {str(k): str(v) for k, v in answer.items()}
                for answer in entry["acceptable_answers"]
            ),
        )
    return key


def save_answer_key(key: Mapping[str, AnswerKeyEntry], path: str | Path, meta: Mapping | None = None) -> None:
    payload = {
        "meta": dict(meta or {}),
        "questions": {
            qid: {
                "required_fields": list(entry.required_fields),
                "acceptable_answers": [dict(a) for a in entry.acceptable_answers],
            }
            for qid, entry in sorted(key.items())
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_block_map(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"block map not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    blocks = data["blocks"] if "blocks" in data else data
    out = {}
    for qid, block in blocks.items():
        if block not in ("A", "B"):
            raise DataError(f"block map entry {qid}: block must be A or B, got {block!r}")
        out[qid] = block
    return out


def save_block_map(block_map: Mapping[str, str], path: str | Path, meta: Mapping | None = None) -> None:
    payload = {"meta": dict(meta or {}), "blocks": dict(sorted(block_map.items()))}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_log(
    path: str | Path, schema: LogSchema
) -> tuple[dict[str, list[RawEvent]], list[ParseIssue]]:
    """Parse a raw event log into per-student groups sorted by timestamp.

    Malformed rows are collected into the issue report rather than aborting
    the parse; a missing or wrong header is fatal. Lines starting with ``#``
    are provenance comments and are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"log file not found: {path}")

    issues: list[ParseIssue] = []
    groups: dict[str, list[RawEvent]] = {}
    header_seen = False
    columns = schema.columns
    n_cols = len(columns)
    ts_col = columns.index("timestamp_seconds")

    with path.open(encoding="utf-8", newline="") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            row = next(csv.reader([line]))
            if not header_seen:
                missing = [c for c in columns if c not in row]
                if missing:
                    raise ParseError(
                        f"{path}: header at line {lineno} missing required column(s) "
                        + ", ".join(missing)
                    )
                if tuple(row) != columns:
                    raise ParseError(
                        f"{path}: header column order {row} does not match schema {list(columns)}"
                    )
                header_seen = True
                continue

            if len(row) != n_cols:
                issues.append(ParseIssue(lineno, "<row>", f"expected {n_cols} fields, got {len(row)}"))
                continue
            record = dict(zip(columns, row))
            try:
                timestamp = float(record["timestamp_seconds"])
            except ValueError:
                issues.append(
                    ParseIssue(lineno, "timestamp_seconds", f"non-numeric timestamp {row[ts_col]!r}")
                )
                continue
            if timestamp < 0:
                issues.append(ParseIssue(lineno, "timestamp_seconds", "negative timestamp"))
                continue
            if not record["student_id"]:
                issues.append(ParseIssue(lineno, "student_id", "empty student id"))
                continue
            if not record["question_id"]:
                issues.append(ParseIssue(lineno, "question_id", "empty question id"))
                continue
            if record["question_type"] not in schema.question_types:
                issues.append(
                    ParseIssue(lineno, "question_type", f"unknown question type {record['question_type']!r}")
                )
                continue
            extra: dict[str, object] = {}
            if record["extra_json"]:
                try:
                    decoded = json.loads(record["extra_json"])
                except json.JSONDecodeError:
                    issues.append(ParseIssue(lineno, "extra_json", "invalid JSON payload"))
                    continue
                if not isinstance(decoded, dict):
                    issues.append(ParseIssue(lineno, "extra_json", "payload must be an object"))
                    continue
                extra = decoded

            groups.setdefault(record["student_id"], []).append(
                RawEvent(
                    student_id=record["student_id"],
                    question_id=record["question_id"],
                    question_type=record["question_type"],
                    event_type=record["event_type"],
                    timestamp=timestamp,
                    extra=extra,
                )
            )

    if not header_seen and (issues or groups):
        raise ParseError(f"{path}: no header row found")
    for events in groups.values():
        events.sort(key=lambda e: e.timestamp)  # stable: ties keep log order
    return groups, issues


def segment_visits(events: Sequence[RawEvent]) -> list[Visit]:
    """Partition one student's timestamp-sorted events into contiguous visits."""
    visits: list[Visit] = []
    for event in events:
        if visits and visits[-1].question_id == event.question_id:
            visits[-1].events.append(event)
        else:
            visits.append(
                Visit(
                    student_id=event.student_id,
                    question_id=event.question_id,
                    question_type=event.question_type,
                    events=[event],
                )
            )
    return visits


def assign_response_status(
    visit: Visit,
    key: Mapping[str, AnswerKeyEntry],
    schema: LogSchema,
    state: dict[str, str] | None = None,
) -> ResponseStatus:
    """Replay a visit's events onto the working response state and grade it.

    ``state`` carries the response across earlier visits to the same question;
    pass the same dict for each visit of one (student, question) pair. The
    resulting status is stored on the visit (and, by construction, applies to
    every event in it).
    """
    if not visit.events:
        raise ContractViolation("cannot assign a status to an empty visit")
    if state is None:
        state = {}
    for event in visit.events:
        apply_mutation(state, event.event_type, event.extra, schema)

    entry = key.get(visit.question_id)
    if entry is None:
        status = ResponseStatus.INCOMPLETE  # unknown questions are never gradable
    elif any(fld not in state for fld in entry.required_fields):
        status = ResponseStatus.INCOMPLETE
    else:
        matched = any(
            all(state.get(fld) == answer.get(fld) for fld in entry.required_fields)
            for answer in entry.acceptable_answers
        )
        status = ResponseStatus.CORRECT if matched else ResponseStatus.INCORRECT
    visit.status = status
    return status


def assign_statuses(
    visits: Sequence[Visit], key: Mapping[str, AnswerKeyEntry], schema: LogSchema
) -> None:
    """Assign statuses to visits in order, threading response state per question."""
    states: dict[tuple[str, str], dict[str, str]] = {}
    for visit in visits:
        state = states.setdefault((visit.student_id, visit.question_id), {})
        assign_response_status(visit, key, schema, state)


def final_statuses(visits: Sequence[Visit]) -> dict[str, dict[str, ResponseStatus]]:
    """Final (last-visit) status per student and question."""
    out: dict[str, dict[str, ResponseStatus]] = {}
    for visit in visits:
        if visit.status is None:
            raise ContractViolation("visit has no status assigned")
        out.setdefault(visit.student_id, {})[visit.question_id] = visit.status
    return out


def build_question_sequences(
    visits: Sequence[Visit],
    block_map: Mapping[str, str],
    vocab: Vocabulary,
    block_offsets: Mapping[str, float],
) -> list[QuestionSequence]:
    """Concatenate each student's visits per question into indexed sequences.

    Event times are rebased to seconds since the block's start so that every
    sequence lives in ``[0, block_time_limit]``.
    """
    order: list[tuple[str, str]] = []
    grouped: dict[tuple[str, str], list[Visit]] = {}
    for visit in visits:
        if visit.status is None:
            raise ContractViolation("visits must have statuses before sequence building")
        pair = (visit.student_id, visit.question_id)
        if pair not in grouped:
            grouped[pair] = []
            order.append(pair)
        grouped[pair].append(visit)

    sequences = []
    for student_id, question_id in order:
        block = block_map.get(question_id)
        if block is None:
            raise ConfigError(f"question {question_id!r} missing from block map")
        offset = block_offsets[block]
        q_index = vocab.question_index(question_id)
        events: list[ProcEvent] = []
        slices: list[tuple[int, int]] = []
        for visit in grouped[(student_id, question_id)]:
            start = len(events)
            for raw in visit.events:
                events.append(
                    ProcEvent(
                        a=vocab.event_index(raw.event_type),
                        m=raw.timestamp - offset,
                        q=q_index,
                        c=int(visit.status),
                    )
                )
            slices.append((start, len(events)))
        sequences.append(QuestionSequence(student_id, question_id, block, events, slices))
    return sequences


@dataclass
class Labels:
    score: dict[str, int]
    per_question: dict[str, dict[str, int]]
    block_b_questions: tuple[str, ...]


def derive_labels(
    statuses: Mapping[str, Mapping[str, ResponseStatus]], block_map: Mapping[str, str]
) -> Labels:
    """Score label (strictly above cohort-mean block-B correct count) and
    per-question block-B correctness indicators. Incomplete and unvisited
    questions count as incorrect."""
    block_b = tuple(sorted(q for q, b in block_map.items() if b == "B"))
    per_question: dict[str, dict[str, int]] = {}
    counts: dict[str, int] = {}
    for student, by_question in statuses.items():
        vector = {
            q: int(by_question.get(q) == ResponseStatus.CORRECT) for q in block_b
        }
        per_question[student] = vector
        counts[student] = sum(vector.values())
    mean = float(np.mean(list(counts.values()))) if counts else 0.0
    score = {s: int(c > mean) for s, c in counts.items()}
    return Labels(score=score, per_question=per_question, block_b_questions=block_b)


@dataclass
class NormalizedDataset:
    """Versioned, fully indexed dataset consumed by every downstream stage."""

    vocab: Vocabulary
    block_map: dict[str, str]
    block_time_limit: float
    sequences: dict[str, list[QuestionSequence]]
    labels: Labels
    partition: dict[str, str]
    statuses: dict[str, dict[str, int]]
    meta: dict = field(default_factory=dict)

    @property
    def students(self) -> list[str]:
        return sorted(self.sequences)

    @property
    def block_a_questions(self) -> tuple[str, ...]:
        return tuple(sorted(q for q, b in self.block_map.items() if b == "A"))

    @property
    def block_b_questions(self) -> tuple[str, ...]:
        return tuple(sorted(q for q, b in self.block_map.items() if b == "B"))

    def students_in(self, partition: str) -> list[str]:
        return sorted(s for s, p in self.partition.items() if p == partition)

    def sequences_for(
        self, students: Iterable[str], blocks: tuple[str, ...] = ("A", "B")
    ) -> list[QuestionSequence]:
        out = []
        for student in students:
            for seq in self.sequences.get(student, []):
                if seq.block in blocks:
                    out.append(seq)
        return out

    def student_question_map(self, student: str, block: str) -> dict[str, QuestionSequence]:
        return {
            seq.question_id: seq
            for seq in self.sequences.get(student, [])
            if seq.block == block
        }

    def irt_pairs(self) -> list[tuple[str, str, int, QuestionSequence]]:
        """All visited (student, question) pairs with binary correctness labels."""
        pairs = []
        for student in self.students:
            for seq in self.sequences[student]:
                status = self.statuses[student][seq.question_id]
                label = int(status == int(ResponseStatus.CORRECT))
                pairs.append((student, seq.question_id, label, seq))
        return pairs

    def to_dict(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "meta": self.meta,
            "block_time_limit": self.block_time_limit,
            "vocab": {
                "event_types": list(self.vocab.event_types),
                "questions": list(self.vocab.questions),
            },
            "block_map": dict(sorted(self.block_map.items())),
            "partition": dict(sorted(self.partition.items())),
            "students": {
                student: {
                    "sequences": [
                        {
                            "question_id": seq.question_id,
                            "block": seq.block,
                            "visits": [
                                [[e.a, e.m, e.q, e.c] for e in seq.events[a:b]]
                                for a, b in seq.visit_slices
                            ],
                        }
                        for seq in seqs
                    ]
                }
                for student, seqs in sorted(self.sequences.items())
            },
            "labels": {
                "score": dict(sorted(self.labels.score.items())),
                "per_question": {
                    s: dict(sorted(v.items()))
                    for s, v in sorted(self.labels.per_question.items())
                },
                "block_b_questions": list(self.labels.block_b_questions),
            },
            "statuses": {
                s: {q: ResponseStatus(c).label for q, c in sorted(v.items())}
                for s, v in sorted(self.statuses.items())
            },
        }

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NormalizedDataset":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"dataset file not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        version = data.get("format_version")
        if version != DATASET_FORMAT_VERSION:
            raise DataError(f"unsupported dataset version {version!r}")
        vocab = Vocabulary(
            event_types=tuple(data["vocab"]["event_types"]),
            questions=tuple(data["vocab"]["questions"]),
        )
        sequences: dict[str, list[QuestionSequence]] = {}
        for student, payload in data["students"].items():
            seqs = []
            for entry in payload["sequences"]:
                events: list[ProcEvent] = []
                slices: list[tuple[int, int]] = []
                for visit in entry["visits"]:
                    start = len(events)
                    events.extend(ProcEvent(a=e[0], m=e[1], q=e[2], c=e[3]) for e in visit)
                    slices.append((start, len(events)))
                seqs.append(
                    QuestionSequence(student, entry["question_id"], entry["block"], events, slices)
                )
            sequences[student] = seqs
        labels = Labels(
            score={s: int(v) for s, v in data["labels"]["score"].items()},
            per_question={
                s: {q: int(v) for q, v in vec.items()}
                for s, vec in data["labels"]["per_question"].items()
            },
            block_b_questions=tuple(data["labels"]["block_b_questions"]),
        )
        statuses = {
            s: {q: int(ResponseStatus.from_label(v)) for q, v in vec.items()}
            for s, vec in data["statuses"].items()
        }
        return cls(
            vocab=vocab,
            block_map=dict(data["block_map"]),
            block_time_limit=float(data["block_time_limit"]),
            sequences=sequences,
            labels=labels,
            partition=dict(data["partition"]),
            statuses=statuses,
            meta=dict(data.get("meta", {})),
        )


def build_dataset(
    groups: Mapping[str, Sequence[RawEvent]],
    key: Mapping[str, AnswerKeyEntry],
    block_map: Mapping[str, str],
    schema: LogSchema,
    *,
    block_time_limit: float,
    test_fraction: float = 0.2,
    seed: int = 0,
    meta: Mapping | None = None,
) -> NormalizedDataset:
    """Run the full normalization pipeline over parsed per-student groups.

    The event-type vocabulary is built from the training partition only;
    event types seen only in test students map to the reserved UNK index.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")

    students = sorted(groups)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(students))
    n_test = int(round(test_fraction * len(students)))
    test_set = {students[i] for i in perm[:n_test]}
    partition = {s: ("test" if s in test_set else "train") for s in students}

    all_visits: dict[str, list[Visit]] = {}
    for student in students:
        visits = segment_visits(groups[student])
        assign_statuses(visits, key, schema)
        all_visits[student] = visits

    train_event_types = sorted(
        {
            event.event_type
            for student in students
            if partition[student] == "train"
            for event in groups[student]
        }
    )
    vocab = Vocabulary(
        event_types=(UNK_EVENT, *train_event_types),
        questions=tuple(sorted(block_map)),
    )

    block_offsets = {"A": 0.0, "B": block_time_limit}
    sequences = {
        student: build_question_sequences(all_visits[student], block_map, vocab, block_offsets)
        for student in students
    }

    statuses_by_student: dict[str, dict[str, ResponseStatus]] = {}
    for student in students:
        statuses_by_student.update(final_statuses(all_visits[student]))
    labels = derive_labels(statuses_by_student, block_map)

    return NormalizedDataset(
        vocab=vocab,
        block_map=dict(block_map),
        block_time_limit=block_time_limit,
        sequences=sequences,
        labels=labels,
        partition=partition,
        statuses={
            s: {q: int(status) for q, status in v.items()}
            for s, v in statuses_by_student.items()
        },
        meta=dict(meta or {}),
    )
