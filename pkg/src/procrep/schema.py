"""Log schema descriptor: column layout plus the response-replay mutation table.

Different assessments log different event vocabularies, so the rules that
decide how an event mutates the student's working response are data, not
code: each rule names the mutation kind and the ``extra`` keys that carry
the target field and value. Event types without a rule never touch the
response state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

LOG_COLUMNS = (
    "student_id",
    "question_id",
    "question_type",
    "event_type",
    "timestamp_seconds",
    "extra_json",
)

QUESTION_TYPES = ("multiple_choice", "matching", "fill_in", "mixed")


class MutationOp(str, Enum):
    SET = "set"
    APPEND = "append"
    CLEAR = "clear"


@dataclass(frozen=True)
class MutationRule:
    """How one event type rewrites a field of the working response."""

    op: MutationOp
    field_key: str = "field"
    value_key: str = "value"


@dataclass(frozen=True)
class LogSchema:
    version: int = 1
    columns: tuple[str, ...] = LOG_COLUMNS
    question_types: tuple[str, ...] = QUESTION_TYPES
    mutations: Mapping[str, MutationRule] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "columns": list(self.columns),
            "question_types": list(self.question_types),
            "mutations": {
                name: {
                    "op": rule.op.value,
                    "field_key": rule.field_key,
                    "value_key": rule.value_key,
                }
                for name, rule in sorted(self.mutations.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogSchema":
        try:
            mutations = {
                name: MutationRule(
                    op=MutationOp(entry["op"]),
                    field_key=entry.get("field_key", "field"),
                    value_key=entry.get("value_key", "value"),
                )
                for name, entry in data.get("mutations", {}).items()
            }
            return cls(
                version=int(data.get("version", 1)),
                columns=tuple(data.get("columns", LOG_COLUMNS)),
                question_types=tuple(data.get("question_types", QUESTION_TYPES)),
                mutations=mutations,
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed schema descriptor: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "LogSchema":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"schema file not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def apply_mutation(
    state: dict[str, str], event_type: str, extra: Mapping[str, object], schema: LogSchema
) -> None:
    """Replay one event against the working response state, in place.

    Event types with no rule are no-ops, as are rule-bearing events whose
    ``extra`` payload is missing the field key.
    """
    rule = schema.mutations.get(event_type)
    if rule is None:
        return
    target = extra.get(rule.field_key)
    if target is None:
        return
    target = str(target)
    if rule.op is MutationOp.CLEAR:
        state.pop(target, None)
        return
    value = extra.get(rule.value_key)
    if value is None:
        return
    value = str(value)
    if rule.op is MutationOp.SET:
        state[target] = value
    elif rule.op is MutationOp.APPEND:
        state[target] = state.get(target, "") + value


DEFAULT_SCHEMA = LogSchema(
    mutations={
        "select_choice": MutationRule(MutationOp.SET),
        "place_match": MutationRule(MutationOp.SET),
        "type_text": MutationRule(MutationOp.APPEND),
        "clear_text": MutationRule(MutationOp.CLEAR),
    }
)
