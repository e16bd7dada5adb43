"""Self-supervised pre-training of the process encoder.

Each event is predicted from its leakage-free context: the event type and
response status with cross-entropy heads, and the time ratio

    r_t = (m_t - m_{t-1}) / (m_{t+1} - m_{t-1})

with a soft-target binary cross-entropy head. The composite loss sums the
enabled objectives over all real (non-padding) positions and normalizes by
the position count. An optional question-id objective supports the
student-level variant.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .config import derive_seed
from .errors import ConfigError, ContractViolation, TrainingDivergedError
from .ingest import QuestionSequence
from .process_model import EncoderConfig, LatentStates, ProcessEncoder, SequenceBatch

OBJECTIVES = ("event_type", "time", "status", "question_id")


def time_ratio(m: Sequence[float]) -> list[float]:
    """Time-ratio targets for one sequence of non-decreasing timestamps.

    Boundaries are forced to 0 and 1; a degenerate interior window
    (m_{t+1} == m_{t-1}) gets the symmetric target 0.5. A single-event
    sequence has only the leading boundary.
    """
    if not m:
        raise ContractViolation("time_ratio needs at least one timestamp")
    for prev, cur in zip(m, m[1:]):
        if cur < prev:
            raise ContractViolation("timestamps must be non-decreasing")
    n = len(m)
    if n == 1:
        return [0.0]
    out = [0.0] * n
    out[-1] = 1.0
    for t in range(1, n - 1):
        denom = m[t + 1] - m[t - 1]
        out[t] = 0.5 if denom <= 0 else (m[t] - m[t - 1]) / denom
    return out


def time_ratio_targets(batch: SequenceBatch, sequences: Sequence[QuestionSequence]) -> torch.Tensor:
    """Padded (B, T) tensor of per-position time-ratio targets."""
    targets = torch.zeros_like(batch.m)
    for i, seq in enumerate(sequences):
        ratios = time_ratio([e.m for e in seq.events])
        targets[i, : len(ratios)] = torch.tensor(ratios, dtype=targets.dtype)
    return targets


@dataclass(frozen=True)
class PretrainConfig:
    enable_event_type: bool = True
    enable_time: bool = True
    enable_status: bool = True
    enable_question_id: bool = False
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weights: Mapping[str, float] = field(
        default_factory=lambda: {name: 1.0 for name in OBJECTIVES}
    )

    def __post_init__(self) -> None:
        if not any(
            (self.enable_event_type, self.enable_time, self.enable_status, self.enable_question_id)
        ):
            raise ConfigError("at least one pre-training objective must be enabled")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        unknown = set(self.weights) - set(OBJECTIVES)
        if unknown:
            raise ConfigError(f"unknown objective weight(s): {sorted(unknown)}")

    def enabled(self) -> tuple[str, ...]:
        flags = {
            "event_type": self.enable_event_type,
            "time": self.enable_time,
            "status": self.enable_status,
            "question_id": self.enable_question_id,
        }
        return tuple(name for name in OBJECTIVES if flags[name])

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))


class PretrainHeads(nn.Module):
    """Linear prediction heads over the predictive context."""

    def __init__(self, context_dim: int, n_event_types: int, n_status: int = 3, n_questions: int | None = None):
        super().__init__()
        self.head_event = nn.Linear(context_dim, n_event_types)
        self.head_time = nn.Linear(context_dim, 1)
        self.head_status = nn.Linear(context_dim, n_status)
        self.head_question = nn.Linear(context_dim, n_questions) if n_questions else None


def check_status_consistency(encoder_config: EncoderConfig, config: PretrainConfig) -> None:
    if config.enable_status and not encoder_config.include_status:
        raise ConfigError(
            "status objective requires status inputs; disable the objective when "
            "the status input is ablated"
        )


def pretrain_loss(
    encoder: ProcessEncoder,
    heads: PretrainHeads,
    sequences: Sequence[QuestionSequence],
    config: PretrainConfig,
) -> tuple[torch.Tensor, dict[str, float], int]:
    """Composite loss over a batch: (total, per-objective means, token count).

    Every enabled objective is averaged over the same set of real positions,
    then combined with its weight; padding contributes exactly zero.
    """
    check_status_consistency(encoder.config, config)
    batch = SequenceBatch.from_sequences(sequences, encoder.config)
    states: LatentStates = encoder(batch)
    z = states.predictive_context()
    mask = states.mask
    n_tokens = int(mask.sum())

    total = z.new_zeros(())
    parts: dict[str, float] = {}
    flat_mask = mask.reshape(-1)

    def masked_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        per_pos = nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
        )
        return (per_pos * flat_mask.to(per_pos.dtype)).sum() / n_tokens

    enabled = config.enabled()
    if "event_type" in enabled:
        loss = masked_ce(heads.head_event(z), batch.a)
        total = total + config.weight("event_type") * loss
        parts["event_type"] = float(loss.detach())
    if "time" in enabled:
        ratios = time_ratio_targets(batch, sequences).to(z.dtype)
        logits = heads.head_time(z).squeeze(-1)
        per_pos = nn.functional.binary_cross_entropy_with_logits(
            logits, ratios, reduction="none"
        )
        loss = (per_pos * mask.to(per_pos.dtype)).sum() / n_tokens
        total = total + config.weight("time") * loss
        parts["time"] = float(loss.detach())
    if "status" in enabled:
        loss = masked_ce(heads.head_status(z), batch.c)
        total = total + config.weight("status") * loss
        parts["status"] = float(loss.detach())
    if "question_id" in enabled:
        if heads.head_question is None:
            raise ConfigError("question-id objective enabled but no question head built")
        loss = masked_ce(heads.head_question(z), batch.q)
        total = total + config.weight("question_id") * loss
        parts["question_id"] = float(loss.detach())
    return total, parts, n_tokens


def dataset_loss(
    encoder: ProcessEncoder,
    heads: PretrainHeads,
    sequences: Sequence[QuestionSequence],
    config: PretrainConfig,
) -> tuple[float, dict[str, float]]:
    """Token-weighted mean loss over a full sequence set, without gradients."""
    total = 0.0
    tokens = 0
    part_sums: dict[str, float] = {}
    with torch.no_grad():
        for start in range(0, len(sequences), config.batch_size):
            chunk = sequences[start : start + config.batch_size]
            loss, parts, n = pretrain_loss(encoder, heads, chunk, config)
            total += float(loss) * n
            tokens += n
            for name, value in parts.items():
                part_sums[name] = part_sums.get(name, 0.0) + value * n
    if tokens == 0:
        raise ContractViolation("loss over an empty sequence set is undefined")
    return total / tokens, {k: v / tokens for k, v in part_sums.items()}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_loss: float
    parts: dict[str, float]


@dataclass
class PhaseHistory:
    phase: str
    records: list[EpochRecord]
    best_epoch: int
    best_val_loss: float

    def to_rows(self) -> list[dict]:
        return [
            {
                "phase": self.phase,
                "epoch": r.epoch,
                "train_loss": "" if r.train_loss is None else f"{r.train_loss:.6f}",
                "val_loss": f"{r.val_loss:.6f}",
                **{f"val_{k}": f"{v:.6f}" for k, v in sorted(r.parts.items())},
            }
            for r in self.records
        ]


def run_pretraining(
    encoder: ProcessEncoder,
    heads: PretrainHeads,
    train_sequences: Sequence[QuestionSequence],
    val_sequences: Sequence[QuestionSequence],
    config: PretrainConfig,
    seed: int,
) -> PhaseHistory:
    """Minimize the composite loss; keep the epoch with the best validation loss.

    The pre-update state participates in selection as epoch 0, so the selected
    parameters never validate worse than the initialization.
    """
    check_status_consistency(encoder.config, config)
    if not train_sequences or not val_sequences:
        raise ContractViolation("pre-training needs non-empty train and validation sets")

    params = list(encoder.parameters()) + list(heads.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, "pretrain-shuffle"))

    def snapshot() -> tuple[dict, dict]:
        return (
            copy.deepcopy(encoder.state_dict()),
            copy.deepcopy(heads.state_dict()),
        )

    records: list[EpochRecord] = []
    val_loss, parts = dataset_loss(encoder, heads, val_sequences, config)
    records.append(EpochRecord(0, None, val_loss, parts))
    best = (val_loss, 0, snapshot())

    order = np.arange(len(train_sequences))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        encoder.train()
        heads.train()
        epoch_total = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_sequences[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss, _, n = pretrain_loss(encoder, heads, chunk, config)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"pre-training loss became non-finite at epoch {epoch}"
                )
            loss.backward()
            optimizer.step()
            epoch_total += float(loss.detach()) * n
            epoch_tokens += n
        encoder.eval()
        heads.eval()
        val_loss, parts = dataset_loss(encoder, heads, val_sequences, config)
        records.append(EpochRecord(epoch, epoch_total / max(epoch_tokens, 1), val_loss, parts))
        if val_loss < best[0]:
            best = (val_loss, epoch, snapshot())

    best_val, best_epoch, (enc_state, head_state) = best
    encoder.load_state_dict(enc_state)
    heads.load_state_dict(head_state)
    encoder.eval()
    heads.eval()
    return PhaseHistory("pretrain", records, best_epoch, best_val)
