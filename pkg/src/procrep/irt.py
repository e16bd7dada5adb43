"""1PL item response models, optionally augmented with a learned behavior scalar.

The base model predicts P(correct) = sigmoid(k_i - d_j) with per-student
ability k and per-question difficulty d, fitted by full-batch gradient descent
on binary cross-entropy. The behavior variant adds a scalar B_ij produced by
pooling the process encoder's states for student i's events on question j;
the encoder must be status-free, since response status would leak the label.
Logits are translation-invariant in (k, d), so abilities are anchored to mean
zero after fitting without changing any prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractViolation, LeakageError, TrainingDivergedError
from .ingest import QuestionSequence
from .process_model import ProcessEncoder, SequenceBatch
from .pretrain import PhaseHistory
from .transfer import AttentionPool, TransferConfig, fine_tune, train_transfer_frozen


def irt_prob(k, d, b=0.0):
    """P(Y=1) for ability k, difficulty d, and optional behavior shift b."""
    logit = np.asarray(k, dtype=float) - np.asarray(d, dtype=float) + np.asarray(b, dtype=float)
    return 1.0 / (1.0 + np.exp(-logit))


@dataclass(frozen=True)
class IRTConfig:
    lr: float = 0.05
    max_epochs: int = 5000
    tol: float = 1e-6
    clip: float = 10.0

    def __post_init__(self) -> None:
        if self.lr < 0 or self.max_epochs < 1 or self.tol <= 0 or self.clip <= 0:
            raise ConfigError("invalid IRT fitting configuration")


@dataclass
class IRTParams:
    k: dict[str, float]
    d: dict[str, float]
    meta: dict = field(default_factory=dict)

    def predict(self, student: str, question: str, b: float = 0.0) -> float:
        return float(irt_prob(self.k.get(student, 0.0), self.d.get(question, 0.0), b))

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            for key, value in sorted(self.meta.items()):
                handle.write(f"# {key}={value}\n")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["kind", "id", "value"])
            for student, value in sorted(self.k.items()):
                writer.writerow(["ability", student, f"{value:.6f}"])
            for question, value in sorted(self.d.items()):
                writer.writerow(["difficulty", question, f"{value:.6f}"])

    @classmethod
    def load(cls, path: str | Path) -> "IRTParams":
        k: dict[str, float] = {}
        d: dict[str, float] = {}
        with Path(path).open(encoding="utf-8") as handle:
            rows = [line for line in handle if line.strip() and not line.startswith("#")]
        for row in csv.reader(rows[1:]):
            kind, ident, value = row
            (k if kind == "ability" else d)[ident] = float(value)
        return cls(k=k, d=d)


def fit_base(
    responses: Sequence[tuple[str, str, int]],
    config: IRTConfig = IRTConfig(),
    b_offsets: Sequence[float] | None = None,
) -> tuple[IRTParams, list[float]]:
    """Full-batch BCE fit of abilities and difficulties.

    ``b_offsets`` holds fixed per-response behavior shifts; omitting it is
    identical to passing all zeros, which is how a frozen zero behavior head
    degenerates to the base model. Convergence is declared when the epoch
    loss moves by less than the tolerance; parameters are clipped to the
    configured bound to survive perfectly separated students or questions.
    """
    if not responses:
        raise ContractViolation("cannot fit an IRT model on zero responses")
    students = sorted({s for s, _, _ in responses})
    questions = sorted({q for _, q, _ in responses})
    s_index = {s: i for i, s in enumerate(students)}
    q_index = {q: i for i, q in enumerate(questions)}

    i_idx = torch.tensor([s_index[s] for s, _, _ in responses], dtype=torch.long)
    j_idx = torch.tensor([q_index[q] for _, q, _ in responses], dtype=torch.long)
    y = torch.tensor([float(c) for _, _, c in responses], dtype=torch.float64)
    offsets = torch.zeros(len(responses), dtype=torch.float64)
    if b_offsets is not None:
        if len(b_offsets) != len(responses):
            raise ContractViolation("behavior offsets must align with responses")
        offsets = torch.tensor(list(b_offsets), dtype=torch.float64)

    k = torch.zeros(len(students), dtype=torch.float64, requires_grad=True)
    d = torch.zeros(len(questions), dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([k, d], lr=config.lr)

    history: list[float] = []
    prev = float("inf")
    for _ in range(config.max_epochs):
        optimizer.zero_grad()
        logits = k[i_idx] - d[j_idx] + offsets
        loss = nn.functional.binary_cross_entropy_with_logits(logits, y)
        if not torch.isfinite(loss):
            raise TrainingDivergedError("IRT loss became non-finite")
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            k.clamp_(-config.clip, config.clip)
            d.clamp_(-config.clip, config.clip)
        current = float(loss.detach())
        history.append(current)
        if abs(prev - current) < config.tol:
            break
        prev = current

    with torch.no_grad():
        shift = float(k.mean())
        k -= shift
        d -= shift
    k_final = k.detach()
    d_final = d.detach()
    params = IRTParams(
        k={s: float(k_final[i]) for s, i in s_index.items()},
        d={q: float(d_final[i]) for q, i in q_index.items()},
    )
    return params, history


@dataclass
class PairExample:
    student_id: str
    question_id: str
    label: int
    sequence: QuestionSequence


class BehaviorIRTModel(nn.Module):
    """1PL logit shifted by a pooled-sequence behavior scalar.

    Carries ability/difficulty entries for the full roster so held-out pairs
    involving students unseen in training fall back to the anchored mean.
    """

    def __init__(self, encoder: ProcessEncoder, students: Sequence[str], questions: Sequence[str]):
        super().__init__()
        if encoder.config.include_status:
            raise LeakageError(
                "behavior model input must not contain response status features"
            )
        self.encoder = encoder
        self.pool = AttentionPool(encoder.context_dim)
        self.b_head = nn.Linear(encoder.context_dim, 1)
        self.students = tuple(students)
        self.questions = tuple(questions)
        self.s_index = {s: i for i, s in enumerate(self.students)}
        self.q_index = {q: i for i, q in enumerate(self.questions)}
        self.k = nn.Parameter(torch.zeros(len(self.students)))
        self.d = nn.Parameter(torch.zeros(len(self.questions)))

    def behavior(self, sequences: Sequence[QuestionSequence]) -> torch.Tensor:
        batch = SequenceBatch.from_sequences(sequences, self.encoder.config)
        states = self.encoder(batch)
        pooled, _ = self.pool(states.transfer_context(), states.mask)
        return self.b_head(pooled).squeeze(-1)

    def forward(self, examples: Sequence[PairExample]) -> torch.Tensor:
        b = self.behavior([e.sequence for e in examples])
        i_idx = torch.tensor([self.s_index[e.student_id] for e in examples], dtype=torch.long)
        j_idx = torch.tensor([self.q_index[e.question_id] for e in examples], dtype=torch.long)
        return self.k[i_idx] - self.d[j_idx] + b

    def batch_loss(self, examples: Sequence[PairExample], labels: torch.Tensor) -> torch.Tensor:
        return nn.functional.binary_cross_entropy_with_logits(self(examples), labels)

    def predict_proba(self, examples: Sequence[PairExample], batch_size: int = 64) -> np.ndarray:
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                outs.append(torch.sigmoid(self(examples[start : start + batch_size])))
        return torch.cat(outs, dim=0).numpy()

    def behavior_scalars(
        self, examples: Sequence[PairExample], batch_size: int = 64
    ) -> dict[tuple[str, str], float]:
        self.eval()
        out: dict[tuple[str, str], float] = {}
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start : start + batch_size]
                values = self.behavior([e.sequence for e in chunk])
                for example, value in zip(chunk, values):
                    out[(example.student_id, example.question_id)] = float(value)
        return out

    def anchor(self, trained_students: Sequence[str]) -> None:
        """Shift abilities so the trained students' mean is zero (predictions unchanged)."""
        idx = torch.tensor([self.s_index[s] for s in trained_students], dtype=torch.long)
        with torch.no_grad():
            shift = self.k[idx].mean()
            self.k -= shift
            self.d -= shift

    def params(self) -> IRTParams:
        return IRTParams(
            k={s: float(self.k.detach()[i]) for s, i in self.s_index.items()},
            d={q: float(self.d.detach()[i]) for q, i in self.q_index.items()},
        )


def labels_tensor(examples: Sequence[PairExample]) -> torch.Tensor:
    return torch.tensor([float(e.label) for e in examples])


def fit_behavior(
    model: BehaviorIRTModel,
    train_pairs: Sequence[PairExample],
    val_pairs: Sequence[PairExample],
    config: TransferConfig,
    seed: int,
    *,
    skip_finetune: bool = False,
) -> list[PhaseHistory]:
    """Freeze-then-fine-tune fit of the behavior model's joint BCE objective."""
    if model.encoder.config.include_status:
        raise LeakageError("behavior fitting received status-bearing inputs")
    train_labels = labels_tensor(train_pairs)
    val_labels = labels_tensor(val_pairs)
    histories = [
        train_transfer_frozen(
            model, list(train_pairs), train_labels, list(val_pairs), val_labels, config, seed
        )
    ]
    if not skip_finetune:
        histories.append(
            fine_tune(
                model, list(train_pairs), train_labels, list(val_pairs), val_labels, config, seed
            )
        )
    trained = sorted({p.student_id for p in train_pairs})
    model.anchor(trained)
    return histories


def export_params(params: IRTParams, path: str | Path, meta: Mapping | None = None) -> None:
    if meta:
        params.meta.update(meta)
    params.save(path)
