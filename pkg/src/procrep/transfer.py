"""Transfer of pre-trained representations to outcome prediction.

A learned attention head pools each question sequence's transfer contexts
into one vector; per-student vectors concatenate the pooled vectors over the
fixed block-A question order (zero blocks for unvisited questions) and feed a
small fully connected head. Training follows the freeze-then-fine-tune
protocol: the transfer function is first trained on a frozen encoder, then
everything is updated jointly at a reduced learning rate. A student-level
variant aggregates per-visit pooled vectors with a recurrent network instead
of concatenation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .config import derive_seed
from .errors import ConfigError, ContractViolation, TrainingDivergedError
from .ingest import NormalizedDataset, QuestionSequence
from .pretrain import EpochRecord, PhaseHistory
from .process_model import LatentStates, ProcessEncoder, SequenceBatch


class AttentionPool(nn.Module):
    """Softmax-weighted sum of transfer contexts; padding gets weight exactly 0."""

    def __init__(self, context_dim: int):
        super().__init__()
        self.score = nn.Linear(context_dim, 1)

    def forward(self, contexts: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if contexts.shape[1] == 0:
            raise ContractViolation("cannot pool an empty sequence")
        scores = self.score(contexts).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.bmm(weights.unsqueeze(1), contexts).squeeze(1)
        return pooled, weights


def final_state_pool(states: LatentStates) -> torch.Tensor:
    """Attention-free pooling: concatenation of the two directional end states."""
    return states.final_state()


def pool_sequences(
    encoder: ProcessEncoder,
    pool: AttentionPool,
    sequences: Sequence[QuestionSequence],
    *,
    no_attention: bool = False,
    batch_size: int = 64,
) -> torch.Tensor:
    """Pooled vector per sequence, in order. Grad-free convenience for export."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            batch = SequenceBatch.from_sequences(chunk, encoder.config)
            states = encoder(batch)
            if no_attention:
                chunks.append(final_state_pool(states))
            else:
                pooled, _ = pool(states.transfer_context(), states.mask)
                chunks.append(pooled)
    return torch.cat(chunks, dim=0)


@dataclass
class StudentExample:
    student_id: str
    sequences: list[QuestionSequence]


def build_student_examples(
    dataset: NormalizedDataset, students: Sequence[str], block: str = "A"
) -> list[StudentExample]:
    return [
        StudentExample(s, [q for q in dataset.sequences.get(s, []) if q.block == block])
        for s in students
    ]


def score_labels(dataset: NormalizedDataset, students: Sequence[str]) -> torch.Tensor:
    return torch.tensor([float(dataset.labels.score[s]) for s in students])


def per_question_labels(dataset: NormalizedDataset, students: Sequence[str]) -> torch.Tensor:
    questions = dataset.labels.block_b_questions
    return torch.tensor(
        [[float(dataset.labels.per_question[s][q]) for q in questions] for s in students]
    )


class StudentVectorModel(nn.Module):
    """Encoder -> pooled question vectors -> fixed-order student vector -> head."""

    def __init__(
        self,
        encoder: ProcessEncoder,
        question_order: Sequence[str],
        question_index: Callable[[str], int],
        out_dim: int,
        *,
        head_hidden: int = 256,
        dropout: float = 0.25,
        no_attention: bool = False,
    ):
        super().__init__()
        self.encoder = encoder
        self.pool = AttentionPool(encoder.context_dim)
        self.question_order = tuple(question_order)
        self.slot_of = {question_index(q): i for i, q in enumerate(self.question_order)}
        self.no_attention = no_attention
        in_dim = len(self.question_order) * encoder.context_dim
        self.head = nn.Sequential(
            nn.Linear(in_dim, head_hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(head_hidden, out_dim),
        )
        self.in_dim = in_dim
        self.out_dim = out_dim

    @property
    def emb_ref(self) -> torch.Tensor:
        return self.encoder.emb_a.weight

    def student_matrix(self, examples: Sequence[StudentExample]) -> torch.Tensor:
        n = len(examples)
        dim = self.encoder.context_dim
        flat: list[QuestionSequence] = []
        positions: list[int] = []
        for i, example in enumerate(examples):
            for seq in example.sequences:
                q_idx = seq.events[0].q if seq.events else -1
                if q_idx not in self.slot_of:
                    raise ContractViolation(
                        f"sequence for question {seq.question_id!r} is not in the "
                        "model's question order"
                    )
                flat.append(seq)
                positions.append(i * len(self.question_order) + self.slot_of[q_idx])
        matrix = self.emb_ref.new_zeros(n * len(self.question_order), dim)
        if flat:
            batch = SequenceBatch.from_sequences(flat, self.encoder.config)
            states = self.encoder(batch)
            if self.no_attention:
                pooled = final_state_pool(states)
            else:
                pooled, _ = self.pool(states.transfer_context(), states.mask)
            matrix = matrix.index_copy(0, torch.tensor(positions, dtype=torch.long), pooled)
        return matrix.reshape(n, self.in_dim)

    def forward(self, examples: Sequence[StudentExample]) -> torch.Tensor:
        vectors = self.student_matrix(examples)
        if vectors.shape[-1] != self.in_dim:
            raise ContractViolation(
                f"student vector dim {vectors.shape[-1]} does not match head input {self.in_dim}"
            )
        logits = self.head(vectors)
        return logits.squeeze(-1) if self.out_dim == 1 else logits

    def batch_loss(self, examples: Sequence[StudentExample], labels: torch.Tensor) -> torch.Tensor:
        logits = self(examples)
        return nn.functional.binary_cross_entropy_with_logits(logits, labels)

    def predict_proba(self, examples: Sequence[StudentExample], batch_size: int = 32) -> np.ndarray:
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                logits = self(examples[start : start + batch_size])
                outs.append(torch.sigmoid(logits))
        return torch.cat(outs, dim=0).numpy()


@dataclass
class VisitExample:
    """One student's chronologically ordered single-visit sequences."""

    student_id: str
    visits: list[QuestionSequence]


def build_visit_examples(
    dataset: NormalizedDataset, students: Sequence[str], blocks: tuple[str, ...] = ("A",)
) -> list[VisitExample]:
    examples = []
    for student in students:
        visits: list[tuple[float, QuestionSequence]] = []
        for seq in dataset.sequences.get(student, []):
            if seq.block not in blocks:
                continue
            for a, b in seq.visit_slices:
                events = seq.events[a:b]
                visits.append(
                    (
                        events[0].m,
                        QuestionSequence(
                            seq.student_id, seq.question_id, seq.block, events, [(0, len(events))]
                        ),
                    )
                )
        visits.sort(key=lambda pair: pair[0])
        examples.append(VisitExample(student, [v for _, v in visits]))
    return examples


class StudentLevelModel(nn.Module):
    """Pools each visit, then aggregates the visit vectors with a GRU.

    The aggregator's final hidden state is the student representation; a
    linear layer maps it to the label logit.
    """

    def __init__(self, encoder: ProcessEncoder, aggregator_hidden: int = 64, out_dim: int = 1):
        super().__init__()
        self.encoder = encoder
        self.pool = AttentionPool(encoder.context_dim)
        self.aggregator = nn.GRU(
            input_size=encoder.context_dim, hidden_size=aggregator_hidden, batch_first=True
        )
        self.head = nn.Linear(aggregator_hidden, out_dim)
        self.out_dim = out_dim

    def student_states(self, examples: Sequence[VisitExample]) -> torch.Tensor:
        for example in examples:
            if not example.visits:
                raise ContractViolation(f"student {example.student_id} has no visits")
        flat = [v for example in examples for v in example.visits]
        counts = [len(example.visits) for example in examples]
        batch = SequenceBatch.from_sequences(flat, self.encoder.config)
        states = self.encoder(batch)
        pooled, _ = self.pool(states.transfer_context(), states.mask)
        max_visits = max(counts)
        padded = pooled.new_zeros(len(examples), max_visits, pooled.shape[-1])
        offset = 0
        for i, count in enumerate(counts):
            padded[i, :count] = pooled[offset : offset + count]
            offset += count
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, torch.tensor(counts), batch_first=True, enforce_sorted=False
        )
        _, final = self.aggregator(packed)
        return final.squeeze(0)

    def forward(self, examples: Sequence[VisitExample]) -> torch.Tensor:
        logits = self.head(self.student_states(examples))
        return logits.squeeze(-1) if self.out_dim == 1 else logits

    def batch_loss(self, examples: Sequence[VisitExample], labels: torch.Tensor) -> torch.Tensor:
        logits = self(examples)
        return nn.functional.binary_cross_entropy_with_logits(logits, labels)

    def predict_proba(self, examples: Sequence[VisitExample], batch_size: int = 32) -> np.ndarray:
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                logits = self(examples[start : start + batch_size])
                outs.append(torch.sigmoid(logits))
        return torch.cat(outs, dim=0).numpy()


@dataclass(frozen=True)
class TransferConfig:
    epochs_frozen: int = 20
    epochs_finetune: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    finetune_lr_scale: float = 0.1
    head_hidden: int = 256
    dropout: float = 0.25

    def __post_init__(self) -> None:
        if self.epochs_frozen < 0 or self.epochs_finetune < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def dataset_supervised_loss(model, examples, labels, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            chunk_labels = labels[start : start + batch_size]
            total += float(model.batch_loss(chunk, chunk_labels)) * len(chunk)
    return total / len(examples)


def run_supervised_phase(
    model: nn.Module,
    trainable: Sequence[torch.nn.Parameter],
    train_examples,
    train_labels: torch.Tensor,
    val_examples,
    val_labels: torch.Tensor,
    *,
    phase: str,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> PhaseHistory:
    """Generic supervised loop with min-validation-loss selection.

    The pre-update model is scored as epoch 0 and competes in selection, so
    the phase can never leave the model validating worse than it entered.
    """
    if not train_examples or not val_examples:
        raise ContractViolation("supervised phase needs non-empty train and validation sets")
    optimizer = torch.optim.Adam(trainable, lr=lr)
    rng = np.random.default_rng(derive_seed(seed, phase, "shuffle"))

    records: list[EpochRecord] = []
    val_loss = dataset_supervised_loss(model, val_examples, val_labels, batch_size)
    records.append(EpochRecord(0, None, val_loss, {}))
    best = (val_loss, 0, copy.deepcopy(model.state_dict()))

    order = np.arange(len(train_examples))
    for epoch in range(1, epochs + 1):
        rng.shuffle(order)
        model.train()
        epoch_total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            chunk = [train_examples[i] for i in idx]
            chunk_labels = train_labels[torch.tensor(idx, dtype=torch.long)]
            optimizer.zero_grad()
            loss = model.batch_loss(chunk, chunk_labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{phase} loss became non-finite at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_total += float(loss.detach()) * len(chunk)
        val_loss = dataset_supervised_loss(model, val_examples, val_labels, batch_size)
        records.append(EpochRecord(epoch, epoch_total / len(order), val_loss, {}))
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))

    best_val, best_epoch, state = best
    model.load_state_dict(state)
    model.eval()
    return PhaseHistory(phase, records, best_epoch, best_val)


def train_transfer_frozen(
    model: nn.Module,
    train_examples,
    train_labels,
    val_examples,
    val_labels,
    config: TransferConfig,
    seed: int,
) -> PhaseHistory:
    """Train everything except the encoder; the encoder must come out bit-identical."""
    encoder: ProcessEncoder = model.encoder
    before = encoder.fingerprint()
    encoder_params = {id(p) for p in encoder.parameters()}
    trainable = [p for p in model.parameters() if id(p) not in encoder_params]
    encoder.requires_grad_(False)
    encoder.eval()
    try:
        history = run_supervised_phase(
            model,
            trainable,
            train_examples,
            train_labels,
            val_examples,
            val_labels,
            phase="transfer_frozen",
            epochs=config.epochs_frozen,
            batch_size=config.batch_size,
            lr=config.lr,
            seed=seed,
        )
    finally:
        encoder.requires_grad_(True)
    if encoder.fingerprint() != before:
        raise ContractViolation("frozen phase modified encoder parameters")
    return history


def fine_tune(
    model: nn.Module,
    train_examples,
    train_labels,
    val_examples,
    val_labels,
    config: TransferConfig,
    seed: int,
) -> PhaseHistory:
    """Joint update of encoder and transfer function at a reduced learning rate."""
    return run_supervised_phase(
        model,
        list(model.parameters()),
        train_examples,
        train_labels,
        val_examples,
        val_labels,
        phase="finetune",
        epochs=config.epochs_finetune,
        batch_size=config.batch_size,
        lr=config.lr * config.finetune_lr_scale,
        seed=seed,
    )
