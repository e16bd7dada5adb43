"""Sequence-autoencoder baseline.

A unidirectional LSTM reads a question sequence; its final hidden state is
the bottleneck vector representing the whole sequence. A decoder cell starts
from the bottleneck and reconstructs the event-type sequence (cross-entropy)
and the time ratios (soft-target BCE). Teacher forcing during decoding is
flag-controlled and always off when the model is evaluated. The bottleneck
dimension defaults to the main model's pooled dimension so downstream
comparisons are capacity-matched; transfer reuses the same fixed-order
student-vector assembly and head.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .config import derive_seed
from .errors import ConfigError, ContractViolation, TrainingDivergedError
from .ingest import QuestionSequence
from .pretrain import EpochRecord, PhaseHistory, time_ratio_targets
from .process_model import EncoderConfig, SequenceBatch

START_TOKEN_PAD = 1


@dataclass(frozen=True)
class AEConfig:
    n_event_types: int
    n_questions: int
    dim_event: int = 16
    dim_question: int = 16
    bottleneck: int = 128
    include_status: bool = True
    block_time_limit: float = 1800.0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    teacher_forcing: bool = True

    def __post_init__(self) -> None:
        if min(self.n_event_types, self.n_questions, self.bottleneck) < 1:
            raise ConfigError("all sizes must be positive")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_event_types=self.n_event_types,
            n_questions=self.n_questions,
            dim_event=self.dim_event,
            dim_question=self.dim_question,
            hidden=self.bottleneck,
            include_status=self.include_status,
            block_time_limit=self.block_time_limit,
        )


class SequenceAutoencoder(nn.Module):
    """Encoder to a single bottleneck vector, decoder reconstructing the input."""

    def __init__(self, config: AEConfig):
        super().__init__()
        self.config = config
        self.feat_config = config.encoder_config()
        self.emb_a = nn.Embedding(config.n_event_types + START_TOKEN_PAD, config.dim_event)
        self.emb_q = nn.Embedding(config.n_questions, config.dim_question)
        self.encoder_rnn = nn.LSTM(
            input_size=self.feat_config.input_dim,
            hidden_size=config.bottleneck,
            batch_first=True,
        )
        self.decoder_cell = nn.LSTMCell(
            input_size=config.dim_event + 1, hidden_size=config.bottleneck
        )
        self.out_event = nn.Linear(config.bottleneck, config.n_event_types)
        self.out_time = nn.Linear(config.bottleneck, 1)
        with torch.no_grad():
            self.emb_a.weight.normal_(0.0, 0.1)
            self.emb_q.weight.normal_(0.0, 0.1)

    @property
    def start_token(self) -> int:
        return self.config.n_event_types

    def _event_vectors(self, batch: SequenceBatch) -> torch.Tensor:
        parts = [self.emb_a(batch.a), self.emb_q(batch.q)]
        if self.config.include_status:
            onehot = nn.functional.one_hot(batch.c, num_classes=3)
            parts.append(onehot.to(self.emb_a.weight.dtype))
        parts.append(batch.m.unsqueeze(-1).to(self.emb_a.weight.dtype))
        return torch.cat(parts, dim=-1)

    def encode_batch(self, batch: SequenceBatch) -> torch.Tensor:
        vectors = self._event_vectors(batch)
        packed = nn.utils.rnn.pack_padded_sequence(
            vectors, batch.lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.encoder_rnn(packed)
        return h_n.squeeze(0)

    def encode(self, sequences: Sequence[QuestionSequence], batch_size: int = 64) -> torch.Tensor:
        """Bottleneck per sequence, grad-free."""
        if not sequences:
            raise ContractViolation("cannot encode an empty sequence set")
        outs = []
        with torch.no_grad():
            for start in range(0, len(sequences), batch_size):
                chunk = sequences[start : start + batch_size]
                batch = SequenceBatch.from_sequences(chunk, self.feat_config)
                outs.append(self.encode_batch(batch))
        return torch.cat(outs, dim=0)

    def reconstruction_loss(
        self,
        sequences: Sequence[QuestionSequence],
        *,
        teacher_forcing: bool,
    ) -> tuple[torch.Tensor, int]:
        """Masked CE over event types plus BCE over time ratios, per real position.

        Without teacher forcing the decoder consumes its own previous
        prediction, never a ground-truth token it has not yet reconstructed.
        """
        batch = SequenceBatch.from_sequences(sequences, self.feat_config)
        bottleneck = self.encode_batch(batch)
        ratios = time_ratio_targets(batch, sequences).to(bottleneck.dtype)
        n, t_max = batch.a.shape
        mask = batch.mask

        h = bottleneck
        c = torch.zeros_like(bottleneck)
        prev_token = torch.full((n,), self.start_token, dtype=torch.long)
        prev_ratio = torch.zeros(n, dtype=bottleneck.dtype)

        ce_total = bottleneck.new_zeros(())
        bce_total = bottleneck.new_zeros(())
        for t in range(t_max):
            step_in = torch.cat([self.emb_a(prev_token), prev_ratio.unsqueeze(-1)], dim=-1)
            h, c = self.decoder_cell(step_in, (h, c))
            logits_a = self.out_event(h)
            logit_r = self.out_time(h).squeeze(-1)
            step_mask = mask[:, t].to(bottleneck.dtype)
            ce = nn.functional.cross_entropy(logits_a, batch.a[:, t], reduction="none")
            bce = nn.functional.binary_cross_entropy_with_logits(
                logit_r, ratios[:, t], reduction="none"
            )
            ce_total = ce_total + (ce * step_mask).sum()
            bce_total = bce_total + (bce * step_mask).sum()
            if teacher_forcing:
                prev_token = batch.a[:, t]
                prev_ratio = ratios[:, t]
            else:
                prev_token = logits_a.detach().argmax(dim=-1)
                prev_ratio = torch.sigmoid(logit_r.detach())
        n_tokens = int(mask.sum())
        return (ce_total + bce_total) / n_tokens, n_tokens

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def ae_dataset_loss(
    model: SequenceAutoencoder, sequences: Sequence[QuestionSequence], batch_size: int
) -> float:
    """Evaluation reconstruction loss: teacher forcing always off."""
    model.eval()
    total = 0.0
    tokens = 0
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            loss, n = model.reconstruction_loss(chunk, teacher_forcing=False)
            total += float(loss) * n
            tokens += n
    return total / max(tokens, 1)


def ae_train(
    model: SequenceAutoencoder,
    train_sequences: Sequence[QuestionSequence],
    val_sequences: Sequence[QuestionSequence],
    seed: int,
) -> PhaseHistory:
    """Train on reconstruction; select the epoch with the best validation loss."""
    config = model.config
    if not train_sequences or not val_sequences:
        raise ContractViolation("autoencoder training needs non-empty train and validation sets")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, "ae-shuffle"))

    records: list[EpochRecord] = []
    val_loss = ae_dataset_loss(model, val_sequences, config.batch_size)
    records.append(EpochRecord(0, None, val_loss, {}))
    best = (val_loss, 0, copy.deepcopy(model.state_dict()))

    order = np.arange(len(train_sequences))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        model.train()
        epoch_total = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_sequences[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss, n = model.reconstruction_loss(chunk, teacher_forcing=config.teacher_forcing)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"reconstruction loss non-finite at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_total += float(loss.detach()) * n
            epoch_tokens += n
        val_loss = ae_dataset_loss(model, val_sequences, config.batch_size)
        records.append(
            EpochRecord(epoch, epoch_total / max(epoch_tokens, 1), val_loss, {})
        )
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))

    best_val, best_epoch, state = best
    model.load_state_dict(state)
    model.eval()
    return PhaseHistory("ae_train", records, best_epoch, best_val)


class AEStudentModel(nn.Module):
    """Bottlenecks assembled into the fixed-order student vector, then a head.

    Mirrors the main transfer model's assembly contract: unvisited questions
    contribute zero blocks and the vector dimension never depends on the
    visit pattern.
    """

    def __init__(
        self,
        autoencoder: SequenceAutoencoder,
        question_order: Sequence[str],
        question_index: Callable[[str], int],
        out_dim: int,
        *,
        head_hidden: int = 256,
        dropout: float = 0.25,
    ):
        super().__init__()
        self.encoder = autoencoder
        self.question_order = tuple(question_order)
        self.slot_of = {question_index(q): i for i, q in enumerate(self.question_order)}
        in_dim = len(self.question_order) * autoencoder.config.bottleneck
        self.head = nn.Sequential(
            nn.Linear(in_dim, head_hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(head_hidden, out_dim),
        )
        self.in_dim = in_dim
        self.out_dim = out_dim

    def student_matrix(self, examples) -> torch.Tensor:
        n = len(examples)
        dim = self.encoder.config.bottleneck
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
        matrix = self.encoder.emb_a.weight.new_zeros(n * len(self.question_order), dim)
        if flat:
            batch = SequenceBatch.from_sequences(flat, self.encoder.feat_config)
            bottlenecks = self.encoder.encode_batch(batch)
            matrix = matrix.index_copy(
                0, torch.tensor(positions, dtype=torch.long), bottlenecks
            )
        return matrix.reshape(n, self.in_dim)

    def forward(self, examples) -> torch.Tensor:
        logits = self.head(self.student_matrix(examples))
        return logits.squeeze(-1) if self.out_dim == 1 else logits

    def batch_loss(self, examples, labels: torch.Tensor) -> torch.Tensor:
        return nn.functional.binary_cross_entropy_with_logits(self(examples), labels)

    def predict_proba(self, examples, batch_size: int = 32) -> np.ndarray:
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                outs.append(torch.sigmoid(self(examples[start : start + batch_size])))
        return torch.cat(outs, dim=0).numpy()
