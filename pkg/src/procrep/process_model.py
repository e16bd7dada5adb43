"""Event vectorization and the bidirectional recurrent process encoder.

Events are embedded as (event-type embedding, question embedding, status
one-hot, normalized time) and run through a bidirectional recurrent network.
Two views of the hidden states are exposed: the predictive context at step t
concatenates the forward state at t-1 with the backward state at t+1, so it
carries information about every event except e_t (the property pre-training
relies on); the transfer context concatenates both states at t itself.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import ConfigError, ContractViolation, DataError, EncodingError, VocabularyMismatchError
from .ingest import QuestionSequence, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1

N_STATUS = 3


@dataclass(frozen=True)
class EncoderConfig:
    n_event_types: int
    n_questions: int
    dim_event: int = 16
    dim_question: int = 16
    hidden: int = 64
    rnn_type: str = "lstm"
    include_status: bool = True
    block_time_limit: float = 1800.0

    def __post_init__(self) -> None:
        if self.rnn_type not in ("lstm", "gru"):
            raise ConfigError(f"rnn_type must be lstm or gru, got {self.rnn_type!r}")
        if min(self.n_event_types, self.n_questions, self.dim_event, self.dim_question, self.hidden) < 1:
            raise ConfigError("all sizes must be positive")
        if self.block_time_limit <= 0:
            raise ConfigError("block_time_limit must be positive")

    @property
    def input_dim(self) -> int:
        status_dims = N_STATUS if self.include_status else 0
        return self.dim_event + self.dim_question + status_dims + 1

    def to_dict(self) -> dict:
        return {
            "n_event_types": self.n_event_types,
            "n_questions": self.n_questions,
            "dim_event": self.dim_event,
            "dim_question": self.dim_question,
            "hidden": self.hidden,
            "rnn_type": self.rnn_type,
            "include_status": self.include_status,
            "block_time_limit": self.block_time_limit,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class SequenceBatch:
    """Padded index tensors for a batch of per-question event sequences."""

    a: torch.Tensor
    q: torch.Tensor
    c: torch.Tensor
    m: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def from_sequences(
        cls, sequences: Sequence[QuestionSequence], config: EncoderConfig
    ) -> "SequenceBatch":
        if not sequences:
            raise ContractViolation("batch must contain at least one sequence")
        lengths = []
        for seq in sequences:
            if not seq.events:
                raise ContractViolation(
                    f"empty sequence for {seq.student_id}/{seq.question_id}"
                )
            lengths.append(len(seq.events))
        t_max = max(lengths)
        n = len(sequences)
        a = torch.zeros(n, t_max, dtype=torch.long)
        q = torch.zeros(n, t_max, dtype=torch.long)
        c = torch.zeros(n, t_max, dtype=torch.long)
        m = torch.zeros(n, t_max, dtype=torch.float32)
        for i, seq in enumerate(sequences):
            for t, event in enumerate(seq.events):
                if not 0 <= event.a < config.n_event_types:
                    raise EncodingError(f"event-type index {event.a} out of vocabulary")
                if not 0 <= event.q < config.n_questions:
                    raise EncodingError(f"question index {event.q} out of vocabulary")
                if not 0 <= event.c < N_STATUS:
                    raise EncodingError(f"status index {event.c} out of range")
                a[i, t] = event.a
                q[i, t] = event.q
                c[i, t] = event.c
                m[i, t] = event.m / config.block_time_limit
        lengths_t = torch.tensor(lengths, dtype=torch.long)
        mask = torch.arange(t_max).unsqueeze(0) < lengths_t.unsqueeze(1)
        return cls(a=a, q=q, c=c, m=m, lengths=lengths_t, mask=mask)

    def __len__(self) -> int:
        return self.a.shape[0]


@dataclass
class LatentStates:
    """Bidirectional hidden states with zero states at the sequence boundaries."""

    fwd: torch.Tensor
    bwd: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor

    def transfer_context(self) -> torch.Tensor:
        """(h_fwd_t, h_bwd_t): the fully contextual state at each step."""
        return torch.cat([self.fwd, self.bwd], dim=-1)

    def predictive_context(self) -> torch.Tensor:
        """(h_fwd_{t-1}, h_bwd_{t+1}): everything about the sequence except e_t.

        The forward part is shifted right (zero state enters at t=0) and the
        backward part shifted left. Padding positions hold zero states after
        unpacking, so the backward boundary at the true sequence end is zero
        without special-casing per-row lengths.
        """
        fwd_prev = torch.zeros_like(self.fwd)
        fwd_prev[:, 1:] = self.fwd[:, :-1]
        bwd_next = torch.zeros_like(self.bwd)
        bwd_next[:, :-1] = self.bwd[:, 1:]
        return torch.cat([fwd_prev, bwd_next], dim=-1)

    def predictive_context_at(self, i: int, t: int) -> torch.Tensor:
        length = int(self.lengths[i])
        if not 0 <= t < length:
            raise ContractViolation(f"position {t} out of range for length {length}")
        return self.predictive_context()[i, t]

    def final_state(self) -> torch.Tensor:
        """(h_fwd_T, h_bwd_1) per sequence: the attention-free pooling variant."""
        idx = (self.lengths - 1).view(-1, 1, 1).expand(-1, 1, self.fwd.shape[-1])
        last_fwd = self.fwd.gather(1, idx).squeeze(1)
        first_bwd = self.bwd[:, 0]
        return torch.cat([last_fwd, first_bwd], dim=-1)


class ProcessEncoder(nn.Module):
    """Shared bidirectional encoder over vectorized event sequences."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.emb_a = nn.Embedding(config.n_event_types, config.dim_event)
        self.emb_q = nn.Embedding(config.n_questions, config.dim_question)
        rnn_cls = nn.LSTM if config.rnn_type == "lstm" else nn.GRU
        self.rnn = rnn_cls(
            input_size=config.input_dim,
            hidden_size=config.hidden,
            batch_first=True,
            bidirectional=True,
        )
        with torch.no_grad():
            self.emb_a.weight.normal_(0.0, 0.1)
            self.emb_q.weight.normal_(0.0, 0.1)

    @property
    def context_dim(self) -> int:
        return 2 * self.config.hidden

    def event_vectors(self, batch: SequenceBatch) -> torch.Tensor:
        parts = [self.emb_a(batch.a), self.emb_q(batch.q)]
        if self.config.include_status:
            onehot = torch.nn.functional.one_hot(batch.c, num_classes=N_STATUS)
            parts.append(onehot.to(self.emb_a.weight.dtype))
        parts.append(batch.m.unsqueeze(-1).to(self.emb_a.weight.dtype))
        return torch.cat(parts, dim=-1)

    def encode_vectors(self, vectors: torch.Tensor, lengths: torch.Tensor) -> LatentStates:
        if vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise ContractViolation("cannot encode an empty batch")
        t_max = vectors.shape[1]
        packed = pack_padded_sequence(
            vectors, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        output, _ = self.rnn(packed)
        unpacked, out_lengths = pad_packed_sequence(
            output, batch_first=True, total_length=t_max
        )
        hidden = self.config.hidden
        mask = torch.arange(t_max).unsqueeze(0) < out_lengths.unsqueeze(1)
        return LatentStates(
            fwd=unpacked[..., :hidden],
            bwd=unpacked[..., hidden:],
            lengths=out_lengths,
            mask=mask,
        )

    def forward(self, batch: SequenceBatch) -> LatentStates:
        return self.encode_vectors(self.event_vectors(batch), batch.lengths)

    def fingerprint(self) -> str:
        """Order-stable digest of all parameters; freeze phases must not change it."""
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def save_checkpoint(
    path: str | Path,
    encoder: ProcessEncoder,
    vocab: Vocabulary,
    extras: Mapping[str, nn.Module] | None = None,
    meta: Mapping | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_config": encoder.config.to_dict(),
        "encoder_state": encoder.state_dict(),
        "extras": {name: module.state_dict() for name, module in (extras or {}).items()},
        "event_vocab_hash": vocab.event_hash(),
        "question_vocab_hash": vocab.question_hash(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, str(path))


@dataclass
class CheckpointBundle:
    encoder: ProcessEncoder
    extras: dict[str, dict]
    event_vocab_hash: str
    question_vocab_hash: str
    meta: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path, vocab: Vocabulary | None = None) -> CheckpointBundle:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version!r}")
    if vocab is not None:
        if payload["event_vocab_hash"] != vocab.event_hash():
            raise VocabularyMismatchError("checkpoint event vocabulary does not match dataset")
        if payload["question_vocab_hash"] != vocab.question_hash():
            raise VocabularyMismatchError("checkpoint question vocabulary does not match dataset")
    encoder = ProcessEncoder(EncoderConfig.from_dict(payload["encoder_config"]))
    encoder.load_state_dict(payload["encoder_state"])
    return CheckpointBundle(
        encoder=encoder,
        extras=dict(payload.get("extras", {})),
        event_vocab_hash=payload["event_vocab_hash"],
        question_vocab_hash=payload["question_vocab_hash"],
        meta=dict(payload.get("meta", {})),
    )
