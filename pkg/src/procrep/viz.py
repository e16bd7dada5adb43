"""Representation exports, 2-D embeddings, and cluster plots.

Question-level exports carry one row per (student, question) pair with the
pooled vector, the behavior scalar, and the final response status;
student-level exports carry one row per student with the aggregated vector
and the score label. Plots color points by behavior-scalar group (sign, then
within-sign median) or by binary label, with marker shape showing
correctness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from sklearn.manifold import TSNE

from .errors import ConfigError, ContractViolation, DataError
from .ingest import ResponseStatus
from .irt import BehaviorIRTModel, PairExample
from .process_model import SequenceBatch
from .transfer import StudentLevelModel, VisitExample

VECTOR_LEVELS = ("question", "student")

GROUP_COLORS = {
    "pos_hi": "#d62728",
    "pos_lo": "#ff9896",
    "neg_lo": "#aec7e8",
    "neg_hi": "#1f77b4",
    "label_1": "#d62728",
    "label_0": "#1f77b4",
}


@dataclass
class VectorTable:
    level: str
    ids: list[tuple[str, str]]
    vectors: np.ndarray
    extra: dict[str, list]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


def _write_table(
    path: str | Path,
    level: str,
    rows: Sequence[tuple[str, str, np.ndarray, dict]],
    extra_columns: Sequence[str],
    meta: Mapping,
) -> None:
    if not rows:
        raise ContractViolation("refusing to export an empty vector table")
    dim = len(rows[0][2])
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        for key, value in sorted({**dict(meta), "level": level}.items()):
            handle.write(f"# {key}={value}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["student_id", "question_id", *(f"v{i:03d}" for i in range(dim)), *extra_columns]
        )
        for student, question, vector, extras in rows:
            writer.writerow(
                [
                    student,
                    question,
                    *(f"{x:.6f}" for x in vector),
                    *(extras[c] for c in extra_columns),
                ]
            )


def export_question_vectors(
    model: BehaviorIRTModel,
    pairs: Sequence[PairExample],
    path: str | Path,
    meta: Mapping | None = None,
    batch_size: int = 64,
) -> None:
    """One row per pair: pooled vector, behavior scalar, response status."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            batch = SequenceBatch.from_sequences([p.sequence for p in chunk], model.encoder.config)
            states = model.encoder(batch)
            pooled, _ = model.pool(states.transfer_context(), states.mask)
            scalars = model.b_head(pooled).squeeze(-1)
            for pair, vector, b in zip(chunk, pooled, scalars):
                status = ResponseStatus(pair.sequence.events[0].c).label
                rows.append(
                    (
                        pair.student_id,
                        pair.question_id,
                        vector.numpy(),
                        {"behavior": f"{float(b):.6f}", "status": status},
                    )
                )
    _write_table(path, "question", rows, ["behavior", "status"], meta or {})


def export_student_vectors(
    model: StudentLevelModel,
    examples: Sequence[VisitExample],
    labels: Mapping[str, int],
    path: str | Path,
    meta: Mapping | None = None,
    batch_size: int = 32,
) -> None:
    """One row per student: aggregated vector and score label."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            states = model.student_states(chunk)
            for example, vector in zip(chunk, states):
                rows.append(
                    (
                        example.student_id,
                        "STUDENT",
                        vector.numpy(),
                        {"label": labels[example.student_id]},
                    )
                )
    _write_table(path, "student", rows, ["label"], meta or {})


def load_vector_table(path: str | Path) -> VectorTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"vector table not found: {path}")
    meta: dict = {}
    data_lines = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    meta[key.strip()] = value.strip()
            elif line:
                data_lines.append(line)
    if not data_lines:
        raise DataError(f"{path}: no rows")
    reader = csv.reader(data_lines)
    header = next(reader)
    vec_cols = [i for i, name in enumerate(header) if name.startswith("v") and name[1:].isdigit()]
    extra_cols = [
        (i, name)
        for i, name in enumerate(header)
        if i not in vec_cols and name not in ("student_id", "question_id")
    ]
    ids = []
    vectors = []
    extra: dict[str, list] = {name: [] for _, name in extra_cols}
    for row in reader:
        ids.append((row[0], row[1]))
        vectors.append([float(row[i]) for i in vec_cols])
        for i, name in extra_cols:
            extra[name].append(row[i])
    level = meta.get("level", "question")
    return VectorTable(level=level, ids=ids, vectors=np.asarray(vectors), extra=extra, meta=meta)


def embed_2d(vectors: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """Deterministic-per-seed t-SNE to two dimensions.

    Exact-duplicate rows are collapsed before the embedding and share their
    representative's coordinates afterwards; the optimizer would otherwise
    push identical inputs apart. Perplexity is capped at (distinct rows - 1)/3
    so the method's constraint always holds.
    """
    vectors = np.asarray(vectors, dtype=float)
    unique, inverse = np.unique(vectors, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = unique.shape[0]
    if m < 4:
        raise ConfigError(f"2-D embedding needs at least 4 distinct rows, got {m}")
    eff_perplexity = min(float(perplexity), (m - 1) / 3)
    tsne = TSNE(
        n_components=2,
        perplexity=eff_perplexity,
        random_state=seed,
        init="random",
        method="exact" if m <= 2000 else "barnes_hut",
    )
    coords = tsne.fit_transform(unique)
    if not np.all(np.isfinite(coords)):
        raise ContractViolation("embedding produced non-finite coordinates")
    return coords[inverse]


def behavior_groups(values: Sequence[float]) -> list[str]:
    """Quartile-style grouping: sign of B, then within-sign median split."""
    values = np.asarray(values, dtype=float)
    groups = np.empty(len(values), dtype=object)
    pos = values >= 0
    for sign, mask in (("pos", pos), ("neg", ~pos)):
        if not mask.any():
            continue
        median = float(np.median(values[mask]))
        for i in np.flatnonzero(mask):
            groups[i] = f"{sign}_{'hi' if values[i] > median else 'lo'}"
    return list(groups)


def render_plot(
    coords: np.ndarray,
    table: VectorTable,
    out_path: str | Path,
    *,
    color_by: str = "behavior",
    subsample: float = 1.0,
    seed: int = 0,
    meta: Mapping | None = None,
) -> None:
    """Scatter plot with marker by correctness and color by group."""
    if len(coords) != len(table):
        raise ContractViolation("coordinates and table rows must align")
    if color_by == "behavior":
        if "behavior" not in table.extra:
            raise ConfigError("vector table has no behavior column to color by")
        groups = behavior_groups([float(v) for v in table.extra["behavior"]])
    elif color_by == "label":
        if "label" not in table.extra:
            raise ConfigError("vector table has no label column to color by")
        groups = [f"label_{v}" for v in table.extra["label"]]
    else:
        raise ConfigError(f"unknown color mode {color_by!r}")

    if "status" in table.extra:
        markers = ["o" if s == "correct" else "x" for s in table.extra["status"]]
    else:
        markers = ["o"] * len(table)

    idx = np.arange(len(table))
    if not 0.0 < subsample <= 1.0:
        raise ConfigError("subsample fraction must be in (0, 1]")
    if subsample < 1.0:
        rng = np.random.default_rng(seed)
        keep = max(1, int(round(subsample * len(idx))))
        idx = np.sort(rng.choice(idx, size=keep, replace=False))

    fig, ax = plt.subplots(figsize=(8, 6))
    for group in sorted({groups[i] for i in idx}):
        labeled = False
        for marker in ("o", "x"):
            sel = [i for i in idx if groups[i] == group and markers[i] == marker]
            if not sel:
                continue
            ax.scatter(
                coords[sel, 0],
                coords[sel, 1],
                c=GROUP_COLORS.get(group, "#777777"),
                marker=marker,
                s=18,
                label=None if labeled else group,
            )
            labeled = True
    ax.legend(loc="best", fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(
        str(out_path),
        dpi=150,
        metadata={str(k): str(v) for k, v in (meta or {}).items()},
    )
    plt.close(fig)
