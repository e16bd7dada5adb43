"""Shared fixtures: a small synthetic cohort, its normalized dataset, and
reference helpers the metric tests check against."""

from __future__ import annotations

import numpy as np
import pytest

from procrep.ingest import ProcEvent, QuestionSequence, build_dataset
from procrep.process_model import EncoderConfig
from procrep.synthgen import SynthConfig, generate_cohort


def pairwise_auc(scores, labels) -> float:
    """O(n^2) reference AUC: fraction of (pos, neg) pairs ranked correctly,
    ties counting one half."""
    pos = [float(s) for s, y in zip(scores, labels) if y == 1]
    neg = [float(s) for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("reference AUC needs both classes")
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def make_sequence(
    times,
    *,
    student="s1",
    question="q1",
    block="A",
    a=1,
    q=0,
    c=0,
    visit_slices=None,
):
    """Build a QuestionSequence from raw timestamps; scalar a/q/c broadcast."""
    n = len(times)
    a_list = list(a) if isinstance(a, (list, tuple)) else [a] * n
    c_list = list(c) if isinstance(c, (list, tuple)) else [c] * n
    events = [
        ProcEvent(a=a_list[i], m=float(times[i]), q=q, c=c_list[i]) for i in range(n)
    ]
    slices = visit_slices if visit_slices is not None else [(0, n)]
    return QuestionSequence(
        student_id=student,
        question_id=question,
        block=block,
        events=events,
        visit_slices=slices,
    )


@pytest.fixture(scope="session")
def tiny_cohort():
    config = SynthConfig(n_students=24, n_questions_a=4, n_questions_b=4)
    return generate_cohort(config, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cohort):
    return build_dataset(
        tiny_cohort.groups,
        tiny_cohort.answer_key,
        tiny_cohort.block_map,
        tiny_cohort.schema,
        block_time_limit=tiny_cohort.config.block_time_limit,
        test_fraction=0.25,
        seed=3,
    )


@pytest.fixture(scope="session")
def small_encoder_config(tiny_dataset):
    return EncoderConfig(
        n_event_types=len(tiny_dataset.vocab.event_types),
        n_questions=len(tiny_dataset.vocab.questions),
        dim_event=6,
        dim_question=6,
        hidden=10,
    )


@pytest.fixture(scope="session")
def block_a_sequences(tiny_dataset):
    seqs = tiny_dataset.sequences_for(tiny_dataset.students, blocks=("A",))
    assert seqs, "fixture cohort produced no block-A sequences"
    return seqs


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
