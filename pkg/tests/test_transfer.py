"""Transfer stage: pooling, student vectors, frozen/fine-tune phases."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from procrep.errors import ConfigError, ContractViolation
from procrep.process_model import ProcessEncoder, SequenceBatch
from procrep.transfer import (
    AttentionPool,
    StudentLevelModel,
    StudentVectorModel,
    TransferConfig,
    build_student_examples,
    build_visit_examples,
    final_state_pool,
    fine_tune,
    per_question_labels,
    pool_sequences,
    run_supervised_phase,
    score_labels,
    train_transfer_frozen,
)


class TestAttentionPool:
    def test_weights_are_a_simplex_over_real_positions(self):
        torch.manual_seed(0)
        pool = AttentionPool(6)
        contexts = torch.randn(2, 5, 6)
        mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
        pooled, weights = pool(contexts, mask)
        assert pooled.shape == (2, 6)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(2), atol=1e-6)
        assert torch.all(weights[1, 3:] == 0.0)

    def test_pooled_vector_stays_in_the_convex_hull(self):
        torch.manual_seed(1)
        pool = AttentionPool(4)
        for _ in range(20):
            contexts = torch.randn(1, 7, 4)
            mask = torch.ones(1, 7, dtype=torch.bool)
            pooled, _ = pool(contexts, mask)
            lo = contexts.min(dim=1).values
            hi = contexts.max(dim=1).values
            assert torch.all(pooled >= lo - 1e-6)
            assert torch.all(pooled <= hi + 1e-6)

    def test_single_position_gets_weight_one(self):
        torch.manual_seed(0)
        pool = AttentionPool(3)
        contexts = torch.randn(1, 1, 3)
        pooled, weights = pool(contexts, torch.ones(1, 1, dtype=torch.bool))
        assert weights.tolist() == [[1.0]]
        assert torch.equal(pooled, contexts[:, 0])

    def test_empty_time_axis_is_rejected(self):
        pool = AttentionPool(3)
        with pytest.raises(ContractViolation):
            pool(torch.zeros(1, 0, 3), torch.zeros(1, 0, dtype=torch.bool))


class TestFinalStatePool:
    def test_matches_the_directional_end_states(self, small_encoder_config, block_a_sequences):
        torch.manual_seed(0)
        encoder = ProcessEncoder(small_encoder_config)
        encoder.eval()
        with torch.no_grad():
            states = encoder(
                SequenceBatch.from_sequences(block_a_sequences[:4], small_encoder_config)
            )
        assert torch.equal(final_state_pool(states), states.final_state())

    def test_pool_sequences_returns_one_vector_per_sequence(
        self, small_encoder_config, block_a_sequences
    ):
        torch.manual_seed(0)
        encoder = ProcessEncoder(small_encoder_config)
        pool = AttentionPool(encoder.context_dim)
        out = pool_sequences(encoder, pool, block_a_sequences[:5])
        assert out.shape == (5, encoder.context_dim)
        assert not out.requires_grad
        out_plain = pool_sequences(encoder, pool, block_a_sequences[:5], no_attention=True)
        assert out_plain.shape == (5, encoder.context_dim)
        assert not torch.equal(out, out_plain)


class TestStudentVectorModel:
    @pytest.fixture()
    def model(self, tiny_dataset, small_encoder_config):
        torch.manual_seed(4)
        encoder = ProcessEncoder(small_encoder_config)
        return StudentVectorModel(
            encoder,
            tiny_dataset.block_a_questions,
            tiny_dataset.vocab.question_index,
            out_dim=1,
            head_hidden=16,
            dropout=0.0,
        )

    def test_student_matrix_has_fixed_block_layout(self, model, tiny_dataset):
        students = tiny_dataset.students[:3]
        examples = build_student_examples(tiny_dataset, students)
        model.eval()
        with torch.no_grad():
            matrix = model.student_matrix(examples)
        n_q = len(tiny_dataset.block_a_questions)
        dim = model.encoder.context_dim
        assert matrix.shape == (3, n_q * dim)
        blocks = matrix.reshape(3, n_q, dim)
        for i, example in enumerate(examples):
            visited = {seq.question_id for seq in example.sequences}
            for j, qid in enumerate(tiny_dataset.block_a_questions):
                if qid in visited:
                    assert blocks[i, j].abs().sum() > 0, (example.student_id, qid)
                else:
                    assert torch.all(blocks[i, j] == 0.0), (example.student_id, qid)

    def test_student_with_no_sequences_gets_a_zero_vector(self, model, tiny_dataset):
        from procrep.transfer import StudentExample

        examples = [StudentExample("ghost", [])]
        model.eval()
        with torch.no_grad():
            matrix = model.student_matrix(examples)
        assert torch.all(matrix == 0.0)

    def test_block_b_sequence_is_rejected(self, model, tiny_dataset):
        from procrep.transfer import StudentExample

        student = tiny_dataset.students[0]
        b_seqs = [s for s in tiny_dataset.sequences[student] if s.block == "B"]
        assert b_seqs
        with pytest.raises(ContractViolation, match="question order"):
            model.student_matrix([StudentExample(student, b_seqs[:1])])

    def test_forward_squeezes_single_output(self, model, tiny_dataset):
        examples = build_student_examples(tiny_dataset, tiny_dataset.students[:4])
        model.eval()
        with torch.no_grad():
            logits = model(examples)
        assert logits.shape == (4,)
        probs = model.predict_proba(examples)
        assert probs.shape == (4,)
        assert np.all((probs > 0) & (probs < 1))

    def test_multi_output_head_keeps_the_question_axis(self, tiny_dataset, small_encoder_config):
        torch.manual_seed(4)
        encoder = ProcessEncoder(small_encoder_config)
        n_b = len(tiny_dataset.labels.block_b_questions)
        model = StudentVectorModel(
            encoder,
            tiny_dataset.block_a_questions,
            tiny_dataset.vocab.question_index,
            out_dim=n_b,
            head_hidden=16,
            dropout=0.0,
        )
        examples = build_student_examples(tiny_dataset, tiny_dataset.students[:3])
        model.eval()
        with torch.no_grad():
            logits = model(examples)
        assert logits.shape == (3, n_b)


class TestLabels:
    def test_score_labels_follow_the_dataset(self, tiny_dataset):
        students = tiny_dataset.students[:5]
        labels = score_labels(tiny_dataset, students)
        assert labels.tolist() == [float(tiny_dataset.labels.score[s]) for s in students]

    def test_per_question_labels_are_ordered_by_block_b(self, tiny_dataset):
        students = tiny_dataset.students[:3]
        labels = per_question_labels(tiny_dataset, students)
        assert labels.shape == (3, len(tiny_dataset.labels.block_b_questions))
        first = tiny_dataset.labels.per_question[students[0]]
        expected = [float(first[q]) for q in tiny_dataset.labels.block_b_questions]
        assert labels[0].tolist() == expected


class TestVisitExamples:
    def test_visits_are_single_slices_in_time_order(self, tiny_dataset):
        examples = build_visit_examples(tiny_dataset, tiny_dataset.students)
        total_slices = sum(
            len(seq.visit_slices)
            for s in tiny_dataset.students
            for seq in tiny_dataset.sequences[s]
            if seq.block == "A"
        )
        assert sum(len(e.visits) for e in examples) == total_slices
        for example in examples:
            starts = [v.events[0].m for v in example.visits]
            assert starts == sorted(starts)
            for visit in example.visits:
                assert visit.visit_slices == [(0, len(visit.events))]


class TestStudentLevelModel:
    def test_student_states_shape(self, tiny_dataset, small_encoder_config):
        torch.manual_seed(0)
        encoder = ProcessEncoder(small_encoder_config)
        model = StudentLevelModel(encoder, aggregator_hidden=12)
        examples = build_visit_examples(tiny_dataset, tiny_dataset.students[:4])
        model.eval()
        with torch.no_grad():
            states = model.student_states(examples)
            logits = model(examples)
        assert states.shape == (4, 12)
        assert logits.shape == (4,)

    def test_student_without_visits_is_rejected(self, tiny_dataset, small_encoder_config):
        from procrep.transfer import VisitExample

        torch.manual_seed(0)
        model = StudentLevelModel(ProcessEncoder(small_encoder_config), aggregator_hidden=8)
        with pytest.raises(ContractViolation, match="no visits"):
            model.student_states([VisitExample("ghost", [])])


class TestTransferConfig:
    def test_rejects_negative_epochs(self):
        with pytest.raises(ConfigError):
            TransferConfig(epochs_frozen=-1)
        with pytest.raises(ConfigError):
            TransferConfig(epochs_finetune=-1)

    def test_rejects_zero_batch(self):
        with pytest.raises(ConfigError):
            TransferConfig(batch_size=0)


class TestTrainingPhases:
    def _model_and_data(self, tiny_dataset, small_encoder_config, seed=6):
        torch.manual_seed(seed)
        encoder = ProcessEncoder(small_encoder_config)
        model = StudentVectorModel(
            encoder,
            tiny_dataset.block_a_questions,
            tiny_dataset.vocab.question_index,
            out_dim=1,
            head_hidden=16,
            dropout=0.0,
        )
        students = tiny_dataset.students_in("train")
        split = max(2, len(students) * 3 // 4)
        train_s, val_s = students[:split], students[split:]
        return (
            model,
            build_student_examples(tiny_dataset, train_s),
            score_labels(tiny_dataset, train_s),
            build_student_examples(tiny_dataset, val_s),
            score_labels(tiny_dataset, val_s),
        )

    def test_frozen_phase_leaves_the_encoder_bit_identical(
        self, tiny_dataset, small_encoder_config
    ):
        model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
        before = model.encoder.fingerprint()
        head_before = {k: v.clone() for k, v in model.head.state_dict().items()}
        config = TransferConfig(epochs_frozen=2, batch_size=8, lr=1e-2)
        history = train_transfer_frozen(model, tx, ty, vx, vy, config, seed=0)
        assert model.encoder.fingerprint() == before
        assert history.phase == "transfer_frozen"
        changed = any(
            not torch.equal(v, head_before[k]) for k, v in model.head.state_dict().items()
        )
        assert changed
        # gradients must be re-enabled for a later fine-tune
        assert all(p.requires_grad for p in model.encoder.parameters())

    def test_fine_tune_updates_the_encoder(self, tiny_dataset, small_encoder_config):
        model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
        before = model.encoder.fingerprint()
        config = TransferConfig(epochs_finetune=1, batch_size=8, lr=1e-2)
        history = fine_tune(model, tx, ty, vx, vy, config, seed=0)
        assert history.phase == "finetune"
        if history.best_epoch > 0:
            assert model.encoder.fingerprint() != before

    def test_zero_lr_phase_changes_nothing(self, tiny_dataset, small_encoder_config):
        model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
        states_before = {k: v.clone() for k, v in model.state_dict().items()}
        history = run_supervised_phase(
            model, list(model.parameters()), tx, ty, vx, vy,
            phase="probe", epochs=2, batch_size=8, lr=0.0, seed=3,
        )
        for key, value in model.state_dict().items():
            assert torch.equal(value, states_before[key]), key
        losses = [r.val_loss for r in history.records]
        assert all(v == losses[0] for v in losses)

    def test_selection_never_ends_worse_than_it_started(
        self, tiny_dataset, small_encoder_config
    ):
        model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
        history = run_supervised_phase(
            model, list(model.head.parameters()), tx, ty, vx, vy,
            phase="probe", epochs=3, batch_size=8, lr=5e-2, seed=1,
        )
        assert history.best_val_loss <= history.records[0].val_loss
        assert history.best_val_loss == min(r.val_loss for r in history.records)

    def test_same_seed_reruns_identically(self, tiny_dataset, small_encoder_config):
        runs = []
        for _ in range(2):
            model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
            history = run_supervised_phase(
                model, list(model.parameters()), tx, ty, vx, vy,
                phase="probe", epochs=2, batch_size=8, lr=1e-2, seed=11,
            )
            runs.append([r.val_loss for r in history.records])
        assert runs[0] == runs[1]

    def test_empty_sets_are_rejected(self, tiny_dataset, small_encoder_config):
        model, tx, ty, vx, vy = self._model_and_data(tiny_dataset, small_encoder_config)
        with pytest.raises(ContractViolation):
            run_supervised_phase(
                model, list(model.parameters()), [], ty, vx, vy,
                phase="probe", epochs=1, batch_size=8, lr=1e-3, seed=0,
            )
