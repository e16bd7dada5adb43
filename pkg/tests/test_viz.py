"""Tests for vector exports, 2-D embeddings, and plot rendering."""

import numpy as np
import pytest
import torch

from procrep.errors import ConfigError, ContractViolation, DataError
from procrep.irt import BehaviorIRTModel, PairExample
from procrep.process_model import EncoderConfig, ProcessEncoder
from procrep.transfer import StudentLevelModel, build_visit_examples
from procrep.viz import (
    behavior_groups,
    embed_2d,
    export_question_vectors,
    export_student_vectors,
    load_vector_table,
    render_plot,
)


@pytest.fixture(scope="module")
def behavior_model(tiny_dataset):
    torch.manual_seed(0)
    encoder = ProcessEncoder(
        EncoderConfig(
            n_event_types=len(tiny_dataset.vocab.event_types),
            n_questions=len(tiny_dataset.vocab.questions),
            dim_event=6,
            dim_question=6,
            hidden=8,
            include_status=False,
        )
    )
    return BehaviorIRTModel(encoder, tiny_dataset.students, tiny_dataset.vocab.questions)


@pytest.fixture(scope="module")
def irt_pairs(tiny_dataset):
    return [PairExample(s, q, y, seq) for s, q, y, seq in tiny_dataset.irt_pairs()]


@pytest.fixture(scope="module")
def question_table_path(behavior_model, irt_pairs, tmp_path_factory):
    path = tmp_path_factory.mktemp("viz") / "question_vectors.csv"
    export_question_vectors(
        behavior_model, irt_pairs, path, meta={"config_hash": "abc123", "seed": 3}
    )
    return path


class TestQuestionExport:
    def test_one_row_per_pair(self, question_table_path, irt_pairs, tiny_dataset):
        table = load_vector_table(question_table_path)
        assert len(table) == len(irt_pairs)
        assert len(table) <= len(tiny_dataset.students) * len(
            tiny_dataset.vocab.questions
        )
        assert table.ids == [(p.student_id, p.question_id) for p in irt_pairs]

    def test_vector_width_is_context_dim(self, question_table_path, behavior_model):
        table = load_vector_table(question_table_path)
        assert table.vectors.shape[1] == behavior_model.encoder.context_dim

    def test_extra_columns(self, question_table_path):
        table = load_vector_table(question_table_path)
        assert set(table.extra) == {"behavior", "status"}
        for value in table.extra["behavior"]:
            float(value)
        assert set(table.extra["status"]) <= {"correct", "incorrect", "incomplete"}

    def test_meta_lines_survive_roundtrip(self, question_table_path):
        table = load_vector_table(question_table_path)
        assert table.level == "question"
        assert table.meta["config_hash"] == "abc123"
        assert table.meta["seed"] == "3"

    def test_reexport_is_byte_identical(
        self, behavior_model, irt_pairs, question_table_path, tmp_path
    ):
        again = tmp_path / "again.csv"
        export_question_vectors(
            behavior_model, irt_pairs, again, meta={"config_hash": "abc123", "seed": 3}
        )
        assert again.read_bytes() == question_table_path.read_bytes()

    def test_empty_export_rejected(self, behavior_model, tmp_path):
        with pytest.raises(ContractViolation):
            export_question_vectors(behavior_model, [], tmp_path / "empty.csv")


class TestStudentExport:
    def test_one_row_per_student(self, tiny_dataset, tmp_path):
        torch.manual_seed(1)
        encoder = ProcessEncoder(
            EncoderConfig(
                n_event_types=len(tiny_dataset.vocab.event_types),
                n_questions=len(tiny_dataset.vocab.questions),
                dim_event=6,
                dim_question=6,
                hidden=8,
            )
        )
        model = StudentLevelModel(encoder, aggregator_hidden=12, out_dim=1)
        students = tiny_dataset.students
        examples = build_visit_examples(tiny_dataset, students)
        path = tmp_path / "student_vectors.csv"
        export_student_vectors(model, examples, tiny_dataset.labels.score, path)
        table = load_vector_table(path)
        assert table.level == "student"
        assert len(table) == len(students)
        assert all(question == "STUDENT" for _, question in table.ids)
        assert set(table.extra) == {"label"}
        assert set(table.extra["label"]) <= {"0", "1"}
        assert table.vectors.shape == (len(students), 12)


class TestLoadVectorTable:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_vector_table(tmp_path / "nope.csv")

    def test_header_only_file_rejected(self, tmp_path):
        path = tmp_path / "meta_only.csv"
        path.write_text("# level=question\n")
        with pytest.raises(DataError, match="no rows"):
            load_vector_table(path)


class TestEmbed2d:
    def test_same_seed_is_deterministic(self, rng):
        vectors = rng.normal(size=(30, 8))
        a = embed_2d(vectors, perplexity=5.0, seed=5)
        b = embed_2d(vectors, perplexity=5.0, seed=5)
        assert a.shape == (30, 2)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self, rng):
        vectors = rng.normal(size=(30, 8))
        a = embed_2d(vectors, perplexity=5.0, seed=5)
        b = embed_2d(vectors, perplexity=5.0, seed=6)
        assert not np.allclose(a, b)

    def test_duplicate_rows_share_coordinates(self, rng):
        vectors = rng.normal(size=(20, 6))
        vectors[7] = vectors[3]
        vectors[15] = vectors[3]
        coords = embed_2d(vectors, perplexity=4.0, seed=0)
        assert np.array_equal(coords[7], coords[3])
        assert np.array_equal(coords[15], coords[3])
        spread = coords.max(axis=0) - coords.min(axis=0)
        assert np.linalg.norm(coords[7] - coords[3]) <= 1e-3 * float(spread.max())

    def test_perplexity_is_capped_to_distinct_rows(self, rng):
        vectors = rng.normal(size=(10, 4))
        coords = embed_2d(vectors, perplexity=30.0, seed=1)
        assert coords.shape == (10, 2)
        assert np.all(np.isfinite(coords))

    def test_too_few_distinct_rows_rejected(self):
        vectors = np.tile(np.eye(3), (4, 1))
        with pytest.raises(ConfigError, match="distinct"):
            embed_2d(vectors, seed=0)


class TestBehaviorGroups:
    def test_exact_quartile_semantics(self):
        groups = behavior_groups([2.0, 1.0, -1.0, -3.0, 0.0])
        # pos median is 1.0; only values strictly above it are "hi"
        assert groups == ["pos_hi", "pos_lo", "neg_hi", "neg_lo", "pos_lo"]

    def test_single_sign_inputs(self):
        assert behavior_groups([0.5, 1.5]) == ["pos_lo", "pos_hi"]
        assert behavior_groups([-0.5, -1.5]) == ["neg_hi", "neg_lo"]

    def test_median_value_goes_low(self):
        assert behavior_groups([1.0, 1.0, 2.0]) == ["pos_lo", "pos_lo", "pos_hi"]


class TestRenderPlot:
    def test_writes_nonempty_png(self, question_table_path, rng, tmp_path):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table), 2))
        out = tmp_path / "plot.png"
        render_plot(coords, table, out, color_by="behavior", meta={"seed": 0})
        assert out.stat().st_size > 0
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_subsample_still_renders(self, question_table_path, rng, tmp_path):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table), 2))
        out = tmp_path / "sub.png"
        render_plot(coords, table, out, subsample=0.5, seed=1)
        assert out.stat().st_size > 0

    def test_misaligned_coordinates_rejected(self, question_table_path, rng, tmp_path):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table) - 1, 2))
        with pytest.raises(ContractViolation, match="align"):
            render_plot(coords, table, tmp_path / "x.png")

    def test_missing_color_column_rejected(self, question_table_path, rng, tmp_path):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table), 2))
        with pytest.raises(ConfigError, match="label"):
            render_plot(coords, table, tmp_path / "x.png", color_by="label")

    def test_unknown_color_mode_rejected(self, question_table_path, rng, tmp_path):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table), 2))
        with pytest.raises(ConfigError, match="color mode"):
            render_plot(coords, table, tmp_path / "x.png", color_by="status")

    @pytest.mark.parametrize("fraction", [0.0, 1.5, -0.2])
    def test_bad_subsample_rejected(self, question_table_path, rng, tmp_path, fraction):
        table = load_vector_table(question_table_path)
        coords = rng.normal(size=(len(table), 2))
        with pytest.raises(ConfigError, match="subsample"):
            render_plot(coords, table, tmp_path / "x.png", subsample=fraction)
