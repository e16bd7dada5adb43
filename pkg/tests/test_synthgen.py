"""Synthetic cohort generator: determinism, planted truth, archetype behavior."""

from __future__ import annotations

import numpy as np
import pytest

from procrep.errors import ConfigError
from procrep.ingest import assign_statuses, final_statuses, parse_log, segment_visits
from procrep.synthgen import (
    ARCHETYPES,
    GroundTruth,
    SynthConfig,
    generate_cohort,
    write_cohort,
)


class TestConfig:
    def test_rejects_zero_students(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_students=0)

    def test_rejects_empty_block(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_questions_b=0)

    def test_rejects_unknown_archetype(self):
        with pytest.raises(ConfigError, match="archetype"):
            SynthConfig(archetype_mix="speedrunner:1")

    def test_rejects_negative_spread(self):
        with pytest.raises(ConfigError):
            SynthConfig(ability_sd=-0.5)

    def test_from_values_casts_and_validates(self):
        config = SynthConfig.from_values({"n_students": "10", "behavior_scale": "0.5"})
        assert config.n_students == 10
        assert config.behavior_scale == 0.5
        with pytest.raises(ConfigError, match="n_students"):
            SynthConfig.from_values({"n_students": "ten"})

    def test_to_dict_roundtrips_through_from_values(self):
        config = SynthConfig(n_students=7, archetype_mix="rapid:2,checker:1")
        values = {k: str(v) for k, v in config.to_dict().items()}
        assert SynthConfig.from_values(values) == config


class TestDeterminism:
    def test_same_seed_same_cohort(self):
        config = SynthConfig(n_students=10, n_questions_a=3, n_questions_b=3)
        a = generate_cohort(config, seed=7)
        b = generate_cohort(config, seed=7)
        assert a.groups == b.groups
        assert a.truth.to_dict() == b.truth.to_dict()
        assert a.answer_key == b.answer_key

    def test_written_artifacts_are_byte_identical(self, tmp_path):
        config = SynthConfig(n_students=8, n_questions_a=3, n_questions_b=3)
        paths_a = write_cohort(generate_cohort(config, seed=7), tmp_path / "a")
        paths_b = write_cohort(generate_cohort(config, seed=7), tmp_path / "b")
        assert set(paths_a) == set(paths_b)
        for name in paths_a:
            assert paths_a[name].read_bytes() == paths_b[name].read_bytes(), name

    def test_different_seeds_differ(self):
        config = SynthConfig(n_students=8, n_questions_a=3, n_questions_b=3)
        a = generate_cohort(config, seed=1)
        b = generate_cohort(config, seed=2)
        assert a.groups != b.groups


class TestEmittedLog:
    def test_timestamps_strictly_increase_per_student(self, tiny_cohort):
        for student, events in tiny_cohort.groups.items():
            times = [e.timestamp for e in events]
            assert all(b > a for a, b in zip(times, times[1:])), student

    def test_timestamps_respect_block_windows(self, tiny_cohort):
        limit = tiny_cohort.config.block_time_limit
        for events in tiny_cohort.groups.values():
            for event in events:
                block = tiny_cohort.block_map[event.question_id]
                if block == "A":
                    assert 0.0 <= event.timestamp <= limit
                else:
                    assert limit <= event.timestamp <= 2 * limit

    def test_every_question_has_key_and_block(self, tiny_cohort):
        assert set(tiny_cohort.answer_key) == set(tiny_cohort.block_map)
        for entry in tiny_cohort.answer_key.values():
            for answer in entry.acceptable_answers:
                assert set(answer) == set(entry.required_fields)

    def test_log_parses_cleanly_after_write(self, tiny_cohort, tmp_path):
        paths = write_cohort(tiny_cohort, tmp_path)
        groups, issues = parse_log(paths["log"], tiny_cohort.schema)
        assert issues == []
        assert sorted(groups) == sorted(tiny_cohort.groups)


class TestPlantedTruth:
    def test_replay_of_written_log_reproduces_planted_statuses(self, tiny_cohort, tmp_path):
        """The generator's notion of correctness and the replay engine's must
        agree on every visited (student, question) pair."""
        paths = write_cohort(tiny_cohort, tmp_path)
        groups, _ = parse_log(paths["log"], tiny_cohort.schema)
        recovered = {}
        for student, events in groups.items():
            visits = segment_visits(events)
            assign_statuses(visits, tiny_cohort.answer_key, tiny_cohort.schema)
            for s, by_q in final_statuses(visits).items():
                recovered[s] = {q: status.label for q, status in by_q.items()}
        assert recovered == tiny_cohort.truth.planted

    def test_truth_covers_every_student(self, tiny_cohort):
        students = set(tiny_cohort.groups)
        assert set(tiny_cohort.truth.abilities) == students
        assert set(tiny_cohort.truth.archetypes) == students
        assert set(tiny_cohort.truth.archetypes.values()) <= set(ARCHETYPES)

    def test_behavior_effects_follow_acts(self, tiny_cohort):
        config = tiny_cohort.config
        for student, by_q in tiny_cohort.truth.b_effects.items():
            for qid, b in by_q.items():
                act = tiny_cohort.truth.acts[student][qid]
                expected = config.behavior_scale * (
                    config.tool_bonus * act["tool_use"] - config.rush_penalty * act["rush"]
                )
                assert b == pytest.approx(expected)

    def test_ground_truth_roundtrip(self, tiny_cohort, tmp_path):
        path = tmp_path / "truth.json"
        tiny_cohort.truth.save(path)
        loaded = GroundTruth.load(path)
        assert loaded.to_dict() == tiny_cohort.truth.to_dict()


class TestArchetypes:
    def test_single_archetype_mix_assigns_everyone(self):
        config = SynthConfig(n_students=12, n_questions_a=3, n_questions_b=3, archetype_mix="checker:1")
        cohort = generate_cohort(config, seed=4)
        assert set(cohort.truth.archetypes.values()) == {"checker"}

    @pytest.mark.parametrize("seed", [0, 11])
    def test_overtime_students_leave_trailing_block_a_questions_unfinished(self, seed):
        """A cohort of pure time_runner_out students: each one's block-A
        presentation order must end with at least one question that was never
        visited or was left incomplete."""
        config = SynthConfig(n_students=60, archetype_mix="time_runner_out:1")
        cohort = generate_cohort(config, seed=seed)
        a_questions = sorted(q for q, b in cohort.block_map.items() if b == "A")
        for student in cohort.groups:
            planted = cohort.truth.planted[student]
            last = planted.get(a_questions[-1])
            assert last is None or last == "incomplete", (student, last)


class TestOutcomeStatistics:
    def test_flat_abilities_give_even_odds(self):
        """With zero ability, difficulty, and behavior spread every planted
        outcome is a fair coin; check the empirical rate at 3 sigma."""
        config = SynthConfig(
            n_students=100,
            n_questions_a=12,
            n_questions_b=12,
            ability_sd=0.0,
            difficulty_sd=0.0,
            behavior_scale=0.0,
        )
        cohort = generate_cohort(config, seed=5)
        flags = [
            1 if status == "correct" else 0
            for by_q in cohort.truth.intended.values()
            for status in by_q.values()
        ]
        assert len(flags) >= 2000
        rate = float(np.mean(flags))
        bound = 3 * 0.5 / np.sqrt(len(flags))
        assert abs(rate - 0.5) < bound

    def test_higher_ability_means_more_intended_correct(self):
        config = SynthConfig(n_students=200, n_questions_a=8, n_questions_b=8)
        cohort = generate_cohort(config, seed=3)
        students = sorted(cohort.truth.abilities)
        abilities = np.array([cohort.truth.abilities[s] for s in students])
        counts = np.array(
            [
                sum(1 for st in cohort.truth.intended[s].values() if st == "correct")
                for s in students
            ]
        )
        order = np.argsort(abilities)
        quarter = len(students) // 4
        assert counts[order[-quarter:]].mean() > counts[order[:quarter]].mean() + 2.0
