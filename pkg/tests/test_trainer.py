import csv
import json
from dataclasses import replace

import pytest
import torch

from partstyle import fixtures
from partstyle.field import FieldConfig, parameter_hash
from partstyle.trainer import (
    EMBEDDING,
    PART_STYLE,
    LocalizationError,
    PromptError,
    TrainConfig,
    TrainingAborted,
    init_state,
    parse_prompt,
    run,
    sample_training_views,
    schedule_loss,
    train_step,
)
import partstyle.trainer as trainer_mod

SMALL = TrainConfig(
    iterations=4,
    image_size=64,
    grid_size=8,
    snapshot_every=2,
    anchor_azimuths=4,
    turntable_views=2,
    field=FieldConfig(hidden_width=32, num_frequencies=3),
)


@pytest.fixture(scope="module")
def teddy():
    return fixtures.assemble(
        {
            "legs": fixtures.uv_sphere(0.4, (0, -1, 0), 6, 10),
            "arms": fixtures.uv_sphere(0.4, (1, 0, 0), 6, 10),
            "head": fixtures.uv_sphere(0.5, (0, 1, 0), 6, 10),
        }
    )


class TestSchedule:
    def test_every_other(self):
        assert [schedule_loss(i) for i in range(4)] == [PART_STYLE, EMBEDDING, PART_STYLE, EMBEDDING]

    def test_block_one_is_every_other(self):
        assert all(schedule_loss(i, "block:1") == schedule_loss(i) for i in range(50))

    def test_huge_block_is_part_style_only(self):
        assert {schedule_loss(i, "block:2000") for i in range(2000)} == {PART_STYLE}

    def test_block_three(self):
        assert [schedule_loss(i, "block:3") for i in range(7)] == [PART_STYLE] * 3 + [EMBEDDING] * 3 + [PART_STYLE]

    @pytest.mark.parametrize("bad", ["sometimes", "block:0", "block:x"])
    def test_bad_spec(self, bad):
        with pytest.raises(ValueError):
            schedule_loss(0, bad)


class TestParsePrompt:
    def test_lamp(self, lamp):
        spec = parse_prompt("wood base, gold tube, fur shade", lamp)
        assert [(p.style, p.part_phrase) for p in spec.pairs] == [("wood", "base"), ("gold", "tube"), ("fur", "shade")]
        assert spec.part_indices == [0, 1, 2]

    def test_teddy(self, teddy):
        spec = parse_prompt("linen legs, fur arms, leather head", teddy)
        assert spec.style_phrases == ["linen", "fur", "leather"]
        assert [teddy.part_names[i] for i in spec.part_indices] == ["legs", "arms", "head"]

    def test_synonym(self, body_handle):
        spec = parse_prompt("shiny red grip", body_handle)
        assert spec.pairs[0].style == "shiny red" and spec.part_indices == [1]

    def test_no_match(self, lamp):
        with pytest.raises(PromptError, match="shiny thing"):
            parse_prompt("shiny thing", lamp)

    def test_duplicate_part(self, body_handle):
        with pytest.raises(PromptError, match="twice"):
            parse_prompt("red handle, blue grip", body_handle)

    def test_missing_style(self, body_handle):
        with pytest.raises(PromptError, match="no style"):
            parse_prompt("handle", body_handle)


class TestTrainStep:
    def test_loss_decreases_on_single_part(self, one_sphere):
        # fixed views, so the trajectory reflects optimization rather than view sampling
        cfg = replace(SMALL, iterations=50, view_sigma=0.0)
        prompt = parse_prompt("red body", one_sphere)
        state = init_state(cfg, one_sphere, prompt)
        history = {PART_STYLE: [], EMBEDDING: []}
        for _ in range(50):
            rows = train_step(state, one_sphere, prompt, sample_training_views(state.anchor, cfg.view_sigma, 2, state.rng))
            history[rows[0]["loss"]].append(sum(r["value"] for r in rows))
        for values in history.values():
            assert values[-1] < values[0]
            assert sum(b >= a for a, b in zip(values, values[1:])) <= 5

    def test_zero_learning_rate(self, one_sphere):
        cfg = replace(SMALL, learning_rate=0.0, view_sigma=0.0, mode="no-embedding")
        prompt = parse_prompt("red body", one_sphere)
        state = init_state(cfg, one_sphere, prompt)
        before = parameter_hash(state.field)
        values = [train_step(state, one_sphere, prompt, [state.anchor] * 3)[0]["value"] for _ in range(4)]
        assert parameter_hash(state.field) == before
        assert len(set(values)) == 1

    def test_fixed_seed_same_trajectory(self, body_handle):
        logs = [run(replace(SMALL, iterations=6), body_handle, "red body, blue handle").loss_log for _ in range(2)]
        assert logs[0] == logs[1]

    def test_invisible_part_raises(self):
        mesh = fixtures.enclosed_core()
        with pytest.raises(LocalizationError):
            run(replace(SMALL, iterations=1), mesh, "red core")

    def test_holistic_mode_uses_whole_prompt(self, body_handle):
        art = run(replace(SMALL, iterations=2, mode="no-grounding"), body_handle, "red body, blue handle")
        assert {r["loss"] for r in art.loss_log} == {EMBEDDING}


class TestRun:
    def test_single_iteration_artifacts(self, tmp_path, body_handle):
        art = run(replace(SMALL, iterations=1), body_handle, "red body, blue handle", out_dir=tmp_path)
        assert len(art.loss_log) == 3
        for name in ("config.json", "loss_log.csv", "final_mesh.ply", "metadata.json", "checkpoints/iter_000001.pt",
                     "renders/turntable_00.png", "renders/anchor_content.png"):
            assert (tmp_path / name).exists(), name
        with open(tmp_path / "loss_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 and rows[0].keys() == {"iteration", "loss", "value", "camera", "max_offset"}
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["config_hash"] == replace(SMALL, iterations=1).hash()
        assert meta["max_offset"] <= 0.1 + 1e-6

    def test_resume_matches_unbroken_run(self, tmp_path, body_handle):
        cfg = replace(SMALL, iterations=6, snapshot_every=3)
        full = run(cfg, body_handle, "red body, blue handle", out_dir=tmp_path / "a")
        run(cfg, body_handle, "red body, blue handle", out_dir=tmp_path / "b", stop_at=3)
        resumed = run(cfg, body_handle, "red body, blue handle", out_dir=tmp_path / "b",
                      resume_from=tmp_path / "b" / "checkpoints" / "iter_000003.pt")
        assert resumed.metadata["field_hash"] == full.metadata["field_hash"]
        assert resumed.loss_log == full.loss_log

    def test_checkpoint_failure_dumps_state(self, tmp_path, body_handle, monkeypatch):
        real = trainer_mod.save_state
        calls = []

        def flaky(path, state):
            calls.append(path)
            if len(calls) == 1:
                raise OSError("disk full")
            real(path, state)

        monkeypatch.setattr(trainer_mod, "save_state", flaky)
        with pytest.raises(TrainingAborted, match="disk full") as info:
            run(replace(SMALL, iterations=2, snapshot_every=1), body_handle, "red body, blue handle", out_dir=tmp_path)
        assert info.value.dump_path is not None and info.value.dump_path.exists()

    def test_default_budget(self):
        assert TrainConfig().iterations == 2000 and TrainConfig().views_per_iter == 2


class TestConfig:
    def test_round_trip(self):
        cfg = replace(SMALL, background=(0.0, 0.5, 1.0), mode="no-embedding")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_float64_run(self, body_handle):
        art = run(replace(SMALL, iterations=2, dtype="float64"), body_handle, "red body, blue handle")
        assert art.stylized.vertex_colors.dtype == torch.float64
