import json

import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from partstyle.config import FinetuneConfig, RunConfig
from partstyle.estimator import PartStylizer, check_mesh
from partstyle.mesh import StylizedMesh, identity_style, write_obj, write_parts
from partstyle.trainer import TrainConfig


def small(**kw):
    params = dict(prompt="red body, blue handle", iterations=3, image_size=64, grid_size=8, hidden_width=16, num_frequencies=2)
    params.update(kw)
    return PartStylizer(**params)


def test_params_round_trip():
    est = small(seed=4)
    assert est.get_params()["seed"] == 4
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(iterations=9).iterations == 9


def test_transform_before_fit(body_handle):
    with pytest.raises(NotFittedError):
        small().transform(body_handle)


def test_fit_transform(body_handle):
    est = small()
    out = est.fit_transform(body_handle)
    assert isinstance(out, StylizedMesh)
    assert est.anchor_ is not None and len(est.loss_log_) == 9
    assert (out.faces == body_handle.faces).all() and (out.face_parts == body_handle.face_parts).all()
    assert out.vertex_offsets.norm(dim=1).max().item() <= 0.1 + 1e-6


def test_needs_prompt(body_handle):
    with pytest.raises(ValueError, match="prompt"):
        small(prompt=None).fit(body_handle)


def test_check_mesh_accepts_paths(tmp_path, body_handle):
    write_obj(tmp_path / "m.obj", body_handle.vertices, body_handle.faces)
    write_parts(tmp_path / "m.json", body_handle)
    loaded = check_mesh(tmp_path / "m.obj", tmp_path / "m.json")
    assert loaded.part_names == body_handle.part_names
    assert check_mesh(identity_style(body_handle)) is body_handle
    with pytest.raises(TypeError):
        check_mesh(42)


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(mesh="a.obj", parts="a.json", prompt="red body", train=TrainConfig(iterations=5),
                    finetune=FinetuneConfig(epochs=3))
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("payload", [{"meshh": 1}, {"train": {"iters": 3}}, {"finetune": {"epoch": 2}}])
def test_run_config_rejects_unknown(tmp_path, payload):
    (tmp_path / "c.json").write_text(json.dumps(payload))
    with pytest.raises(ValueError):
        RunConfig.load(tmp_path / "c.json")
