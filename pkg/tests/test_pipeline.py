import hashlib
import json

import numpy as np
import pytest
import yaml

from irshade.io import read_mesh, save_scene
from irshade.pipeline import ConfigError, PipelineError, ProjectConfig, resolve_seed, run_pipeline


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, small_relief_scene):
    return save_scene(tmp_path_factory.mktemp("scene"), small_relief_scene)


def write_config(scene_dir, out, **sections):
    cfg = {"paths": {"mesh": str(scene_dir / "degraded.ply"), "views": str(scene_dir / "views.txt"),
                     "output": str(out)},
           "light": {"gamma": 0.8},
           "refinement": {"iterations": 2},
           "eval": {"truth": str(scene_dir / "truth.ply")}}
    for k, v in sections.items():
        cfg.setdefault(k, {}).update(v)
    path = out.parent / f"{out.name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestRunPipeline:
    def test_smoke_manifest_and_checksums(self, scene_dir, tmp_path):
        res = run_pipeline(write_config(scene_dir, tmp_path / "out"))
        doc = json.loads(res.manifest.read_text())
        assert doc["status"] == "complete"
        names = {e["path"] for e in doc["artifacts"]}
        assert {"config.yaml", "preprocessed.ply", "albedo.txt", "refined.ply", "diagnostics.csv",
                "distance.json"} <= names
        for e in doc["artifacts"]:
            assert sha256(tmp_path / "out" / e["path"]) == e["sha256"]
        assert res.gamma == 0.8
        assert res.distance[0] < 0.25

    def test_missing_gamma_is_a_hard_error(self, scene_dir, tmp_path):
        cfg = write_config(scene_dir, tmp_path / "out", light={"gamma": None})
        with pytest.raises(PipelineError, match=r"\[calibrate\].*calibrate gamma"):
            run_pipeline(cfg)
        doc = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert doc["status"] == "failed"

    def test_deterministic_rerun(self, scene_dir, tmp_path):
        a = run_pipeline(write_config(scene_dir, tmp_path / "a"))
        b = run_pipeline(write_config(scene_dir, tmp_path / "b"))
        assert (tmp_path / "a" / "refined.ply").read_bytes() == (tmp_path / "b" / "refined.ply").read_bytes()
        assert np.array_equal(a.mesh.vertices, b.mesh.vertices)

    def test_partial_outputs_retained(self, scene_dir, tmp_path):
        bad = tmp_path / "bad_albedo.txt"
        bad.write_text("mode sparkly\n")
        cfg = write_config(scene_dir, tmp_path / "out", paths={"albedo": str(bad)})
        with pytest.raises(PipelineError) as err:
            run_pipeline(cfg)
        assert err.value.stage == "albedo"
        assert (tmp_path / "out" / "preprocessed.ply").exists()
        doc = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert doc["error"].startswith("[albedo]")

    def test_grouped_albedo_and_remesh(self, scene_dir, tmp_path):
        cfg = write_config(scene_dir, tmp_path / "out", albedo={"mode": "grouped"},
                           preprocess={"target_vertex_count": 1200}, refinement={"iterations": 1},
                           eval={"truth": None})
        res = run_pipeline(cfg)
        pre = read_mesh(tmp_path / "out" / "preprocessed.ply")
        assert 0.8 * 1200 <= pre.n_vertices <= 1.2 * 1200
        assert res.mesh.n_vertices == pre.n_vertices


class TestProjectConfig:
    def test_flags_override_file(self, scene_dir, tmp_path):
        path = write_config(scene_dir, tmp_path / "out")
        cfg = ProjectConfig.load(path, {"refinement": {"lambda1": 0.25}})
        assert cfg.refinement_config().lambda1 == 0.25
        assert cfg.refinement_config().outer_iterations == 2

    def test_validation(self, scene_dir, tmp_path):
        with pytest.raises(ConfigError, match="path not found"):
            ProjectConfig.load(write_config(scene_dir, tmp_path / "o1", paths={"mesh": "nope.ply"}))
        with pytest.raises(ConfigError, match="light.gamma"):
            ProjectConfig.load(write_config(scene_dir, tmp_path / "o2", light={"gamma": 5.0}))
        with pytest.raises(ConfigError):
            ProjectConfig.load(write_config(scene_dir, tmp_path / "o3", albedo={"mode": "fancy"}))
        with pytest.raises(ConfigError, match="unknown"):
            ProjectConfig.load(write_config(scene_dir, tmp_path / "o4", refinement={"lamda1": 1.0}))

    def test_seed_modes(self, scene_dir, tmp_path):
        cfg = ProjectConfig.load(write_config(scene_dir, tmp_path / "out"), {"seed": 42})
        assert resolve_seed(cfg) == 42
        cfg = ProjectConfig.load(write_config(scene_dir, tmp_path / "out"), {"deterministic": False})
        assert 0 <= resolve_seed(cfg) < 2 ** 31
