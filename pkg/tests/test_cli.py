import json

import numpy as np
import pytest

from gradba import scene as scn
from gradba import trajectory as trj
from gradba.cli import main


@pytest.fixture
def workdir(tmp_path):
    config = {
        "scene": {"n_cameras": 6, "n_landmarks": 40, "trajectory": "arc",
                  "seed": 11},
        "noise": {"sigma": 0.6, "outlier_ratio": 0.0},
    }
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(config))
    return tmp_path, str(cfg)


def run_pipeline(tmp_path, cfg, tag):
    sc = str(tmp_path / f"scene{tag}.json")
    st = str(tmp_path / f"state{tag}.json")
    it = str(tmp_path / f"init{tag}.tum")
    et = str(tmp_path / f"est{tag}.tum")
    rp = str(tmp_path / f"report{tag}.json")
    gt = str(tmp_path / f"gt{tag}.tum")
    mi = str(tmp_path / f"metrics{tag}.json")
    assert main(["synth", "--config", cfg, "--out", sc]) == 0
    assert main(["init", "--scene", sc, "--config", cfg,
                 "--out-state", st, "--out-traj", it]) == 0
    assert main(["solve", "--scene", sc, "--state", st, "--config", cfg,
                 "--out-traj", et, "--report", rp]) == 0
    scene = scn.load_scene(sc)
    trj.write_tum(trj.records_from_poses(scn.gt_poses(scene),
                                         scn.timestamps(scene)), gt)
    assert main(["eval", "--est", et, "--gt", gt, "--align", "sim",
                 "--report", mi]) == 0
    return sc, mi, rp


class TestPipeline:
    def test_full_pipeline_and_determinism(self, workdir):
        tmp_path, cfg = workdir
        sc1, m1, r1 = run_pipeline(tmp_path, cfg, "a")
        sc2, m2, r2 = run_pipeline(tmp_path, cfg, "b")
        assert (tmp_path / "scenea.json").read_bytes() == \
            (tmp_path / "sceneb.json").read_bytes()
        assert (tmp_path / "metricsa.json").read_bytes() == \
            (tmp_path / "metricsb.json").read_bytes()
        assert (tmp_path / "reporta.json").read_bytes() == \
            (tmp_path / "reportb.json").read_bytes()
        metrics = json.loads((tmp_path / "metricsa.json").read_text())
        assert metrics["ate"] < 0.05
        report = json.loads((tmp_path / "reporta.json").read_text())
        assert np.all(np.diff(report["energies"]) <= 0)

    def test_gradcheck_static_and_trackbias(self, workdir):
        tmp_path, cfg = workdir
        sc = str(tmp_path / "scene.json")
        assert main(["synth", "--config", cfg, "--out", sc]) == 0
        rep = str(tmp_path / "grad_static.json")
        assert main(["gradcheck", "--scene", sc, "--model", "static",
                     "--report", rep]) == 0
        payload = json.loads((tmp_path / "grad_static.json").read_text())
        assert payload["theta_dim"] == 0
        rep2 = str(tmp_path / "grad_tb.json")
        assert main(["gradcheck", "--scene", sc, "--model", "trackbias",
                     "--fd-step", "1e-5", "--fd-subset", "12",
                     "--report", rep2]) == 0
        payload = json.loads((tmp_path / "grad_tb.json").read_text())
        assert payload["max_rel_err_fd"] < 1e-4
        assert payload["max_rel_err_unrolled"] < 1e-3

    def test_gradcheck_descfield(self, workdir, tmp_path):
        _, cfg = workdir
        sc = str(tmp_path / "scene_df.json")
        assert main(["synth", "--config", cfg, "--out", sc]) == 0
        scene = scn.load_scene(sc)
        scn.attach_descriptor_field(scene, grid_shape=(4, 4, 3), seed=9)
        scn.save_scene(scene, sc)
        rep = str(tmp_path / "grad_df.json")
        assert main(["gradcheck", "--scene", sc, "--model", "descfield",
                     "--fd-subset", "8", "--report", rep]) == 0
        payload = json.loads((tmp_path / "grad_df.json").read_text())
        assert payload["max_rel_err_fd"] < 1e-4
        assert len(payload["checked_indices"]) == 8

    def test_temporal_loss_subcommand(self, workdir, tmp_path):
        _, cfg = workdir
        sc = str(tmp_path / "scene_t.json")
        assert main(["synth", "--config", cfg, "--out", sc]) == 0
        scene = scn.load_scene(sc)
        scn.attach_temporal(scene, seed=5)
        scn.save_scene(scene, sc)
        rep = str(tmp_path / "temporal.json")
        assert main(["temporal-loss", "--scene", sc, "--report", rep]) == 0
        payload = json.loads((tmp_path / "temporal.json").read_text())
        assert payload["phi_sum"] >= 0
        assert len(payload["transitions"]) == 3

    def test_error_path_stage_tagged(self, tmp_path, capsys):
        # a two-frame window cannot be initialized: expect exit 1 with a
        # stage-tagged line on stderr
        scene = scn.generate_scene(scn.SyntheticSceneConfig(
            n_cameras=2, n_landmarks=8, seed=0))
        p = tmp_path / "tiny.json"
        scn.save_scene(scene, p)
        rc = main(["init", "--scene", str(p), "--out-state",
                   str(tmp_path / "s.json"), "--out-traj",
                   str(tmp_path / "t.tum")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "error[init]" in err
