import hashlib
import json

import pytest

from nrepose import cli, nre


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_synth_writes_scene_and_manifest(tmp_path, capsys):
    out = tmp_path / "scene.json"
    assert cli.main(["synth", "--points", "50", "--outliers", "0.3", "--seed", "7",
                     "-o", str(out)]) == 0
    assert out.exists()
    man = json.loads((tmp_path / "scene.manifest.json").read_text())
    assert man["command"] == "synth" and man["master_seed"] == 7
    assert "sha256" in capsys.readouterr().out


def test_synth_rejects_too_few_points(tmp_path, capsys):
    assert cli.main(["synth", "--points", "2", "-o", str(tmp_path / "s.json")]) == 2
    assert "need >= 4 points" in capsys.readouterr().err


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert cli.main(["synth", "--preset", "medium", "--seed", "3", "-o", str(p)]) == 0
    assert _sha(a) == _sha(b)


def test_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"points": 12, "seed": 4}))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["synth", "--config", str(conf), "-o", str(a)]) == 0
    from nrepose.scene import load_scene
    assert len(load_scene(a)[0]) == 12
    assert cli.main(["synth", "--config", str(conf), "--points", "20", "-o", str(b)]) == 0
    assert json.loads((tmp_path / "a.manifest.json").read_text())["config"]["points"] == 12
    assert json.loads((tmp_path / "b.manifest.json").read_text())["config"]["points"] == 20
    conf.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["synth", "--config", str(conf), "-o", str(a)]) == 2


@pytest.fixture(scope="module")
def noiseless_scene(tmp_path_factory):
    p = tmp_path_factory.mktemp("scene") / "clean.json"
    assert cli.main(["synth", "--snap", "--seed", "1", "--points", "30", "-o", str(p)]) == 0
    return p


def test_estimate_noiseless_round_trip(noiseless_scene, tmp_path):
    rep, trace = tmp_path / "rep.json", tmp_path / "trace.csv"
    code = cli.main(["estimate", str(noiseless_scene), "-o", str(tmp_path / "pose.json"),
                     "--report", str(rep), "--trace", str(trace)])
    assert code == 0
    report = json.loads(rep.read_text())
    assert report["final"]["rotation_error_deg"] < 1e-3
    assert trace.read_text().splitlines()[0] == "stage,iter,sigma,loss,step_norm"
    from nrepose.geometry import Pose
    Pose.from_json((tmp_path / "pose.json").read_text())


@pytest.mark.parametrize("method", ["re", "fpr", "nre_coarse", "msac"])
def test_estimate_dispatch(method, noiseless_scene, tmp_path):
    rep = tmp_path / "rep.json"
    argv = ["estimate", str(noiseless_scene), "--method", method, "--sigma", "1.0",
            "-o", str(tmp_path / "pose.json"), "--report", str(rep)]
    assert cli.main(argv) == 0
    assert json.loads(rep.read_text())["method"] == method


def test_estimate_missing_file(tmp_path):
    assert cli.main(["estimate", str(tmp_path / "nope.json")]) == 2


def test_estimate_failure_exit_code(tmp_path, monkeypatch, noiseless_scene):
    from nrepose import pipeline
    from nrepose.solvers import EstimationError

    def boom(*a, **k):
        raise EstimationError("fewer than 3 informative maps")
    monkeypatch.setattr(pipeline, "estimate_pose_c2f", boom)
    assert cli.main(["estimate", str(noiseless_scene), "-o", str(tmp_path / "p.json")]) == 3


def test_compare_three_presets(tmp_path, capsys):
    out = tmp_path / "bench"
    argv = ["compare", "--scenes", "2", "--methods", "nre_c2f,re", "--sigmas", "1,5",
            "--outdir", str(out)]
    assert cli.main(argv) == 0
    for p in ("easy", "medium", "hard"):
        assert (out / f"summary_{p}.csv").exists()
        text = (out / f"results_{p}.csv").read_text()
        assert "re_s1," in text and "re_s5," in text
    assert json.loads((out / "manifest.json").read_text())["command"] == "compare"
    first = {p: (out / f"results_{p}.csv").read_text() for p in ("easy", "hard")}
    assert cli.main(argv + ["--threads", "2"]) == 0

    def strip(t):        # drop the wall-clock column
        return [line.rsplit(",", 1)[0] for line in t.splitlines()]
    for p, t in first.items():
        assert strip(t) == strip((out / f"results_{p}.csv").read_text())


def test_compare_usage_errors(tmp_path):
    assert cli.main(["compare", "--presets", "brutal", "--outdir", str(tmp_path)]) == 2
    assert cli.main(["compare", "--methods", "nre", "--outdir", str(tmp_path)]) == 2


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--configs", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") >= 5            # four checks plus the summary line


def test_gradcheck_detects_sign_flip(monkeypatch, capsys):
    good = nre.smoothed_pose_loss_grad
    monkeypatch.setattr(nre, "smoothed_pose_loss_grad", lambda *a, **k: -good(*a, **k))
    assert cli.main(["gradcheck", "--configs", "2"]) == 1
    assert "smoothed loss / pose" in capsys.readouterr().err


def test_unknown_subcommand():
    assert cli.main(["frobnicate"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["--version"])
