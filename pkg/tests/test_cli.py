import json
import subprocess
import sys

import pytest

from zoomsense.cli import main
from zoomsense.config import Config, load_config, read_ini
from zoomsense.dataio import save_scenes
from zoomsense.env import Scene, SceneObject
from zoomsense.geometry import BBox

SMALL = ["--n-scenes", "4", "--set", "generator.width=256", "--set", "generator.height=256"]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def check_eval_deterministic(tmp_path, task="detection", policy="random", extra=()):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"eval_{task}_{policy}_{run}"
        argv = ["eval", "--task", task, "--policy", policy, "--seed", "3", "--out", str(out), *SMALL, *extra]
        assert main(argv) == 0
        outs.append(_files(out))
    return outs[0] == outs[1], outs[0]


def check_train_deterministic(tmp_path, task="detection"):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"train_{task}_{run}"
        argv = ["train", "--task", task, "--seed", "5", "--iterations", "4", "--out", str(out), *SMALL]
        assert main(argv) == 0
        outs.append(_files(out))
    return outs[0] == outs[1], outs[0]


class TestDeterminism:
    @pytest.mark.parametrize("task", ["detection", "segmentation"])
    def test_eval(self, tmp_path, task):
        same, files = check_eval_deterministic(tmp_path, task)
        assert same
        assert set(files) == {"per_scene.csv", "budget.csv", "episodes.jsonl", "report.json"}

    @pytest.mark.parametrize("task", ["detection", "segmentation"])
    def test_train(self, tmp_path, task):
        same, files = check_train_deterministic(tmp_path, task)
        assert same
        assert set(files) == {"train_report.csv", "policy.json"}

    def test_seed_changes_output(self, tmp_path):
        _, a = check_eval_deterministic(tmp_path)
        argv = ["eval", "--policy", "random", "--seed", "4", "--out", str(tmp_path / "c"), *SMALL]
        assert main(argv) == 0
        assert _files(tmp_path / "c")["per_scene.csv"] != a["per_scene.csv"]


def test_eval_trained_snapshot(tmp_path):
    assert main(["train", "--seed", "1", "--iterations", "2", "--out", str(tmp_path / "t"), *SMALL]) == 0
    snap = str(tmp_path / "t" / "policy.json")
    argv = ["eval", "--policy", "trained", "--snapshot", snap, "--seed", "1", "--out", str(tmp_path / "e"), *SMALL]
    assert main(argv) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["n_episodes"] == 4 and "coco" in report
    assert [r["budget"] for r in report["budget_curve"]] == [0, 1, 2, 3]


class TestConfigPrecedence:
    def test_three_layers(self, tmp_path, capsys):
        ini = tmp_path / "c.ini"
        ini.write_text("[run]\nseed = 11\nn_scenes = 7\n[grpo]\nlearning_rate = 0.2\n")
        argv = ["print-config", "--config", str(ini), "--set", "run.seed=12", "--set", "grpo.kl_beta=0.5", "--seed", "13"]
        assert main(argv) == 0
        vals = read_ini(capsys.readouterr().out)
        assert vals[("run", "seed")] == "13"  # flag beats --set beats file
        assert vals[("run", "n_scenes")] == "7"  # file beats default
        assert vals[("grpo", "learning_rate")] == "0.2"
        assert vals[("grpo", "kl_beta")] == "0.5"
        assert vals[("grpo", "group_size")] == "8"  # default

    def test_print_config_round_trips(self, tmp_path):
        assert main(["print-config", "--out", str(tmp_path / "c.ini")]) == 0
        assert load_config(tmp_path / "c.ini") == Config()


def _score_scene(tmp_path):
    s = Scene(100, 100, (SceneObject(BBox(10, 10, 17, 17), "car"), SceneObject(BBox(60, 60, 67, 67), "car")), scene_id="s")
    save_scenes(tmp_path / "s.json", [s])
    return tmp_path / "s.json"


def _score(tmp_path, text, capsys, *extra):
    (tmp_path / "r.txt").write_text(text)
    code = main(["score", "--response", str(tmp_path / "r.txt"), "--scene", str(_score_scene(tmp_path)), *extra])
    return code, capsys.readouterr().out


class TestScore:
    def test_valid_response(self, tmp_path, capsys):
        text = '<think>a</think><answer>[{"bbox_2d":[9,9,19,19]},{"bbox_2d":[59,59,69,69]}]</answer>'
        code, out = _score(tmp_path, text, capsys)
        r = json.loads(out)
        assert code == 0
        assert r["format_error"] is None
        assert (r["r_format"], r["r_no_overlap"], r["r_area"], r["r_coverage"]) == (1.0, 1.0, 1.0, 1.0)
        assert r["heuristic"] == 4.0

    def test_unparseable_response(self, tmp_path, capsys):
        code, out = _score(tmp_path, "no tags at all", capsys)
        r = json.loads(out)
        assert code == 0 and r["format_error"].startswith("MissingThink")
        assert r["heuristic"] == 0.0 and r["r_task"] == 0.0

    def test_reward_mode(self, tmp_path, capsys):
        text = '<think>a</think><answer>[{"bbox_2d":[0,0,19,19]}]</answer>'
        _, out = _score(tmp_path, text, capsys, "--reward-mode", "heuristic")
        r = json.loads(out)
        assert r["total"] == r["heuristic"]


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["eval", "--no-such-flag"]) == 1
        assert main(["eval"]) == 1  # --out missing
        assert main(["print-config", "--set", "nonsense"]) == 1
        assert main(["print-config", "--set", "run.seed=abc"]) == 1
        assert main(["print-config", "--set", "grpo.group_size=1"]) == 1
        assert main(["print-config", "--set", "nosection.x=1"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_policy_flags(self, tmp_path):
        assert main(["eval", "--policy", "trained", "--out", str(tmp_path), *SMALL]) == 1
        assert main(["eval", "--policy", "external", "--out", str(tmp_path), *SMALL]) == 1

    def test_data_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema_version": 99, "scenes": []}')
        assert main(["eval", "--scenes", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert main(["eval", "--n-scenes", "0", "--out", str(tmp_path / "o")]) == 2
        inverted = ["--set", "generator.objects_min=9", "--set", "generator.objects_max=2"]
        assert main(["gen-scenes", "--out", str(tmp_path / "x.json"), *inverted]) == 2
        assert main(["gen-scenes", "--out", str(tmp_path / "x.json"), "--set", "generator.width=20"]) == 2
        assert main(["score", "--response", str(tmp_path / "missing"), "--scene", str(bad)]) == 2

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_abort(self, tmp_path):
        argv = [
            "train", "--iterations", "2", "--lr", "1000", "--set", "grpo.kl_beta=1e308",
            "--out", str(tmp_path), *SMALL,
        ]
        assert main(argv) == 3
        dump = json.loads((tmp_path / "abort_dump.json").read_text())
        assert dump["iteration"] == 1

    def test_unreachable_endpoint_aborts(self, tmp_path):
        argv = [
            "eval", "--policy", "external", "--endpoint-url", "http://127.0.0.1:9",
            "--set", "endpoint.retries=0", "--set", "endpoint.timeout_s=0.5", "--out", str(tmp_path),
            "--n-scenes", "1",
        ]
        assert main(argv) == 3


def test_gen_scenes(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["gen-scenes", "--out", str(out), "--seed", "2", *SMALL]) == 0
    assert "wrote 4 scenes" in capsys.readouterr().out
    assert main(["gen-scenes", "--out", str(out), "--cap", "2"]) == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "zoomsense.cli", "print-config"], capture_output=True, text=True)
    assert r.returncode == 0 and "[grpo]" in r.stdout
