import json

import numpy as np
import pytest

from nsmae.checkpoint import load_checkpoint
from nsmae.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run, split_overrides
from nsmae.config import DEFAULTS
from nsmae.dataio import load_depth_pfm, load_image_ppm, load_manifest
from nsmae.suites import tiny_config


@pytest.fixture
def tiny_cfg(tmp_path):
    cfg = tiny_config(0)
    cfg["data"]["scenes"] = 2
    cfg["renderer"]["rays_per_camera"] = 8
    cfg["optim"]["steps"] = 2
    cfg["probe"].update({"train_scenes": 2, "test_scenes": 2, "steps": 20})
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfigDump:
    def test_complete_defaults(self, capsys):
        assert run(["config", "dump"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc == DEFAULTS

    def test_overrides(self, capsys):
        assert run(["config", "dump", "--optim.lr=3e-4", "--renderer.n_per", "12", "--seed", "5"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["optim"]["lr"] == 3e-4 and doc["renderer"]["n_per"] == 12 and doc["seed"] == 5

    def test_unknown_key(self, capsys):
        assert run(["config", "dump", "--optim.learning_rate=1"]) == EXIT_USAGE
        assert "learning_rate" in capsys.readouterr().err

    def test_threads_env_fallback(self, capsys, monkeypatch):
        monkeypatch.setenv("NSMAE_THREADS", "3")
        assert run(["config", "dump"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["threads"] == 3
        assert run(["config", "dump", "--threads", "1"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["threads"] == 1


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["bogus"], ["gradcheck", "--nope"], ["config"], ["render"]])
    def test_usage_errors(self, argv, capsys):
        assert run(argv) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_split_overrides(self):
        rest, ov = split_overrides(["pretrain", "--a.b=1", "--out", "x", "--c.d", "true"])
        assert rest == ["pretrain", "--out", "x"] and ov == {"a.b": 1, "c.d": True}

    def test_missing_checkpoint_is_runtime(self, tmp_path, capsys):
        assert run(["render", "--checkpoint", str(tmp_path / "none.nsmae"), "--out", str(tmp_path)]) == EXIT_RUNTIME


class TestSuites:
    def test_gradcheck_seed_7(self, tmp_path, capsys):
        assert run(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        worst = float(out.strip().splitlines()[-1].split()[-1])
        assert worst < 1e-5
        assert json.loads((tmp_path / "gradcheck.json").read_text())["full_graph"] < 1e-5

    def test_oracle_compare_halving(self, tmp_path, capsys):
        assert run(["oracle-compare", "--deltas", "0.4,0.2,0.1", "--rays", "6", "--out", str(tmp_path)]) == EXIT_OK
        rows = json.loads((tmp_path / "oracle_compare.json").read_text())
        errs = [r["depth"] for r in rows]
        for a, b in zip(errs, errs[1:]):
            assert 1.7 <= a / b <= 2.3
        assert "ratio" in capsys.readouterr().out

    def test_bad_deltas(self, capsys):
        assert run(["oracle-compare", "--deltas", "0.4,x"]) == EXIT_USAGE


class TestPipeline:
    def test_generate_train_render_probe(self, tiny_cfg, tmp_path, capsys):
        data = tmp_path / "data"
        assert run(["synth-gen", "--config", str(tiny_cfg), "--out", str(data)]) == EXIT_OK
        assert len(load_manifest(data)) == 2

        run_dir = tmp_path / "run"
        common = ["--config", str(tiny_cfg), f"--data.manifest={data}"]
        assert run(["pretrain", *common, "--out", str(run_dir)]) == EXIT_OK
        lines = (run_dir / "loss.jsonl").read_text().splitlines()
        assert len(lines) == 2
        ckpt = run_dir / "final.nsmae"
        assert load_checkpoint(ckpt).step == 2

        rdir = tmp_path / "render"
        assert run(["render", *common, "--checkpoint", str(ckpt), "--out", str(rdir)]) == EXIT_OK
        assert load_image_ppm(rdir / "render_0000_per0.ppm").pixels.shape == (16, 16, 3)
        depth = load_depth_pfm(rdir / "render_0000_per0_depth.pfm")
        assert depth.shape == (16, 16) and np.all(np.isfinite(depth))
        assert run(["render", *common, "--checkpoint", str(ckpt), "--view", "bev", "--out", str(rdir)]) == EXIT_OK
        assert load_depth_pfm(rdir / "render_0000_bev_depth.pfm").shape == (4, 4)
        assert run(["render", *common, "--checkpoint", str(ckpt), "--camera", "3", "--out", str(rdir)]) \
            == EXIT_RUNTIME

        pdir = tmp_path / "probe"
        assert run(["probe", *common, "--checkpoint", str(ckpt), "--out", str(pdir)]) == EXIT_OK
        doc = json.loads((pdir / "probe.json").read_text())
        assert 0.0 <= doc["auc"] <= 1.0 and doc["checkpoint"] == str(ckpt)

    def test_checkpoint_under_other_config_refused(self, tiny_cfg, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run(["pretrain", "--config", str(tiny_cfg), "--out", str(run_dir)]) == EXIT_OK
        code = run(["render", "--config", str(tiny_cfg), "--optim.lr=0.5", "--checkpoint",
                    str(run_dir / "final.nsmae"), "--out", str(tmp_path)])
        assert code == EXIT_RUNTIME
        assert "wrong config" in capsys.readouterr().err

    def test_resume_continues_log(self, tiny_cfg, tmp_path):
        cfg = json.loads(tiny_cfg.read_text())
        cfg["checkpoint_every"] = 1
        tiny_cfg.write_text(json.dumps(cfg))
        full, cont = tmp_path / "full", tmp_path / "cont"
        assert run(["pretrain", "--config", str(tiny_cfg), "--out", str(full)]) == EXIT_OK
        assert run(["pretrain", "--config", str(tiny_cfg), "--resume", str(full / "ckpt_000001.nsmae"),
                    "--out", str(cont)]) == EXIT_OK
        tail = (full / "loss.jsonl").read_text().splitlines()[1:]
        assert (cont / "loss.jsonl").read_text().splitlines() == tail
        assert (cont / "final.nsmae").read_bytes() == (full / "final.nsmae").read_bytes()
