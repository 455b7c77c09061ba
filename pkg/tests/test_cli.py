"""End-to-end tests for the command-line driver.

A module-scoped workspace holds one tiny corpus and one short training
run; every command is exercised through ``run(argv)`` exactly as the
console entry point would call it.
"""
import json
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from penet import posekit
from penet.checkpoint import load_checkpoint
from penet.cli import (
    JOINT_GROUPS,
    build_parser,
    parse_joints,
    read_config_file,
    resolve_seed,
    run,
)
from penet.synthdata import read_corpus

SIZE = 32


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert run(["gen-data", "--out", str(corpus), "--signers", "2",
                "--frames", "2", "--canvas", str(SIZE), "--seed", "0"]) == 0
    config = root / "train.cfg"
    config.write_text(
        "# tiny training run\n"
        f"corpus = {corpus}\n"
        f"image_size = {SIZE}\n"
        "steps = 4\n"
        "classifier_fit_steps = 4\n"
        "seed = 3\n")
    ckpt = root / "m.ckpt"
    log = root / "log.jsonl"
    assert run(["train", "--config", str(config), "--ckpt", str(ckpt),
                "--log", str(log)]) == 0
    return SimpleNamespace(root=root, corpus=corpus, config=config,
                           ckpt=ckpt, log=log,
                           poses=corpus / "poses.jsonl")


# ---------------------------------------------------------------------------
# plumbing units


class TestConfigFile:
    def test_parses_flat_keys(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("a = 1\n\n# comment\n  b=two  # trailing\nc  =\n")
        assert read_config_file(p) == {"a": "1", "b": "two", "c": ""}

    def test_rejects_line_without_equals(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("just some words\n")
        with pytest.raises(ValueError, match="key = value"):
            read_config_file(p)

    def test_rejects_empty_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("= 3\n")
        with pytest.raises(ValueError, match="key = value"):
            read_config_file(p)


class TestSeedResolution:
    def args(self, seed=None):
        return SimpleNamespace(seed=seed)

    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("PENET_SEED", "9")
        assert resolve_seed(self.args(5), 0) == 5

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("PENET_SEED", "9")
        assert resolve_seed(self.args(), 0) == 9

    def test_default_when_unset(self, monkeypatch):
        monkeypatch.delenv("PENET_SEED", raising=False)
        assert resolve_seed(self.args(), 7) == 7

    def test_bad_env_rejected(self, monkeypatch):
        monkeypatch.setenv("PENET_SEED", "not-a-number")
        with pytest.raises(ValueError, match="PENET_SEED"):
            resolve_seed(self.args(), 0)


class TestJointParsing:
    def test_group_names(self):
        assert parse_joints("head") == sorted(JOINT_GROUPS["head"])
        assert parse_joints("l_hand,r_hand") == sorted(JOINT_GROUPS["hands"])
        assert parse_joints("all") == list(range(posekit.K))

    def test_keypoint_names_and_dedup(self):
        assert parse_joints("nose") == [posekit.KP["nose"]]
        assert parse_joints("head, nose") == sorted(JOINT_GROUPS["head"])

    def test_unknown_token_rejected(self):
        with pytest.raises(ValueError, match="unknown joint"):
            parse_joints("head,elbows")

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no joints"):
            parse_joints(" , ")


class TestUsageErrors:
    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["sample"])
        assert exc.value.code == 2

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["gen-data", "--out", "x", "--bogus", "1"])
        assert exc.value.code == 2

    def test_every_command_documents_seed(self):
        parser = build_parser()
        actions = parser._subparsers._group_actions[0].choices
        assert set(actions) == {"gen-data", "train", "sample", "evaluate",
                                "ablate", "pose-edit", "grid"}
        for sub in actions.values():
            flags = {opt for a in sub._actions for opt in a.option_strings}
            assert "--seed" in flags
            assert "--json-errors" in flags


# ---------------------------------------------------------------------------
# gen-data


class TestGenData:
    def test_corpus_readable(self, ws):
        frames, manifest = read_corpus(ws.corpus)
        assert len(frames) == 4
        assert manifest["canvas"] == [SIZE, SIZE]

    def test_deterministic_across_dirs(self, ws, tmp_path):
        other = tmp_path / "again"
        assert run(["gen-data", "--out", str(other), "--signers", "2",
                    "--frames", "2", "--canvas", str(SIZE),
                    "--seed", "0"]) == 0
        a = (ws.corpus / "data.npz").read_bytes()
        b = (other / "data.npz").read_bytes()
        assert a == b

    def test_seed_changes_corpus(self, ws, tmp_path):
        other = tmp_path / "seed1"
        assert run(["gen-data", "--out", str(other), "--signers", "2",
                    "--frames", "2", "--canvas", str(SIZE),
                    "--seed", "1"]) == 0
        assert ((other / "data.npz").read_bytes()
                != (ws.corpus / "data.npz").read_bytes())


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_checkpoint_and_log_written(self, ws):
        payload, config = load_checkpoint(ws.ckpt)
        assert payload["step"] == 4
        assert config["seed"] == 3
        records = [json.loads(l) for l in ws.log.read_text().splitlines()]
        assert len(records) == 4
        assert all("total" in r and "d_loss" in r for r in records)

    def test_resume_extends_run(self, ws, tmp_path):
        out = tmp_path / "resumed.ckpt"
        assert run(["train", "--config", str(ws.config),
                    "--ckpt", str(out), "--resume", str(ws.ckpt)]) == 0
        payload, _ = load_checkpoint(out)
        assert payload["step"] == 8

    def test_missing_corpus_key_fails(self, ws, tmp_path, capsys):
        cfg = tmp_path / "nocorpus.cfg"
        cfg.write_text("steps = 1\nimage_size = 32\n")
        assert run(["train", "--config", str(cfg)]) == 1
        assert "corpus" in capsys.readouterr().err

    def test_unknown_config_key_fails(self, ws, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"corpus = {ws.corpus}\nlearning_rate = 1\n")
        assert run(["train", "--config", str(cfg)]) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, ws, tmp_path):
        out = tmp_path / "seeded.ckpt"
        assert run(["train", "--config", str(ws.config), "--steps", "1",
                    "--ckpt", str(out), "--seed", "11"]) == 0
        _, config = load_checkpoint(out)
        assert config["seed"] == 11
        assert config["steps"] == 1


# ---------------------------------------------------------------------------
# sample / pose-edit / grid


class TestSample:
    def test_grid_shape(self, ws, tmp_path):
        out = tmp_path / "s.png"
        assert run(["sample", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--n", "3", "--out", str(out)]) == 0
        assert Image.open(out).size == (3 * SIZE, 4 * SIZE)

    def test_idempotent_and_seed_sensitive(self, ws, tmp_path):
        a, b, c = (tmp_path / n for n in ("a.png", "b.png", "c.png"))
        base = ["sample", "--ckpt", str(ws.ckpt), "--poses", str(ws.poses),
                "--n", "2"]
        assert run(base + ["--out", str(a), "--seed", "5"]) == 0
        assert run(base + ["--out", str(b), "--seed", "5"]) == 0
        assert run(base + ["--out", str(c), "--seed", "6"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_penet_seed_env_equals_flag(self, ws, tmp_path, monkeypatch):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        base = ["sample", "--ckpt", str(ws.ckpt), "--poses", str(ws.poses),
                "--n", "1"]
        assert run(base + ["--out", str(a), "--seed", "12"]) == 0
        monkeypatch.setenv("PENET_SEED", "12")
        assert run(base + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_attribute_out_of_vocabulary_fails(self, ws, tmp_path, capsys):
        assert run(["sample", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--attr", "99",
                    "--out", str(tmp_path / "x.png")]) == 1
        assert "attribute" in capsys.readouterr().err


class TestPoseEdit:
    def test_side_by_side(self, ws, tmp_path):
        out = tmp_path / "pe.png"
        assert run(["pose-edit", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--index", "1", "--dx", "-8",
                    "--joints", "head", "--out", str(out)]) == 0
        assert Image.open(out).size == (2 * SIZE, SIZE)

    def test_edit_changes_pixels(self, ws, tmp_path):
        out = tmp_path / "pe.png"
        assert run(["pose-edit", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--dx", "-6", "--joints", "head",
                    "--out", str(out)]) == 0
        img = np.asarray(Image.open(out), dtype=np.int16)
        left, right = img[:, :SIZE], img[:, SIZE:]
        assert np.abs(left - right).max() > 8

    def test_bad_index_fails(self, ws, tmp_path, capsys):
        assert run(["pose-edit", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--index", "99",
                    "--out", str(tmp_path / "x.png")]) == 1
        assert "out of range" in capsys.readouterr().err

    def test_bad_joints_fail(self, ws, tmp_path):
        assert run(["pose-edit", "--ckpt", str(ws.ckpt), "--poses",
                    str(ws.poses), "--joints", "wings",
                    "--out", str(tmp_path / "x.png")]) == 1


class TestGrid:
    def test_rows_are_checkpoints(self, ws, tmp_path):
        out = tmp_path / "g.png"
        assert run(["grid", "--ckpts", str(ws.ckpt), str(ws.ckpt),
                    "--poses", str(ws.poses), "--max-poses", "3",
                    "--out", str(out)]) == 0
        assert Image.open(out).size == (3 * SIZE, 2 * SIZE)

    def test_identical_checkpoints_give_identical_rows(self, ws, tmp_path):
        out = tmp_path / "g.png"
        assert run(["grid", "--ckpts", str(ws.ckpt), str(ws.ckpt),
                    "--poses", str(ws.poses), "--max-poses", "2",
                    "--out", str(out)]) == 0
        img = np.asarray(Image.open(out))
        np.testing.assert_array_equal(img[:SIZE], img[SIZE:])


# ---------------------------------------------------------------------------
# evaluate


@pytest.fixture(scope="module")
def report(ws):
    out = ws.root / "report.json"
    csv = ws.root / "regions.csv"
    code = run(["evaluate", "--ckpt", str(ws.ckpt), "--corpus",
                str(ws.corpus), "--out", str(out), "--csv", str(csv),
                "--estimator-steps", "30", "--pose-samples", "1",
                "--deterministic"])
    assert code == 0
    return SimpleNamespace(out=out, csv=csv, doc=json.loads(out.read_text()))


class TestEvaluate:
    def test_untrained_checkpoint_still_exits_zero(self, report):
        # 4 steps is as good as untrained; the metrics may be poor but the
        # protocol must complete.
        assert report.doc["step"] == 4

    def test_report_structure(self, report):
        doc = report.doc
        assert set(doc["region_metrics"]["psnr"]) == {
            "composite", "head", "hand", "torso"}
        assert set(doc["pose_eval"]["regions"]) == {
            "Head", "R-Hand", "L-Hand", "Clothes"}
        for r in doc["pose_eval"]["regions"].values():
            assert 0.0 <= r["hit_pct"] <= 100.0
        assert "band_mean" in doc["boundary_edges"]
        assert "generated_at" not in doc

    def test_csv_rows(self, report):
        lines = report.csv.read_text().splitlines()
        assert lines[0] == "region,psnr_mean,psnr_std,ssim_mean,ssim_std,fid"
        assert [l.split(",")[0] for l in lines[1:]] == [
            "composite", "head", "hand", "torso"]

    def test_deterministic_reruns_byte_identical(self, ws, report, tmp_path):
        again = tmp_path / "again.json"
        assert run(["evaluate", "--ckpt", str(ws.ckpt), "--corpus",
                    str(ws.corpus), "--out", str(again),
                    "--csv", str(tmp_path / "r.csv"),
                    "--estimator-steps", "30", "--pose-samples", "1",
                    "--deterministic"]) == 0
        assert again.read_bytes() == report.out.read_bytes()

    def test_timestamp_present_without_deterministic(self, ws, tmp_path):
        out = tmp_path / "stamped.json"
        assert run(["evaluate", "--ckpt", str(ws.ckpt), "--corpus",
                    str(ws.corpus), "--out", str(out),
                    "--estimator-steps", "30", "--pose-samples", "1"]) == 0
        assert "generated_at" in json.loads(out.read_text())

    def test_json_errors_flag(self, ws, tmp_path, capsys):
        assert run(["evaluate", "--ckpt", str(tmp_path / "nope.ckpt"),
                    "--corpus", str(ws.corpus), "--json-errors",
                    "--out", str(tmp_path / "x.json")]) == 1
        err = json.loads(capsys.readouterr().err)
        assert set(err) == {"error", "message"}


# ---------------------------------------------------------------------------
# ablate


class TestAblate:
    def test_row_subset(self, ws, tmp_path):
        out = tmp_path / "ab.csv"
        assert run(["ablate", "--corpus", str(ws.corpus), "--steps", "2",
                    "--rows", "full model", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        names = [l.split(",")[0] for l in lines[1:]]
        assert names == ["full model", "external baseline A",
                         "external baseline B"]

    def test_unknown_row_fails(self, ws, tmp_path, capsys):
        assert run(["ablate", "--corpus", str(ws.corpus), "--steps", "2",
                    "--rows", "nope", "--out", str(tmp_path / "x.csv")]) == 1
        assert "unknown ablation rows" in capsys.readouterr().err
