import json

import numpy as np
import pytest

from bgnet import cli, commands
from bgnet.checkpoint import load_checkpoint, save_checkpoint
from bgnet.synth import load_dataset, write_dataset

from helpers import write_config


@pytest.fixture
def data_dir(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "data"
    assert cli.run(["generate", "--config", cfg, "--out", str(out), "--seed", "4"]) == 0
    return out, cfg


def test_generate_writes_two_versioned_files(data_dir):
    out, _ = data_dir
    for name, count in (("train.jsonl", 64), ("val.jsonl", 32)):
        header, records = load_dataset(out / name)
        assert header["version"] == 1 and header["count"] == count == len(records)


def test_generate_deterministic(tmp_path, data_dir):
    out, cfg = data_dir
    again = tmp_path / "again"
    cli.run(["generate", "--config", cfg, "--out", str(again), "--seed", "4"])
    for name in ("train.jsonl", "val.jsonl"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_generate_default_counts(tmp_path):
    counts = commands.cmd_generate(None, tmp_path / "full", 0)
    assert counts == {"train": 5000, "val": 1000}
    header, _ = load_dataset(tmp_path / "full" / "train.jsonl")
    assert header["count"] == 5000


def test_train_one_epoch_logs_one_line(tmp_path, data_dir, capsys):
    out, cfg = data_dir
    ckpt = tmp_path / "m.ckpt"
    assert cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt), "--layers", "2"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{")]
    assert len(lines) == 1 and lines[0]["epoch"] == 1 and lines[0]["L"] == 2
    assert np.isfinite(lines[0]["loss"])
    assert ckpt.exists() and (tmp_path / "m.ckpt.best").exists()
    assert len((tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()) == 1
    assert load_checkpoint(ckpt).epoch == 1


def test_identical_seeds_identical_checkpoints(tmp_path, data_dir):
    out, cfg = data_dir
    for name in ("a.ckpt", "b.ckpt"):
        cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(tmp_path / name), "--seed", "9"])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path, data_dir):
    out, _ = data_dir
    cfg2 = tmp_path / "two.cfg"
    cfg2.write_text((tmp_path / "tiny.cfg").read_text().replace("epochs = 1", "epochs = 2"))
    straight = tmp_path / "straight.ckpt"
    cli.run(["train", "--config", str(cfg2), "--data", str(out), "--out", str(straight)])
    first = tmp_path / "first.ckpt"
    cli.run(["train", "--config", str(tmp_path / "tiny.cfg"), "--data", str(out), "--out", str(first)])
    # the checkpoint's stored config wins on resume, so bump its epoch budget there
    ck = load_checkpoint(first)
    ck.run_config["epochs"] = 2
    save_checkpoint(ck, first)
    resumed = tmp_path / "resumed.ckpt"
    assert cli.run(["train", "--config", str(cfg2), "--data", str(out), "--out", str(resumed), "--resume", str(first)]) == 0
    a, b = load_checkpoint(straight), load_checkpoint(resumed)
    assert a.epoch == b.epoch == 2
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_eval_report_and_recompute(tmp_path, data_dir, capsys):
    out, cfg = data_dir
    ckpt = tmp_path / "e.ckpt"
    cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt)])
    report_path = tmp_path / "report.json"
    assert cli.run(["eval", "--checkpoint", str(ckpt), "--data", str(out), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    _, records = load_dataset(out / "val.jsonl")
    answers = load_checkpoint(ckpt).answers
    recomputed = np.mean([min(r.answer_counts.get(answers[p], 0) / 3, 1) for r, p in zip(records, report["predictions"])])
    assert abs(report["overall"] - recomputed) < 1e-12
    assert set(report["per_hop"]) <= {"1", "2", "3"}
    assert "overall" in capsys.readouterr().out


def _force_answer(ckpt_path, index):
    ck = load_checkpoint(ckpt_path)
    ck.params["classifier.out.b"][:] = -100.0
    ck.params["classifier.out.b"][index] = 100.0
    ck.params["classifier.out.g"][:] = 0.0
    save_checkpoint(ck, ckpt_path)
    return ck


def test_eval_perfect_and_wrong(tmp_path, data_dir):
    out, cfg = data_dir
    ckpt = tmp_path / "c.ckpt"
    cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt)])
    header, records = load_dataset(out / "val.jsonl")
    answer = records[0].answer
    same = [r for r in records if r.answer == answer]
    subset = tmp_path / "subset.jsonl"
    write_dataset(same, subset, header)
    ck = _force_answer(ckpt, header["answers"].index(answer))
    report = commands.cmd_eval(ckpt, subset, tmp_path / "r1.json")
    assert report.overall == 1.0
    wrong = (header["answers"].index(answer) + 1) % len(ck.answers)
    _force_answer(ckpt, wrong)
    assert commands.cmd_eval(ckpt, subset, tmp_path / "r2.json").overall == 0.0


def test_dump_attention(tmp_path, data_dir):
    out, cfg = data_dir
    ckpt = tmp_path / "d.ckpt"
    cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt), "--layers", "2"])
    dump = tmp_path / "dump.json"
    assert cli.run(["dump-attention", "--checkpoint", str(ckpt), "--data", str(out), "--index", "3", "--out", str(dump)]) == 0
    payload = json.loads(dump.read_text())
    assert len(payload["layers"]) == 2
    for layer in payload["layers"]:
        assert layer["image"]["normalized"] and layer["question"]["normalized"]
        assert len(layer["image"]["glimpses"]) == 2
        assert np.allclose(np.sum(layer["image"]["glimpses"], axis=0), layer["image"]["summed"])
    assert payload["tokens"] and payload["objects"] and payload["target"]


def test_ablate_small_grid(tmp_path, data_dir):
    out, cfg = data_dir
    summary = commands.cmd_ablate(cfg, out, tmp_path / "abl", cells=[("bgn", 1), ("ban", 1)], seeds=[0, 1])
    check = summary["checks"]["bgn_L1_vs_ban_L1_overall"]
    assert set(check["per_seed_delta"]) == {"0", "1"}
    assert check["holds"] == (check["mean_delta"] >= 0)
    text = (tmp_path / "abl" / "ablation.md").read_text()
    assert "bgn_L1" in text and "ban_L1" in text


# -- exit codes ------------------------------------------------------------------------


def test_exit_code_usage(capsys):
    assert cli.run([]) == 1
    assert cli.run(["train", "--data", "x"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: usage:")


def test_exit_code_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert cli.run(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_exit_code_data(tmp_path, data_dir, capsys):
    out, cfg = data_dir
    (out / "train.jsonl").write_text('{"version": 99}\n')
    assert cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(tmp_path / "z.ckpt")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: data:") and "\n" not in err


def test_exit_code_numeric(tmp_path, data_dir, capsys):
    out, cfg = data_dir
    ckpt = tmp_path / "n.ckpt"
    assert cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt)]) == 0
    good = ckpt.read_bytes()
    capsys.readouterr()
    nan_cfg = write_config(tmp_path, "base_lr = nan\nwarm_target = nan\n")
    assert cli.run(["train", "--config", nan_cfg, "--data", str(out), "--out", str(ckpt)]) == 3
    assert capsys.readouterr().err.startswith("error: numeric:")
    # the last good checkpoint is left in place
    assert ckpt.read_bytes() == good


def test_dump_attention_bad_index(tmp_path, data_dir):
    out, cfg = data_dir
    ckpt = tmp_path / "i.ckpt"
    cli.run(["train", "--config", cfg, "--data", str(out), "--out", str(ckpt)])
    assert cli.run(["dump-attention", "--checkpoint", str(ckpt), "--data", str(out), "--index", "999", "--out", str(tmp_path / "o")]) == 2
