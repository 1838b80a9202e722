import json

import pandas as pd
import pytest

from cli import main, parse_auto_model, UsageError
from conftest import make_checkpoint
from database.checkpoint_store import load_checkpoint, save_checkpoint
from services.report_writer import MANIFEST_SUFFIX

AUTO = "H=4,dim=2,layers=1,vocab=8"


def _last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture
def base_file(tmp_path):
    path = tmp_path / "base.gqac"
    save_checkpoint(make_checkpoint(seed=0, H=8, G=8, hd=1, layers=2, vocab=8), path)
    return path


def test_parse_auto_model():
    config = parse_auto_model("H=8,dim=4,layers=2,vocab=64")
    assert (config.n_heads, config.n_kv_groups, config.head_dim, config.d_model) == (8, 8, 4, 32)
    assert parse_auto_model("H=8,dim=4,layers=2,vocab=64", groups=2).n_kv_groups == 2
    with pytest.raises(UsageError):
        parse_auto_model("H=8,dim=4")


def test_convert_writes_checkpoint_report_and_manifest(tmp_path, base_file, capsys):
    out = tmp_path / "g2.gqac"
    assert main(["convert", "--in", str(base_file), "--groups", "2", "--method", "mean", "--out", str(out)]) == 0
    assert load_checkpoint(out).config.n_kv_groups == 2
    report = json.loads((tmp_path / "g2.gqac.report.json").read_text())
    assert "drift" in report
    assert json.loads(capsys.readouterr().out)["drift"] == report["drift"]
    manifest = json.loads((tmp_path / ("g2.gqac" + MANIFEST_SUFFIX)).read_text())
    assert manifest["subcommand"] == "convert"
    assert manifest["inputs"] == [str(base_file)]
    assert manifest["finished_at"] is not None


def test_convert_identity_is_bit_identical(tmp_path, base_file):
    out = tmp_path / "same.gqac"
    assert main(["convert", "--in", str(base_file), "--groups", "8", "--method", "mean", "--out", str(out)]) == 0
    assert out.read_bytes() == base_file.read_bytes()
    assert json.loads((tmp_path / "same.gqac.report.json").read_text())["drift"] == 0.0


def test_convert_rejects_indivisible_groups(tmp_path, base_file, capsys):
    code = main(["convert", "--in", str(base_file), "--groups", "3", "--out", str(tmp_path / "bad.gqac")])
    assert code != 0
    error = _last_error(capsys)
    assert error["error"] == "ConversionError"
    assert "H mod G != 0" in error["message"]
    assert not (tmp_path / "bad.gqac").exists()


def test_convert_refuses_to_overwrite_input(base_file, capsys):
    before = base_file.read_bytes()
    assert main(["convert", "--in", str(base_file), "--groups", "4", "--out", str(base_file)]) != 0
    assert base_file.read_bytes() == before


def test_bad_arguments_give_one_json_line(capsys):
    assert main(["convert", "--groups", "2"]) == 2
    assert _last_error(capsys)["error"] == "UsageError"
    assert main(["nonsense"]) == 2


def test_bench_sweep_and_rerun(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    args = ["bench", "--auto-model", AUTO, "--groups", "1,2,4", "--seq-in", "128", "--seq-out", "64",
            "--trials", "5", "--out", str(out)]
    assert main(args) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 3
    assert frame["kv_bytes"].is_monotonic_increasing and frame["kv_bytes"].is_unique
    assert (tmp_path / "bench.json").exists()

    first = frame.drop(columns=["wall_time_s_median"])
    assert main(["rerun", "--manifest", str(out) + MANIFEST_SUFFIX]) == 0
    again = pd.read_csv(out).drop(columns=["wall_time_s_median"])
    assert first.equals(again)


def test_bench_rejects_too_few_trials(tmp_path, capsys):
    code = main(["bench", "--auto-model", AUTO, "--groups", "1,4", "--trials", "1", "--out", str(tmp_path / "b.csv")])
    assert code != 0
    assert _last_error(capsys)["error"] == "BenchError"
    assert not (tmp_path / "b.csv").exists()


def test_decode_is_deterministic(capsys):
    assert main(["--seed", "3", "decode", "--auto-model", AUTO, "--gen", "16"]) == 0
    first = capsys.readouterr().out
    assert main(["--seed", "3", "decode", "--auto-model", AUTO, "--gen", "16"]) == 0
    second = capsys.readouterr().out
    assert first == second
    assert len(first.splitlines()[0].split()) == 16


def test_cost_prints_schema(capsys):
    assert main(["cost", "--auto-model", "H=8,dim=4,layers=2,vocab=16", "--seq-len", "64"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "groups,kv_bytes,weight_bytes,flops,pred_time_s,wall_time_s_median,trials"
    assert len(lines) == 5


@pytest.fixture
def trained_base(tmp_path):
    path = tmp_path / "trained.gqac"
    code = main(["train", "--auto-model", AUTO, "--steps", "40", "--batch-size", "8", "--out", str(path)])
    assert code == 0
    return path


def test_train_writes_base_sidecar_and_curve(trained_base, capsys):
    sidecar = json.loads(open(str(trained_base) + ".train.json").read())
    assert sidecar["steps"] == 40
    assert len(sidecar["loss_trajectory"]) == 40
    curve = pd.read_csv(str(trained_base) + ".loss.csv")
    assert len(curve) == 40


def test_uptrain_identity_end_to_end(tmp_path, trained_base, capsys):
    sidecar = json.loads(open(str(trained_base) + ".train.json").read())
    capsys.readouterr()
    out_dir = tmp_path / "runs"
    assert main(["uptrain", "--in", str(trained_base), "--alpha", "0", "--method", "mean",
                 "--groups", "4", "--out-dir", str(out_dir)]) == 0
    run = json.loads((out_dir / "uptrain_mean_g4_a0_s0.json").read_text())
    assert abs(run["eval_loss"] - sidecar["eval_loss"]) <= 1e-6


def test_uptrain_fan_out(tmp_path, trained_base, capsys):
    capsys.readouterr()
    out_dir = tmp_path / "fan"
    assert main(["uptrain", "--in", str(trained_base), "--alpha", "0.05", "--groups", "1",
                 "--seeds", "5", "--out-dir", str(out_dir)]) == 0
    run_files = [p for p in out_dir.glob("uptrain_mean_g1_a0.05_s*.json")
                 if not p.name.endswith(MANIFEST_SUFFIX)]
    assert len(run_files) == 5
    runs = [json.loads(p.read_text()) for p in run_files]
    assert len({tuple(r["loss_trajectory"]) for r in runs}) == 5
    summary = json.loads((out_dir / "uptrain_summary.json").read_text())
    assert summary["runs"] == 5
    final = [row for row in summary["medians"] if row["alpha"] == 0.05]
    assert final[0]["seeds"] == 5 and final[0]["distinct_runs"] == 5
    assert {row["alpha"] for row in summary["medians"]} == {0.0, 0.05}
    assert json.loads(capsys.readouterr().out)["runs"] == 5


def test_eval_and_report(tmp_path, trained_base, capsys):
    capsys.readouterr()
    assert main(["eval", "--in", str(trained_base)]) == 0
    result = json.loads(capsys.readouterr().out)
    sidecar = json.loads(open(str(trained_base) + ".train.json").read())
    assert result["eval_loss"] == pytest.approx(sidecar["eval_loss"], abs=1e-12)

    out_dir = tmp_path / "runs"
    assert main(["uptrain", "--in", str(trained_base), "--alpha", "0.05", "--groups", "1,2,4",
                 "--out-dir", str(out_dir)]) == 0
    bench = tmp_path / "cost.csv"
    assert main(["cost", "--auto-model", AUTO, "--seq-len", "64", "--out", str(bench)]) == 0
    table_path = tmp_path / "tradeoff.csv"
    assert main(["report", "--summary", str(out_dir / "uptrain_summary.csv"), "--bench", str(bench),
                 "--out", str(table_path)]) == 0
    table = pd.read_csv(table_path)
    assert table["groups"].tolist() == [1, 2, 4]
    assert list(table.columns[:3]) == ["groups", "method", "alpha"]
    assert (table["alpha"] == 0.05).all()
