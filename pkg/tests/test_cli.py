import csv
import json
import xml.etree.ElementTree as ET

import pytest

from jumpyplan import cli, dataset, env, harness, viz

SMALL = """
seed = 3

[data]
episodes = 6

[model]
feature_dim = 8
latent_dim = 3
hidden = 16
total_steps = 200

[planner]
samples = 16

[eval]
seeds = 2
episode_steps = 30
tasks = ["reach_red", "lift_red", "lift_green"]
variants = ["random_hl", "zeroshot_plan_jumpy", "zeroshot_plan_k1", "base_policy_reference"]
k1_horizon = 3
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    out = root / "run"
    assert run("gen-data", "--config", cfg, "--out", out) == 0
    assert run("train", "--config", cfg, "--out", out, "--k", 10) == 0
    assert run("train", "--config", cfg, "--out", out, "--k", 1) == 0
    assert run("eval", "--config", cfg, "--out", out) == 0
    return cfg, out


def test_gen_data_outputs(pipeline):
    _, out = pipeline
    meta = json.loads((out / "dataset.json").read_text())
    head = dataset.read_header(out / "dataset.jmpd")
    assert head["episode_count"] == meta["episodes"] == 6 and meta["master_seed"] == 3
    assert meta["content_hash"] == dataset.content_hash(out / "dataset.jmpd")


def test_train_outputs(pipeline):
    _, out = pipeline
    for K in (10, 1):
        assert (out / f"model_k{K}" / "manifest.json").exists()
        rows = list(csv.reader((out / f"train_k{K}.csv").open()))
        assert rows[0] == ["step", "kl", "action_term", "state_term", "total"]
        assert len(rows) - 1 == 200 // 100


def test_eval_rows(pipeline):
    _, out = pipeline
    rows = list(csv.DictReader((out / "eval_summary.csv").open()))
    cells = [(r["task"], r["variant"]) for r in rows]
    # three variants everywhere plus the reference for in-distribution tasks
    assert len(cells) == 3 * 3 + 2
    assert ("lift_green", "base_policy_reference") not in cells
    assert ("lift_red", "base_policy_reference") in cells
    assert all(r["seeds"] == "2" for r in rows)
    recs = harness.read_records(out / "eval_records.jsonl")
    assert len(recs) == 2 * len(cells)


def test_seeds_flag_overrides_config(pipeline, tmp_path):
    cfg, out = pipeline
    args = ["--config", cfg, "--out", out, "--seeds", 1, "--tasks", "reach_red", "--variants", "random_hl"]
    ns = cli.build_parser().parse_args(["eval"] + [str(a) for a in args])
    resolved = cli.resolve_config(ns)
    assert resolved.eval.seeds == 1 and resolved.eval.tasks == ("reach_red",)


def test_full_pipeline_is_byte_reproducible(pipeline, tmp_path):
    cfg, out = pipeline
    again = tmp_path / "again"
    for argv in (["gen-data"], ["train", "--k", 10], ["train", "--k", 1], ["eval"]):
        assert run(*argv, "--config", cfg, "--out", again) == 0
    for name in ("dataset.jmpd", "eval_summary.csv", "eval_records.jsonl", "train_k10.csv",
                 "model_k10/params.bin", "model_k1/params.bin"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_sweep_grid_and_subset(pipeline, tmp_path):
    cfg, out = pipeline
    sub = tmp_path / "sw"
    base = ["--config", cfg, "--jumpy", out / "model_k10", "--k1", out / "model_k1", "--tasks", "reach_red",
            "--seeds", 1]
    assert run("sweep", *base, "--out", sub) == 0
    rows = list(csv.DictReader((sub / "sweep_jumpy.csv").open()))
    assert len(rows) == 4 * 6
    one = tmp_path / "one"
    assert run("sweep", *base, "--out", one, "--horizon", 2, "--hold", 10) == 0
    single = list(csv.DictReader((one / "sweep_jumpy.csv").open()))
    assert single == [r for r in rows if r["horizon"] == "2" and r["hold"] == "10"]
    assert run("sweep", *base, "--out", sub, "--mode", "k1") == 0
    assert len(list(csv.DictReader((sub / "sweep_k1.csv").open()))) == 7


def test_viz_writes_wellformed_svgs(pipeline, tmp_path):
    _, out = pipeline
    dest = tmp_path / "viz"
    assert run("viz", "--out", out, "--viz-out", dest) == 0
    svgs = sorted(dest.glob("*.svg"))
    recs = harness.read_records(out / "eval_records.jsonl")
    planning = [r for r in recs if r.trace]
    assert len(svgs) == 2 * len(planning)
    for p in svgs:
        root = ET.parse(p).getroot()
        assert root.tag.endswith("svg")
    text = (dest / f"trace_{planning[0].task}_{planning[0].variant}_{planning[0].seed}.svg").read_text()
    assert "planned score" in text and "reward" in text and "step" in text


def test_viz_skips_traceless_records(tmp_path):
    rec = harness.EvalRecord("reach_red", "random_hl", 0, 1.0, 0.5, 10)
    assert cli.render_records([rec], tmp_path) == (0, 1)
    assert cli.render_records([], tmp_path) == (0, 1)
    assert not list(tmp_path.glob("*.svg"))


def test_score_curve_stays_inside_the_plot():
    rows = [(t, 4.0 * (t % 2), 0.5) for t in range(20)]
    root = ET.fromstring(viz.score_trace_svg(rows, "a <title> & more"))
    lines = [el for el in root.iter() if el.tag.endswith("polyline")]
    ys = [float(pt.split(",")[1]) for pt in lines[0].get("points").split()]
    top = viz.MARGIN[2]
    assert min(ys) >= top - 1e-9 and max(ys) <= viz.HEIGHT - viz.MARGIN[3] + 1e-9


def test_grad_check_command(capsys):
    assert run("grad-check") == 0
    out = capsys.readouterr().out
    for term in ("total", "kl", "action", "state"):
        assert term in out
    assert "PASS" in out
    assert run("grad-check", "--corrupt") == 1
    assert "FAIL" in capsys.readouterr().out


def test_errors_exit_with_status_2(tmp_path, monkeypatch, capsys):
    assert run("gen-data", "--out", tmp_path / "no" / "such" / "dir") == 2
    assert not (tmp_path / "no").exists()
    assert run("eval", "--out", tmp_path, "--variants", "zeroshot_plan_k1") == 2
    assert "zeroshot_plan_k1" in capsys.readouterr().err
    assert run("train", "--out", tmp_path) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[planner]\nsamplez = 1\n")
    assert run("eval", "--config", bad) == 2
    monkeypatch.setenv("JMP_LOG", "chatty")
    assert run("grad-check", "--probes", 1) == 2


def test_train_rejects_mismatched_header(tmp_path):
    ds = dataset.generate_dataset(1, 0, T=5)
    dataset.write_dataset(ds, tmp_path / "dataset.jmpd")
    assert run("train", "--out", tmp_path, "--k", 10) == 2
    raw = bytearray((tmp_path / "dataset.jmpd").read_bytes())
    raw[len(dataset.MAGIC) + 8] = env.STATE_DIM + 1
    (tmp_path / "dataset.jmpd").write_bytes(bytes(raw))
    assert run("train", "--out", tmp_path, "--k", 1) == 2
