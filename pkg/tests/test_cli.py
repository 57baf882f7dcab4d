import json

import pytest

from trsp import cli
from trsp.autodiff import NonFiniteError
from trsp.config import ConfigError, RunConfig, load_config, to_ini
from trsp.data import synthetic_text

TINY_INI = """
[model]
n_layers = 4
d_model = 16
n_heads = 2
max_seq = 16

[data]
corpus = {corpus}
calib_n = 8
calib_len = 16
eval_tokens = 800

[pretrain]
steps = 20
eval_every = 5
batch_size = 4
warmup = 5

[stage1]
steps = 4
gate_lr = 0.05
lr = 0.001
batch_size = 4

[stage2]
steps = 4
lr = 0.001
batch_size = 4

[bench]
batch = 2
gen_len = 3
repeats = 1
warmup = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    corpus.write_text(synthetic_text(30_000, seed=0), encoding="utf-8")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI.format(corpus=corpus), encoding="utf-8")
    assert cli.main(["pretrain", "--config", str(ini), "--out", str(root / "dense")]) == 0
    return root, ini


def _run(*argv):
    return cli.main([str(a) for a in argv])


# --------------------------------------------------------------------------
# configuration


def test_config_defaults_and_sections():
    cfg = load_config()
    assert cfg.stage1.lambda1 == 5e-3 and cfg.stage2.lambda2 == 1e-3
    assert cfg.stage1.lr == 2e-5 and cfg.stage2.lr == 2e-5
    assert cfg.prune.ratio == 0.25 and cfg.data.fractions == (0.9, 0.05, 0.05)


def test_config_ini_round_trip(tmp_path):
    cfg = load_config(overrides=["stage2.norm=l1", "grid.lambda1s=0, 1e-3", "data.eval_tokens=none",
                                 "stage1.joint_weights=no"])
    p = tmp_path / "c.ini"
    p.write_text(to_ini(cfg))
    assert load_config(p) == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.stage2.norm == "L1" and cfg.grid.lambda1s == (0.0, 1e-3) and cfg.stage1.joint_weights is False


def test_flags_beat_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[prune]\nratio = 0.5\n[run]\nseed = 3\n")
    assert load_config(p).prune.ratio == 0.5
    assert load_config(p, ["prune.ratio=0.25"]).prune.ratio == 0.25


@pytest.mark.parametrize("text,msg", [
    ("[stage9]\nx = 1\n", "unknown config section"),
    ("[stage1]\nlambda3 = 1\n", "stage1.lambda3"),
    ("[stage1]\nlambda1 = -1\n", "lambda1"),
    ("[stage1]\nsteps = two\n", "stage1.steps"),
    ("[prune]\nregularize = maybe\n", "prune.regularize"),
    ("[model]\nd_model = 10\nn_heads = 3\n", "divisible"),
])
def test_config_errors(tmp_path, text, msg):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=msg):
        load_config(p)


def test_seeds_expand_from_root():
    a = load_config(overrides=["run.seed=1"]).seeds()
    b = load_config(overrides=["run.seed=1"]).seeds()
    c = load_config(overrides=["run.seed=2"]).seeds()
    assert a == b and a != c
    assert len(set(a.values())) == len(a)


# --------------------------------------------------------------------------
# commands


def test_pretrain_outputs(workspace):
    root, ini = workspace
    out = root / "dense"
    rows = (out / "loss_curve.csv").read_text().strip().split("\n")
    assert rows[0] == "step,train_loss,val_loss"
    assert [int(r.split(",")[0]) for r in rows[1:]] == [5, 10, 15, 20]
    m = json.loads((out / "manifest.json").read_text())
    assert m["command"] == "pretrain" and m["config"]["pretrain"]["steps"] == 20


def test_pretrain_is_deterministic(workspace):
    root, ini = workspace
    assert _run("pretrain", "--config", ini, "--out", root / "dense2") == 0
    assert (root / "dense" / "dense.trsp").read_bytes() == (root / "dense2" / "dense.trsp").read_bytes()


def test_missing_corpus_exit_code(tmp_path, capsys):
    assert _run("pretrain", "--out", tmp_path) == 2
    assert "data.corpus" in capsys.readouterr().err
    assert _run("pretrain", "--corpus", tmp_path / "none.txt", "--out", tmp_path) == 2
    assert "data.corpus" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path, workspace):
    root, ini = workspace
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff\xfe")
    assert _run("pretrain", "--config", ini, "--corpus", bad, "--out", tmp_path) == 3
    assert _run("eval", "--config", ini, "--checkpoint", tmp_path / "missing.trsp", "--out", tmp_path) == 3


def test_numerical_failure_exit_code(monkeypatch, workspace, tmp_path):
    root, ini = workspace

    def boom(*a, **k):
        raise NonFiniteError("matmul produced non-finite values")

    monkeypatch.setitem(cli.COMMANDS, "eval", boom)
    assert _run("eval", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--out", tmp_path) == 4


def test_invariant_exit_code(monkeypatch, workspace, tmp_path):
    root, ini = workspace

    def broken(*a, **k):
        raise cli.InvariantError("layer count mismatch")

    monkeypatch.setitem(cli.COMMANDS, "eval", broken)
    assert _run("eval", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--out", tmp_path) == 5


def test_bad_config_exit_code(workspace, tmp_path):
    root, ini = workspace
    dense = root / "dense" / "dense.trsp"
    assert _run("prune", "--config", ini, "--checkpoint", dense, "--set", "stage1.bogus=1", "--out", tmp_path) == 2
    assert _run("prune", "--config", ini, "--checkpoint", dense, "--ratio", "0.05", "--out", tmp_path) == 2


@pytest.fixture(scope="module")
def pruned(workspace):
    root, ini = workspace
    out = root / "pruned"
    assert _run("prune", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--ratio", "0.5",
                "--out", out) == 0
    return out


def test_prune_manifest(pruned):
    m = json.loads((pruned / "manifest.json").read_text())
    assert m["results"]["n_pruned"] == 2 and len(m["results"]["prune_set"]["indices"]) == 2
    assert m["config"]["prune"]["ratio"] == 0.5
    assert "stage2" in m["results"]
    for name in ("pruned.trsp", "regularized.trsp", "report.json", "similarity.csv", "calibration.json"):
        assert (pruned / name).is_file()
    report = json.loads((pruned / "report.json").read_text())
    assert report["ppl"] >= 1 and set(report["similarity_before"]) == {"0", "1", "2", "3"}


def test_ratio_quarter_of_eight_prunes_two(tmp_path, workspace):
    root, ini = workspace
    assert _run("pretrain", "--config", ini, "--set", "model.n_layers=8", "--set", "pretrain.steps=2",
                "--out", tmp_path / "d8") == 0
    assert _run("prune", "--config", ini, "--set", "model.n_layers=8", "--checkpoint", tmp_path / "d8" / "dense.trsp",
                "--ratio", "0.25", "--strategy", "random", "--out", tmp_path / "p8") == 0
    m = json.loads((tmp_path / "p8" / "manifest.json").read_text())
    assert m["results"]["n_pruned"] == 2


@pytest.mark.parametrize("strategy", ["similarity", "loss-impact", "random"])
def test_prune_routes_to_baselines(workspace, tmp_path, strategy):
    root, ini = workspace
    assert _run("prune", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--strategy", strategy,
                "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["results"]["strategy"] == strategy
    assert m["results"]["prune_set"]["method"] in (f"{strategy}-style", "random")
    assert "stage2" not in m["results"]


def test_no_stage2_flag(workspace, tmp_path):
    root, ini = workspace
    assert _run("prune", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--no-stage2",
                "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["prune"]["regularize"] is False and "stage2" not in m["results"]


def test_replay_reproduces_prune(pruned, tmp_path):
    new, diffs = cli.replay(pruned / "manifest.json", tmp_path / "again")
    assert diffs == []
    assert (tmp_path / "again" / "pruned.trsp").read_bytes() == (pruned / "pruned.trsp").read_bytes()
    assert _run("replay", pruned / "manifest.json", "--out", tmp_path / "third") == 0


def test_replay_detects_changed_input(workspace, tmp_path):
    root, ini = workspace
    ckpt = tmp_path / "dense.trsp"
    ckpt.write_bytes((root / "dense" / "dense.trsp").read_bytes())
    assert _run("eval", "--config", ini, "--checkpoint", ckpt, "--out", tmp_path / "ev") == 0
    ckpt.write_bytes(ckpt.read_bytes()[:-8] + b"\0" * 8)
    assert _run("replay", tmp_path / "ev" / "manifest.json") == 3


def test_eval_reports_signed_delta(workspace, pruned, tmp_path, capsys):
    root, ini = workspace
    assert _run("eval", "--config", ini, "--checkpoint", pruned / "pruned.trsp",
                "--reference", root / "dense" / "dense.trsp", "--out", tmp_path) == 0
    res = json.loads((tmp_path / "manifest.json").read_text())["results"]
    assert res["ppl_delta"] == pytest.approx(res["ppl"] - res["reference_ppl"])
    assert "delta " + ("+" if res["ppl_delta"] >= 0 else "-") in capsys.readouterr().out


def test_bench(workspace, pruned, tmp_path):
    root, ini = workspace
    assert _run("bench", "--config", ini, "--checkpoint", pruned / "pruned.trsp",
                "--reference", root / "dense" / "dense.trsp", "--out", tmp_path) == 0
    res = json.loads((tmp_path / "bench.json").read_text())
    assert res["n_layers"] == 2 and res["throughput_ratio"] > 0


def test_compare_table(workspace, tmp_path):
    root, ini = workspace
    assert _run("compare", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp", "--out", tmp_path) == 0
    data = json.loads((tmp_path / "compare.json").read_text())
    rows = data["rows"]
    assert sorted(r["strategy"] for r in rows) == ["loss-impact", "random", "similarity", "trsp-iterative"]
    assert len({r["eval_split_hash"] for r in rows}) == 1
    assert [r["ppl"] for r in rows] == sorted(r["ppl"] for r in rows)
    assert (tmp_path / "compare.csv").read_text().startswith("rank,strategy,ppl")


def test_grid_csv_loads_in_plot_script(workspace, tmp_path):
    import importlib.util
    from pathlib import Path

    root, ini = workspace
    assert _run("grid", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp",
                "--set", "grid.lambda1s=0,1e-3", "--set", "grid.lambda2s=0,1e-3,1e-2", "--out", tmp_path) == 0
    text = (tmp_path / "grid.csv").read_text()
    rows = text.strip().split("\n")
    assert len(rows) == 3 and len(rows[0].split(",")) == 4
    spec = importlib.util.spec_from_file_location(
        "plot_traces", Path(__file__).resolve().parents[1] / "scripts" / "plot_traces.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    kind, payload = mod.load_table(tmp_path / "grid.csv")
    assert kind == "grid" and payload[2].shape == (2, 3)


def test_diagnose(workspace, pruned, tmp_path):
    root, ini = workspace
    P = json.loads((pruned / "manifest.json").read_text())["results"]["prune_set"]["indices"]
    assert _run("diagnose", "--config", ini, "--checkpoint", root / "dense" / "dense.trsp",
                "--after", pruned / "regularized.trsp", "--prune-set", *P, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "manifest.json").read_text())["results"]
    assert set(res["similarity_before"]) == {"0", "1", "2", "3"}
    assert "delta_p" in res
    lines = (tmp_path / "similarity.csv").read_text().strip().split("\n")
    assert lines[0] == "layer,before,after,regularized" and len(lines) == 5
