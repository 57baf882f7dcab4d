"""Command-line driver: pretrain, prune, eval, bench, grid, compare, diagnose, replay.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numerical failure, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .core import SelectionError
from .data import DataError
from .diagnostics import (
    EvalReport,
    benchmark,
    cosine_similarity_trace,
    grid_csv,
    lambda_grid,
    perplexity,
    similarity_csv,
)
from .experiments import (
    calibration_for,
    check_compatible,
    consecutive_stat,
    corpus_for,
    eval_split,
    eval_split_hash,
    run_strategy,
    sha256_file,
    train_dense,
)

log = logging.getLogger("trsp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4, 5
STRATEGY_ORDER = ("trsp", "similarity", "loss-impact", "random")


class InvariantError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _load(path, field_name: str):
    if not path:
        raise ConfigError(f"--{field_name} is required")
    if not Path(path).is_file():
        raise DataError(f"{field_name}: checkpoint not found: {path}")
    return load_checkpoint(path)


def _write(out: Path, name: str, data, outputs: dict) -> Path:
    path = out / name
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")
    outputs[name] = sha256_file(path)
    return path


def _save_ckpt(state, out: Path, name: str, outputs: dict) -> Path:
    path = out / name
    save_checkpoint(state, path)
    outputs[name] = sha256_file(path)
    return path


def _input(path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def _report(ppl: float, **kw) -> EvalReport:
    return EvalReport(ppl=ppl, **kw)


# --------------------------------------------------------------------------
# commands; each returns the manifest body (results, inputs, outputs)


def cmd_pretrain(cfg: RunConfig, args: dict, out: Path) -> dict:
    corpus = corpus_for(cfg)
    state, result = train_dense(cfg, corpus)
    outputs: dict[str, str] = {}
    _save_ckpt(state, out, "dense.trsp", outputs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "train_loss", "val_loss"])
    for row in result.curve:
        w.writerow([row["step"], repr(row["train_loss"]), repr(row["val_loss"])])
    _write(out, "loss_curve.csv", buf.getvalue(), outputs)
    val_ppl = perplexity(state, corpus.validation)
    print(f"final validation PPL {val_ppl:.4f} after {result.steps_run} steps"
          + (" (early stop)" if result.stopped_early else ""))
    return {
        "inputs": {"corpus": _input(cfg.data.corpus)},
        "outputs": outputs,
        "results": {"val_ppl": val_ppl, "steps_run": result.steps_run, "stopped_early": result.stopped_early,
                    "checkpoint_sha256": outputs["dense.trsp"]},
    }


def cmd_prune(cfg: RunConfig, args: dict, out: Path) -> dict:
    dense = _load(args.get("checkpoint"), "checkpoint")
    corpus = corpus_for(cfg)
    check_compatible(dense, corpus)
    calib = calibration_for(corpus, cfg)
    split = eval_split(corpus, cfg)
    outputs: dict[str, str] = {}
    _write(out, "calibration.json", calib.to_json(), outputs)

    res = run_strategy(dense, calib, split, cfg)
    if res.model.n_layers != dense.n_layers - len(res.prune_set):
        raise InvariantError("pruned layer count does not match the prune set")
    _save_ckpt(res.model, out, "pruned.trsp", outputs)
    dense_ppl = perplexity(dense, split)

    sims_before = cosine_similarity_trace(dense, calib.tokens)
    sims_after: dict[int, float] = {}
    results: dict = {"strategy": res.strategy, "n_pruned": len(res.prune_set),
                     "prune_set": res.prune_set.to_dict()}
    if res.trsp is not None:
        results["history"] = res.trsp.history.to_list()
        results["max_consecutive_run"] = consecutive_stat(res.prune_set)
        if res.trsp.stage2 is not None:
            s2 = res.trsp.stage2
            results["stage2"] = {"penalty_initial": s2.penalty_initial, "penalty_final": s2.penalty_final,
                                 "steps_run": s2.steps_run, "penalty": s2.penalty, "lm_loss": s2.lm_loss}
            _save_ckpt(res.trsp.regularized, out, "regularized.trsp", outputs)
            sims_after = cosine_similarity_trace(res.trsp.regularized, calib.tokens)
    _write(out, "similarity.csv", similarity_csv(sims_before, sims_after, res.prune_set.indices), outputs)

    report = _report(res.ppl, similarity_before=sims_before, similarity_after=sims_after,
                     selection=results, config=cfg.to_dict(),
                     extra={"dense_ppl": dense_ppl, "ppl_delta": res.ppl - dense_ppl,
                            "eval_split_hash": eval_split_hash(split)})
    _write(out, "report.json", report.to_json(), outputs)
    print(f"{res.strategy}: pruned {len(res.prune_set)} layers {res.prune_set.indices} "
          f"-> {res.model.n_layers} layers; PPL {res.ppl:.4f} (dense {dense_ppl:.4f}, delta {res.ppl - dense_ppl:+.4f})")
    results.update({"ppl": res.ppl, "dense_ppl": dense_ppl, "checkpoint_sha256": outputs["pruned.trsp"]})
    return {"inputs": {"checkpoint": _input(args["checkpoint"]), "corpus": _input(cfg.data.corpus)},
            "outputs": outputs, "results": results}


def cmd_eval(cfg: RunConfig, args: dict, out: Path) -> dict:
    state = _load(args.get("checkpoint"), "checkpoint")
    corpus = corpus_for(cfg)
    check_compatible(state, corpus)
    split = eval_split(corpus, cfg)
    ppl = perplexity(state, split, cfg.data.eval_seq_len)
    inputs = {"checkpoint": _input(args["checkpoint"]), "corpus": _input(cfg.data.corpus)}
    extra = {"eval_split_hash": eval_split_hash(split), "n_layers": state.n_layers,
             "provenance": state.provenance}
    line = f"PPL {ppl:.4f} ({state.n_layers} layers)"
    if args.get("reference"):
        ref = _load(args["reference"], "reference")
        check_compatible(ref, corpus)
        ref_ppl = perplexity(ref, split, cfg.data.eval_seq_len)
        extra.update({"reference_ppl": ref_ppl, "ppl_delta": ppl - ref_ppl})
        inputs["reference"] = _input(args["reference"])
        line += f"; reference {ref_ppl:.4f} ({ref.n_layers} layers); delta {ppl - ref_ppl:+.4f}"
    print(line)
    outputs: dict[str, str] = {}
    _write(out, "report.json", _report(ppl, config=cfg.to_dict(), extra=extra).to_json(), outputs)
    return {"inputs": inputs, "outputs": outputs, "results": {"ppl": ppl, **extra}}


def cmd_bench(cfg: RunConfig, args: dict, out: Path) -> dict:
    state = _load(args.get("checkpoint"), "checkpoint")
    b = cfg.bench
    kw = dict(batch=b.batch, gen_len=b.gen_len, prompt_len=b.prompt_len, repeats=b.repeats,
              warmup=b.warmup, seed=cfg.seeds()["bench"])
    r = benchmark(state, **kw)
    results = {"tokens_per_second": r.tokens_per_second, "latency_ms": r.latency_ms,
               "gen_times": r.gen_times, "prompt_times": r.prompt_times, "n_layers": state.n_layers}
    inputs = {"checkpoint": _input(args["checkpoint"])}
    line = f"{state.n_layers} layers: {r.tokens_per_second:.1f} tokens/s, prompt latency {r.latency_ms:.2f} ms"
    if args.get("reference"):
        ref = _load(args["reference"], "reference")
        rr = benchmark(ref, **kw)
        results.update({"reference_tokens_per_second": rr.tokens_per_second,
                        "reference_latency_ms": rr.latency_ms,
                        "throughput_ratio": r.tokens_per_second / rr.tokens_per_second,
                        "latency_ratio": r.latency_ms / rr.latency_ms})
        inputs["reference"] = _input(args["reference"])
        line += (f"; reference {rr.tokens_per_second:.1f} tokens/s, {rr.latency_ms:.2f} ms; "
                 f"speedup {results['throughput_ratio']:.2f}x, latency {results['latency_ratio']:.2f}x")
    print(line)
    outputs: dict[str, str] = {}
    _write(out, "bench.json", json.dumps(results, indent=2), outputs)
    return {"inputs": inputs, "outputs": outputs, "results": results}


def cmd_grid(cfg: RunConfig, args: dict, out: Path) -> dict:
    dense = _load(args.get("checkpoint"), "checkpoint")
    corpus = corpus_for(cfg)
    check_compatible(dense, corpus)
    calib = calibration_for(corpus, cfg)
    split = eval_split(corpus, cfg)
    g = cfg.grid
    matrix = lambda_grid(dense, calib, split, g.lambda1s, g.lambda2s, cfg.prune.ratio, cfg.stage1, cfg.stage2,
                         mode=cfg.prune.mode, seed=cfg.seeds()["selection"])
    outputs: dict[str, str] = {}
    text = grid_csv(g.lambda1s, g.lambda2s, matrix)
    _write(out, "grid.csv", text, outputs)
    print(text, end="")
    return {"inputs": {"checkpoint": _input(args["checkpoint"]), "corpus": _input(cfg.data.corpus)},
            "outputs": outputs, "results": {"ppl": matrix.tolist()}}


def cmd_compare(cfg: RunConfig, args: dict, out: Path) -> dict:
    dense = _load(args.get("checkpoint"), "checkpoint")
    corpus = corpus_for(cfg)
    check_compatible(dense, corpus)
    calib = calibration_for(corpus, cfg)
    split = eval_split(corpus, cfg)
    split_hash = eval_split_hash(split)
    b = cfg.bench
    bench_kw = dict(batch=b.batch, gen_len=b.gen_len, prompt_len=b.prompt_len, repeats=b.repeats,
                    warmup=b.warmup, seed=cfg.seeds()["bench"])
    rows = []
    dense_ppl = perplexity(dense, split)
    strategies = args.get("strategies") or list(STRATEGY_ORDER)
    for s in strategies:
        res = run_strategy(dense, calib, split, cfg, strategy=s)
        row = {"strategy": s if s != "trsp" else f"trsp-{cfg.prune.mode}",
               "prune_set": sorted(res.prune_set.indices), "ppl": res.ppl,
               "eval_split_hash": split_hash, "calibration_hash": calib.split_hash}
        if not args.get("no_bench"):
            row["tokens_per_second"] = benchmark(res.model, **bench_kw).tokens_per_second
        rows.append(row)
    rows.sort(key=lambda r: r["ppl"])
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    outputs: dict[str, str] = {}
    buf = io.StringIO()
    fields = ["rank", "strategy", "ppl", "tokens_per_second", "prune_set", "eval_split_hash"]
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "prune_set": " ".join(map(str, r["prune_set"])), "ppl": repr(r["ppl"])})
    _write(out, "compare.csv", buf.getvalue(), outputs)
    _write(out, "compare.json", json.dumps({"dense_ppl": dense_ppl, "rows": rows}, indent=2), outputs)
    print(f"dense PPL {dense_ppl:.4f}; eval split {split_hash}")
    for r in rows:
        tps = f"{r['tokens_per_second']:9.1f} tok/s" if "tokens_per_second" in r else ""
        print(f"{r['rank']:>2}. {r['strategy']:<16} PPL {r['ppl']:8.4f}  P={r['prune_set']} {tps}")
    return {"inputs": {"checkpoint": _input(args["checkpoint"]), "corpus": _input(cfg.data.corpus)},
            "outputs": outputs,
            "results": {"dense_ppl": dense_ppl,
                        "rows": [{k: v for k, v in r.items() if k != "tokens_per_second"} for r in rows]}}


def cmd_diagnose(cfg: RunConfig, args: dict, out: Path) -> dict:
    state = _load(args.get("checkpoint"), "checkpoint")
    corpus = corpus_for(cfg)
    check_compatible(state, corpus)
    calib = calibration_for(corpus, cfg)
    before = cosine_similarity_trace(state, calib.tokens)
    after: dict[int, float] = {}
    inputs = {"checkpoint": _input(args["checkpoint"]), "corpus": _input(cfg.data.corpus)}
    if args.get("after"):
        other = _load(args["after"], "after")
        after = cosine_similarity_trace(other, calib.tokens)
        inputs["after"] = _input(args["after"])
    marked = [int(x) for x in args.get("prune_set") or []]
    outputs: dict[str, str] = {}
    text = similarity_csv(before, after, marked)
    _write(out, "similarity.csv", text, outputs)
    gates = dict(zip(state.provenance, state.gates.data.tolist()))
    results = {"similarity_before": {str(k): v for k, v in before.items()},
               "similarity_after": {str(k): v for k, v in after.items()},
               "gates": {str(k): v for k, v in gates.items()}}
    if marked and after:
        inside = [after[i] - before[i] for i in before if i in marked]
        outside = [after[i] - before[i] for i in before if i not in marked]
        results["delta_p"] = float(np.mean(inside))
        results["delta_rest"] = float(np.mean(outside)) if outside else 0.0
    print(text, end="")
    return {"inputs": inputs, "outputs": outputs, "results": results}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "grid": cmd_grid,
    "compare": cmd_compare,
    "diagnose": cmd_diagnose,
}

# results that must agree bit-for-bit on replay; timings are excluded
_REPLAY_KEYS = ("prune_set", "ppl", "checkpoint_sha256", "rows", "dense_ppl", "val_ppl",
                "similarity_before", "similarity_after")


# --------------------------------------------------------------------------
# driver


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value; repeatable")
    common.add_argument("--corpus", help="corpus path (overrides data.corpus)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trsp", description="Two-stage regularized layer pruning toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train the dense baseline")
    for name in ("prune", "grid", "compare"):
        sp = sub.add_parser(name, parents=[common], help={
            "prune": "select, regularize and remove layers",
            "grid": "lambda1 x lambda2 perplexity grid",
            "compare": "TRSP against every baseline on identical data"}[name])
        sp.add_argument("--checkpoint", required=True, help="dense checkpoint")
        sp.add_argument("--ratio", type=float, help="pruning ratio (overrides prune.ratio)")
        sp.add_argument("--mode", choices=["iterative", "one_shot"], help="selection mode")
        sp.add_argument("--no-stage2", action="store_true", help="skip stage-2 regularization")
        if name == "prune":
            sp.add_argument("--strategy", choices=list(STRATEGY_ORDER))
        if name == "compare":
            sp.add_argument("--strategies", nargs="+", choices=list(STRATEGY_ORDER))
            sp.add_argument("--no-bench", action="store_true", help="skip throughput measurement")
    for name in ("eval", "bench"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} a checkpoint")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--reference", help="second checkpoint to compare against (e.g. the dense model)")
    sp = sub.add_parser("diagnose", parents=[common], help="per-layer similarity trace")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--after", help="full-depth checkpoint after stage 2")
    sp.add_argument("--prune-set", nargs="*", default=[], help="layers to flag as regularized")
    sp = sub.add_parser("replay", help="re-run a command from its manifest and verify the results")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="output directory for the replay")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(ns: argparse.Namespace) -> list[str]:
    out = list(getattr(ns, "set", []) or [])
    pairs = [("seed", "run.seed"), ("out", "run.out"), ("corpus", "data.corpus"), ("ratio", "prune.ratio"),
             ("mode", "prune.mode"), ("strategy", "prune.strategy")]
    for attr, key in pairs:
        v = getattr(ns, attr, None)
        if v is not None:
            out.append(f"{key}={v}")
    if getattr(ns, "no_stage2", False):
        out.append("prune.regularize=false")
    return out


def _command_args(ns: argparse.Namespace) -> dict:
    keep = ("checkpoint", "reference", "after", "prune_set", "strategies", "no_bench")
    return {k: getattr(ns, k) for k in keep if getattr(ns, k, None) not in (None, [], False)}


def execute(command: str, cfg: RunConfig, args: dict, out: Path) -> dict:
    """Run ``command`` and write ``manifest.json`` into ``out``; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    body = COMMANDS[command](cfg, args, out)
    manifest = {"command": command, "version": __version__, "args": args, "config": cfg.to_dict(),
                "seeds": cfg.seeds(), **body}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def replay(manifest_path, out=None) -> tuple[dict, list[str]]:
    """Re-run a manifest; returns the new manifest and a list of mismatching result keys."""
    p = Path(manifest_path)
    if not p.is_file():
        raise DataError(f"manifest not found: {p}")
    old = json.loads(p.read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(old["config"])
    for name, meta in old.get("inputs", {}).items():
        if not Path(meta["path"]).is_file():
            raise DataError(f"replay input {name} missing: {meta['path']}")
        if sha256_file(meta["path"]) != meta["sha256"]:
            raise DataError(f"replay input {name} changed since the run: {meta['path']}")
    out = Path(out) if out else p.parent / "replay"
    new = execute(old["command"], cfg, old.get("args", {}), out)
    old_r = json.loads(json.dumps(old["results"]))
    new_r = json.loads(json.dumps(new["results"]))
    diffs = [k for k in _REPLAY_KEYS if k in old_r and old_r[k] != new_r.get(k)]
    return new, diffs


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            _, diffs = replay(ns.manifest, ns.out)
            if diffs:
                raise InvariantError(f"replay diverged in: {', '.join(diffs)}")
            print("replay matches the manifest")
            return EXIT_OK
        cfg = load_config(ns.config, _overrides(ns))
        execute(ns.command, cfg, _command_args(ns), Path(cfg.run.out))
        return EXIT_OK
    except (ConfigError, SelectionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantError, AssertionError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
