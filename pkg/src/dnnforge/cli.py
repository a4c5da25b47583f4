"""Pipeline front-end: one subcommand per stage plus a sweep driver.

Every subcommand is a pure function of its on-disk inputs, the config, and
the seed; rerunning reproduces outputs bit-exactly. Config values resolve
with precedence CLI flag > config file (TOML or JSON) > built-in default.

Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback

import numpy as np

from . import codegen, graphopt, memplan, presets, prune, quant, refrun, trainer
from .ir import Graph, ModelError, load_model, save_model
from .pack import pack


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


KNOWN_KEYS = {
    "train.lr", "train.momentum", "train.batch_size", "train.epochs", "train.seed",
    "data.kind", "data.n", "data.classes", "data.seed", "data.path", "data.dim",
    "prune.kind", "prune.mode", "prune.heuristic", "prune.s_i", "prune.s_f",
    "prune.t0", "prune.n", "prune.dt",
    "quant.mode", "quant.calib_size", "quant.epochs",
    "sweep.targets", "sweep.modes", "sweep.heuristics", "sweep.quant", "sweep.seeds",
    "model.preset", "model.dims",
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str) -> dict:
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    else:
        with open(path) as f:
            raw = json.load(f)
    cfg = _flatten(raw)
    unknown = sorted(set(cfg) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    return cfg


class Settings:
    """CLI flag > config file > default."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, default=None, cast=None, flag=None):
        if flag is None:
            flag = key.split(".")[-1]
        v = getattr(self.args, flag, None)
        if v is None:
            v = self.cfg.get(key, default)
        if v is not None and cast is not None:
            v = cast(v)
        return v


def _require(path: str, produced_by: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing stage prerequisite: {path} (run `dnnforge {produced_by}` first)"
        )
    return path


def _load_data(s: Settings) -> trainer.Dataset:
    kind = s.get("data.kind", "blobs", flag="data_kind")
    if kind == "blobs":
        return trainer.make_blobs(
            n=s.get("data.n", 400, int, flag="data_n"),
            classes=s.get("data.classes", 2, int, flag="data_classes"),
            seed=s.get("data.seed", s.get("train.seed", 0, int), int),
            dim=s.get("data.dim", 2, int),
        )
    if kind == "idx":
        return trainer.load_idx(s.get("data.path", flag="data_path"))
    if kind == "cache":
        return trainer.load_dataset(s.get("data.path", flag="data_path"))
    raise UsageError(f"unknown data kind {kind!r}")


def _load_graph(s: Settings) -> Graph:
    model = getattr(s.args, "model", None)
    if model:
        return load_model(model)
    preset = s.get("model.preset", None)
    if preset is None:
        raise UsageError("provide --model or --preset")
    seed = s.get("train.seed", 0, int)
    if preset == "mlp":
        dims = s.get("model.dims", "2,32,32,2")
        dims = tuple(int(d) for d in str(dims).split(","))
        return presets.build_mlp(dims, seed=seed)
    return presets.build(preset, seed=seed)


def _train_config(s: Settings) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        lr=s.get("train.lr", 1e-3, float),
        momentum=s.get("train.momentum", 0.9, float),
        batch_size=s.get("train.batch_size", 32, int),
        epochs=s.get("train.epochs", 10, int),
        seed=s.get("train.seed", 0, int),
    )


def _prune_hook(s: Settings, epochs: int) -> prune.PruneHook:
    sched = prune.PruneSchedule(
        kind=s.get("prune.kind", "agp", flag="prune_kind"),
        s_i=s.get("prune.s_i", 0.0, float),
        s_f=s.get("prune.s_f", 0.5, float),
        t0=s.get("prune.t0", max(1, epochs // 4), int),
        n=s.get("prune.n", 5, int, flag="prune_n"),
        dt=s.get("prune.dt", 1, int),
    )
    mode = s.get("prune.mode", "element")
    default_h = "level" if mode == "element" else "l1"
    heuristic = prune.Heuristic(s.get("prune.heuristic", default_h),
                                seed=s.get("train.seed", 0, int))
    return prune.schedule_hook(sched, heuristic, mode=mode)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    s = Settings(args)
    g = _load_graph(s)
    data = _load_data(s)
    cfg = _train_config(s)
    g, metrics = trainer.train(g, data, cfg)
    out = args.out or g.name
    save_model(g, out)
    with open(out + ".metrics.json", "w") as f:
        json.dump(metrics, f, indent=1)
        f.write("\n")
    acc = metrics["test_acc"][-1] if metrics["test_acc"] else float("nan")
    print(f"trained {g.name}: final test accuracy {acc:.4f} -> {out}.json")
    return 0


def cmd_prune(args) -> int:
    s = Settings(args)
    g = _load_graph(s)
    data = _load_data(s)
    cfg = _train_config(s)
    hook = _prune_hook(s, cfg.epochs)
    g, metrics = trainer.train(g, data, cfg, hooks=[hook])
    if hook.mode == "structural" and hook.keep:
        g = prune.shrink_structures(g, hook.keep)
    out = args.out or g.name
    save_model(g, out)
    acc = metrics["test_acc"][-1] if metrics["test_acc"] else float("nan")
    print(f"pruned {g.name}: {len(hook.events)} schedule event(s), "
          f"realized sparsity {prune.realized_sparsity(g):.4f}, "
          f"test accuracy {acc:.4f} -> {out}.json")
    return 0


def cmd_quantize(args) -> int:
    s = Settings(args)
    g = _load_graph(s)
    data = _load_data(s)
    mode = s.get("quant.mode", "ppq")
    if args.optimize:
        g, rep = graphopt.fold_batchnorm(g)
        print(f"folded {len(rep['folded'])} batch-norm node(s)")
    calib_size = s.get("quant.calib_size", 64, int)
    calib = data.train_x[:calib_size]
    if mode == "ppq":
        qg = quant.ppq(g, calib)
    elif mode == "qat":
        cfg = _train_config(s)
        cfg.epochs = s.get("quant.epochs", cfg.epochs, int)
        hook = quant.qat_hook(g)
        g, _ = trainer.train(g, data, cfg, hooks=[hook])
        qg = hook.export(g)
    else:
        raise UsageError(f"unknown quantization mode {mode!r}")
    if args.optimize:
        qg, rep = graphopt.fuse_relu(qg)
        print(f"fused {len(rep['fused'])} ReLU node(s)")
    out = args.out or g.name
    save_model(qg, out)
    print(f"quantized {g.name} ({mode}) -> {out}.json")
    return 0


def cmd_optimize(args) -> int:
    g = load_model(args.model)
    g, report = graphopt.optimize(g)
    out = args.out or g.name
    save_model(g, out)
    print(f"fold_batchnorm: folded={report['fold_batchnorm']['folded']} "
          f"skipped={report['fold_batchnorm']['skipped']}")
    print(f"fuse_relu: fused={report['fuse_relu']['fused']}")
    return 0


def cmd_pack(args) -> int:
    g = load_model(args.model)
    stream = pack(g)
    out = args.out or (os.path.splitext(args.model)[0] if args.model.endswith(".json")
                       else args.model) + ".weights"
    stream.save(out)
    crs = sum(1 for d in stream.descriptors if d.layout == "crs")
    print(f"packed {len(stream.descriptors)} tensor(s) ({crs} crs) into {len(stream)} bytes -> {out}")
    return 0


def cmd_plan(args) -> int:
    g = load_model(args.model)
    table = memplan.lifetimes(g)
    plan = memplan.first_fit_plan(table)
    violation = memplan.verify_plan(plan, table)
    if violation is not None:
        raise RuntimeError(f"planner self-check failed: {violation}")
    out = args.out or (os.path.splitext(args.model)[0] if args.model.endswith(".json")
                       else args.model) + ".plan.json"
    with open(out, "w") as f:
        json.dump(plan.to_json(), f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"planned peak {plan.peak} bytes "
          f"(naive {memplan.naive_total(table)}) -> {out}")
    return 0


def cmd_emit(args) -> int:
    g = load_model(args.model)
    base = os.path.splitext(args.model)[0] if args.model.endswith(".json") else args.model
    weights_path = args.weights or base + ".weights"
    plan_path = args.plan or base + ".plan.json"
    _require(weights_path, "pack")
    _require(plan_path, "plan")
    stream = pack(g)
    with open(weights_path, "rb") as f:
        on_disk = f.read()
    if on_disk != stream.to_bytes():
        raise ValueError(f"{weights_path} is stale for this model; re-run `dnnforge pack`")
    with open(plan_path) as f:
        plan_json = json.load(f)
    plan = memplan.first_fit_plan(memplan.lifetimes(g))
    if plan.to_json() != plan_json:
        raise ValueError(f"{plan_path} is stale for this model; re-run `dnnforge plan`")
    files = codegen.emit(g, stream, plan, name=args.name)
    out_dir = args.out_dir or base + "_c"
    paths = codegen.write_emit(files, out_dir)
    report = codegen.emit_report(g, stream, plan)
    codegen.save_report(report, os.path.join(out_dir, "report.json"))
    print(f"emitted {', '.join(sorted(os.path.basename(p) for p in paths))} -> {out_dir}/")
    return 0


def cmd_run(args) -> int:
    g = load_model(args.model)
    in_desc = g.edges[g.inputs[0]]
    dt = np.dtype("<f4") if in_desc.dtype == "f32" else np.dtype("u1")
    x = np.fromfile(args.input, dtype=dt)
    if x.size != in_desc.numel:
        raise ValueError(f"input file holds {x.size} elements, model wants {in_desc.numel}")
    y = refrun.run(g, x.reshape(in_desc.shape))
    y.tofile(args.output)
    print(f"ran {g.name}: wrote {y.size} {g.edges[g.outputs[0]].dtype} values -> {args.output}")
    return 0


def cmd_report(args) -> int:
    g = load_model(args.model)
    stream = pack(g)
    plan = memplan.first_fit_plan(memplan.lifetimes(g))
    report = codegen.emit_report(g, stream, plan)
    out = args.out or "report.json"
    codegen.save_report(report, out)
    print(f"flash {report['flash_bytes']} B, sram {report['sram_bytes']} B, "
          f"sparsity {report['realized_sparsity']:.4f} -> {out}")
    return 0


def _sweep_cell(preset_args, seed: int, mode: str, heuristic: str, qmode: str,
                target: int, s: Settings) -> dict:
    dims, preset = preset_args
    if preset == "mlp":
        g = presets.build_mlp(dims, seed=seed)
    else:
        g = presets.build(preset, seed=seed)
    data = trainer.make_blobs(n=s.get("data.n", 400, int),
                              classes=s.get("data.classes", 2, int),
                              seed=seed, dim=s.get("data.dim", 2, int))
    cfg = _train_config(s)
    cfg.seed = seed
    hooks = []
    hook = None
    if target > 0:
        sched = prune.PruneSchedule(
            kind=s.get("prune.kind", "agp", flag="prune_kind"),
            s_f=target / 100.0,
            t0=s.get("prune.t0", max(1, cfg.epochs // 4), int),
            n=s.get("prune.n", 5, int, flag="prune_n"),
            dt=s.get("prune.dt", 1, int),
        )
        hook = prune.schedule_hook(sched, prune.Heuristic(heuristic, seed=seed), mode=mode)
        hooks.append(hook)
    g, _metrics = trainer.train(g, data, cfg, hooks=hooks)
    if hook is not None and mode == "structural" and hook.keep:
        g = prune.shrink_structures(g, hook.keep)
    if qmode == "u8":
        g = quant.ppq(g, data.train_x[:s.get("quant.calib_size", 64, int)])
        g, _ = graphopt.fuse_relu(g)
    acc, _ = refrun.evaluate(g, data.test_x, data.test_y)
    stream = pack(g)
    plan = memplan.first_fit_plan(memplan.lifetimes(g))
    return {
        "seed": seed, "mode": mode, "heuristic": heuristic, "quant": qmode,
        "target_pct": target,
        "realized_sparsity": round(prune.realized_sparsity(g), 6),
        "accuracy": round(acc, 6),
        "flash_bytes": len(stream),
        "sram_bytes": plan.peak + codegen.SRAM_OVERHEAD,
    }


SWEEP_FIELDS = ["seed", "mode", "heuristic", "quant", "target_pct",
                "realized_sparsity", "accuracy", "flash_bytes", "sram_bytes"]


def sweep_rows(s: Settings) -> list[dict]:
    preset = s.get("model.preset", "mlp")
    dims = tuple(int(d) for d in str(s.get("model.dims", "2,32,32,2")).split(","))
    targets = [int(t) for t in str(s.get("sweep.targets", "0,50,75,90,95,99")).split(",")]
    modes = str(s.get("sweep.modes", "structural,element")).split(",")
    heuristics = str(s.get("sweep.heuristics", "l1,level")).split(",")
    qmodes = str(s.get("sweep.quant", "none")).split(",")
    seeds = [int(x) for x in str(s.get("sweep.seeds", s.get("train.seed", 0))).split(",")]
    rows = []
    for seed in seeds:
        for mode in modes:
            valid = prune.ELEMENT_HEURISTICS if mode == "element" else prune.STRUCTURAL_HEURISTICS
            for heuristic in heuristics:
                if heuristic not in valid:
                    continue
                for qmode in qmodes:
                    for target in targets:
                        rows.append(_sweep_cell((dims, preset), seed, mode, heuristic,
                                                qmode, target, s))
    return rows


def cmd_sweep(args) -> int:
    s = Settings(args)
    rows = sweep_rows(s)
    out = args.out or "sweep.csv"
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    print(f"swept {len(rows)} cell(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="dnnforge",
                description="Compress small neural networks and compile them to C.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, preset=False, data=False, train=False, out=True):
        sp.add_argument("--config", help="TOML or JSON config file")
        if model:
            sp.add_argument("--model", help="model bundle (<name>.json)")
        if preset:
            sp.add_argument("--preset", help="architecture preset (mlp, lenet, alexnet, resnet)")
            sp.add_argument("--dims", help="mlp layer sizes, e.g. 2,32,32,2")
        if data:
            sp.add_argument("--data-kind", dest="data_kind", help="data source: blobs | idx | cache")
            sp.add_argument("--data-n", dest="data_n", type=int, help="blob sample count")
            sp.add_argument("--data-classes", dest="data_classes", type=int, help="blob class count")
            sp.add_argument("--data-path", dest="data_path",
                            help="idx directory/file or dataset cache path")
        if train:
            sp.add_argument("--lr", type=float)
            sp.add_argument("--momentum", type=float)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output path")

    sp = sub.add_parser("train", help="train a model")
    common(sp, model=True, preset=True, data=True, train=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="train with a pruning schedule")
    common(sp, model=True, preset=True, data=True, train=True)
    sp.add_argument("--mode", help="element | structural")
    sp.add_argument("--heuristic", help="level | random | l1 | l2 | gradient | activation_zeros")
    sp.add_argument("--s_f", type=float, help="final sparsity")
    sp.add_argument("--s_i", type=float)
    sp.add_argument("--t0", type=int)
    sp.add_argument("--n", dest="prune_n", type=int, help="schedule step count")
    sp.add_argument("--dt", type=int)
    sp.add_argument("--schedule", dest="prune_kind", help="one_shot | agp")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("quantize", help="post-process or training-aware quantization")
    common(sp, model=True, preset=True, data=True, train=True)
    sp.add_argument("--mode", help="ppq | qat")
    sp.add_argument("--calib-size", dest="calib_size", type=int)
    sp.add_argument("--optimize", action="store_true",
                    help="fold batch-norm before and fuse ReLU after quantization")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("optimize", help="fold batch-norm and fuse ReLU")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("pack", help="serialize parameters into a weight stream")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pack)

    sp = sub.add_parser("plan", help="plan activation memory")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("emit", help="emit C sources (requires pack and plan outputs)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--weights", help="packed stream from `dnnforge pack`")
    sp.add_argument("--plan", help="plan JSON from `dnnforge plan`")
    sp.add_argument("--name", help="C identifier prefix (default: model name)")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.set_defaults(func=cmd_emit)

    sp = sub.add_parser("run", help="run the reference interpreter on a raw tensor file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="size/memory report for a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sweep", help="pruning-rate sweep producing a CSV")
    common(sp, preset=True, data=True, train=True)
    sp.add_argument("--targets", help="pruning percentages, e.g. 0,50,75,90,95,99")
    sp.add_argument("--modes", help="comma list: structural,element")
    sp.add_argument("--heuristics", help="comma list of heuristics")
    sp.add_argument("--quant", help="comma list: none,u8")
    sp.add_argument("--seeds", help="comma list of seeds")
    sp.set_defaults(func=cmd_sweep)

    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ModelError, FileNotFoundError, ValueError, OverflowError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
