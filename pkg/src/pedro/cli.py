"""Command-line entry point.

Exit codes: 0 success, 2 bad input (config, checkpoint, arguments),
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

from . import checkpoint
from .bench import run_bench
from .config import ADAPTER_KINDS, ConfigError, RunConfig, count_params, load_config, make_adapter
from .model import SequenceOverflowError, Transformer
from .pipeline import backbone_hash, build_backbone, load_backbone_into, load_run, save_run, task_for
from .tasks import TASKS, save_corpus
from .trainer import DivergenceError, evaluate, fit

log = logging.getLogger("pedro")

EXIT_OK, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 2, 3


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _backbone(cfg: RunConfig, path) -> Transformer:
    if path:
        tensors, _ = checkpoint.load(path)
        model = Transformer(cfg.model_config(), seed=cfg.backbone_seed)
        load_backbone_into(model, tensors)
        return model
    return build_backbone(cfg)


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    model = build_backbone(cfg)
    save_run(args.out, model, None, "none", cfg)
    print(json.dumps({"checkpoint": str(args.out), "backbone_sha256": backbone_hash(model)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _backbone(cfg, args.backbone)
    before = backbone_hash(model)
    task = task_for(cfg, args.task)
    adapter = make_adapter(args.adapter, cfg, seed=args.seed)
    stem = f"{args.adapter}-{args.task}-seed{args.seed}"
    result = fit(task, model, adapter, cfg.train_config(seed=args.seed))
    if backbone_hash(model) != before:
        raise RuntimeError("backbone weights changed during adapter training")
    test = evaluate(task.test, model, adapter)
    result.write_history(out / f"{stem}.metrics.csv")
    save_run(out / f"{stem}.ckpt", model, adapter, args.adapter, cfg, task=args.task, seed=args.seed,
             best_val_loss=result.best_val_loss, backbone_sha256=before)
    summary = {"adapter": args.adapter, "task": args.task, "seed": args.seed, "steps": result.steps,
               "best_val_loss": result.best_val_loss, "stopped_early": result.stopped_early,
               "test_accuracy": test["accuracy"], "test_loss": test["loss"], "n_examples": test["n_examples"],
               "provenance": result.provenance}
    (out / f"{stem}.eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, adapter, cfg, meta = load_run(args.checkpoint)
    task = task_for(cfg, args.task)
    metrics = evaluate(task.splits[args.split], model, adapter)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, adapter, cfg, _ = load_run(args.checkpoint)
        if args.adapter and args.adapter != (adapter.kind if adapter else "none"):
            raise ConfigError(f"--adapter {args.adapter} disagrees with checkpoint", "adapter")
    else:
        cfg = _config(args.config)
        model = _backbone(cfg, args.backbone) if args.backbone else Transformer(cfg.model_config(), cfg.backbone_seed)
        model.freeze()
        adapter = make_adapter(args.adapter or "pedro", cfg)
    report = run_bench(model, adapter, args.prompt_len, args.gen_len, args.beam, args.trials, args.warmup)
    body = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(body + "\n")
    if args.figure:
        from .plotting import plot_bench

        plot_bench([report.to_dict()], args.figure)
    print(body)
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = _config(args.config)
    print(count_params(args.adapter, cfg, include_bias=args.include_bias))
    return EXIT_OK


def cmd_report(args) -> int:
    """Median test metrics over seeds per (adapter, task), plus figures."""
    from .plotting import plot_activations, plot_bench, plot_history

    src = Path(args.runs)
    out = Path(args.out_dir or src)
    out.mkdir(parents=True, exist_ok=True)
    runs = [json.loads(p.read_text()) for p in sorted(src.glob("*.eval.json"))]
    if not runs:
        print(f"no *.eval.json files under {src}", file=sys.stderr)
        return EXIT_BAD_INPUT
    groups: dict[tuple, list] = {}
    for r in runs:
        groups.setdefault((r["adapter"], r["task"]), []).append(r)
    rows = []
    for (adapter, task), rs in sorted(groups.items()):
        rows.append({"adapter": adapter, "task": task, "n_seeds": len(rs),
                     "seeds": " ".join(str(r["seed"]) for r in sorted(rs, key=lambda r: r["seed"])),
                     "median_test_accuracy": statistics.median(r["test_accuracy"] for r in rs),
                     "median_test_loss": statistics.median(r["test_loss"] for r in rs)})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    histories = {}
    for p in sorted(src.glob("*.metrics.csv")):
        with open(p, newline="") as fh:
            histories[p.name.removesuffix(".metrics.csv")] = list(csv.DictReader(fh))
    figures = [str(plot_history(histories, out / "val_loss.png"))]
    pedro_ckpts = sorted(src.glob("pedro-*.ckpt"))
    if pedro_ckpts:
        _, adapter, _, _ = load_run(pedro_ckpts[0])
        figures.append(str(plot_activations([vg.activation for vg in adapter.vgs], out / "activations.png")))
    benches = [json.loads(p.read_text()) for p in sorted(src.glob("*.bench.json"))]
    if benches:
        figures.append(str(plot_bench(benches, out / "bench_tps.png")))

    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    for f in figures:
        print(f"# figure: {f}")
    return EXIT_OK


def cmd_export_task(args) -> int:
    cfg = _config(args.config)
    task = task_for(cfg, args.task)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, examples in task.splits.items():
        save_corpus(examples, out / f"{args.task}.{split}.tsv")
    print(json.dumps({s: len(e) for s, e in task.splits.items()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedro", description="Prompt-dependent representation modification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="build and pretrain a frozen backbone checkpoint")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="fine-tune an adapter on a synthetic task")
    s.add_argument("--config")
    s.add_argument("--task", required=True, choices=sorted(TASKS))
    s.add_argument("--adapter", required=True, choices=ADAPTER_KINDS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backbone", help="pretrained backbone checkpoint (default: pretrain now)")
    s.add_argument("--out-dir", default="runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a run checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", required=True, choices=sorted(TASKS))
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="measure generation speed and adapter counters")
    s.add_argument("--adapter", choices=ADAPTER_KINDS)
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--backbone")
    s.add_argument("--prompt-len", type=int, default=256)
    s.add_argument("--gen-len", type=int, default=32)
    s.add_argument("--beam", type=int, default=1, choices=(1, 3))
    s.add_argument("--trials", type=int, default=7)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--out", help="write the report JSON here too")
    s.add_argument("--figure", help="write a tokens/s bar chart (PNG)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("count-params", help="tunable parameter count from shapes")
    s.add_argument("--config")
    s.add_argument("--adapter", required=True, choices=ADAPTER_KINDS)
    s.add_argument("--include-bias", action="store_true")
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("report", help="median over seeds + figures from a runs directory")
    s.add_argument("--runs", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("export-task", help="write task splits as prompt<TAB>target files")
    s.add_argument("--config")
    s.add_argument("--task", required=True, choices=sorted(TASKS))
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_export_task)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        key = f" (key: {e.key})" if e.key else ""
        print(f"error: {e}{key}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except checkpoint.CheckpointError as e:
        entry = f" (entry: {e.entry})" if e.entry else ""
        print(f"error: {e}{entry}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except SequenceOverflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
