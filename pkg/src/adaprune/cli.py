"""Command-line entry point: ``adaprune <command> [options]``.

Failures print a single ``error[<category>]: <message>`` line to stderr and
exit nonzero (2 for usage/config problems, 1 otherwise).
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import trainer
from .analysis import DecisionLog, analyze_decisions
from .backbones import build_network, extract_cost_specs
from .config import PHASES, TrainConfig, load_config, save_config
from .cost import layer_flops
from .errors import AdaPruneError, ConfigError, UsageError
from .spm import Variant

log = logging.getLogger("adaprune")

USAGE_CATEGORIES = ("usage", "config")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="YAML file whose keys are TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--budget", type=float, help="budget fraction of full-network FLOPs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="adaprune", description="Self-adaptive channel pruning: train, evaluate, analyze.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="run the training phases")
    _common(p)
    p.add_argument("--phase", choices=PHASES, help="run only this phase")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write its decision log")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to <out-dir>/<variant>/finetune.ckpt")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--log-out", help="decision log path (default next to the checkpoint)")

    p = sub.add_parser("analyze", help="channel categories and per-sample active counts")
    _common(p)
    p.add_argument("--log", help="decision log (default <out-dir>/<variant>/decisions_test.bin)")
    p.add_argument("--layers", type=int, nargs="*", help="layer ids to histogram (default all)")
    p.add_argument("--export-csv", action="store_true", help="also dump the raw log as CSV")

    p = sub.add_parser("flops", help="print p0 and the per-layer static FLOPs table")
    _common(p)

    p = sub.add_parser("config-check", help="validate a config file")
    _common(p)
    p.add_argument("--write", help="write the resolved config to this path")

    p = sub.add_parser("ablate", help="train and evaluate SANP, FIXED_K and STATIC")
    _common(p)
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.budget is not None:
        changes["budget_fraction"] = args.budget
    return cfg.replace(**changes) if changes else cfg


def cmd_train(cfg, args, out):
    phases = (args.phase,) if args.phase else PHASES
    results = trainer.run_phases(cfg, phases)
    for phase, r in results.items():
        out.write(f"{phase}: checkpoint={r.checkpoint} steps={r.steps}\n")
    if "finetune" in results and results["finetune"].summary:
        s = results["finetune"].summary
        out.write(f"finetune: p_t/p0={s['p_t'] / s['p0']:.4f} |p_t-p|/p0={s['gap_over_p0']:.4f}\n")
    return 0


def cmd_eval(cfg, args, out):
    path = Path(args.checkpoint or trainer.phase_paths(cfg)["finetune"])
    res = trainer.evaluate_checkpoint(cfg, path, split=args.split)
    report = {
        "checkpoint": str(path),
        "split": args.split,
        "top1": res.top1,
        "mean_flops": res.mean_flops,
        "p0": res.p0,
        "pruned_rate": res.pruned_rate,
        "per_layer_active": {str(k): v for k, v in res.per_layer_active.items()},
    }
    if res.log is not None:
        log_path = Path(args.log_out or path.parent / f"decisions_{args.split}.bin")
        res.log.save(log_path)
        report["decision_log"] = str(log_path)
    out.write(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_analyze(cfg, args, out):
    path = Path(args.log or Path(cfg.out_dir) / cfg.variant_enum.value / "decisions_test.bin")
    dlog = DecisionLog.load(path)
    res = analyze_decisions(dlog, layers=args.layers)
    res.write_csv(path.parent)
    if args.export_csv:
        dlog.export_csv(path.with_suffix(".csv"))
    out.write(f"samples: {res.num_samples}\n")
    out.write("layer_id,never_pruned,sample_dependent,always_pruned\n")
    for lid, counts in res.category_counts.items():
        out.write(f"{lid},{counts[0]},{counts[1]},{counts[2]}\n")
    net = build_network(cfg.network_config(), Variant.SANP, cfg.binarizer(), seed=cfg.seed)
    _, p0 = extract_cost_specs(net)
    head = net.head_flops()
    out.write(f"head overhead: {head} FLOPs ({100.0 * head / p0:.3f}% of p0)\n")
    out.write(f"wrote {path.parent / 'channel_categories.csv'} and {path.parent / 'active_channel_histogram.csv'}\n")
    return 0


def cmd_flops(cfg, args, out):
    specs, p0 = extract_cost_specs(cfg.network_config())
    out.write("layer_id,H_out,W_out,C_in,C_out,k,gated,flops\n")
    for s in specs:
        out.write(f"{s.layer_id},{s.H_out},{s.W_out},{s.C_in},{s.C_out},{s.k},{int(s.gated)},{layer_flops(s)}\n")
    out.write(f"p0,{p0}\n")
    return 0


def cmd_config_check(cfg, args, out):
    specs, p0 = extract_cost_specs(cfg.network_config())
    if args.write:
        save_config(cfg, args.write)
    out.write(f"ok: backbone={cfg.backbone} variant={cfg.variant} conv_layers={len(specs)} p0={p0}\n")
    return 0


def cmd_ablate(cfg, args, out):
    rows = trainer.run_ablation(cfg)
    out.write("variant,error_pct,flops_m,pruned_pct\n")
    for r in rows:
        out.write(f"{r['variant']},{r['error_pct']:.2f},{r['flops_m']:.4f},{r['pruned_pct']:.2f}\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "flops": cmd_flops,
    "config-check": cmd_config_check,
    "ablate": cmd_ablate,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args, out)
    except AdaPruneError as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        err.write(f"error[{e.category}]: {msg}\n")
        return 2 if e.category in USAGE_CATEGORIES else 1
    except OSError as e:
        err.write(f"error[io]: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
