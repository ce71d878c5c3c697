"""Command-line interface.

Subcommands: search, derive, evaluate, analyze, gradcam, compare.
Configuration comes from defaults, then an optional JSON config file
(unknown keys are rejected), then command-line flags; the resolved
config is echoed and written next to the other artifacts.  Exit codes:
0 success, 2 usage/config/data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import __version__, data as data_mod
from .costmodel import CostOptions, CostReport, analyze_costs, compare_table, eq1_weights, eq2_weights
from .engine.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fixtures import FIXTURES
from .genotype import (
    SEARCH_OPS,
    GenotypeError,
    parse_genotype,
    plan_network,
    resolve_op,
    serialize_genotype,
)
from .blocks import BlockConfig, StateMismatch, count_block_weights, make_convnext_block, make_pib_conv
from .data import DataError
from .gradcam import gradcam as run_gradcam, read_ppm, render_heatmap
from .network import build_eval_network
from .supernet import SearchConfig, derive_genotype, run_search
from .trainer import DivergenceError, TrainConfig, train_eval
from . import rng as rng_mod

DATA_DIR_ENV = "PIB_DATA_DIR"


class CliError(Exception):
    """Usage or configuration problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

_DATA_DEFAULTS = {
    "dataset": "synthetic",  # synthetic | cifar10
    "dataset_dir": None,
    "synthetic_n": 512,
    "synthetic_test_n": 128,
    "synthetic_noise": 0.1,
}

SEARCH_DEFAULTS = {
    "epochs": 50,
    "batch_size": 64,
    "layers": 8,
    "c_init": 16,
    "num_classes": 10,
    "input_hw": 32,
    "lr": 0.0025,
    "lr_min": 0.0,
    "momentum": 0.9,
    "weight_decay": 3e-4,
    "arch_lr": 3e-4,
    "arch_betas": [0.5, 0.999],
    "arch_eps": 1e-8,
    "arch_weight_decay": 1e-3,
    "order": "second",
    "xi": None,
    "grad_clip": 5.0,
    "seed": 0,
    "op_set": [op.value for op in SEARCH_OPS],
    "augment": False,
    **_DATA_DEFAULTS,
}

EVAL_DEFAULTS = {
    "epochs": 600,
    "batch_size": 96,
    "layers": 20,
    "c_init": 36,
    "num_classes": 10,
    "input_hw": 32,
    "lr": 0.0025,
    "lr_min": 0.0,
    "momentum": 0.9,
    "weight_decay": 3e-4,
    "grad_clip": 5.0,
    "drop_path": 0.2,
    "aux_weight": 0.4,
    "augment": True,
    "cutout": True,
    "cutout_length": 16,
    "seed": 0,
    **_DATA_DEFAULTS,
}


def _resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    cfg = dict(defaults)
    if config_path is not None:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except OSError as e:
            raise CliError(f"cannot read config file: {e}")
        except json.JSONDecodeError as e:
            raise CliError(f"{config_path}: invalid JSON: {e}")
        if not isinstance(loaded, dict):
            raise CliError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise CliError(f"{config_path}: unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _set_overrides(pairs, allowed) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        if key not in allowed:
            raise CliError(f"--set: unknown config key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # bare strings may be given unquoted
    return out


def _echo_config(cfg: dict, out_path=None) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write(text)


@contextlib.contextmanager
def _artifacts(out_dir: str):
    """Yields a path factory; on error every registered file is removed
    so failed runs leave no partial outputs behind."""
    os.makedirs(out_dir, exist_ok=True)
    created = []

    def path_for(name: str) -> str:
        p = os.path.join(out_dir, name)
        created.append(p)
        return p

    try:
        yield path_for
    except BaseException:
        for p in created:
            with contextlib.suppress(OSError):
                os.remove(p)
        raise


def _load_genotype(spec: str):
    if spec in FIXTURES:
        return FIXTURES[spec]
    if not os.path.exists(spec):
        raise CliError(
            f"genotype {spec!r} is neither a file nor a fixture "
            f"(fixtures: {', '.join(sorted(FIXTURES))})")
    with open(spec) as f:
        return parse_genotype(f.read())


def _load_dataset(cfg: dict, want_test: bool):
    if cfg["dataset"] == "synthetic":
        n_train = int(cfg["synthetic_n"])
        n_test = int(cfg["synthetic_test_n"]) if want_test else 0
        x, y = data_mod.make_synthetic(int(cfg["seed"]), n_train + n_test,
                                       int(cfg["num_classes"]), int(cfg["input_hw"]),
                                       float(cfg["synthetic_noise"]))
        train = (x[:n_train], y[:n_train])
        test = (x[n_train:], y[n_train:]) if want_test else None
        return train, test
    if cfg["dataset"] == "cifar10":
        d = cfg["dataset_dir"] or os.environ.get(DATA_DIR_ENV)
        if not d:
            raise CliError(
                f"cifar10 needs a dataset directory: --dataset-dir or ${DATA_DIR_ENV}")
        if cfg["input_hw"] != 32 or cfg["num_classes"] != 10:
            raise CliError("cifar10 requires input_hw=32 and num_classes=10")
        train, test = data_mod.load_cifar10(d)
        return train, (test if want_test else None)
    raise CliError(f"unknown dataset {cfg['dataset']!r} (use synthetic or cifar10)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "layers": args.layers,
        "c_init": args.c_init, "num_classes": args.num_classes,
        "input_hw": args.input_hw, "seed": args.seed, "order": args.order,
        "lr": args.lr, "xi": args.xi, "dataset": args.dataset,
        "dataset_dir": args.dataset_dir, "synthetic_n": args.synthetic_n,
        "op_set": args.op_set.split(",") if args.op_set else None,
    }
    overrides.update(_set_overrides(args.set, SEARCH_DEFAULTS))
    cfg = _resolve_config(SEARCH_DEFAULTS, args.config, overrides)

    try:
        scfg = SearchConfig(
            epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
            layers=int(cfg["layers"]), c_init=int(cfg["c_init"]),
            num_classes=int(cfg["num_classes"]), input_hw=int(cfg["input_hw"]),
            lr=float(cfg["lr"]), lr_min=float(cfg["lr_min"]),
            momentum=float(cfg["momentum"]), weight_decay=float(cfg["weight_decay"]),
            arch_lr=float(cfg["arch_lr"]),
            arch_betas=tuple(float(b) for b in cfg["arch_betas"]),
            arch_eps=float(cfg["arch_eps"]),
            arch_weight_decay=float(cfg["arch_weight_decay"]),
            order=str(cfg["order"]),
            xi=None if cfg["xi"] is None else float(cfg["xi"]),
            grad_clip=float(cfg["grad_clip"]), seed=int(cfg["seed"]),
            op_set=tuple(cfg["op_set"]),
        )
    except (ValueError, TypeError, GenotypeError) as e:
        raise CliError(f"bad search config: {e}")

    (x, y), _ = _load_dataset(cfg, want_test=False)
    with _artifacts(args.out_dir) as path_for:
        _echo_config(cfg, path_for("config.json"))
        res = run_search(
            scfg, x, y,
            trajectory_path=path_for("trajectory.csv"),
            augment_fn=data_mod.augment_batch if cfg["augment"] else None,
            progress=lambda r: print(
                f"epoch {r['epoch']:3d}  lr {r['lr']:.6f}  "
                f"train {r['train_loss']:.4f}  val {r['val_loss']:.4f}  "
                f"val_acc {r['val_acc']:.4f}"),
        )
        geno_text = serialize_genotype(res.genotype)
        summary = {
            "config": cfg,
            "op_set": list(res.op_set),
            "alpha_normal": res.alpha_normal.tolist(),
            "alpha_reduce": res.alpha_reduce.tolist(),
            "history": res.history,
            "genotype": geno_text,
            "best_val_acc": max(r["val_acc"] for r in res.history),
        }
        with open(path_for("summary.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(path_for("genotype.geno"), "w") as f:
            f.write(geno_text)
    print(f"derived genotype written to {os.path.join(args.out_dir, 'genotype.geno')}")
    return 0


def cmd_derive(args) -> int:
    try:
        with open(args.summary) as f:
            summary = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read summary: {e}")
    except json.JSONDecodeError as e:
        raise CliError(f"{args.summary}: invalid JSON: {e}")
    for key in ("alpha_normal", "alpha_reduce", "op_set"):
        if key not in summary:
            raise CliError(f"{args.summary}: missing key {key!r}")
    try:
        op_set = tuple(resolve_op(n) for n in summary["op_set"])
        geno = derive_genotype(np.asarray(summary["alpha_normal"], dtype=np.float64),
                               np.asarray(summary["alpha_reduce"], dtype=np.float64),
                               op_set)
    except (GenotypeError, ValueError) as e:
        raise CliError(f"cannot derive genotype: {e}")
    text = serialize_genotype(geno)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "layers": args.layers,
        "c_init": args.c_init, "num_classes": args.num_classes,
        "input_hw": args.input_hw, "seed": args.seed, "lr": args.lr,
        "dataset": args.dataset, "dataset_dir": args.dataset_dir,
        "synthetic_n": args.synthetic_n,
    }
    overrides.update(_set_overrides(args.set, EVAL_DEFAULTS))
    cfg = _resolve_config(EVAL_DEFAULTS, args.config, overrides)
    genotype = _load_genotype(args.genotype)

    try:
        tcfg = TrainConfig(
            epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
            layers=int(cfg["layers"]), c_init=int(cfg["c_init"]),
            num_classes=int(cfg["num_classes"]), input_hw=int(cfg["input_hw"]),
            lr=float(cfg["lr"]), lr_min=float(cfg["lr_min"]),
            momentum=float(cfg["momentum"]), weight_decay=float(cfg["weight_decay"]),
            grad_clip=float(cfg["grad_clip"]), drop_path=float(cfg["drop_path"]),
            aux_weight=float(cfg["aux_weight"]), augment=bool(cfg["augment"]),
            cutout=bool(cfg["cutout"]), cutout_length=int(cfg["cutout_length"]),
            seed=int(cfg["seed"]),
        )
    except (ValueError, TypeError) as e:
        raise CliError(f"bad evaluate config: {e}")

    train, test = _load_dataset(cfg, want_test=True)
    with _artifacts(args.out_dir) as path_for:
        _echo_config(cfg, path_for("config.json"))
        model, history = train_eval(
            genotype, train, test, tcfg,
            metrics_path=path_for("metrics.csv"),
            progress=lambda r: print(
                f"epoch {r['epoch']:3d}  lr {r['lr']:.6f}  "
                f"loss {r['train_loss']:.4f}  train_acc {r['train_acc']:.4f}  "
                f"test_acc {r['test_acc']:.4f}"),
        )
        save_checkpoint(path_for("model.pibw"), dict(model.state_items()))
        result = {
            "genotype": serialize_genotype(genotype),
            "epochs": tcfg.epochs,
            "params": model.count_params(None),
            "final_test_acc": history[-1]["test_acc"],
            "best_test_acc": max(r["test_acc"] for r in history),
        }
        with open(path_for("result.json"), "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
            f.write("\n")
    print(f"final test accuracy {history[-1]['test_acc']:.4f}")
    return 0


def _eq_check() -> int:
    """Cross-check the closed-form weight counts against instantiated
    blocks over the full (C, K, F) grid; returns the number of
    mismatches."""
    rng = rng_mod.stream(0, "init")
    bad = 0
    for C in (8, 16, 32, 64):
        for K in (3, 5, 7):
            for F in (1.5, 2.0, 3.0, 4.0, 4.5):
                if abs(F * C - round(F * C)) > 1e-9:
                    continue
                cfg = BlockConfig(C=C, K=K, F=F, convnext_F=F)
                inv = count_block_weights(make_convnext_block(cfg, rng))
                pib = count_block_weights(make_pib_conv(cfg, rng))
                ok1 = inv == eq1_weights(C, K, F)
                ok2 = pib == eq2_weights(C, K, F)
                bad += (not ok1) + (not ok2)
                print(f"C={C:3d} K={K} F={F:3.1f}  inverted {inv:8d} "
                      f"{'==' if ok1 else '!='} {eq1_weights(C, K, F):8d}   "
                      f"pseudo {pib:8d} {'==' if ok2 else '!='} {eq2_weights(C, K, F):8d}")
    print("all formulas match" if bad == 0 else f"{bad} mismatches")
    return bad


def cmd_analyze(args) -> int:
    if args.eq_check:
        return 1 if _eq_check() else 0
    if args.genotype is None:
        raise CliError("analyze needs a genotype (or --eq-check)")
    genotype = _load_genotype(args.genotype)
    plan = plan_network(args.layers, args.c_init, args.num_classes,
                        args.input_hw, aux=args.aux)
    opt = CostOptions(include_aux=args.aux)
    report = analyze_costs(genotype, plan, opt)
    print(f"layers       {args.layers}")
    print(f"c_init       {args.c_init}")
    print(f"params       {report.params_total} ({report.params_m:.3f} M)")
    print(f"macs         {report.macs_total} ({report.gmac:.3f} GMAC)")
    if args.itemize:
        print(json.dumps(report.itemized(), indent=2))
    return 0


def cmd_gradcam(args) -> int:
    genotype = _load_genotype(args.genotype)
    try:
        plan = plan_network(args.layers, args.c_init, args.num_classes,
                            args.input_hw, aux=args.aux)
        model = build_eval_network(genotype, plan, rng_mod.stream(0, "init"))
        model.load_state(load_checkpoint(args.checkpoint))
    except (CheckpointError, StateMismatch, OSError, ValueError) as e:
        raise CliError(f"cannot load model: {e}")
    os.makedirs(args.out_dir, exist_ok=True)
    for img_path in args.images:
        raw = _load_image(img_path)
        if raw.shape[1] != args.input_hw or raw.shape[2] != args.input_hw:
            raise CliError(
                f"{img_path}: image is {raw.shape[1]}x{raw.shape[2]}, "
                f"model expects {args.input_hw}x{args.input_hw}")
        x = data_mod.normalize_images((raw * 255).astype(np.uint8)) \
            if args.normalize == "cifar" else raw
        heat = run_gradcam(model, x.astype(np.float32), args.class_idx)
        base = os.path.join(args.out_dir,
                            os.path.splitext(os.path.basename(img_path))[0] + "_cam")
        written = render_heatmap(heat, raw, base, out_hw=args.out_hw)
        print(f"{img_path}: class {heat.target_class} -> {', '.join(written)}")
    return 0


def _load_image(path: str) -> np.ndarray:
    """Load a [3,h,w] image scaled to [0,1] from .npy or binary PPM."""
    if not os.path.exists(path):
        raise CliError(f"image not found: {path}")
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise CliError(f"{path}: expected [3,h,w] array, got {arr.shape}")
        return arr.astype(np.float32)
    if path.endswith(".ppm"):
        try:
            return read_ppm(path)
        except ValueError as e:
            raise CliError(str(e))
    raise CliError(f"{path}: unsupported image format (use .npy or .ppm)")


def cmd_compare(args) -> int:
    named = {}
    for spec in args.genotype:
        name, _, rest = spec.partition("=")
        named[name] = _load_genotype(rest or name)
    try:
        layer_counts = [int(s) for s in args.layers.split(",")]
    except ValueError:
        raise CliError(f"--layers expects comma-separated ints, got {args.layers!r}")
    metrics = None
    if args.metric:
        metrics = {}
        for m in args.metric:
            try:
                name, layers, acc = m.split(",")
                metrics[(name, int(layers))] = float(acc)
            except ValueError:
                raise CliError(f"--metric expects NAME,LAYERS,ACC, got {m!r}")
    table = compare_table(
        list(named.items()), layer_counts,
        {"c_init": args.c_init, "num_classes": args.num_classes,
         "input_hw": args.input_hw},
        CostOptions(include_aux=False),
        metrics=metrics,
    )
    if args.out == "-":
        sys.stdout.write(table)
    else:
        with open(args.out, "w") as f:
            f.write(table)
        print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common_model_flags(p, layers_default=20, c_init_default=36):
    p.add_argument("--layers", type=int, default=layers_default)
    p.add_argument("--c-init", type=int, default=c_init_default)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--input-hw", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pibconv",
        description="Cell search, training, and cost analysis for "
                    "pseudo-inverted-bottleneck networks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd")

    ps = sub.add_parser("search", help="run differentiable cell search")
    ps.add_argument("--config", help="JSON config file")
    ps.add_argument("--out-dir", required=True)
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--layers", int),
                      ("--c-init", int), ("--num-classes", int), ("--input-hw", int),
                      ("--seed", int), ("--lr", float), ("--xi", float)):
        ps.add_argument(flag, type=typ, default=None)
    ps.add_argument("--order", choices=("first", "second"), default=None)
    ps.add_argument("--dataset", choices=("synthetic", "cifar10"), default=None)
    ps.add_argument("--dataset-dir", default=None)
    ps.add_argument("--synthetic-n", type=int, default=None)
    ps.add_argument("--op-set", default=None, help="comma-separated op names")
    ps.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override any config key")
    ps.set_defaults(func=cmd_search)

    pd = sub.add_parser("derive", help="re-derive a genotype from a search summary")
    pd.add_argument("summary", help="summary.json from a search run")
    pd.add_argument("--out", default="-", help="output .geno path (default stdout)")
    pd.set_defaults(func=cmd_derive)

    pe = sub.add_parser("evaluate", help="train a genotype from scratch")
    pe.add_argument("genotype", help="genotype file or fixture name")
    pe.add_argument("--config", help="JSON config file")
    pe.add_argument("--out-dir", required=True)
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--layers", int),
                      ("--c-init", int), ("--num-classes", int), ("--input-hw", int),
                      ("--seed", int), ("--lr", float)):
        pe.add_argument(flag, type=typ, default=None)
    pe.add_argument("--dataset", choices=("synthetic", "cifar10"), default=None)
    pe.add_argument("--dataset-dir", default=None)
    pe.add_argument("--synthetic-n", type=int, default=None)
    pe.add_argument("--set", action="append", metavar="KEY=VALUE")
    pe.set_defaults(func=cmd_evaluate)

    pa = sub.add_parser("analyze", help="parameter and MAC analysis")
    pa.add_argument("genotype", nargs="?", help="genotype file or fixture name")
    _add_common_model_flags(pa)
    pa.add_argument("--aux", action="store_true")
    pa.add_argument("--itemize", action="store_true")
    pa.add_argument("--eq-check", action="store_true",
                    help="verify closed-form weight counts against built blocks")
    pa.set_defaults(func=cmd_analyze)

    pg = sub.add_parser("gradcam", help="class activation maps from a checkpoint")
    pg.add_argument("genotype")
    pg.add_argument("--checkpoint", required=True)
    pg.add_argument("--out-dir", required=True)
    pg.add_argument("images", nargs="+", help=".npy or .ppm images")
    _add_common_model_flags(pg)
    pg.add_argument("--aux", action="store_true")
    pg.add_argument("--class-idx", type=int, default=None)
    pg.add_argument("--out-hw", type=int, default=224)
    pg.add_argument("--normalize", choices=("cifar", "none"), default="cifar")
    pg.set_defaults(func=cmd_gradcam)

    pc = sub.add_parser("compare", help="cost table across genotypes and depths")
    pc.add_argument("--genotype", action="append", required=True,
                    metavar="NAME[=PATH]")
    pc.add_argument("--layers", default="20,10")
    pc.add_argument("--c-init", type=int, default=36)
    pc.add_argument("--num-classes", type=int, default=10)
    pc.add_argument("--input-hw", type=int, default=32)
    pc.add_argument("--metric", action="append", metavar="NAME,LAYERS,ACC")
    pc.add_argument("--out", default="-")
    pc.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if getattr(args, "cmd", None) is None or not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (CliError, DataError, GenotypeError, CheckpointError, StateMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
