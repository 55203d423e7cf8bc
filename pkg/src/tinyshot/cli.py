"""Command-line surface: build tables, pick dimensions, run inference,
train the toy fixture, verify gradients, plan memory, and compress.

Every command prints machine-readable JSON (schema_version 1) with floats
rounded to nine decimals; report-style commands additionally write delimited
files and, when asked, render matplotlib figures next to them. Exit codes:
0 success, 1 usage error, 2 infeasible or degenerate input, 3 internal
error.
"""

from __future__ import annotations

import argparse
import csv as csvmod
import json
import sys
import traceback

from . import compress as cmp
from . import embedstore as emb
from . import encoder as enc
from . import planner as pln
from . import train as trn
from . import zeroshot as zs
from .errors import TinyshotError

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGENERATE = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 9)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def _emit(payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    print(json.dumps(_round_floats(payload), indent=2, sort_keys=True))


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- commands ----------------------------------------------------------------

def cmd_embed_build(args) -> int:
    classes = emb.read_template_csv(args.csv)
    table = emb.build_table(classes, precision=args.precision)
    if args.dim is not None:
        table = emb.truncate_table(table, args.dim)
    blob = emb.pack_table(table)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    _emit({
        "command": "embed-build",
        "classes": table.n_classes,
        "dim": table.d_max,
        "precision": table.precision_tag,
        "payload_bytes": table.payload_bytes(),
        "file_bytes": len(blob),
        "out": args.out,
    })
    return EXIT_OK


def cmd_select_dim(args) -> int:
    d = emb.select_dim(args.classes, args.budget, args.bytes_per_value, args.ladder)
    _emit({
        "command": "select-dim",
        "classes": args.classes,
        "budget_bytes": args.budget,
        "bytes_per_value": args.bytes_per_value,
        "ladder": args.ladder,
        "selected_dim": d,
        "payload_bytes": emb.payload_bytes(args.classes, d, "i8") * args.bytes_per_value,
    })
    return EXIT_OK


def cmd_infer(args) -> int:
    g = enc.load_graph(args.model)
    table = emb.load_table(args.table)
    image = enc.load_ppm(args.image)
    use_int8 = not args.float
    if use_int8 and not g.calibrated:
        raise TinyshotError("model file carries no calibration; rerun with --float "
                            "or save a calibrated graph")
    pred = zs.run_pipeline(g, image, table, d=args.dim, int8=use_int8)
    top = sorted(zip(table.class_names, pred.scores.tolist()),
                 key=lambda kv: -kv[1])[:5]
    _emit({
        "command": "infer",
        "class": pred.class_name,
        "class_index": pred.class_index,
        "score": pred.score,
        "margin": pred.margin,
        "dim": args.dim if args.dim is not None else table.d_max,
        "int8": use_int8,
        "top": [{"class": name, "score": score} for name, score in top],
    })
    return EXIT_OK


def cmd_train_toy(args) -> int:
    steps_per_epoch = max(1, -(-args.fixture_size // args.batch))
    cfg = trn.TrainConfig(
        seed=args.seed,
        steps=args.epochs * steps_per_epoch,
        batch_size=args.batch,
        n_train=args.fixture_size,
        dims=tuple(args.dims),
        alpha_emb=args.alpha_emb,
        alpha_mat=args.alpha_mat,
        temperature=args.tau,
        lr=args.lr,
    )
    result = trn.train_toy(cfg)
    if args.curve:
        with open(args.curve, "w", newline="") as fh:
            writer = csvmod.writer(fh)
            writer.writerow(["step", "lr", "total", "contrastive",
                             "embedding", "matryoshka"])
            for i, bd in enumerate(result.breakdown_history):
                writer.writerow([i, f"{result.lr_history[i]:.9f}",
                                 f"{bd['total']:.9f}", f"{bd['contrastive']:.9f}",
                                 f"{bd['embedding']:.9f}", f"{bd['matryoshka']:.9f}"])
    if args.out:
        enc.save_graph(trn.export_vision_tower(result.params), args.out)
    if args.fig:
        from . import figures
        figures.save_loss_curves(result, args.fig)
    _emit({
        "command": "train-toy",
        "seed": cfg.seed,
        "epochs": args.epochs,
        "steps": cfg.steps,
        "epoch_loss_before": result.epoch_loss_before,
        "epoch_loss_after": result.epoch_loss_after,
        "reduction": result.reduction,
        "eval_retrieval_accuracy": {str(d): a for d, a in result.eval_accuracy.items()},
        "curve": args.curve,
        "out": args.out,
        "fig": args.fig,
    })
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = trn.run_gradient_checks(seeds=tuple(args.seeds))
    table = {}
    worst = 0.0
    for (loss, seed), errv in sorted(results.items()):
        table.setdefault(loss, {})[str(seed)] = errv
        worst = max(worst, errv)
    ok = worst < args.tol
    _emit({
        "command": "gradcheck",
        "seeds": args.seeds,
        "tolerance": args.tol,
        "max_relative_error": worst,
        "per_loss": table,
        "pass": ok,
    })
    return EXIT_OK if ok else EXIT_DEGENERATE


def _resolve_platform(args) -> pln.PlatformSpec:
    if args.platform_file:
        return pln.load_platform_file(args.platform_file)
    return pln.load_platform(args.platform)


def cmd_plan(args) -> int:
    if args.list_platforms:
        _emit({"command": "plan", "platforms": pln.builtin_platform_names()})
        return EXIT_OK
    spec = _resolve_platform(args)
    explicit = [args.weights_bytes, args.activation_bytes]
    if any(v is not None for v in explicit):
        if any(v is None for v in explicit):
            raise TinyshotError("size-based planning needs both --weights-bytes "
                                "and --activation-bytes")
        report = pln.plan_sizes(
            pln.parse_size(args.weights_bytes),
            pln.parse_size(args.table_bytes) if args.table_bytes else 0,
            pln.parse_size(args.activation_bytes),
            spec,
            io_bytes=pln.parse_size(args.io_bytes) if args.io_bytes else 0,
        )
    else:
        if not args.model:
            raise TinyshotError("provide --model (plus optional --table) or "
                                "explicit --weights-bytes/--activation-bytes")
        g = enc.load_graph(args.model)
        table = emb.load_table(args.table) if args.table else None
        report = pln.plan(g, table, spec)
    payload = {"command": "plan", **report.to_dict()}
    _emit(payload)
    print()
    print(pln.ascii_layout(report))
    if args.fig:
        from . import figures
        figures.save_memory_layout(report, args.fig)
    return EXIT_OK if report.feasible else EXIT_DEGENERATE


def cmd_compress_embed(args) -> int:
    table = emb.load_table(args.table)
    e = table.rows()
    clr = cmp.decompose(e, n_clusters=args.clusters, rank=args.rank,
                        residual_budget=args.residual, seed=args.seed)
    if args.out:
        cmp.save_clr(clr, args.out)
    _emit({
        "command": "compress-embed",
        "seed": args.seed,
        "rows": clr.shape[0],
        "dim": clr.shape[1],
        "clusters": clr.n_clusters,
        "rank": clr.rank,
        "residual": clr.n_residual,
        "stored_values": cmp.stored_value_count(clr),
        "stored_bytes": cmp.stored_bytes(clr),
        "ratio_values": cmp.compression_ratio(clr, "values"),
        "ratio_bytes": cmp.compression_ratio(clr, "bytes"),
        "frobenius_error": cmp.reconstruction_error(e, clr),
        "out": args.out,
    })
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    rows = cmp.attention_benchmark(args.n, args.d, seed=args.seed)
    header = ["n", "d", "naive_multiplies", "linear_multiplies", "max_abs_diff"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join([str(r["n"]), str(r["d"]), str(r["naive_multiplies"]),
                               str(r["linear_multiplies"]),
                               f"{r['max_abs_diff']:.3e}"]))
    print("\n".join(lines))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    if args.fig:
        from . import figures
        figures.save_attention_scaling(rows, args.fig)
    return EXIT_OK


# -- parser wiring -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinyshot",
                     description="Quantized zero-shot toolkit: prototype tables, "
                                 "int8 encoding, nested-embedding training, "
                                 "compression kernels, and MCU memory planning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("embed", help="prototype-table operations")
    esub = p.add_subparsers(dest="embed_command", required=True, parser_class=_Parser)
    pb = esub.add_parser("build", help="build a TVE1 table from template CSV")
    pb.add_argument("--csv", required=True, help="input CSV: class,template,e0..e{d-1}")
    pb.add_argument("--out", required=True, help="output .tve path")
    pb.add_argument("--precision", default="i8", choices=emb.PRECISION_TAGS)
    pb.add_argument("--dim", type=int, default=None,
                    help="truncate prototypes to this prefix before packing")
    pb.set_defaults(func=cmd_embed_build)

    p = sub.add_parser("select-dim", help="largest ladder dimension within a byte budget")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--budget", type=int, required=True, help="payload budget in bytes")
    p.add_argument("--bytes-per-value", type=int, default=1)
    p.add_argument("--ladder", type=_int_list, default=[16, 32, 64, 128, 256])
    p.set_defaults(func=cmd_select_dim)

    p = sub.add_parser("infer", help="classify one PPM image against a table")
    p.add_argument("--image", required=True, help="binary PPM (P6) image")
    p.add_argument("--model", required=True, help="TVG1 encoder graph")
    p.add_argument("--table", required=True, help="TVE1 prototype table")
    p.add_argument("--dim", type=int, default=None, help="prefix dimension")
    p.add_argument("--float", action="store_true",
                   help="use the float path instead of the int8 path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-toy", help="train the synthetic two-tower fixture")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--fixture-size", type=int, default=64,
                   help="training pairs in the synthetic fixture")
    p.add_argument("--dims", type=_int_list, default=[16, 32, 64],
                   help="nested prefix ladder, comma separated")
    p.add_argument("--alpha-emb", type=float, default=1.0)
    p.add_argument("--alpha-mat", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", default=None, help="save the image tower as TVG1")
    p.add_argument("--curve", default=None, help="write per-step loss breakdown CSV")
    p.add_argument("--fig", default=None, help="render the loss curves to this PNG")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all losses")
    p.add_argument("--seeds", type=_int_list, default=[42, 123, 456])
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plan", help="static memory layout for a platform")
    p.add_argument("--model", default=None, help="TVG1 encoder graph")
    p.add_argument("--table", default=None, help="TVE1 prototype table")
    p.add_argument("--platform", default="stm32h7",
                   help="bundled platform name (see --list-platforms)")
    p.add_argument("--platform-file", default=None,
                   help="custom platform key=value file")
    p.add_argument("--weights-bytes", default=None,
                   help="plan explicit sizes instead of a model (accepts KB/MB)")
    p.add_argument("--table-bytes", default=None)
    p.add_argument("--activation-bytes", default=None)
    p.add_argument("--io-bytes", default=None)
    p.add_argument("--fig", default=None, help="render the layout to this PNG")
    p.add_argument("--list-platforms", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compress", help="embedding and attention compression")
    csub = p.add_subparsers(dest="compress_command", required=True, parser_class=_Parser)
    pc = csub.add_parser("embed", help="clustered low-rank factorization of a table")
    pc.add_argument("--table", required=True, help="TVE1 table to factor")
    pc.add_argument("--clusters", type=int, required=True)
    pc.add_argument("--rank", type=int, required=True)
    pc.add_argument("--residual", type=int, default=0,
                    help="sparse corrections kept (largest errors first)")
    pc.add_argument("--seed", type=int, default=42)
    pc.add_argument("--out", default=None, help="output .tvc path")
    pc.set_defaults(func=cmd_compress_embed)
    pa = csub.add_parser("bench-attn", help="op counts: quadratic vs linear attention")
    pa.add_argument("--n", type=_int_list, default=[16, 32, 64, 128])
    pa.add_argument("--d", type=int, default=64)
    pa.add_argument("--seed", type=int, default=42)
    pa.add_argument("--csv", default=None, help="also write the table to this CSV")
    pa.add_argument("--fig", default=None, help="render the scaling plot to this PNG")
    pa.set_defaults(func=cmd_bench_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (TinyshotError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
