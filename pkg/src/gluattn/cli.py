"""Command-line entry point: ``gluattn {train,gradcheck,params}``.

Exit codes: 0 ok, 1 usage/config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from . import gradcheck
from .attention import AttentionConfig, matched_dims, param_count
from .errors import CheckpointError, ConfigError, GluAttnError, NumericError, ShapeError
from .experiment import load_spec, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_train(spec_path: str) -> int:
    try:
        spec = load_spec(spec_path)
    except OSError as exc:
        print(f"cannot read spec: {exc}", file=sys.stderr)
        return EXIT_IO
    report = run_experiment(spec)
    for variant, res in report["results"].items():
        print(f"{variant:9s} params={res.n_parameters} "
              f"train_loss={res.final_train_loss} val_loss={res.final_val_loss} "
              f"val_acc={res.final_val_accuracy}")
    for key, value in report["info"].items():
        print(f"{key} = {value}")
    if "comparison" in report:
        print(report["comparison"], end="")
    print(f"wrote {report['output_dir']}")
    return EXIT_OK


def cmd_gradcheck(scope: str) -> int:
    results = gradcheck.run_suite(scope)
    failed = [name for name, err in results if not err < gradcheck.TOLERANCE]
    for name, err in results:
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e}  {status}")
    worst = max(err for _, err in results)
    print(f"worst relative error {worst:.3e} over {len(results)} components (tolerance {gradcheck.TOLERANCE:g})")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _flops(cfg: AttentionConfig, n: int) -> dict[str, int]:
    shapes = cfg.weight_shapes()
    proj = {k: 2 * n * a * b for k, (a, b) in shapes.items()}
    return {
        "projections": sum(proj.values()),
        "scores": 2 * n * n * cfg.d_model,
        "mixing": 2 * n * n * cfg.attn_inner,
    }


def params_report(d_model: int, n_heads: int, seq_len: int = 64) -> tuple[str, bool]:
    matched_dims(d_model, n_heads)
    base = AttentionConfig(d_model, n_heads, "baseline")
    glu = AttentionConfig(d_model, n_heads, "glu")
    rows = [f"attention parameter parity: d_model={d_model} n_heads={n_heads} (FLOPs at n={seq_len})",
            f"{'matrix':18s} {'baseline':>14s} {'glu':>14s}"]
    bs, gs = base.weight_shapes(), glu.weight_shapes()
    for key, label in (("w_q", "W_Q"), ("w_k", "W_K"), ("w_v", "W_V"), ("w_o", "W_O")):
        b, g = bs[key], gs[key]
        rows.append(f"{label:18s} {f'{b[0]}->{b[1]}':>14s} {f'{g[0]}->{g[1]}':>14s}")
    pb, pg = param_count(base), param_count(glu)
    rows.append(f"{'weights':18s} {pb:>14,d} {pg:>14,d}")
    fb, fg = _flops(base, seq_len), _flops(glu, seq_len)
    for key in fb:
        rows.append(f"{'flops:' + key:18s} {fb[key]:>14,d} {fg[key]:>14,d}")
    ok = pb == pg
    rows.append("parity: " + ("equal" if ok else f"MISMATCH ({pg - pb:+d})"))
    return "\n".join(rows), ok


def cmd_params(d_model: int, n_heads: int, seq_len: int = 64) -> int:
    text, ok = params_report(d_model, n_heads, seq_len)
    print(text)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gluattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run an experiment from a key=value spec file")
    p.add_argument("spec")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("scope", choices=gradcheck.SCOPES)

    p = sub.add_parser("params", help="attention parameter/FLOP parity table")
    p.add_argument("d_model", type=int)
    p.add_argument("n_heads", type=int)
    p.add_argument("--seq-len", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.spec)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.scope)
        return cmd_params(args.d_model, args.n_heads, args.seq_len)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GluAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
