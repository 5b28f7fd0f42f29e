"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 contract violation,
4 privacy budget exhausted.
"""

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, KnormlabError

log = logging.getLogger("knormlab")


def _apply_threads():
    n = os.environ.get("KNORMLAB_THREADS")
    if not n:
        return
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"KNORMLAB_THREADS={n!r} is not an integer") from None
    from ._kernels import set_threads

    set_threads(n)


def _load_config(args, mode=None):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg.override(args.override)
    if mode is not None:
        cfg.set("run.mode", mode)
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    if args.out:
        cfg.set("run.out", args.out)
    return cfg.validate()


def _run(args, mode=None):
    from .experiment import train

    cfg = _load_config(args, mode)
    res = train(cfg)
    line = {"mode": cfg["run.mode"], "summary_accuracy": res.summary, "out": res.out_dir}
    if res.epsilon is not None:
        line["epsilon"] = res.epsilon
    print(json.dumps(line, sort_keys=True))
    return 0


def cmd_train(args):
    return _run(args)


def cmd_fl(args):
    return _run(args, "fl")


def cmd_dpfl(args):
    return _run(args, "dpfl")


def cmd_accountant(args):
    from .accountant import calibrate_sigma, rdp_epsilon

    if args.steps is not None:
        steps = args.steps
    elif args.epochs is not None and args.batch_size and args.dataset_size:
        steps = args.epochs * -(-args.dataset_size // args.batch_size)
    else:
        raise ConfigError("give --steps or --epochs with --batch-size and --dataset-size")
    q = args.q
    if q is None:
        if not (args.batch_size and args.dataset_size):
            raise ConfigError("give --q or --batch-size with --dataset-size")
        q = args.batch_size / args.dataset_size
    if args.sigma is not None:
        print(f"{rdp_epsilon(q, args.sigma, steps, args.delta):.6f}")
    elif args.epsilon is not None:
        print(f"{calibrate_sigma(args.epsilon, args.delta, q, steps):.6f}")
    else:
        raise ConfigError("give --sigma (to get epsilon) or --epsilon (to calibrate sigma)")
    return 0


def cmd_gradcheck(args):
    import numpy as np

    from .experiment import build_model
    from .gradcheck import finite_difference_check

    cfg = _load_config(args)
    b = args.batch
    shape = tuple(cfg["data.shape"])
    k = cfg["data.num_classes"]
    model = build_model(cfg, shape[0], shape[1], k)
    gen = np.random.default_rng(cfg["run.seed"])
    x = gen.uniform(size=(b,) + shape)
    y = np.arange(b) % k
    rep = finite_difference_check(model, x, y, h=args.h, n_coords=args.coords, seed=cfg["run.seed"])
    ok = rep.ok(args.tol)
    print(json.dumps({"max_rel_error": rep.max_rel_error, "worst": list(rep.worst or ()), "checked": rep.n_checked,
                      "tolerance": args.tol, "pass": ok}))
    return 0 if ok else 3


def cmd_describe(args):
    from .architectures import describe_json
    from .experiment import build_model

    cfg = _load_config(args)
    shape = tuple(cfg["data.shape"]) if args.synthetic_shape else (3, args.image_size, args.image_size)
    model = build_model(cfg, shape[0], shape[1], args.num_classes)
    print(describe_json(model))
    return 0


def cmd_summarize(args):
    from .metrics import read_csv, summarize

    for path in args.csv:
        print(f"{summarize(read_csv(path), args.mode, args.split):.6f}")
    return 0


def cmd_plot(args):
    from .plot import emit_plots

    labels = args.labels.split(",") if args.labels else None
    emit_plots(args.csv, args.output, labels, args.split)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="knormlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file (section.key = value lines)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    for name, fn, h in (("train", cmd_train, "central or DP training (run.mode)"),
                        ("fl-sim", cmd_fl, "FedAvg simulation"),
                        ("dpfl-sim", cmd_dpfl, "FedAvg with DP-SGD clients")):
        sp = sub.add_parser(name, help=h)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("accountant", help="epsilon for a sigma, or sigma for an epsilon")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--q", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--dataset-size", type=int)
    sp.set_defaults(fn=cmd_accountant)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a configured model")
    common(sp)
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--coords", type=int, default=200)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("describe", help="layer table of a configured model as JSON")
    common(sp)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--num-classes", type=int, default=10)
    sp.add_argument("--synthetic-shape", action="store_true", help="use data.shape instead of 3 x image-size^2")
    sp.set_defaults(fn=cmd_describe)

    sp = sub.add_parser("summarize", help="representative accuracy of metrics CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--mode", choices=("central", "dp", "fl", "dpfl"), required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_summarize)

    sp = sub.add_parser("plot", help="accuracy curves of metrics CSVs as SVG")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--labels", help="comma-separated legend labels")
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        return args.fn(args)
    except KnormlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
