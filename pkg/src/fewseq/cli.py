"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``eval``, ``zeroshot`` (an eval alias),
``export-features``, and ``bench``.  Every evaluation prints a human-readable
report to stdout and writes a machine-readable ``key = value`` record file.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import sys

from .bench import print_bench
from .config import config_hash, load_config, parse_synthetic_spec
from .data import generate_synthetic, load_dataset, save_dataset
from .engine import (
    evaluate,
    export_features,
    load_checkpoint,
    model_from_checkpoint,
    result_record,
    save_checkpoint,
    train,
)
from .errors import FewseqError, UsageError

DEFAULT_RESULT_FILE = "fewseq_eval_result.txt"


def _cmd_gen_data(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = parse_synthetic_spec(fh.read())
    except OSError as e:
        raise UsageError(f"cannot read spec file {args.spec}: {e}") from e
    dataset = generate_synthetic(spec)
    save_dataset(dataset, args.out)
    print(
        f"wrote {args.out}: classes={len(dataset.classes.names)} "
        f"base={len(dataset.classes.base_ids)} novel={len(dataset.classes.novel_ids)} "
        f"videos={len(dataset.samples)} frame_dim={dataset.frame_dim}"
    )
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    ckpt = train(config)
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out}: steps={ckpt.step} config_hash={config_hash(config)}")
    return 0


def _run_eval(args, mode: str) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    config = ckpt.config
    way = args.way if args.way is not None else config.way
    shot = args.shot if args.shot is not None else config.shot
    episodes = args.episodes if args.episodes is not None else config.eval_episodes
    queries = args.queries if args.queries is not None else config.queries_per_class
    workers = args.workers if args.workers is not None else config.eval_workers
    seed = args.seed if args.seed is not None else config.seed
    beta = getattr(args, "beta", None)

    report = evaluate(
        ckpt, dataset, way=way, shot=shot, episodes=episodes, mode=mode,
        seed=seed, workers=workers, queries_per_class=queries, beta=beta,
    )
    print(
        f"mode={mode} way={way} shot={shot} episodes={episodes} "
        f"mean_accuracy={report.mean_accuracy:.6f} ci95={report.ci95_halfwidth:.6f}"
    )
    print(
        f"accuracy {100 * report.mean_accuracy:.2f}% "
        f"± {100 * report.ci95_halfwidth:.2f}% (95% CI over {episodes} episodes)"
    )
    extra = {
        "data": args.data,
        "mode": mode,
        "way": way,
        "shot": shot,
        "queries_per_class": queries,
        "beta": config.beta if beta is None else beta,
        "workers": workers,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result_record(config, report, extra))
    return 0


def _cmd_eval(args) -> int:
    return _run_eval(args, args.mode)


def _cmd_zeroshot(args) -> int:
    return _run_eval(args, "zeroshot")


def _cmd_export_features(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    model = model_from_checkpoint(ckpt, dataset)
    export_features(model, dataset, args.out, split=args.split)
    print(f"wrote {args.out} (split={args.split})")
    return 0


def _cmd_bench(args) -> int:
    print_bench(args.batch, args.rows, args.cols, args.smoothing, args.repeats)
    return 0


def _add_eval_flags(p, with_mode: bool):
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--way", type=int, default=None, help="classes per episode")
    p.add_argument("--shot", type=int, default=None, help="support videos per class")
    p.add_argument("--episodes", type=int, default=None, help="episodes to evaluate")
    p.add_argument("--queries", type=int, default=None, help="queries per class")
    p.add_argument("--workers", type=int, default=None, help="parallel eval workers")
    p.add_argument("--seed", type=int, default=None, help="evaluation seed")
    p.add_argument("--out", default=DEFAULT_RESULT_FILE, help="machine-readable result file")
    if with_mode:
        p.add_argument(
            "--mode", choices=["fewshot", "ensemble", "zeroshot"], default="fewshot"
        )
        p.add_argument("--beta", type=float, default=None, help="ensemble mix override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewseq",
        description="Few-shot sequence classification with text-modulated "
        "prototypes and temporal alignment metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--spec", required=True, help="synthetic spec file (key = value)")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on the base split of a dataset")
    p.add_argument("--config", required=True, help="run config file (key = value)")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="N-way K-shot evaluation on the novel split")
    _add_eval_flags(p, with_mode=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("zeroshot", help="alias for eval --mode zeroshot")
    _add_eval_flags(p, with_mode=False)
    p.set_defaults(func=_cmd_zeroshot)

    p = sub.add_parser("export-features", help="dump raw and modulated features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output .npz file")
    p.add_argument("--split", choices=["base", "novel", "all"], default="novel")
    p.set_defaults(func=_cmd_export_features)

    p = sub.add_parser("bench", help="time the numba and numpy alignment kernels")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except FewseqError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
