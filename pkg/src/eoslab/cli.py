"""Command-line interface.

Structured runs (training, dataset building) read a JSON config file;
simpler stages take flags directly. Errors exit nonzero with a
machine-readable {"error_class", "message"} line on stderr.
"""

import argparse
import json
import sys

from . import harness
from .errors import EoslabError


def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _apply_overrides(config, args):
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        config["out_dir"] = args.out_dir
    return config


def _cmd_dataset_build(args):
    result = harness.build_datasets(_load_config(args.config))
    print(json.dumps(result, sort_keys=True))


def _cmd_train(args, kind=None):
    config = _apply_overrides(_load_config(args.config), args)
    if kind is not None:
        config["kind"] = kind
    elif "kind" not in config:
        config["kind"] = "train_mle"
    print(json.dumps(harness.run(config), sort_keys=True))


def _cmd_further_train(args):
    config = _apply_overrides(_load_config(args.config), args)
    config["kind"] = "further_train"
    if args.init_from is not None:
        config["init_from"] = args.init_from
    print(json.dumps(harness.run(config), sort_keys=True))


def _cmd_score(args):
    config = {
        "kind": "score", "checkpoint": args.checkpoint, "data": args.data,
        "out_dir": args.out_dir, "seed": args.seed,
    }
    print(json.dumps(harness.run(config), sort_keys=True))


def _cmd_filter(args):
    config = {
        "kind": "filter", "data": args.data, "scores": args.scores,
        "mode": args.mode, "ratio": args.ratio, "seed": args.seed,
        "out_dir": args.out_dir,
    }
    print(json.dumps(harness.run(config), sort_keys=True))


def _cmd_probe(args):
    config = {
        "kind": f"probe_{args.probe_kind}", "checkpoint": args.checkpoint,
        "data": args.data, "out_dir": args.out_dir, "sample": args.sample,
        "seed": args.seed,
    }
    if args.probe_kind == "tendency":
        config["modes"] = args.modes.split(",")
        config["manipulation"] = {
            "noise_steps": args.noise_steps,
            "mask_prefix_len": args.mask_prefix_len,
            "aux_seed": args.seed,
        }
    result = harness.run(config)
    print(json.dumps(result, sort_keys=True))


def _cmd_eval(args):
    config = {
        "kind": "eval", "checkpoint": args.checkpoint, "data": args.data,
        "out_dir": args.out_dir, "seed": args.seed,
        "decode": {"max_len": args.max_len, "length_penalty": args.length_penalty},
    }
    if args.truncate is not None:
        config["truncate"] = args.truncate
    if args.base_captions is not None:
        config["base_captions"] = args.base_captions
    print(json.dumps(harness.run(config), sort_keys=True))


def _cmd_report(args):
    emitted = harness.emit_reports(args.run_dir)
    print(json.dumps({"emitted": emitted}, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="eoslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset utilities")
    dsub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_build = dsub.add_parser("build", help="build train/eval splits from a config file")
    p_build.add_argument("--config", required=True)
    p_build.set_defaults(func=_cmd_dataset_build)

    p_train = sub.add_parser("train", help="train a model from scratch (config file)")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out-dir")
    p_train.set_defaults(func=_cmd_train)

    p_further = sub.add_parser("further-train", help="continue training from a checkpoint")
    p_further.add_argument("--config", required=True)
    p_further.add_argument("--init-from")
    p_further.add_argument("--seed", type=int)
    p_further.add_argument("--out-dir")
    p_further.set_defaults(func=_cmd_further_train)

    p_score = sub.add_parser("score", help="score a dataset under a reference checkpoint")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--data", required=True)
    p_score.add_argument("--out-dir", required=True)
    p_score.add_argument("--seed", type=int, default=0)
    p_score.set_defaults(func=_cmd_score)

    p_filter = sub.add_parser("filter", help="filter a dataset by its score table")
    p_filter.add_argument("--data", required=True)
    p_filter.add_argument("--scores", required=True)
    p_filter.add_argument("--mode", default="top", choices=["top", "random", "reversed"])
    p_filter.add_argument("--ratio", type=float, default=0.2)
    p_filter.add_argument("--seed", type=int, default=0)
    p_filter.add_argument("--out-dir", required=True)
    p_filter.set_defaults(func=_cmd_filter)

    p_probe = sub.add_parser("probe", help="analysis probes over a checkpoint")
    p_probe.add_argument("probe_kind", choices=["saliency", "tendency", "aggregation"])
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--data", required=True)
    p_probe.add_argument("--out-dir", required=True)
    p_probe.add_argument("--sample", type=int, default=500)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--modes", default="none,image_minus,image_plus,image_replace,text_minus")
    p_probe.add_argument("--noise-steps", type=int, default=500)
    p_probe.add_argument("--mask-prefix-len", type=int, default=0)
    p_probe.set_defaults(func=_cmd_probe)

    p_eval = sub.add_parser("eval", help="generate captions and score hallucination metrics")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out-dir", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--max-len", type=int, default=40)
    p_eval.add_argument("--length-penalty", type=float, default=0.0)
    p_eval.add_argument("--truncate", type=float)
    p_eval.add_argument("--base-captions")
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="re-emit plots from run artifacts")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except EoslabError as e:
        sys.stderr.write(json.dumps({"error_class": e.error_class, "message": str(e)}) + "\n")
        return e.exit_code
    except FileNotFoundError as e:
        sys.stderr.write(json.dumps({"error_class": "io", "message": str(e)}) + "\n")
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
