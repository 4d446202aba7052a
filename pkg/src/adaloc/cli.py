"""Command-line entry point.

Exit status is 0 on success, 1 when an input fails validation (wrong key,
stale key, bad shapes) and 2 on I/O or decoding failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adaptation import TRAIN_STRATEGIES, TrainConfig, finetune
from .bounds import (
    VarianceProfile,
    estimate_constants,
    mc_output_variance,
    slack_report,
    variance_bound,
)
from .data import Dataset, evaluate, load_csv, load_idx
from .errors import AdalocError, ContractError, ParseError
from .keying import STRATEGIES, KeySpec, build_key, decode_key, encode_key
from .locking import LockedModel, lock, refresh_key, unlock
from .network import NetworkSpec, decode_model, encode_model, init_network
from .pipeline import PipelineError, load_dataset, main_pipeline
from .serialize import atomic_write, parse_json, pretty_json

KEY_STRATEGY_FOR = {"key-top": "top", "key-pool": "pool-sample", "key-random": "random", "key-bottom": "bottom"}


def _read_model(path):
    return decode_model(Path(path).read_bytes())


def _read_locked(path) -> LockedModel:
    return LockedModel.from_bytes(Path(path).read_bytes())


def _read_key(path):
    return decode_key(Path(path).read_bytes())


def _print_json(obj) -> None:
    sys.stdout.write(pretty_json(obj).decode())


def _dataset(args, split: str = "train") -> Dataset:
    if args.csv:
        return load_csv(args.csv, split=split)
    if args.idx:
        return load_idx(args.idx[0], args.idx[1], split=split)
    if args.data:
        text = args.data
        cfg = parse_json(Path(text).read_bytes() if Path(text).exists() else text, "dataset config")
        base = Path(text).parent if Path(text).exists() else Path(".")
        return load_dataset(cfg, base, split)
    raise ContractError("a dataset is required: --data, --csv or --idx")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset config as a JSON file or inline JSON")
    p.add_argument("--csv", help="CSV file with a 'label' column")
    p.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX image and label files")


def _kv_pairs(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ContractError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_init_model(args) -> int:
    if args.spec:
        spec = NetworkSpec.from_dict(parse_json(Path(args.spec).read_bytes(), args.spec))
    else:
        widths = [int(w) for w in args.mlp.split(",")]
        if len(widths) < 2:
            raise ContractError("--mlp needs at least input and output widths")
        spec = NetworkSpec.mlp(widths[0], widths[1:-1], widths[-1])
    atomic_write(args.out, encode_model(init_network(spec, args.seed)))
    return 0


def _train_config(args, strategy: str) -> TrainConfig:
    return TrainConfig(eta=args.eta, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                       strategy=strategy, momentum=args.momentum, weight_decay=getattr(args, "weight_decay", 0.0))


def cmd_train(args) -> int:
    params, _ = _read_model(args.model)
    trained, rows = finetune(params, _dataset(args), _train_config(args, "full"), tag=args.tag)
    atomic_write(args.out, encode_model(trained))
    if args.curves:
        from .adaptation import curves_csv

        atomic_write(args.curves, curves_csv(rows))
    return 0


def cmd_localize(args) -> int:
    params, _ = _read_model(args.model)
    spec = KeySpec(rho=args.rho, pool_fraction=args.pool_fraction, strategy=args.strategy, seed=args.seed)
    key = build_key(params, spec)
    atomic_write(args.out, encode_key(key))
    _print_json({"entries": len(key), "units": len(key.unit_list), "param_fraction": len(key) / params.d})
    return 0


def cmd_lock(args) -> int:
    params, _ = _read_model(args.model)
    locked = lock(params, _read_key(args.key))
    atomic_write(args.out, locked.to_bytes())
    return 0


def cmd_unlock(args) -> int:
    restored = unlock(_read_locked(args.model), _read_key(args.key))
    atomic_write(args.out, encode_model(restored))
    return 0


def cmd_adapt(args) -> int:
    params, _ = _read_model(args.model)
    key = _read_key(args.key) if args.key else None
    if args.strategy == "full":
        key = None
    elif key is None:
        raise ContractError("key strategies need --key")
    elif KEY_STRATEGY_FOR[args.strategy] != key.spec.strategy:
        raise ContractError(f"strategy {args.strategy} does not match key strategy {key.spec.strategy}")
    adapted, rows = finetune(params, _dataset(args), _train_config(args, args.strategy), key)
    atomic_write(args.out, encode_model(adapted))
    if args.refreshed_key and key is not None:
        atomic_write(args.refreshed_key, encode_key(refresh_key(adapted, key)))
    if args.curves:
        from .adaptation import curves_csv

        atomic_write(args.curves, curves_csv(rows))
    return 0


def cmd_eval(args) -> int:
    payload = Path(args.model).read_bytes()
    params, _ = decode_model(payload)
    report = evaluate(params.spec, params, _dataset(args, "test"))
    _print_json(report.to_dict())
    return 0


def cmd_refresh_key(args) -> int:
    adapted, _ = _read_model(args.model)
    atomic_write(args.out, encode_key(refresh_key(adapted, _read_key(args.key))))
    return 0


def cmd_bounds(args) -> int:
    out: dict = {}
    mc_opts = args.variance_mc
    if mc_opts is not None:
        opts = _kv_pairs(mc_opts)
        trials = int(opts.get("trials", 10_000))
        seed = int(opts.get("seed", args.seed))
        law = opts.get("law", "gaussian")
        if args.model:
            params, _ = _read_model(args.model)
            profile = VarianceProfile.from_params(params)
            x = np.full(params.spec.input_shape, float(opts.get("x", 1.0))).ravel()
        else:
            depth = int(opts.get("depth", 2))
            profile = VarianceProfile.uniform(depth, int(opts.get("width", 8)), float(opts.get("var_w", 0.1)),
                                              float(opts.get("var_b", 0.01)))
            x = np.full(int(opts.get("dim", 4)), float(opts.get("x", 0.5)))
        estimate, stderr = mc_output_variance(profile, x, trials=trials, seed=seed, law=law, return_stderr=True)
        bound = variance_bound(profile, float(np.linalg.norm(x)))
        out["variance_mc"] = {"trials": trials, "mc_variance": estimate, "mc_stderr": stderr, "bound": bound,
                              "bound_ge_mc": bound + 3 * stderr >= estimate}
    if args.reference:
        if not args.model:
            raise ContractError("--reference needs --model")
        tilde, _ = _read_model(args.model)
        hat, _ = _read_model(args.reference)
        constants = estimate_constants(hat.spec, hat, _dataset(args), epsilon=args.epsilon, C=args.C, t=args.t)
        out["slack"] = slack_report(tilde, hat, constants).to_dict()
    if not out:
        raise ContractError("nothing to do: pass --variance-mc and/or --model with --reference")
    _print_json(out)
    return 0


def cmd_pipeline(args) -> int:
    report = main_pipeline(args.manifest, args.output_dir)
    _print_json({"checks": report["checks"], "artifacts": report["artifacts"]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaloc", description="Lock, key and adapt small ReLU networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a freshly initialized model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="network spec JSON file")
    src.add_argument("--mlp", help="comma-separated widths, e.g. 32,128,128,10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    def sgd_args(p):
        p.add_argument("--eta", type=float, default=0.1)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--momentum", type=float, default=0.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--curves", help="write per-epoch metrics CSV here")

    p = sub.add_parser("train", help="train all parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--tag", default="pretrained")
    sgd_args(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="select a key")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--pool-fraction", type=float, default=None)
    p.add_argument("--strategy", choices=STRATEGIES, default="top")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("lock", help="zero the key coordinates of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lock)

    p = sub.add_parser("unlock", help="restore a locked model with its key")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unlock)

    p = sub.add_parser("adapt", help="fine-tune fully or on key coordinates only")
    p.add_argument("--model", required=True)
    p.add_argument("--key")
    p.add_argument("--strategy", choices=TRAIN_STRATEGIES, default="key-top")
    p.add_argument("--out", required=True)
    p.add_argument("--refreshed-key", help="write the refreshed key here")
    sgd_args(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy and error metric on a dataset")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refresh-key", help="read new key values from an adapted model")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refresh_key)

    p = sub.add_parser("bounds", help="variance Monte Carlo and distance-threshold reports")
    p.add_argument("--model", help="model (adapted model when --reference is given)")
    p.add_argument("--reference", help="fully fine-tuned model to measure distance against")
    p.add_argument("--variance-mc", "--thm1-mc", nargs="*", metavar="KEY=VALUE", default=None,
                   help="Monte-Carlo check of the output-variance bound, e.g. trials=10000")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("pipeline", help="run a full experiment manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"adaloc: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, (OSError, ParseError)) else 1
    except (OSError, ParseError) as exc:
        print(f"adaloc: I/O error: {exc}", file=sys.stderr)
        return 2
    except (AdalocError, ValueError) as exc:
        print(f"adaloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
