"""Command-line front end tying the pipeline together.

Verbs:

    simulate    generate one client's train/test scatter-image datasets
    train       standalone training on one dataset
    centralize  train/test on the union of several datasets
    serve       run the federation coordinator
    join        run one federation client
    evaluate    score a weight file against a dataset
    report      merge/re-export history CSVs

Every file output is written atomically and contains no timestamps, so
a rerun with the same config and seeds reproduces artifacts
byte-for-byte.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .cnn.model import build_model, spec_from_weights
from .cnn.train import OptimizerState, evaluate, train
from .cnn.weights_io import load_weights, save_weights
from .config import ExperimentConfig, load_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .errors import InjectGuardError, InvalidInputError
from .federation import ClientDataset, open_listener, run_client, run_coordinator
from .metrics import RoundMetrics, derive_metrics, export_history, load_history
from .fileio import atomic_write_text


def _dataset_paths(cfg: ExperimentConfig, client: int, prefix: str | None) -> tuple[str, str]:
    if prefix is None:
        prefix = os.path.join(cfg.out_dir, f"client{client}")
    return f"{prefix}_train.igds", f"{prefix}_test.igds"


def _load_arrays(paths: list[str]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for path in paths:
        x, y = load_dataset(path).to_arrays()
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def _format_report(cm) -> str:
    rep = derive_metrics(cm)
    undefined = ", ".join(sorted(rep.undefined)) if rep.undefined else "none"
    lines = [
        f"accuracy    = {rep.accuracy:.6f}",
        f"sensitivity = {rep.sensitivity:.6f}",
        f"specificity = {rep.specificity:.6f}",
        f"precision   = {rep.precision:.6f}",
        f"f1          = {rep.f1:.6f}",
        f"(undefined: {undefined})",
    ]
    return "\n".join(lines) + "\n"


def _epoch_history(cfg, spec, weights, state, x, y, tx, ty):
    """Train epoch-at-a-time, evaluating the test split after each."""
    step = replace(cfg.train, epochs=1)
    rows = []
    for epoch in range(cfg.train.epochs):
        weights, state, _ = train(spec, weights, state, x, y, step, epoch_base=epoch)
        cm = evaluate(spec, weights, tx, ty)
        rows.append(RoundMetrics.from_confusion(epoch + 1, 0, cm))
    return weights, rows


def _cmd_simulate(cfg: ExperimentConfig, args) -> int:
    stride = cfg.train_per_class + cfg.test_per_class
    base = args.client * stride
    train_path, test_path = _dataset_paths(cfg, args.client, args.out_prefix)
    os.makedirs(os.path.dirname(os.path.abspath(train_path)), exist_ok=True)
    train_ds = generate_dataset(
        cfg.sim, cfg.raster, cfg.train_per_class, start_index=base
    )
    test_ds = generate_dataset(
        cfg.sim, cfg.raster, cfg.test_per_class, start_index=base + cfg.train_per_class
    )
    save_dataset(train_ds, train_path)
    save_dataset(test_ds, test_path)
    print(f"wrote {train_path} ({len(train_ds.images)} images)")
    print(f"wrote {test_path} ({len(test_ds.images)} images)")
    return 0


def _cmd_train(cfg: ExperimentConfig, args) -> int:
    x, y = _load_arrays([args.data])
    tx, ty = _load_arrays([args.test])
    spec = cfg.model_spec
    weights = build_model(spec, seed=cfg.sim.seed)
    state = OptimizerState.for_weights(weights)
    weights, rows = _epoch_history(cfg, spec, weights, state, x, y, tx, ty)
    save_weights(weights, args.out)
    if args.history:
        export_history(rows, args.history)
    cm = evaluate(spec, weights, tx, ty)
    sys.stdout.write(_format_report(cm))
    print(f"wrote {args.out}")
    return 0


def _cmd_centralize(cfg: ExperimentConfig, args) -> int:
    x, y = _load_arrays(args.data)
    tx, ty = _load_arrays(args.test)
    spec = cfg.model_spec
    weights = build_model(spec, seed=cfg.sim.seed)
    state = OptimizerState.for_weights(weights)
    weights, rows = _epoch_history(cfg, spec, weights, state, x, y, tx, ty)
    save_weights(weights, args.out)
    if args.history:
        export_history(rows, args.history)
    cm = evaluate(spec, weights, tx, ty)
    text = _format_report(cm)
    sys.stdout.write(text)
    if args.report:
        atomic_write_text(args.report, text)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(cfg: ExperimentConfig, args) -> int:
    weights = build_model(cfg.model_spec, seed=cfg.sim.seed)
    listener = open_listener(cfg.federation)
    host, port = listener.getsockname()[:2]
    print(f"coordinator listening on {host}:{port}", flush=True)
    global_weights, history = run_coordinator(cfg.federation, weights, listener=listener)
    save_weights(global_weights, args.out)
    count = export_history(history, args.history)
    print(f"wrote {args.out}")
    print(f"wrote {args.history} ({count} rows)")
    return 0


def _cmd_join(cfg: ExperimentConfig, args) -> int:
    x, y = _load_arrays([args.data])
    tx, ty = _load_arrays([args.test])
    data = ClientDataset(train_x=x, train_y=y, test_x=tx, test_y=ty)
    address = None
    if args.address:
        host, _, port = args.address.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidInputError(f"address must be host:port, got {args.address!r}")
        address = (host, int(port))
    result = run_client(cfg.federation, args.client, data, address=address)
    print(
        f"client {result.client_id}: {result.rounds_completed} rounds, "
        f"final accuracy {result.final_accuracy:.4f}, status {result.status}"
    )
    return 0


def _cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    weights = load_weights(args.weights)
    tx, ty = _load_arrays([args.data])
    spec = spec_from_weights(weights, tx.shape[1], tx.shape[2])
    cm = evaluate(spec, weights, tx, ty)
    text = _format_report(cm)
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {args.out}")
    return 0


def _cmd_report(cfg: ExperimentConfig, args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(load_history(path))
    count = export_history(rows, args.out)
    print(f"wrote {args.out} ({count} rows)")
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "centralize": _cmd_centralize,
    "serve": _cmd_serve,
    "join": _cmd_join,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def run_command(verb: str, cfg: ExperimentConfig, args) -> int:
    """Dispatch one verb; returns a process exit status."""
    if verb not in _HANDLERS:
        raise InvalidInputError(f"unknown command {verb!r}")
    return _HANDLERS[verb](cfg, args)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default=None, help="key = value config file")

    parser = argparse.ArgumentParser(
        prog="injectguard",
        description="Injection-attack detection pipeline: simulate, train, federate.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate one client's datasets")
    p.add_argument("--client", type=int, default=0, help="client index (disjoint frames)")
    p.add_argument("--out-prefix", default=None, help="path prefix for the two output files")

    p = sub.add_parser("train", parents=[common], help="standalone training")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--history", default=None, help="per-epoch metrics CSV")

    p = sub.add_parser("centralize", parents=[common], help="train on the union of datasets")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--test", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--report", default=None, help="plain-text metrics file")

    p = sub.add_parser("serve", parents=[common], help="run the coordinator")
    p.add_argument("--out", required=True, help="final global weight file")
    p.add_argument("--history", required=True, help="round/client metrics CSV")

    p = sub.add_parser("join", parents=[common], help="run one client")
    p.add_argument("--client", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--address", default=None, help="host:port (default from config)")

    p = sub.add_parser("evaluate", parents=[common], help="score weights on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="write the report here too")

    p = sub.add_parser("report", parents=[common], help="merge history CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return run_command(args.verb, cfg, args)
    except InjectGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
