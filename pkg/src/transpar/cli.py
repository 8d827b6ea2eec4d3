"""Command-line entry point: ``transpar {gen-data,estimate-ratio,train,eval,suite}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import ShiftScenario, Standardizer, generate
from .discrepancy import TransferRatioEstimate
from .errors import ConfigurationError, NumericFailure
from .harness import TrainConfig, evaluate, prepare_data, run_stage1, run_stage2, run_suite
from .model import load_checkpoint, predict, save_checkpoint
from .optim import PartitionMask
from .reports import emit_reports, metrics_csv

log = logging.getLogger("transpar")

SCENARIO_NAMES = {
    "two-moons-rot": "two_moons_rotation",
    "gauss-trans": "gaussian_translation",
    "label-shift": "target_label_shift",
}
DATA_COLUMNS = ["x0", "x1", "y", "d", "split"]


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def _write_domain_csv(path: Path, train, test):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DATA_COLUMNS)
        for ds in (train, test):
            flag = int(ds.d[0]) if len(ds) else 0
            for row, label in zip(ds.x, ds.labels):
                writer.writerow([repr(float(row[0])), repr(float(row[1])), int(label), flag, ds.split])


def _read_domain_csv(path: Path):
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != DATA_COLUMNS:
                raise ConfigurationError(f"{path}: header must be {','.join(DATA_COLUMNS)}")
            rows = list(reader)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows]).reshape(-1, 2)
    y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    split = np.array([r["split"] for r in rows])
    return x, y, split


def cmd_gen_data(args):
    kw = {"kind": SCENARIO_NAMES[args.scenario], "noise": args.noise,
          "n_source": args.n, "n_target": args.n}
    if args.theta is not None:
        kw["theta"] = args.theta
    if args.translation is not None:
        kw["translation"] = args.translation
    if args.proportions is not None:
        kw["proportions"] = args.proportions
    scenario = ShiftScenario(**kw).validate()
    (s_tr, s_te), (t_tr, t_te) = generate(scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_domain_csv(out / "source.csv", s_tr, s_te)
    _write_domain_csv(out / "target.csv", t_tr, t_te)
    meta = {
        "scenario": scenario.kind,
        "params": {**scenario.params(), "noise": scenario.noise},
        "seed": args.seed,
        "counts": {
            "source": {"train": len(s_tr), "test": len(s_te),
                       "classes": np.bincount(np.concatenate([s_tr.labels, s_te.labels]), minlength=2).tolist()},
            "target": {"train": len(t_tr), "test": len(t_te),
                       "classes": np.bincount(np.concatenate([t_tr.labels, t_te.labels]), minlength=2).tolist()},
        },
    }
    (out / "metadata.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out}/source.csv, target.csv, metadata.json")


def cmd_estimate_ratio(args):
    config = TrainConfig.load(args.config)
    est = run_stage1(config, out_path=args.out)
    print(est.to_json(), end="")


def _dump_mask(mask_dir: Path, iteration: int, mask: PartitionMask):
    for role, flags in mask.flags.items():
        (mask_dir / f"iter{iteration:06d}_{role.code}.bin").write_bytes(np.packbits(flags).tobytes())


def cmd_train(args):
    config = TrainConfig.load(args.config)
    if args.method:
        config = TrainConfig.from_dict({**config.to_dict(), "method": args.method})
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create {out}: {exc}") from None
    data = prepare_data(config)
    ratio = None
    if config.method == "transpar_dann" and config.tau_override is None:
        if args.ratio:
            ratio = TransferRatioEstimate.load(args.ratio)
        else:
            log.info("no --ratio given; running stage 1")
            ratio = run_stage1(config, data, out_path=out / "ratio.json")

    on_step = None
    if args.dump_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)

        def on_step(iteration, net, mask):
            if mask is not None:
                _dump_mask(mask_dir, iteration, mask)

    try:
        result = run_stage2(config, ratio, data, run_id=config.method, on_step=on_step)
    except NumericFailure as exc:
        (out / "metrics.csv").write_text(metrics_csv(exc.rows))
        raise
    (out / "metrics.csv").write_text(metrics_csv(result.rows))
    save_checkpoint(result.net, out / "checkpoint.json",
                    extra={"standardization": data.scaler.to_dict(), "train_config": config.to_dict()})
    with (out / "predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "index", "y", "pred"])
        for ds in (data.source_test, data.target_test):
            for i, (label, pred) in enumerate(zip(ds.labels, predict(result.net, ds.x))):
                writer.writerow([ds.domain, i, int(label), int(pred)])
    final = result.rows[-1] if result.rows else None
    summary = {
        "method": config.method,
        "acc_src": evaluate(result.net, data.source_test),
        "acc_tgt": evaluate(result.net, data.target_test),
        "tau": None if ratio is None else ratio.tau,
        "epochs": len(result.rows),
        "final_losses": None if final is None else [final.loss_src, final.loss_ent, final.loss_dom],
    }
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    net, raw = load_checkpoint(args.checkpoint)
    scaler = Standardizer.from_dict(raw["standardization"]) if "standardization" in raw else None
    data_dir = Path(args.data)
    result = {}
    for domain in ("source", "target"):
        path = data_dir / f"{domain}.csv"
        if not path.exists():
            continue
        x, y, split = _read_domain_csv(path)
        keep = split == "test" if np.any(split == "test") else np.ones(len(y), dtype=bool)
        if not keep.any():
            raise ConfigurationError(f"{path} has no rows to evaluate")
        xe = scaler.apply(x[keep]) if scaler is not None else x[keep]
        result[f"{domain}_test_acc"] = float(np.mean(predict(net, xe) == y[keep]))
    if not result:
        raise ConfigurationError(f"no source.csv or target.csv in {data_dir}")
    print(json.dumps(result, sort_keys=True))


def cmd_suite(args):
    config = TrainConfig.load(args.config)
    seeds = [config.seed + i for i in range(args.seeds)]
    report = run_suite(config, seeds, jobs=args.jobs)
    paths = emit_reports(report, args.out)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transpar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic source/target CSVs")
    p.add_argument("--scenario", choices=sorted(SCENARIO_NAMES), default="two-moons-rot")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--translation", type=_floats, default=None, help="dx,dy")
    p.add_argument("--proportions", type=_floats, default=None, help="p0,p1")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate-ratio", help="stage 1: write ratio.json")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_ratio)

    p = sub.add_parser("train", help="stage 2: train one network")
    p.add_argument("--config", required=True)
    p.add_argument("--ratio")
    p.add_argument("--method", choices=["source-only", "dann", "transpar-dann"])
    p.add_argument("--out", required=True)
    p.add_argument("--dump-masks", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on gen-data CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="run the ablation grid over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NumericFailure.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
