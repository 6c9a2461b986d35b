import argparse
import json
import logging
import os
import sys
import time

from checkpoint_io import (ensure_dir, load_state, prediction_to_dict, read_json, save_state,
                           to_jsonable, write_json, write_trajectory_csv)
from errors import CheckpointError, DivergenceError, NeuralCollapseError, RegimeError, ToleranceFailure
from nc_metrics import compare_to_theory, deviation_table, measure
from run_config import (PRESETS, TOLERANCE_DEFAULTS, load_run_config, parse_run_config, preset_config,
                        with_depth)
from theory import predict
from trainer import sweep, train

logger = logging.getLogger(__name__)

# ===============================================================
#  CONFIGURATION
# ===============================================================

TRAJECTORY_FILE = "trajectory.csv"
CHECKPOINT_FILE = "final.ncdl"
SUMMARY_FILE = "summary.json"
SWEEP_SUMMARY_FILE = "sweep_summary.csv"
DEFAULT_DEPTHS = [1, 3, 6, 9]


def banner(title):
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70)


def _prediction_or_none(spec):
    try:
        return predict(spec)
    except RegimeError as exc:
        print(f"⚠️  No closed-form prediction: {exc}")
        return None


def _fallback_flavor(spec, flavor):
    return flavor or ("etf" if spec.has_bias else "of")


# ===============================================================
#  COMMANDS
# ===============================================================

def cmd_theory(args):
    config = load_run_config(args.config)
    prediction = predict(config.spec)
    payload = prediction_to_dict(prediction)

    if args.out is None:
        print(json.dumps(to_jsonable(payload), indent=2))
        return 0

    write_json(payload, args.out)
    banner("THEORY PREDICTION")
    print(f"📊 Regime: {prediction.regime.value} | Geometry: {prediction.geometry.value} "
          f"| Rank cap: {prediction.rank_cap}")
    if prediction.predicted_loss is not None:
        print(f"📊 Predicted minimal loss: {prediction.predicted_loss:.12g}")
    print(f"💾 Saved: {args.out}")
    return 0


def _write_run(out_dir, trajectory, prediction, config_raw):
    ensure_dir(out_dir)
    frame = write_trajectory_csv(trajectory, os.path.join(out_dir, TRAJECTORY_FILE))
    save_state(os.path.join(out_dir, CHECKPOINT_FILE), trajectory.final_state)

    report = trajectory.final_report
    summary = {
        "final_iteration": trajectory.iterations[-1] if trajectory.iterations else None,
        "final_loss": trajectory.final_loss,
        "stopped_early": trajectory.stopped_early,
        "metrics": None if report is None else report.to_dict(),
        "prediction": None if prediction is None else {
            "regime": prediction.regime,
            "geometry": prediction.geometry,
            "predicted_loss": prediction.predicted_loss,
            "singular_values": prediction.singular_values,
        },
        "config": config_raw,
    }
    write_json(summary, os.path.join(out_dir, SUMMARY_FILE))
    return frame


def _train_one(config, out_dir, flavor=None):
    spec = config.spec
    prediction = _prediction_or_none(spec)
    chosen = None if prediction is not None else _fallback_flavor(spec, flavor)

    try:
        trajectory = train(spec, config.train, prediction=prediction, flavor=chosen)
    except DivergenceError as exc:
        if exc.trajectory is not None and exc.trajectory.iterations:
            _write_run(out_dir, exc.trajectory, prediction, config.raw)
            print(f"💾 Partial trajectory flushed to: {out_dir}")
        raise

    frame = _write_run(out_dir, trajectory, prediction, config.raw)
    return trajectory, frame


def cmd_train(args):
    config = load_run_config(args.config)
    out_dir = args.out or config.output_dir
    start_time = time.time()

    banner(f"TRAINING  K={config.spec.K}  M={config.spec.M}  loss={config.spec.loss.value}  "
           f"bias={config.spec.bias_mode.value}")
    trajectory, frame = _train_one(config, out_dir, args.flavor)

    print(f"✅ Finished at iteration {trajectory.iterations[-1]} with loss {trajectory.final_loss:.12g}")
    print("\n📊 LAST RECORDED ROWS")
    print(frame.tail(5).to_string(index=False))
    print(f"\n💾 Results saved in: {out_dir}")
    print(f"⏱️ Total execution time: {time.time() - start_time:.2f} seconds\n")
    return 0


def cmd_metrics(args):
    config = load_run_config(args.config)
    state = load_state(args.checkpoint, config.spec)
    prediction = predict(config.spec) if args.flavor == "gof" else None
    report = measure(state, config.spec, args.flavor, prediction=prediction)
    print(json.dumps(to_jsonable(report.to_dict()), indent=2))
    return 0


def cmd_compare(args):
    config = load_run_config(args.config)
    checkpoint = os.path.join(args.run_dir, CHECKPOINT_FILE)
    summary_path = os.path.join(args.run_dir, SUMMARY_FILE)
    for path in (checkpoint, summary_path):
        if not os.path.isfile(path):
            raise CheckpointError(f"missing {path}")

    summary = read_json(summary_path)
    state = load_state(checkpoint, config.spec)
    prediction = predict(config.spec)
    report = compare_to_theory(state, config.spec, prediction)

    table = deviation_table(report, prediction)
    table["tolerance"] = args.tol
    table["ok"] = table["value"] <= args.tol

    banner(f"THEORY COMPARISON  regime={prediction.regime.value}  geometry={prediction.geometry.value}")
    print(f"📊 Run: {args.run_dir} (final iteration {summary.get('final_iteration')})")
    print(table.to_string(index=False))

    failed = table.loc[~table["ok"], "quantity"].tolist()
    if failed:
        raise ToleranceFailure(f"{len(failed)} deviation(s) above {args.tol:g}: {', '.join(failed)}")
    print(f"\n✅ All {len(table)} deviations within {args.tol:g}")
    return 0


def cmd_sweep(args):
    with open(args.config) as f:
        base = json.load(f)
    if args.out:
        base["outputs"] = {"dir": args.out}
    configs = [parse_run_config(with_depth(base, depth)) for depth in args.depths]

    banner(f"DEPTH SWEEP  M in {args.depths}")
    specs = [c.spec for c in configs]
    predictions = [_prediction_or_none(spec) for spec in specs]
    result = sweep(specs, configs[0].train, predictions=predictions,
                   flavor=_fallback_flavor(specs[0], args.flavor), workers=args.workers)

    for config, trajectory, prediction in zip(configs, result.trajectories, predictions):
        if trajectory is None:
            print(f"❌ M={config.spec.M}: failed")
            continue
        _write_run(config.output_dir, trajectory, prediction, config.raw)
        print(f"✅ M={config.spec.M}: loss {trajectory.final_loss:.12g} -> {config.output_dir}")

    summary = result.summary()
    root = os.path.dirname(configs[0].output_dir) or "."
    ensure_dir(root)
    summary_path = os.path.join(root, SWEEP_SUMMARY_FILE)
    summary.to_csv(summary_path, index=False, float_format="%.17g")

    print("\n📊 SWEEP SUMMARY")
    print(summary.to_string(index=False) if not summary.empty else "(no successful runs)")
    print(f"💾 Saved: {summary_path}")

    for index, kind, message in result.failures:
        print(f"❌ run {index} ({kind}): {message}")
    return 0 if result.ok else DivergenceError.exit_code


def cmd_preset(args):
    document = preset_config(args.name, args.depth, args.dir)
    if args.out is None:
        print(json.dumps(document, indent=2))
        return 0
    write_json(document, args.out)
    print(f"💾 Preset '{args.name}' (M={args.depth}) written to {args.out}")
    return 0


# ===============================================================
#  ENTRY POINT
# ===============================================================

def build_parser():
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Deep linear unconstrained-features models: theory, training and neural-collapse metrics.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="closed-form prediction for a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the prediction JSON here (default: stdout)")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("train", help="gradient descent with trajectory, checkpoint and summary")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: outputs.dir from the config)")
    p.add_argument("--flavor", choices=["of", "etf", "gof"],
                   help="metric flavor when no closed-form prediction exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="NC metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--flavor", choices=["of", "etf", "gof"], default="of")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="check a finished run against the prediction")
    p.add_argument("run_dir")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=TOLERANCE_DEFAULTS["compare"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="train the same config at several depths")
    p.add_argument("--config", required=True)
    p.add_argument("--depths", type=int, nargs="+", default=DEFAULT_DEPTHS)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="root directory for the per-depth runs")
    p.add_argument("--flavor", choices=["of", "etf", "gof"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("preset", help="write a named experiment config")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--out", help="config file to write (default: stdout)")
    p.add_argument("--dir", help="outputs.dir inside the config")
    p.set_defaults(func=cmd_preset)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except NeuralCollapseError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
