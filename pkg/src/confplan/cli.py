"""Command-line operator surface.

Subcommands: gen-data, train, calibrate, eval, sweep-alpha, sweep-lambda,
eval-ood, rollout (single-scenario debug), serve. Every subcommand reads an
optional JSON config file plus flag overrides. Exit codes: 0 success, 2 usage
error, 3 invalid configuration, 1 runtime failure; failures print a
machine-readable JSON error to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import conformal, encoding, evaluation, policy, training
from .config import ConfigError, RunConfig
from .encoding import FEATURE_DIM
from .gridworld import sample_scenario

SPLIT_NAMES = ("train", "cal", "val")


def _stream_seed(base_seed: int, label: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), 0xD5, label]).generate_state(1, np.uint64)[0])


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if getattr(args, "method", None):
        cfg.loss = replace(cfg.loss, method=args.method)
    if getattr(args, "cp_weight", None) is not None:
        cfg.loss = replace(cfg.loss, cp_weight=args.cp_weight)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    cfg.validate()
    return cfg


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    base_seed = args.seed if args.seed is not None else cfg.train.seed
    out_dir = Path(args.out or cfg.out_dir) / "data"
    sizes = {"train": cfg.n_train, "cal": cfg.n_cal, "val": cfg.n_val}
    manifest = {
        "v": 1,
        "distribution_tag": cfg.distribution_tag,
        "base_seed": base_seed,
        "splits": {},
        "config": cfg.to_dict(),
    }
    for label, split in enumerate(SPLIT_NAMES):
        stream = _stream_seed(base_seed, label)
        entries = encoding.build_dataset(sizes[split], cfg.distribution_tag, stream)
        info = encoding.write_dataset(entries, out_dir, split)
        info["stream_seed"] = stream
        manifest["splits"][split] = info
        print(f"{split}: {info['n_scenarios']} scenarios, {info['n_steps']} steps")
    _write_json(out_dir / "datasets_manifest.json", manifest)
    print(f"wrote {out_dir}/datasets_manifest.json")
    return 0


def _init_params(cfg: RunConfig) -> policy.PolicyParams:
    return policy.init_params(FEATURE_DIM, hidden=cfg.train.hidden, seed=cfg.train.seed)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_dir = Path(args.data)
    train_entries = encoding.load_dataset(data_dir, "train")
    cal_entries = encoding.load_dataset(data_dir, "cal")
    val_entries = encoding.load_dataset(data_dir, "val") if args.use_val else None
    run_dir = Path(args.out or cfg.out_dir) / f"{cfg.loss.method}-seed{cfg.train.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")

    state = training.finetune(
        _init_params(cfg),
        train_entries,
        cal_entries,
        cfg.loss,
        cfg.train,
        val_entries=val_entries,
        run_dir=run_dir,
    )
    threshold = conformal.calibrate(state.params, cal_entries, cfg.alpha)
    _write_json(
        run_dir / "threshold.json",
        {
            "v": 1,
            "alpha": threshold.alpha,
            "delta": threshold.delta,
            "q_hat": threshold.quantile_value,
            "calib_size": threshold.calib_size,
        },
    )
    print(f"trained {cfg.loss.method} (seed {cfg.train.seed}) for {state.epoch} epochs")
    print(f"checkpoint: {run_dir / 'ckpt_final.npz'}")
    return 0


def _load_threshold(path) -> conformal.Threshold:
    d = json.loads(Path(path).read_text())
    return conformal.Threshold(
        delta=d["delta"], alpha=d["alpha"], calib_size=d["calib_size"], quantile_value=d["q_hat"]
    )


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    entries = encoding.load_dataset(Path(args.data), args.prefix)
    scores = conformal.scenario_scores(params, entries)
    threshold = conformal.conformal_threshold(scores, cfg.alpha)
    report = conformal.calibration_report(threshold, scores)
    out = args.out or "calibration_report.json"
    _write_json(out, report)
    print(f"delta={threshold.delta:.6f} (q_hat={threshold.quantile_value:.6f}, D={threshold.calib_size})")
    print(f"wrote {out}")
    return 0


def _entries_scenarios(entries):
    return [e.scenario for e in entries], [e.plan for e in entries]


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    eval_entries = encoding.load_dataset(data_dir, args.prefix)
    if args.threshold:
        threshold = _load_threshold(args.threshold)
    else:
        cal_entries = encoding.load_dataset(data_dir, "cal")
        threshold = conformal.calibrate(params, cal_entries, cfg.alpha)
    scenarios, plans = _entries_scenarios(eval_entries)
    report, traces = evaluation.evaluate(
        params, threshold, scenarios, seeds=(cfg.train.seed,), plans=plans, return_traces=True
    )
    out_dir = Path(args.out or cfg.out_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(report, out_dir / "report.json")
    evaluation.write_traces(traces, out_dir / "traces.jsonl")
    table = evaluation.markdown_table([(cfg.loss.method, report)])
    (out_dir / "table.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _load_config(args)
    params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    cal_entries = encoding.load_dataset(data_dir, "cal")
    eval_entries = encoding.load_dataset(data_dir, args.prefix)
    alphas = [float(v) for v in args.alphas.split(",")]
    scenarios, _ = _entries_scenarios(eval_entries)
    reports = evaluation.alpha_sweep(params, cal_entries, alphas, scenarios, seeds=(cfg.train.seed,))
    out_dir = Path(args.out or cfg.out_dir) / "sweep_alpha"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for report in reports:
        _write_json(out_dir / f"report_alpha_{report.alpha}.json", report.to_dict())
        rows.append((f"coverage {1 - report.alpha:.2f}", report))
    table = evaluation.markdown_table(rows)
    (out_dir / "table.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _load_config(args)
    data_dir = Path(args.data)
    train_entries = encoding.load_dataset(data_dir, "train")
    cal_entries = encoding.load_dataset(data_dir, "cal")
    eval_entries = encoding.load_dataset(data_dir, args.prefix)
    scenarios, plans = _entries_scenarios(eval_entries)
    values = [float(v) for v in args.values.split(",")]
    out_dir = Path(args.out or cfg.out_dir) / "sweep_lambda"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        loss_cfg = replace(cfg.loss, method="cofinellm", cp_weight=value)
        state = training.finetune(
            _init_params(cfg), train_entries, cal_entries, loss_cfg, cfg.train
        )
        threshold = conformal.calibrate(state.params, cal_entries, cfg.alpha)
        report = evaluation.evaluate(
            state.params, threshold, scenarios, seeds=(cfg.train.seed,), plans=plans
        )
        _write_json(out_dir / f"report_lambda_{value}.json", report.to_dict())
        rows.append((f"cp_weight={value}", report))
        print(f"cp_weight={value}: help={report.help_rate:.3f} verify={report.verification_rate:.3f}")
    table = evaluation.markdown_table(rows)
    (out_dir / "table.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval_ood(args) -> int:
    cfg = _load_config(args)
    params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    cal_entries = encoding.load_dataset(Path(args.data), "cal")
    stream = _stream_seed(args.ood_seed, 0x00D)
    ood_entries = encoding.build_dataset(args.n_ood, "D_prime", stream)
    scenarios, plans = _entries_scenarios(ood_entries)
    threshold = conformal.calibrate(params, cal_entries, cfg.alpha)
    report = evaluation.evaluate(
        params, threshold, scenarios, seeds=(cfg.train.seed,), plans=plans
    )
    out_dir = Path(args.out or cfg.out_dir) / "eval_ood"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", report.to_dict())
    table = evaluation.markdown_table([(f"{cfg.loss.method} (shifted)", report)])
    (out_dir / "table.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_rollout(args) -> int:
    cfg = _load_config(args)
    if not args.uniform and not args.checkpoint:
        raise ConfigError("rollout needs --checkpoint or --uniform")
    if not (args.threshold or args.delta is not None or args.data):
        raise ConfigError("rollout needs one of --threshold, --delta, or --data")
    if args.uniform:
        params = policy.zero_params(FEATURE_DIM, hidden=cfg.train.hidden)
    else:
        params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    if args.threshold:
        threshold = _load_threshold(args.threshold)
    elif args.delta is not None:
        threshold = conformal.Threshold(
            delta=args.delta, alpha=cfg.alpha, calib_size=0, quantile_value=1 - args.delta
        )
    else:
        cal_entries = encoding.load_dataset(Path(args.data), "cal")
        threshold = conformal.calibrate(params, cal_entries, cfg.alpha)
    scenario = sample_scenario(args.scenario_seed, args.tag)
    trace = evaluation.rollout(params, threshold, scenario)
    payload = {
        "v": 1,
        "scenario_id": trace.scenario_id,
        "outcome": trace.outcome,
        "steps_taken": trace.steps_taken,
        "delta": threshold.delta,
        "steps": [
            {
                "t": s.t,
                "prediction_set": list(s.set_actions),
                "help_requested": s.help_requested,
                "executed": s.executed,
                "source": s.source,
                "confidences": list(s.confidences),
            }
            for s in trace.steps
        ],
    }
    print(json.dumps(payload, indent=None if args.compact else 2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import make_app

    cfg = _load_config(args)
    params, _, _, _ = policy.load_checkpoint(args.checkpoint)
    if args.threshold:
        threshold = _load_threshold(args.threshold)
    elif args.data:
        cal_entries = encoding.load_dataset(Path(args.data), "cal")
        threshold = conformal.calibrate(params, cal_entries, cfg.alpha)
    else:
        raise ConfigError("serve needs --threshold or --data")

    counter = {"next": args.session_seed_base}

    def scenario_source(seed):
        if seed is None:
            seed = counter["next"]
            counter["next"] += 1
        return sample_scenario(int(seed), cfg.distribution_tag)

    app = make_app(params, threshold, scenario_source)
    print(f"serving on {args.host}:{args.port} (delta={threshold.delta:.4f})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confplan",
        description="Conformal-prediction-aware grid-world planner: data, training, evaluation, serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, data=False):
        p.add_argument("--config", help="JSON config file (defaults applied otherwise)")
        p.add_argument("--alpha", type=float, help="miscoverage level override")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="policy checkpoint (.npz)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from gen-data")

    p = sub.add_parser("gen-data", help="generate train/cal/val dataset files")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fine-tune a policy")
    common(p, data=True)
    p.add_argument("--method", choices=training.METHODS)
    p.add_argument("--lambda", dest="cp_weight", type=float, help="conformal penalty weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--use-val", action="store_true", help="enable early stopping on the val split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute the conformal threshold for a checkpoint")
    common(p, checkpoint=True, data=True)
    p.add_argument("--prefix", default="cal", help="dataset split to calibrate on")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="closed-loop evaluation with oracle help")
    common(p, checkpoint=True, data=True)
    p.add_argument("--prefix", default="val", help="dataset split to evaluate on")
    p.add_argument("--threshold", help="threshold JSON (otherwise recalibrated from cal split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="recalibrate and evaluate at several coverage levels")
    common(p, checkpoint=True, data=True)
    p.add_argument("--alphas", default="0.15,0.10,0.04")
    p.add_argument("--prefix", default="val")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-lambda", help="train and evaluate at several penalty weights")
    common(p, data=True)
    p.add_argument("--values", default="0.1,0.3,0.5")
    p.add_argument("--prefix", default="val")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("eval-ood", help="calibrate on the main distribution, evaluate on the shifted one")
    common(p, checkpoint=True, data=True)
    p.add_argument("--n-ood", type=int, default=80)
    p.add_argument("--ood-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_ood)

    p = sub.add_parser("rollout", help="single-scenario debug rollout (prints a JSON trace)")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--uniform", action="store_true", help="use the untrained uniform policy")
    p.add_argument("--data", help="dataset directory for calibration")
    p.add_argument("--threshold", help="threshold JSON file")
    p.add_argument("--delta", type=float, help="explicit threshold value")
    p.add_argument("--scenario-seed", type=int, default=0)
    p.add_argument("--tag", default="D", help="scenario distribution tag")
    p.add_argument("--compact", action="store_true")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("serve", help="run the interactive help-console service")
    common(p, checkpoint=True)
    p.add_argument("--data", help="dataset directory for calibration")
    p.add_argument("--threshold", help="threshold JSON file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--session-seed-base", type=int, default=10_000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
