"""Command-line entry points: synth, run, serve, explain."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import synth
from .pipeline import RunConfig, run
from .records import write_jsonl

_PRESETS = {
    "null": synth.null_effect_preset,
    "measured-confounding": synth.measured_confounding_preset,
    "unmeasured-confounding": synth.unmeasured_confounding_preset,
    "subgroup-benefit": synth.subgroup_benefit_preset,
}


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = synth.SynthConfig.from_json_dict(json.load(fh))
    else:
        config = _PRESETS[args.preset](n=args.n, seed=args.seed)
    cohort = synth.generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(cohort.records, out / "cohort.jsonl")
    cohort.truth.to_json(out / "ground_truth.json")
    with open(out / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json_dict(), fh, sort_keys=True, indent=2)
    print(f"wrote {len(cohort.records)} admissions to {out / 'cohort.jsonl'}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.from_json(args.config)
    overrides = {}
    if args.input:
        overrides["input_paths"] = tuple(args.input)
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    report = run(config)
    if config.output_dir:
        print(f"report written to {Path(config.output_dir) / 'report.json'}")
    else:
        print(report.to_json())
    failed = [d for d, r in report.drugs.items() if r.failed]
    if failed:
        print(f"failed drugs: {', '.join(sorted(failed))}", file=sys.stderr)
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.bundles)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _cmd_explain(args: argparse.Namespace) -> int:
    from .explain import force_data, tree_shap
    from .teml import load_te_model

    model = load_te_model(args.bundle)
    if args.features:
        with open(args.features, "r", encoding="utf-8") as fh:
            features = json.load(fh)
    else:
        features = json.loads(args.json)
    explanation = tree_shap(model.ensemble, features)
    payload = explanation.to_json_dict()
    payload["force"] = force_data(explanation).to_json_dict()
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="txeffect",
        description="treatment-effect analysis pipeline for admission cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort")
    p_synth.add_argument("--preset", choices=sorted(_PRESETS), default="null")
    p_synth.add_argument("--config", help="full synthetic-cohort config (JSON)")
    p_synth.add_argument("--n", type=int, default=1000)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_run = sub.add_parser("run", help="run the full analysis pipeline")
    p_run.add_argument("--config", required=True, help="run config (JSON)")
    p_run.add_argument("--input", action="append", help="cohort file override")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--seed", type=int, help="seed override")
    p_run.set_defaults(func=_cmd_run)

    p_serve = sub.add_parser("serve", help="serve fitted model bundles over HTTP")
    p_serve.add_argument("--bundles", required=True, help="bundle directory")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=_cmd_serve)

    p_explain = sub.add_parser("explain", help="explain one prediction")
    p_explain.add_argument("--bundle", required=True, help="model bundle file")
    group = p_explain.add_mutually_exclusive_group(required=True)
    group.add_argument("--features", help="JSON file of feature values")
    group.add_argument("--json", help="inline JSON feature object")
    p_explain.set_defaults(func=_cmd_explain)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
