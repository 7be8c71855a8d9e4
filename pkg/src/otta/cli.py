"""Command-line front end.

Subcommands: gen (write a synthetic scenario to an embedding file), adapt
(run one adaptation stream), sweep (grid evaluation with CSV/markdown
reports), inspect (describe an embedding file). Exactly one machine-parsable
key=value summary line goes to stdout; progress and diagnostics go to stderr.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import adapt, data, experiments, prototypes
from .errors import InvalidConfig, InvalidSpec, OttaError

_PRESETS = {
    "default": data.SyntheticShiftSpec(),
    # Skewed class frequencies on top of the default shift; the shift keeps
    # predictions uncertain enough for unbalanced objectives to drift.
    "stress": data.SyntheticShiftSpec(dominant_share=0.7),
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic", default="default", choices=sorted(_PRESETS),
                   help="scenario preset")
    p.add_argument("--dim", type=int, default=None, help="input/embedding dimension")
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--templates", type=int, default=None, help="number of templates")
    p.add_argument("--n-per-class", type=int, default=None)
    p.add_argument("--template-jitter", type=float, default=None)
    p.add_argument("--sample-noise", type=float, default=None)
    p.add_argument("--shift", default=None, choices=data.SHIFT_KINDS, help="shift kind")
    p.add_argument("--severity", type=float, default=None, help="shift severity in [0, 1]")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, default=0.7, help="entropy weight")
    p.add_argument("--sinkhorn-iters", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--tau", type=float, default=0.01, help="softmax temperature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stabilization", default="shifted",
                   choices=("plain", "shifted", "log_domain"))
    p.add_argument("--nan-policy", default="error",
                   choices=("error", "fallback_log_domain"))


def _scenario_from_args(args) -> data.SyntheticShiftSpec:
    spec = _PRESETS[args.synthetic]
    overrides = {}
    mapping = {
        "dim": "d",
        "classes": "n_classes",
        "templates": "n_templates",
        "n_per_class": "n_per_class",
        "template_jitter": "template_jitter",
        "sample_noise": "sample_noise",
        "shift": "shift_kind",
        "severity": "severity",
    }
    for flag, field_name in mapping.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    if hasattr(args, "seed"):
        overrides["seed"] = args.seed
    return replace(spec, **overrides)


def _config_from_args(args, variant: str) -> adapt.AdaptConfig:
    return adapt.AdaptConfig(
        epsilon=args.epsilon,
        sinkhorn_iters=args.sinkhorn_iters,
        lr=args.lr,
        batch_size=args.batch_size,
        tau=args.tau,
        seed=args.seed,
        variant=variant,
        stabilization=args.stabilization,
        nan_policy=args.nan_policy,
    )


def _summary(pairs) -> None:
    print(" ".join(f"{k}={v}" for k, v in pairs))


def _fmt_float(x: float) -> str:
    return format(float(x), ".4f")


def _cmd_gen(args) -> int:
    spec = _scenario_from_args(args)
    scenario = data.generate_synthetic(spec, batch_size=args.batch_size)
    z, labels = data.embed_scenario(scenario)
    data.write_embedding_file(
        args.out, z, prototypes_raw=scenario.bank.per_template, labels=labels
    )
    _log(f"wrote {os.path.getsize(args.out)} bytes to {args.out}")
    _summary(
        [
            ("status", "ok"),
            ("command", "gen"),
            ("path", args.out),
            ("dim", spec.d),
            ("n_items", z.shape[1]),
            ("classes", spec.n_classes),
            ("templates", spec.n_templates),
        ]
    )
    return 0


def _batches_from_file(path, batch_size):
    bank, items, labels = data.read_embedding_file(path)
    if bank is None:
        raise InvalidConfig(f"{path} carries no prototype block; adaptation needs one")
    n = items.shape[1]
    batches = []
    for i in range(0, n - batch_size + 1, batch_size):
        lab = labels[i : i + batch_size] if labels is not None else None
        batches.append((items[:, i : i + batch_size], lab))
    if not batches:
        batches = [(items, labels)]
    return bank, batches


def _cmd_adapt(args) -> int:
    cfg = _config_from_args(args, args.variant)
    if args.epochs < 1:
        raise InvalidConfig(f"--epochs must be >= 1, got {args.epochs}")
    if args.input is not None:
        if args.variant not in adapt.EMBEDDED_VARIANTS:
            raise InvalidConfig(
                f"--input streams support variants {adapt.EMBEDDED_VARIANTS}; "
                f"{args.variant!r} adapts the encoder and needs --synthetic"
            )
        bank, batches = _batches_from_file(args.input, cfg.batch_size)
        if args.batches is not None:
            batches = batches[: args.batches]
        _log(f"adapting {len(batches)} file batches from {args.input}")
        stream = adapt.run_stream_embedded(bank, batches, cfg)
        n_templates = bank.n_templates
    else:
        spec = _scenario_from_args(args)
        scenario = data.generate_synthetic(spec, batch_size=cfg.batch_size)
        batches = scenario.batches
        if args.batches is not None:
            batches = batches[: args.batches]
        _log(
            f"adapting {len(batches)} synthetic batches "
            f"(shift={spec.shift_kind}, severity={spec.severity})"
        )
        state = adapt.fresh_state(scenario.encoder)
        for _ in range(args.epochs):
            stream = adapt.run_stream(state, scenario.bank, batches, cfg)
            state = stream.final_state
        n_templates = scenario.bank.n_templates
    n_samples = sum(len(r.hard_labels) for r in stream.batch_results)
    _log(f"stream wall time {stream.wall_time:.3f}s")
    _summary(
        [
            ("status", "ok"),
            ("command", "adapt"),
            ("variant", cfg.variant),
            ("epsilon", cfg.epsilon),
            ("templates", n_templates),
            ("batches", len(stream.batch_results)),
            ("samples", n_samples),
            ("seed", cfg.seed),
            ("accuracy", _fmt_float(stream.accuracy)),
            ("collapse", _fmt_float(stream.collapse_metric)),
        ]
    )
    return 0


def _parse_list(text: str, cast, flag: str):
    try:
        values = tuple(cast(part) for part in text.split(",") if part != "")
    except ValueError:
        raise InvalidConfig(f"{flag} expects a comma-separated list, got {text!r}")
    if not values:
        raise InvalidConfig(f"{flag} expects at least one value, got {text!r}")
    return values


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args, adapt.VARIANT_ZERO_SHOT)
    for variant in _parse_list(args.variants, str, "--variants"):
        if variant not in adapt.VARIANTS:
            raise InvalidConfig(f"--variants: unknown variant {variant!r}")
    grid = experiments.ExperimentGrid(
        variants=_parse_list(args.variants, str, "--variants"),
        epsilons=_parse_list(args.epsilons, float, "--epsilons"),
        template_counts=_parse_list(args.template_counts, int, "--template-counts"),
        severities=_parse_list(args.severities, float, "--severities"),
        seeds=_parse_list(args.seeds, int, "--seeds"),
        scenario=_scenario_from_args(args),
    )
    _log(f"running {grid.size} grid cells x {len(grid.seeds)} seeds (jobs={args.jobs})")
    rows = experiments.run_grid(grid, cfg=cfg, jobs=args.jobs, epochs=args.epochs)
    experiments.write_report(rows, args.out_csv, args.out_md, include_timing=args.timing)
    n_err = sum(1 for r in rows if r.error)
    if n_err:
        _log(f"{n_err} cells recorded errors")
    _summary(
        [
            ("status", "ok"),
            ("command", "sweep"),
            ("cells", grid.size),
            ("errors", n_err),
            ("csv", args.out_csv),
            ("md", args.out_md),
        ]
    )
    return 0


def _cmd_inspect(args) -> int:
    raw = data.read_embedding_file_raw(args.file)
    norms = np.linalg.norm(raw.items, axis=0)
    _log(
        f"item norms: min {norms.min():.6f} max {norms.max():.6f} "
        f"(unit-normalized embeddings expected)"
    )
    _summary(
        [
            ("status", "ok"),
            ("command", "inspect"),
            ("path", args.file),
            ("dim", raw.d),
            ("n_items", raw.n_items),
            ("classes", raw.n_classes),
            ("templates", raw.n_templates),
            ("prototypes", "yes" if raw.prototypes is not None else "no"),
            ("labels", "yes" if raw.labels is not None else "no"),
        ]
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="otta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="write a synthetic scenario to an embedding file")
    _add_scenario_flags(p_gen)
    p_gen.add_argument("--batch-size", type=int, default=128)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output file path")
    p_gen.set_defaults(func=_cmd_gen)

    p_adapt = sub.add_parser("adapt", help="run one adaptation stream")
    p_adapt.add_argument("--variant", default=adapt.VARIANT_PER_TEMPLATE,
                         choices=adapt.VARIANTS)
    _add_config_flags(p_adapt)
    _add_scenario_flags(p_adapt)
    p_adapt.add_argument("--input", default=None,
                         help="embedding file to stream instead of a synthetic scenario")
    p_adapt.add_argument("--batches", type=int, default=None,
                         help="cap on the number of batches")
    p_adapt.add_argument("--epochs", type=int, default=1,
                         help="passes over the stream; reports the final pass")
    p_adapt.set_defaults(func=_cmd_adapt)

    p_sweep = sub.add_parser("sweep", help="grid evaluation with reports")
    p_sweep.add_argument("--variants", default="zero_shot,training_free,avg_template,per_template")
    p_sweep.add_argument("--epsilons", default="0.7")
    p_sweep.add_argument("--template-counts", default="8")
    p_sweep.add_argument("--severities", default="0.6")
    p_sweep.add_argument("--seeds", default="0,1,2")
    p_sweep.add_argument("--out-csv", default="sweep.csv")
    p_sweep.add_argument("--out-md", default="sweep.md")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--timing", action="store_true",
                         help="include wall-time columns (breaks byte reproducibility)")
    p_sweep.add_argument("--epochs", type=int, default=1,
                         help="passes over the stream; reports the final pass")
    _add_config_flags(p_sweep)
    _add_scenario_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_inspect = sub.add_parser("inspect", help="describe an embedding file")
    p_inspect.add_argument("file")
    p_inspect.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InvalidConfig, InvalidSpec) as err:
        print(f"otta: usage error: {err}", file=sys.stderr)
        return 1
    except OttaError as err:
        print(f"otta: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"otta: error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
