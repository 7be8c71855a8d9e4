"""Command line front end for the exporter.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures
such as a missing model stack or dataset cache.
"""

from __future__ import annotations

import argparse
import sys

from . import providers, templates
from .errors import ExportError
from .export import ExportSpec, export


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-clip",
        description="Export text prototypes and image embeddings to an OTEB file.",
    )
    parser.add_argument("--out", required=True, help="output file path")
    parser.add_argument("--dataset", default="cifar10-test", help="dataset id")
    parser.add_argument("--model", default="ViT-B-32", help="model id")
    parser.add_argument("--pretrained", default="openai", help="weight tag for the model")
    parser.add_argument("--device", default="cpu", help="device hint for the backend")
    parser.add_argument(
        "--provider",
        choices=("clip", "fake"),
        default="clip",
        help="embedding backend; fake is a deterministic numpy stand-in",
    )
    parser.add_argument(
        "--template",
        action="append",
        default=None,
        metavar="TEXT",
        help="prompt template with one {} slot; repeat to add more (default: builtin set)",
    )
    parser.add_argument("--fake-dim", type=int, default=32, help="fake provider feature size")
    parser.add_argument(
        "--fake-per-class", type=int, default=50, help="fake provider items per class"
    )
    parser.add_argument(
        "--fake-noise", type=float, default=0.1, help="fake provider cluster spread"
    )
    parser.add_argument("--fake-seed", type=int, default=0, help="fake provider seed")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1

    if args.provider == "fake":
        try:
            provider = providers.FakeClipProvider(
                dim=args.fake_dim,
                n_per_class=args.fake_per_class,
                noise=args.fake_noise,
                seed=args.fake_seed,
            )
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    else:
        provider = providers.ClipProvider(model=args.model, pretrained=args.pretrained)

    tpl = tuple(args.template) if args.template else templates.DEFAULT_TEMPLATES
    try:
        spec = ExportSpec(
            dataset=args.dataset, model=args.model, templates=tpl, device=args.device
        )
    except (ExportError, templates.InvalidTemplate) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        result = export(spec, provider, args.out)
    except ExportError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    print(
        f"wrote={result.path} bytes={result.bytes_written} dim={result.dim} "
        f"items={result.n_items} classes={result.n_classes} "
        f"templates={result.n_templates}"
    )
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
