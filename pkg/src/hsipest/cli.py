"""Command-line entry point: ``hsipest <command> [options]``.

Exit codes are 0 on success, 1 for user errors (bad arguments, bad
configuration, missing inputs) and 2 for anything unexpected. Errors are
reported as a single ``hsipest: error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline, softplsda
from .hypercube import STANDARD_WAVELENGTHS, BandSet

log = logging.getLogger("hsipest")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to the user-error path
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="TOML", help="run configuration file")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--corpus-dir", help="corpus directory (overrides the config)")
    p.add_argument("--out-dir", help="output directory (overrides the config)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hsipest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hsipest {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _add_common(p)
        return p

    cmd("synth", "generate the synthetic corpus")
    cmd("mask", "dark-background and PCA masks for every cube")
    cmd("sample", "representative spectra table")
    p = cmd("train", "train a model")
    p.add_argument("kind", choices=("plsda", "splsda", "unet"))
    p.add_argument("--bands", help="U-Net bands: full, selection1, selection2, model or a file")
    p = cmd("bands", "print or export a band set")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=("selection1", "selection2"))
    g.add_argument("--model", help="sparse Soft PLS-DA model JSON")
    p.add_argument("--output", help="write index,wavelength CSV here")
    p = cmd("predict", "prediction images for cubes")
    p.add_argument("model")
    p.add_argument("cubes", nargs="*", help="cube paths (default: test-group cubes)")
    p = cmd("evaluate", "pixel or object report over prediction directories")
    p.add_argument("level", choices=("pixel", "object"))
    p.add_argument("--predictions", nargs="+", help="prediction directories")
    p.add_argument("--truth-dir", help="directory of ground-truth PGMs")
    cmd("repro", "synthetic corpus to reports in one run")
    return parser


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True, default=str))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def _bands(args, cfg) -> None:
    if args.preset:
        bs = (softplsda.selection_1 if args.preset == "selection1"
              else softplsda.selection_2)(STANDARD_WAVELENGTHS)
        wl = STANDARD_WAVELENGTHS
    else:
        path = Path(args.model)
        if not path.is_file():
            raise FileNotFoundError(f"model not found: {path}")
        model = softplsda.load_model(path)
        bs = softplsda.selected_bands(model)
        wl = model.pls.wavelengths if model.pls.wavelengths is not None else range(model.pls.n_bands)
    if args.output:
        pipeline.write_bands(bs, wl, args.output)
    intervals = BandSet(bs.indices).describe(wl) if len(wl) else []
    _emit(args, {"n_bands": len(bs), "indices": list(bs.indices), "intervals": intervals},
          f"{len(bs)} bands: " + " ".join(map(str, bs.indices)))


def _report(args, rep) -> None:
    _emit(args, {"records": rep.to_records()}, rep.to_text())


def run(args) -> None:
    cfg = pipeline.load_config(args.config, seed=args.seed, corpus_dir=args.corpus_dir,
                               out_dir=args.out_dir)
    c = args.command
    if c == "synth":
        paths = pipeline.run_synth(cfg)
        _emit(args, {"cubes": [str(p) for p in paths]}, f"wrote {len(paths)} cubes to {cfg.corpus}")
    elif c == "mask":
        paths = pipeline.run_mask(cfg)
        _emit(args, {"masks": [str(p) for p in paths]}, f"wrote {len(paths)} masks")
    elif c == "sample":
        p = pipeline.run_sample(cfg)
        _emit(args, {"table": str(p)}, f"wrote {p}")
    elif c == "train":
        if args.bands and args.kind != "unet":
            raise UsageError("--bands applies to `train unet` only")
        if args.kind == "unet":
            p = pipeline.run_train_unet(cfg, args.bands)
        else:
            p = pipeline.run_train_plsda(cfg, sparse=args.kind == "splsda")
        _emit(args, {"model": str(p)}, f"wrote {p}")
    elif c == "bands":
        _bands(args, cfg)
    elif c == "predict":
        d = pipeline.run_predict(cfg, args.model, args.cubes or None)
        _emit(args, {"predictions": str(d)}, f"wrote predictions to {d}")
    elif c == "evaluate":
        rep = pipeline.run_evaluate(cfg, args.level, args.predictions, args.truth_dir)
        _report(args, rep)
    elif c == "repro":
        out = pipeline.repro(cfg)
        if args.json:
            _emit(args, {"pixel": out["pixel_report"].to_records(),
                         "object": out["object_report"].to_records()}, "")
        else:
            print(out["pixel_report"].to_text() + "\n" + out["object_report"].to_text(), end="")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
            format="%(levelname)s %(name)s: %(message)s")
        run(args)
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"hsipest: error: {_one_line(e)}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        print("hsipest: error: interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic
        print(f"hsipest: error: internal: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        if logging.getLogger().isEnabledFor(logging.DEBUG):
            raise
        return EXIT_INTERNAL
    return EXIT_OK


def _one_line(e: BaseException) -> str:
    return " ".join(str(e).split()) or type(e).__name__


if __name__ == "__main__":
    sys.exit(main())
