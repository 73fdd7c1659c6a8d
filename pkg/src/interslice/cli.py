"""Command line entry point: ``interslice <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage or validation error and 2 on a
runtime failure.
"""
import argparse
import logging
import os
import sys

from . import pipeline
from .config import apply_overrides, load_config, make_config
from .errors import ConfigError

logger = logging.getLogger("interslice")

SUBCOMMANDS = ("gen-phantom", "import-raw", "train-classifier", "train-synth", "synth", "augment", "train-seg",
               "eval", "compare", "sweep-t", "grad-check")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--profile", choices=("paper", "desk"), help="hyperparameter profile (default desk)")
    p.add_argument("--variant", choices=("normal", "dis", "dis-att", "dis_att"))
    p.add_argument("--t-count", type=int, metavar="N", help="slices synthesized per consecutive pair")
    p.add_argument("--methods", metavar="LIST", help="comma-separated segmentation methods")
    p.add_argument("--resume", action="store_true", help="skip stages whose recorded outputs are current")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = Parser(prog="interslice", description="Inter-slice synthesis for segmentation data augmentation")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=Parser)
    helps = {
        "gen-phantom": "write a phantom benchmark and its manifest",
        "import-raw": "convert a directory of raw f32 slices to an ISAV1 volume",
        "train-classifier": "train the attention classifier",
        "train-synth": "train the slice synthesis network",
        "synth": "synthesize intermediate slices and labels",
        "augment": "write a classically augmented training set",
        "train-seg": "train a U-Net segmenter for one method",
        "eval": "evaluate a trained segmenter on the test volumes",
        "compare": "method x training-set-size Dice table",
        "sweep-t": "Dice as a function of slices inserted per pair",
        "grad-check": "finite-difference gradient suite",
    }
    cmds = {}
    for name in SUBCOMMANDS:
        cmds[name] = p = sub.add_parser(name, help=helps[name])
        _common(p)
    cmds["import-raw"].add_argument("--input", required=True, metavar="DIR")
    cmds["import-raw"].add_argument("--height", type=int, required=True)
    cmds["import-raw"].add_argument("--width", type=int, required=True)
    cmds["import-raw"].add_argument("--xy-spacing", type=float, default=1.0)
    cmds["import-raw"].add_argument("--inter-slice", type=float, default=1.0)
    cmds["synth"].add_argument("--input", nargs=2, metavar=("IMAGE", "LABEL"),
                               help="ISAV1 image and ISLB1 label (default: thick training volumes)")
    cmds["augment"].add_argument("--method", required=True, choices=("rotation", "scaling", "gamma", "elastic"))
    for name in ("train-seg", "eval"):
        cmds[name].add_argument("--method", default="normal")
    return parser


def resolve_config(args):
    if args.config:
        cfg = load_config(args.config, profile=args.profile)
    else:
        cfg = make_config(args.profile or "desk")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.variant:
        overrides["variant"] = args.variant
    if args.t_count is not None:
        overrides["t_count"] = args.t_count
    if args.methods:
        overrides["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    return apply_overrides(cfg, overrides).validate()


def run(args):
    cfg = resolve_config(args)
    ws = pipeline.Workspace(cfg.out, cfg, resume=args.resume)
    pipeline.write_config(ws)
    cmd = args.command
    if cmd == "gen-phantom":
        print(pipeline.stage_phantoms(ws))
    elif cmd == "import-raw":
        from .volume import import_raw_slices, store_volume
        if not os.path.isdir(args.input):
            raise ConfigError(f"input directory {args.input} not found")
        vol = import_raw_slices(args.input, args.height, args.width, args.xy_spacing, args.inter_slice)
        path = ws.path(f"{vol.patient_id}.isav")
        store_volume(path, vol)
        ws.record("import-raw", ws.stage_key("import-raw", [args.input]), [path])
        print(path)
    elif cmd == "train-classifier":
        print(pipeline.stage_classifier(ws))
    elif cmd == "train-synth":
        print(pipeline.stage_synth(ws)[0])
    elif cmd == "synth":
        if args.input:
            for p in args.input:
                if not os.path.exists(p):
                    raise ConfigError(f"input {p} not found")
        paths = pipeline.stage_synthesize(ws, args.input)
        print(f"{len(paths) // 2} slices written under {ws.dir('synth')}")
    elif cmd == "augment":
        paths = pipeline.stage_augment(ws, args.method)
        print(paths[-1])
    elif cmd in ("train-seg", "eval"):
        pipeline.check_method(args.method)
        for seed in cfg.seeds[:1]:
            if cmd == "train-seg":
                print(pipeline.stage_train_seg(ws, args.method, seed))
            else:
                path = pipeline.stage_eval(ws, args.method, seed)
                with open(path, encoding="utf-8") as fh:
                    sys.stdout.write(fh.read())
    elif cmd == "compare":
        long_csv, table_csv, _ = pipeline.stage_compare(ws)
        with open(table_csv, encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    elif cmd == "sweep-t":
        (csv,) = pipeline.stage_sweep(ws)
        with open(csv, encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    elif cmd == "grad-check":
        return pipeline.stage_grad_check(ws)
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"interslice: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValueError as exc:  # configuration and contract violations
        print(f"interslice: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        logger.debug("failure", exc_info=True)
        print(f"interslice: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
