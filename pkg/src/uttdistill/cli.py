"""Command-line entry point: ``uttdistill <command> [options]``.

Every config key is accepted as a flag (``--lr-peak 1e-3``) and overrides the
value from ``--config``. Each command writes into a run directory (default
``<runs-root>/<timestamp>-<command>-<config hash>``) containing ``run.log``
(every effective config value, once), ``run.json`` (inputs with checksums,
config hash, seeds) and the command's outputs. On failure a single line
``uttdistill: error category=<usage|data|numeric> message=...`` goes to
stderr and the exit code is 2, 3 or 4 respectively.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError
from .corpus import CorpusError, load_manifest, synthesize_corpus
from .distill import DistillError, NonFiniteLoss, pretrain
from .model import ModelError
from .pipeline import ABLATION_AXES, ablate, probe_features, render_ablation
from .probe import (FeatureDump, ProbeError, evaluate_report, extract_frozen_features, read_fold_reports,
                    write_fold_reports)
from .seeding import fan_out, sub_seed

log = logging.getLogger("uttdistill")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--run-dir", help="output directory (default: auto-named under --runs-root)")
    common.add_argument("--runs-root", default="runs", help="parent of auto-named run directories")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config keys (override --config)")
    for key in C.all_keys():
        keys.add_argument(_flag(key), dest="cfg_" + key, metavar="V")

    parser = _Parser(prog="uttdistill", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labeled corpus")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="online-distillation pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-resume", action="store_true", help="ignore an existing latest.ckpt in the run dir")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("extract", parents=[common], help="dump frozen features from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("probe", parents=[common], help="train probe heads per CV fold")
    p.add_argument("--features", required=True, help="feature dump directory")
    p.add_argument("--manifest", required=True, help="manifest with speaker/session metadata")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("evaluate", parents=[common], help="aggregate fold reports into a metrics table")
    p.add_argument("--folds", required=True, nargs="+", help="folds.tsv files written by probe")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation axis end to end")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--manifest", help="corpus to use (default: synthesize one from the config)")
    p.set_defaults(handler=cmd_ablate)
    return parser


# ---------------------------------------------------------------------------
# run bookkeeping


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, args, cfg: dict, inputs: dict[str, str]):
        self.cfg = cfg
        chash = C.config_hash(cfg)
        if args.run_dir:
            self.dir = Path(args.run_dir)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.dir = Path(args.runs_root) / f"{stamp}-{args.command}-{chash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(self.dir / "run.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler
        log.info("command %s", args.command)
        for key in C.all_keys():
            log.info("config %s = %s", key, C.format_value(cfg[key]))
        (self.dir / "config.txt").write_text(C.render(cfg))
        record = {
            "command": args.command,
            "argv": sys.argv[1:],
            "config_hash": chash,
            "seed": cfg["seed"],
            "sub_seeds": fan_out(cfg["seed"]),
            "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p)) if Path(p).is_file() else None}
                       for name, p in inputs.items()},
        }
        (self.dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")

    def close(self):
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, run: Run):
    cfg = run.cfg
    manifest = synthesize_corpus(cfg["n_utts"], cfg["n_classes"], cfg["n_speakers"], sub_seed(cfg["seed"], "data"),
                                 run.dir / "corpus")
    return {"manifest": manifest}


def cmd_pretrain(args, run: Run):
    final = pretrain(args.manifest, C.model_config(run.cfg), C.train_config(run.cfg), run.dir,
                     resume=not args.no_resume)
    return {"checkpoint": final, "loss_log": run.dir / "loss_log.tsv"}


def cmd_extract(args, run: Run):
    features = extract_frozen_features(args.checkpoint, args.manifest, run.cfg["layer_agg"])
    return {"features": features.save(run.dir / "features")}


def cmd_probe(args, run: Run):
    features = FeatureDump.load(args.features)
    reports = probe_features(features, load_manifest(args.manifest), run.cfg)
    return {"folds": write_fold_reports(reports, run.dir / "folds.tsv")}


def cmd_evaluate(args, run: Run):
    reports = [r for path in args.folds for r in read_fold_reports(path)]
    table = evaluate_report(reports)
    (run.dir / "metrics.tsv").write_text(table.render_tsv())
    (run.dir / "metrics.txt").write_text(table.render_text())
    print(table.render_text(), end="")
    return {"metrics": run.dir / "metrics.tsv"}


def cmd_ablate(args, run: Run):
    cfg = run.cfg
    manifest = args.manifest
    if manifest is None:
        manifest = synthesize_corpus(cfg["n_utts"], cfg["n_classes"], cfg["n_speakers"],
                                     sub_seed(cfg["seed"], "data"), run.dir / "corpus")
    results = ablate(manifest, cfg, args.axis, run.dir)
    tsv, text = render_ablation(args.axis, results)
    (run.dir / "ablation.tsv").write_text(tsv)
    (run.dir / "ablation.txt").write_text(text)
    print(text, end="")
    return {"table": run.dir / "ablation.tsv"}


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"uttdistill: error category={category} message={message}", file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        parser.print_help()
        return 0
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        cfg = C.load_config(args.config, overrides)
        C.model_config(cfg), C.train_config(cfg)
    except SystemExit as exc:  # --help inside a subcommand
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (C.ConfigError, ModelError, DistillError) as exc:
        return _fail("usage", exc, EXIT_USAGE)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    logging.getLogger("uttdistill").setLevel(logging.INFO)
    inputs = {k: getattr(args, k) for k in ("config", "manifest", "checkpoint") if getattr(args, k, None)}
    run_ = Run(args, cfg, inputs)
    try:
        outputs = args.handler(args, run_)
    except NonFiniteLoss as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except FloatingPointError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except (CorpusError, ProbeError, CheckpointError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (C.ConfigError, ModelError, DistillError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    finally:
        run_.close()
    print(f"run_dir={run_.dir}")
    for name, path in outputs.items():
        print(f"{name}={path}")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
