"""pretrain -> extract -> probe -> report, shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import config as C
from .corpus import Manifest, load_manifest
from .distill import pretrain
from .probe import (AggregateTable, FeatureDump, MetricsReport, evaluate_report, extract_frozen_features,
                    make_split, read_fold_reports, train_probe, write_fold_reports)
from .seeding import sub_seed

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "loss_combination": [
        ("utt-only", {"use_frame_loss": False, "alpha": 1.0}),
        ("frm-only", {"use_frame_loss": True, "alpha": 0.0}),
        ("utt+frm", {"use_frame_loss": True, "alpha": 1.0}),
    ],
    "utt_variant": [
        ("Token", {"utt_variant": "token"}),
        ("Chunk", {"utt_variant": "chunk"}),
        ("Global", {"utt_variant": "global"}),
    ],
    "alpha": [
        ("0", {"alpha": 0.0}),
        ("0.1", {"alpha": 0.1}),
        ("1", {"alpha": 1.0}),
        ("10", {"alpha": 10.0}),
    ],
}


def probe_features(features: FeatureDump, records, cfg: dict) -> list[MetricsReport]:
    split = make_split(records, cfg["split_scheme"], cfg["split_k"], seed=sub_seed(cfg["seed"], "probe"))
    pc = C.probe_config(cfg, seed=sub_seed(cfg["seed"], "probe"))
    return train_probe(features, split, pc.head, pc.hidden, epochs=pc.epochs, patience=pc.patience, lr=pc.lr,
                       batch_size=pc.batch_size, seed=pc.seed, same_fold_eval=pc.same_fold_eval)


@dataclass
class ArmResult:
    name: str
    table: AggregateTable
    checkpoint: Path
    init_checkpoint: Path


def run_arm(name: str, manifest: str | Path | Manifest, cfg: dict, out_dir: str | Path,
            checkpoint: str = "final") -> ArmResult:
    """Pre-train with ``cfg``, then probe the ``final`` (or ``init``) checkpoint.

    A finished arm (``folds-<checkpoint>.tsv`` present) is read back instead of
    re-run; ``out_dir`` must therefore be specific to ``cfg``.
    """
    out_dir = Path(out_dir)
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    folds_path = out_dir / f"folds-{checkpoint}.tsv"
    final = out_dir / "final.ckpt"
    if not (folds_path.is_file() and final.is_file()):
        final = pretrain(records, C.model_config(cfg), C.train_config(cfg), out_dir)
        ckpt = final if checkpoint == "final" else out_dir / "init.ckpt"
        features = extract_frozen_features(ckpt, records, cfg["layer_agg"])
        write_fold_reports(probe_features(features, records, cfg), folds_path)
    table = evaluate_report(read_fold_reports(folds_path))
    (out_dir / f"metrics-{checkpoint}.tsv").write_text(table.render_tsv())
    log.info("%s: WA %.2f UA %.2f WF1 %.2f", name, table.mean["wa"], table.mean["ua"], table.mean["wf1"])
    return ArmResult(name, table, final, out_dir / "init.ckpt")


def arm_dir(root: str | Path, cfg: dict) -> Path:
    """Arms with equal effective config share one directory (and one run)."""
    return Path(root) / f"arm-{C.config_hash(cfg)}"


def ablate(manifest: str | Path | Manifest, cfg: dict, axis: str, out_dir: str | Path) -> list[ArmResult]:
    if axis not in ABLATION_AXES:
        raise C.ConfigError(f"axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    results = []
    for name, values in ABLATION_AXES[axis]:
        arm_cfg = C.with_values(cfg, **values)
        results.append(run_arm(name, manifest, arm_cfg, arm_dir(out_dir, arm_cfg)))
    return results


def render_ablation(axis: str, results: list[ArmResult]) -> tuple[str, str]:
    tsv = [f"# ablation axis={axis}; fold means with population std", "arm\twa\tua\twf1\twa_std"]
    text = [f"ablation: {axis}", f"{'arm':<10}{'WA(%)':>9}{'UA(%)':>9}{'WF1(%)':>9}{'+/-WA':>8}"]
    for r in results:
        m, s = r.table.mean, r.table.std
        tsv.append(f"{r.name}\t{m['wa']:.4f}\t{m['ua']:.4f}\t{m['wf1']:.4f}\t{s['wa']:.4f}")
        text.append(f"{r.name:<10}{m['wa']:>9.2f}{m['ua']:>9.2f}{m['wf1']:>9.2f}{s['wa']:>8.2f}")
    return "\n".join(tsv) + "\n", "\n".join(text) + "\n"
