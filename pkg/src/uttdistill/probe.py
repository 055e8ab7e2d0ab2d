"""Frozen-upstream evaluation: feature dumps, CV splits, probe heads and WA/UA/WF1."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Manifest, UtteranceRecord, WaveformCache, load_manifest
from .distill import load_checkpoint
from .model import DistillNet

log = logging.getLogger(__name__)

LAYER_AGGS = ("last", "top_k_mean", "last4_mean")
SCHEMES = ("session_5fold", "speaker_10fold", "random_k_fold")
HEADS = ("linear", "gru")
FEATURE_DUMP_VERSION = 1


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureDump:
    ids: list[str]
    frames: dict[str, np.ndarray]
    labels: dict[str, str | None]
    layer_agg: str
    source: str = ""
    label_set: list[str] = field(default_factory=list)

    def pooled(self, uid: str) -> np.ndarray:
        return self.frames[uid].mean(axis=0)

    def pooled_matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.pooled(i) for i in ids])

    def save(self, out_dir: str | Path) -> Path:
        """One ``<id>.npy`` per utterance plus ``index.tsv`` and ``meta.json``."""
        out_dir = Path(out_dir)
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        rows = ["id\tfile\tn_frames\tdim\tlabel"]
        for uid in self.ids:
            arr = self.frames[uid].astype("<f4")
            np.save(out_dir / "frames" / f"{uid}.npy", arr)
            label = self.labels.get(uid) or "-"
            rows.append(f"{uid}\tframes/{uid}.npy\t{arr.shape[0]}\t{arr.shape[1]}\t{label}")
        (out_dir / "index.tsv").write_text("\n".join(rows) + "\n")
        meta = {"version": FEATURE_DUMP_VERSION, "layer_agg": self.layer_agg, "source": self.source,
                "label_set": self.label_set}
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        return out_dir

    @classmethod
    def load(cls, in_dir: str | Path) -> "FeatureDump":
        in_dir = Path(in_dir)
        meta = json.loads((in_dir / "meta.json").read_text())
        if meta.get("version") != FEATURE_DUMP_VERSION:
            raise ProbeError(f"{in_dir}: unsupported feature dump version {meta.get('version')}")
        ids, frames, labels = [], {}, {}
        for line in (in_dir / "index.tsv").read_text().splitlines()[1:]:
            uid, fname, _, _, label = line.split("\t")
            ids.append(uid)
            frames[uid] = np.load(in_dir / fname)
            labels[uid] = None if label == "-" else label
        return cls(ids, frames, labels, meta["layer_agg"], meta["source"], meta["label_set"])


def aggregate_layers(layers: Sequence[torch.Tensor], layer_agg: str, top_k: int) -> torch.Tensor:
    if layer_agg == "last":
        return layers[-1]
    if layer_agg == "top_k_mean":
        return torch.stack(list(layers[-top_k:])).mean(dim=0)
    if layer_agg == "last4_mean":
        return torch.stack(list(layers[-4:])).mean(dim=0)
    raise ProbeError(f"layer_agg must be one of {LAYER_AGGS}, got {layer_agg!r}")


@torch.no_grad()
def features_from_net(net: DistillNet, records: Sequence[UtteranceRecord], layer_agg: str = "last",
                      source: str = "", load=None) -> FeatureDump:
    load = load or WaveformCache()
    net.eval()
    frames, labels = {}, {}
    for r in records:
        layers = net.layer_features(load(r))
        frames[r.id] = aggregate_layers(layers, layer_agg, net.cfg.top_k).float().numpy()
        labels[r.id] = r.label
    label_set = list(getattr(records, "labels", sorted({r.label for r in records if r.label})))
    return FeatureDump([r.id for r in records], frames, labels, layer_agg, source, label_set)


def extract_frozen_features(checkpoint: str | Path, manifest: str | Path | Manifest,
                            layer_agg: str = "last") -> FeatureDump:
    """Student network from ``checkpoint``, no mask, no utterance tokens."""
    if layer_agg not in LAYER_AGGS:
        raise ProbeError(f"layer_agg must be one of {LAYER_AGGS}, got {layer_agg!r}")
    state = load_checkpoint(checkpoint)
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    return features_from_net(state.student, records, layer_agg, source=str(checkpoint))


# ---------------------------------------------------------------------------
# splits


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class SplitPlan:
    folds: list[Fold]
    scheme: str
    seed: int


def make_split(records: Sequence[UtteranceRecord], scheme: str, k: int | None = None, seed: int = 0,
               val_frac: float = 0.2) -> SplitPlan:
    """Cross-validation folds.

    ``session_5fold``: each session is one test fold, validation is a random
    ``val_frac`` of the remaining utterances. ``speaker_10fold``: fold i tests
    speaker i and validates on the next speaker. ``random_k_fold``: a random
    partition into k chunks; fold i tests chunk i and validates on chunk i+1.
    """
    ids = [r.id for r in records]
    rng = np.random.default_rng(seed)
    folds = []
    if scheme == "session_5fold":
        k = 5 if k is None else k
        sessions = sorted({r.session for r in records})
        if len(sessions) != k:
            raise ProbeError(f"session scheme needs exactly {k} sessions, found {len(sessions)}")
        for ses in sessions:
            test = [r.id for r in records if r.session == ses]
            rest = [r.id for r in records if r.session != ses]
            perm = rng.permutation(len(rest))
            n_val = max(1, int(round(val_frac * len(rest))))
            val_idx = set(perm[:n_val].tolist())
            folds.append(Fold([u for i, u in enumerate(rest) if i not in val_idx],
                              [rest[i] for i in sorted(val_idx)], test))
    elif scheme == "speaker_10fold":
        k = 10 if k is None else k
        speakers = sorted({r.speaker for r in records})
        if len(speakers) < max(k, 3):
            raise ProbeError(f"speaker scheme needs at least {max(k, 3)} speakers, found {len(speakers)}")
        for i in range(k):
            test_spk, val_spk = speakers[i], speakers[(i + 1) % len(speakers)]
            folds.append(Fold([r.id for r in records if r.speaker not in (test_spk, val_spk)],
                              [r.id for r in records if r.speaker == val_spk],
                              [r.id for r in records if r.speaker == test_spk]))
    elif scheme == "random_k_fold":
        k = 10 if k is None else k
        if k < 3 or len(ids) < k:
            raise ProbeError(f"random scheme needs k >= 3 and at least k records (k={k}, n={len(ids)})")
        chunks = np.array_split(rng.permutation(len(ids)), k)
        for i in range(k):
            test, val = chunks[i], chunks[(i + 1) % k]
            held = set(test.tolist()) | set(val.tolist())
            folds.append(Fold([ids[j] for j in range(len(ids)) if j not in held],
                              [ids[j] for j in sorted(val)], [ids[j] for j in sorted(test)]))
    else:
        raise ProbeError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    return SplitPlan(folds, scheme, seed)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    wa: float
    ua: float
    wf1: float
    confusion: np.ndarray
    n_test: int
    labels: list = field(default_factory=list)


def compute_metrics(y_true: Sequence, y_pred: Sequence, label_set: Sequence) -> MetricsReport:
    """WA = accuracy, UA = mean recall over classes present in ``y_true``,
    WF1 = support-weighted F1. All in percent."""
    if len(y_true) != len(y_pred):
        raise ProbeError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) == 0:
        raise ProbeError("no predictions to score")
    index = {lab: i for i, lab in enumerate(label_set)}
    try:
        t = np.array([index[y] for y in y_true])
        p = np.array([index[y] for y in y_pred])
    except KeyError as exc:
        raise ProbeError(f"label {exc.args[0]!r} not in label set") from None
    C = len(label_set)
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    tp = np.diag(conf).astype(float)
    present = support > 0
    recall = np.divide(tp, support, out=np.zeros(C), where=present)
    precision = np.divide(tp, predicted, out=np.zeros(C), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(C), where=denom > 0)
    n = len(t)
    return MetricsReport(
        wa=float(100.0 * tp.sum() / n),
        ua=float(100.0 * recall[present].mean()),
        wf1=float(100.0 * (f1 * support).sum() / n),
        confusion=conf,
        n_test=n,
        labels=list(label_set),
    )


@dataclass
class AggregateTable:
    rows: list[tuple[str, MetricsReport]]
    mean: dict
    std: dict

    METRICS = ("wa", "ua", "wf1")

    def render_tsv(self) -> str:
        lines = ["# std is the population standard deviation; UA averages classes present in each fold's test set",
                 "fold\twa\tua\twf1\tn_test"]
        for name, r in self.rows:
            lines.append(f"{name}\t{r.wa:.4f}\t{r.ua:.4f}\t{r.wf1:.4f}\t{r.n_test}")
        lines.append("mean\t" + "\t".join(f"{self.mean[m]:.4f}" for m in self.METRICS) + "\t-")
        lines.append("std\t" + "\t".join(f"{self.std[m]:.4f}" for m in self.METRICS) + "\t-")
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        head = f"{'fold':<8}{'WA(%)':>9}{'UA(%)':>9}{'WF1(%)':>9}{'n':>6}"
        lines = [head, "-" * len(head)]
        for name, r in self.rows:
            lines.append(f"{name:<8}{r.wa:>9.2f}{r.ua:>9.2f}{r.wf1:>9.2f}{r.n_test:>6}")
        lines.append("-" * len(head))
        lines.append(f"{'mean':<8}" + "".join(f"{self.mean[m]:>9.2f}" for m in self.METRICS))
        lines.append(f"{'std':<8}" + "".join(f"{self.std[m]:>9.2f}" for m in self.METRICS))
        lines.append("std: population; UA excludes classes absent from a fold's test set")
        return "\n".join(lines) + "\n"


def evaluate_report(reports: Sequence[MetricsReport]) -> AggregateTable:
    if not reports:
        raise ProbeError("need at least one report")
    rows = [(f"fold{i}", r) for i, r in enumerate(reports)]
    mean, std = {}, {}
    for m in AggregateTable.METRICS:
        vals = np.array([getattr(r, m) for r in reports])
        mean[m] = float(vals.mean())
        std[m] = float(vals.std())
    return AggregateTable(rows, mean, std)


# ---------------------------------------------------------------------------
# heads and training


class LinearHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, n_classes))

    def forward(self, x):
        return self.net(x)


class GRUHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.gru = nn.GRU(d_in, hidden, num_layers=2, batch_first=True)
        self.out = nn.Linear(hidden, n_classes)

    def forward(self, x, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        return self.out(h[-1])


@dataclass(frozen=True)
class ProbeConfig:
    head: str = "linear"
    hidden: int = 32
    epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    same_fold_eval: bool = False


class _Data:
    """Tensors for one id subset, in the layout the head consumes."""

    def __init__(self, features: FeatureDump, ids, label_index, head):
        self.y = torch.tensor([label_index[features.labels[i]] for i in ids])
        self.head = head
        if head == "linear":
            self.x = torch.from_numpy(features.pooled_matrix(ids)).float()
            self.lengths = None
        else:
            seqs = [torch.from_numpy(features.frames[i]).float() for i in ids]
            self.x = nn.utils.rnn.pad_sequence(seqs, batch_first=True)
            self.lengths = torch.tensor([s.shape[0] for s in seqs])

    def __len__(self):
        return len(self.y)

    def logits(self, model, idx=None):
        idx = slice(None) if idx is None else idx
        if self.head == "linear":
            return model(self.x[idx])
        return model(self.x[idx], self.lengths[idx])


def _fit_fold(features: FeatureDump, fold: Fold, cfg: ProbeConfig, label_set, fold_idx: int) -> MetricsReport:
    label_index = {lab: i for i, lab in enumerate(label_set)}
    test_ids = fold.test
    val_ids = fold.test if cfg.same_fold_eval else fold.val
    for part, ids in (("train", fold.train), ("val", val_ids), ("test", test_ids)):
        if not ids:
            raise ProbeError(f"fold {fold_idx}: empty {part} set")
        missing = [i for i in ids if features.labels.get(i) is None]
        if missing:
            raise ProbeError(f"fold {fold_idx}: unlabeled {part} utterances, e.g. {missing[0]!r}")
    train = _Data(features, fold.train, label_index, cfg.head)
    val = _Data(features, val_ids, label_index, cfg.head)
    test = _Data(features, test_ids, label_index, cfg.head)

    gen = torch.Generator().manual_seed(cfg.seed * 1000 + fold_idx)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed * 1000 + fold_idx)
        d_in = train.x.shape[-1]
        model = (LinearHead if cfg.head == "linear" else GRUHead)(d_in, cfg.hidden, len(label_set))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_fn = nn.CrossEntropyLoss()

    best_wa, best_state, bad = -1.0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(train), generator=gen)
        for lo in range(0, len(train), cfg.batch_size):
            idx = perm[lo: lo + cfg.batch_size]
            opt.zero_grad()
            loss_fn(train.logits(model, idx), train.y[idx]).backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val_wa = (val.logits(model).argmax(1) == val.y).float().mean().item()
        if val_wa > best_wa:
            best_wa, bad = val_wa, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    with torch.no_grad():
        pred = test.logits(model).argmax(1).numpy()
    return compute_metrics([label_set[i] for i in test.y.numpy()], [label_set[i] for i in pred], label_set)


def train_probe(features: FeatureDump, split: SplitPlan, head: str = "linear", hidden: int = 32,
                **kwargs) -> list[MetricsReport]:
    """Train one head per fold on frozen features; one test report per fold."""
    if head not in HEADS:
        raise ProbeError(f"head must be one of {HEADS}, got {head!r}")
    cfg = ProbeConfig(head=head, hidden=hidden, **kwargs)
    label_set = features.label_set or sorted({lab for lab in features.labels.values() if lab is not None})
    reports = []
    for i, fold in enumerate(split.folds):
        reports.append(_fit_fold(features, fold, cfg, label_set, i))
        log.info("fold %d: WA %.2f UA %.2f WF1 %.2f", i, reports[-1].wa, reports[-1].ua, reports[-1].wf1)
    return reports


# ---------------------------------------------------------------------------
# fold report files


def write_fold_reports(reports: Sequence[MetricsReport], path: str | Path) -> Path:
    """TSV, one row per fold; confusion rows joined by ``;``, cells by ``,``."""
    path = Path(path)
    labels = reports[0].labels if reports else []
    lines = [f"# fold reports v1 labels={','.join(labels)}", "fold\twa\tua\twf1\tn_test\tconfusion"]
    for i, r in enumerate(reports):
        conf = ";".join(",".join(str(int(c)) for c in row) for row in r.confusion)
        lines.append(f"{i}\t{r.wa!r}\t{r.ua!r}\t{r.wf1!r}\t{r.n_test}\t{conf}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_fold_reports(path: str | Path) -> list[MetricsReport]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# fold reports v1"):
        raise ProbeError(f"{path}: not a fold report file")
    labels = [x for x in lines[0].split("labels=", 1)[1].split(",") if x]
    reports = []
    for line in lines[2:]:
        _, wa, ua, wf1, n, conf = line.split("\t")
        matrix = np.array([[int(c) for c in row.split(",")] for row in conf.split(";")], dtype=np.int64)
        reports.append(MetricsReport(float(wa), float(ua), float(wf1), matrix, int(n), labels))
    return reports
