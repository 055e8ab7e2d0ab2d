"""Online distillation: masking, losses, EMA teacher, schedules and the pre-training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import checkpoint
from .corpus import Batch, Manifest, UtteranceRecord, WaveformCache, load_manifest, make_batches
from .model import DistillNet, ModelConfig, StudentOutput, TeacherTargets, init_parameters, is_extractor_param, make_teacher
from .seeding import fan_out

log = logging.getLogger(__name__)

UTT_VARIANTS = ("token", "chunk", "global")
LOSS_LOG_COLUMNS = ("step", "l_frm", "l_utt", "total", "tau", "lr")


class DistillError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, utt_id: str, breakdown: dict):
        super().__init__(f"non-finite loss on utterance {utt_id!r}: {breakdown}")
        self.utt_id = utt_id


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskSpec:
    masked_indices: np.ndarray
    p: float
    l: int
    n_frames: int

    @property
    def M(self) -> int:
        return int(self.masked_indices.size)


def sample_mask(n_frames: int, p: float, l: int, rng: np.random.Generator) -> MaskSpec:
    """Each frame starts a span of ``l`` masked frames with probability ``p``.

    Spans are truncated at the sequence end and overlapping spans merge.
    """
    if n_frames < 1:
        raise DistillError("n_frames must be >= 1")
    if l < 1:
        raise DistillError("span length l must be >= 1")
    starts = rng.random(n_frames) < p
    covered = np.convolve(starts.astype(np.int64), np.ones(l, dtype=np.int64))[:n_frames] > 0
    return MaskSpec(np.flatnonzero(covered), p, l, n_frames)


def expected_mask_fraction(n_frames: int, p: float, l: int) -> float:
    """Closed form: frame i is covered unless all of its min(i+1, l) candidate starts fail."""
    i = np.arange(n_frames)
    return float(np.mean(1.0 - (1.0 - p) ** np.minimum(i + 1, l)))


# ---------------------------------------------------------------------------
# losses


def n_utt_for_variant(variant: str, cfg: ModelConfig) -> int:
    if variant == "token":
        n = 1
    elif variant == "chunk":
        n = cfg.n_utt_tokens
        if n < 2:
            raise DistillError(f"chunk variant needs n_utt_tokens > 1, model has {n}")
    elif variant == "global":
        n = 0
    else:
        raise DistillError(f"unknown utterance variant {variant!r}")
    if n > cfg.n_utt_tokens:
        raise DistillError(f"{variant} variant needs {n} utterance tokens, model has {cfg.n_utt_tokens}")
    return n


def utterance_pool(out: StudentOutput, targets: TeacherTargets, variant: str):
    """Return (student utterance summary, time-mean of teacher targets)."""
    n_u = out.utt_embeddings.shape[0]
    if variant == "token" and n_u != 1:
        raise DistillError(f"token variant needs exactly 1 utterance token, got {n_u}")
    if variant == "chunk" and n_u <= 1:
        raise DistillError(f"chunk variant needs more than 1 utterance token, got {n_u}")
    if variant == "global" and n_u != 0:
        raise DistillError(f"global variant takes no utterance tokens, got {n_u}")
    if variant not in UTT_VARIANTS:
        raise DistillError(f"unknown utterance variant {variant!r}")
    y_bar = targets.targets.mean(dim=0)
    if variant == "global":
        u_bar = out.frame_embeddings.mean(dim=0)
    else:
        u_bar = out.utt_embeddings.mean(dim=0)
    return u_bar, y_bar


def loss_utterance(u_bar: torch.Tensor, y_bar: torch.Tensor) -> torch.Tensor:
    if u_bar.shape != y_bar.shape:
        raise DistillError(f"utterance vectors differ in shape: {tuple(u_bar.shape)} vs {tuple(y_bar.shape)}")
    return ((u_bar - y_bar) ** 2).mean()


class FrameLoss(NamedTuple):
    value: torch.Tensor
    empty_mask: bool


def loss_frame(y_s: torch.Tensor, y_t: torch.Tensor, mask: MaskSpec) -> FrameLoss:
    """MSE over masked frames only, averaged over frames and channels."""
    if y_s.shape != y_t.shape:
        raise DistillError(f"frame arrays differ in shape: {tuple(y_s.shape)} vs {tuple(y_t.shape)}")
    if mask.M == 0:
        return FrameLoss(y_s.sum() * 0.0, True)
    idx = torch.as_tensor(mask.masked_indices, dtype=torch.long)
    return FrameLoss(((y_s[idx] - y_t[idx]) ** 2).mean(), False)


@dataclass(frozen=True)
class LossBreakdown:
    l_frm: float
    l_utt: float
    alpha: float
    total: float


def total_loss(l_frm, l_utt, alpha: float):
    """``l_frm + alpha * l_utt``; works on floats and on tensors."""
    return l_frm + alpha * l_utt


def breakdown(l_frm: float, l_utt: float, alpha: float) -> LossBreakdown:
    l_frm, l_utt = float(l_frm), float(l_utt)
    return LossBreakdown(l_frm, l_utt, float(alpha), total_loss(l_frm, l_utt, float(alpha)))


# ---------------------------------------------------------------------------
# schedules and EMA


@dataclass(frozen=True)
class EmaSchedule:
    tau_start: float = 0.999
    tau_end: float = 0.99999
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise DistillError(f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")


def tau_at_step(sched: EmaSchedule, step: int) -> float:
    if step < 0:
        raise DistillError(f"negative step {step}")
    if sched.total_steps <= 0 or step >= sched.total_steps:
        return sched.tau_end
    frac = step / sched.total_steps
    # written as a convex combination so both endpoints are exact
    return (1.0 - frac) * sched.tau_start + frac * sched.tau_end


def lr_at_step(step: int, total_steps: int, lr_peak: float, warmup_frac: float) -> float:
    """Linear warm-up to ``lr_peak`` then cosine decay to zero at ``total_steps``."""
    if step < 0:
        raise DistillError(f"negative step {step}")
    if total_steps <= 0:
        return 0.0
    step = min(step, total_steps)
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        return lr_peak * step / warmup
    if total_steps == warmup:
        return lr_peak
    progress = (step - warmup) / (total_steps - warmup)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, torch.nn.Module):
        return dict(params.named_parameters())
    return dict(params)


@torch.no_grad()
def ema_update(teacher, student, tau: float):
    """Move the teacher backbone toward the student; copy the extractor outright.

    ``teacher``/``student`` are modules or mappings of name -> tensor; the
    teacher is updated in place and returned.
    """
    t_params, s_params = _named(teacher), _named(student)
    if t_params.keys() != s_params.keys():
        raise DistillError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise DistillError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if is_extractor_param(name):
            t.copy_(s)
        else:
            t.mul_(tau).add_(s, alpha=1.0 - tau)
    return teacher


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    utt_variant: str = "chunk"
    alpha: float = 1.0
    use_frame_loss: bool = True
    p: float = 0.5
    l: int = 5
    lr_peak: float = 7.5e-5
    weight_decay: float = 1e-2
    warmup_frac: float = 0.05
    epochs: int = 100
    seed: int = 0
    token_budget: int = 1_000_000
    tau_start: float = 0.999
    tau_end: float = 0.99999
    update_freq: int = 1
    max_grad_norm: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.utt_variant not in UTT_VARIANTS:
            raise DistillError(f"utt_variant must be one of {UTT_VARIANTS}, got {self.utt_variant!r}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise DistillError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.alpha < 0:
            raise DistillError("alpha must be >= 0")
        if self.update_freq < 1:
            raise DistillError("update_freq must be >= 1")
        EmaSchedule(self.tau_start, self.tau_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


TRAIN_PRESETS = {
    "full": TrainConfig(),
    "desk": TrainConfig(lr_peak=2e-3, epochs=12, token_budget=160_000, tau_start=0.99, tau_end=0.999,
                        warmup_frac=0.05, max_grad_norm=5.0),
}


@dataclass
class TrainerState:
    student: DistillNet
    teacher: DistillNet
    optimizer: torch.optim.Optimizer
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    total_steps: int
    step: int = 0  # optimizer updates applied
    batches_seen: int = 0
    seeds: dict = field(default_factory=dict)
    last_lr: float = 0.0
    last_tau: float = 0.0

    @property
    def n_utt(self) -> int:
        return n_utt_for_variant(self.train_cfg.utt_variant, self.model_cfg)

    @property
    def ema_schedule(self) -> EmaSchedule:
        return EmaSchedule(self.train_cfg.tau_start, self.train_cfg.tau_end, self.total_steps)


def make_optimizer(student: DistillNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay = [p for _, p in student.named_parameters() if p.ndim >= 2]
    no_decay = [p for _, p in student.named_parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, betas=(0.9, 0.98), eps=1e-6,
    )


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, total_steps: int, dtype=torch.float32) -> TrainerState:
    seeds = fan_out(train_cfg.seed)
    n_utt_for_variant(train_cfg.utt_variant, model_cfg)
    student = init_parameters(model_cfg, seeds["init"], dtype=dtype)
    teacher = make_teacher(student)
    return TrainerState(student, teacher, make_optimizer(student, train_cfg), model_cfg, train_cfg, total_steps,
                        seeds=seeds)


def utterance_losses(state: TrainerState, samples, utt_index: int, utt_id: str = "?"):
    """Forward both networks on one utterance; returns (l_frm, l_utt, total) tensors."""
    cfg = state.train_cfg
    student, teacher = state.student, state.teacher
    with torch.no_grad():
        targets = teacher.encode_teacher(teacher.extract(samples))
    z = student.extract(samples)
    rng = np.random.default_rng([state.seeds["mask"], state.batches_seen, utt_index])
    mask = sample_mask(z.n_frames, cfg.p, cfg.l, rng)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    out = student.encode_student(z, mask.masked_indices, state.n_utt, gen)
    l_frm = loss_frame(out.frame_embeddings, targets.targets, mask).value
    l_utt = loss_utterance(*utterance_pool(out, targets, cfg.utt_variant))
    frm_weight = 1.0 if cfg.use_frame_loss else 0.0
    return l_frm, l_utt, frm_weight * l_frm + cfg.alpha * l_utt


def train_step(batch: Batch, state: TrainerState) -> tuple[TrainerState, LossBreakdown]:
    """Per-utterance losses averaged over the batch, one student update, one EMA move."""
    cfg = state.train_cfg
    if state.batches_seen % cfg.update_freq == 0:
        state.optimizer.zero_grad(set_to_none=True)
    n = len(batch.waveforms)
    sum_frm = sum_utt = 0.0
    for i, (w, uid) in enumerate(zip(batch.waveforms, batch.ids)):
        l_frm, l_utt, loss = utterance_losses(state, w.samples, i, uid)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(uid, {"l_frm": float(l_frm.detach()), "l_utt": float(l_utt.detach())})
        (loss / (n * cfg.update_freq)).backward()
        sum_frm += l_frm.item()
        sum_utt += l_utt.item()

    lr = lr_at_step(state.step, state.total_steps, cfg.lr_peak, cfg.warmup_frac)
    tau = tau_at_step(state.ema_schedule, state.step)
    state.batches_seen += 1
    if state.batches_seen % cfg.update_freq == 0:
        if cfg.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.max_grad_norm)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.step()
        ema_update(state.teacher, state.student, tau)
        state.step += 1
    l_frm = sum_frm / n if cfg.use_frame_loss else 0.0
    out = breakdown(l_frm, sum_utt / n, cfg.alpha)
    state.last_lr, state.last_tau = lr, tau
    return state, out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainerState, path: str | Path) -> Path:
    arrays = {}
    for prefix, net in (("student", state.student), ("teacher", state.teacher)):
        for name, p in net.state_dict().items():
            arrays[f"{prefix}/{name}"] = p
    names = [n for n, _ in state.student.named_parameters()]
    id_to_name = {id(p): n for n, p in state.student.named_parameters()}
    for p, st in state.optimizer.state.items():
        name = id_to_name[id(p)]
        for key, value in st.items():
            arrays[f"optim/{name}/{key}"] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
    meta = {
        "model_cfg": state.model_cfg.to_dict(),
        "train_cfg": state.train_cfg.to_dict(),
        "total_steps": state.total_steps,
        "step": state.step,
        "batches_seen": state.batches_seen,
        "tau_position": {"tau_start": state.train_cfg.tau_start, "tau_end": state.train_cfg.tau_end,
                         "step": state.step, "total_steps": state.total_steps},
        "seeds": state.seeds,
        "param_order": names,
        "dtype": str(next(state.student.parameters()).dtype).replace("torch.", ""),
    }
    return checkpoint.save_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path) -> TrainerState:
    arrays, meta = checkpoint.load_arrays(path)
    model_cfg = ModelConfig.from_dict(meta["model_cfg"])
    train_cfg = TrainConfig.from_dict(meta["train_cfg"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    state = init_state(model_cfg, train_cfg, meta["total_steps"], dtype=dtype)
    for prefix, net in (("student", state.student), ("teacher", state.teacher)):
        sd = {n: torch.from_numpy(arrays[f"{prefix}/{n}"]) for n in net.state_dict()}
        net.load_state_dict(sd)
    params = dict(state.student.named_parameters())
    opt_state = {}
    for key, value in arrays.items():
        if key.startswith("optim/"):
            name, field_name = key[len("optim/"):].rsplit("/", 1)
            opt_state.setdefault(name, {})[field_name] = torch.from_numpy(value)
    for name, st in opt_state.items():
        state.optimizer.state[params[name]] = st
    state.step = meta["step"]
    state.batches_seen = meta["batches_seen"]
    state.seeds = meta["seeds"]
    return state


# ---------------------------------------------------------------------------
# pre-training loop


def epoch_plans(records: Sequence[UtteranceRecord], cfg: TrainConfig, data_seed: int) -> list[list[Batch]]:
    """Batch plans for every epoch, fixed up front so the step count is known."""
    loader = WaveformCache()
    return [make_batches(records, cfg.token_budget, data_seed + epoch, load=loader) for epoch in range(cfg.epochs)]


def _format_row(step: int, b: LossBreakdown, tau: float, lr: float) -> str:
    return "\t".join([str(step), repr(b.l_frm), repr(b.l_utt), repr(b.total), repr(tau), repr(lr)])


def read_loss_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        cols = line.split("\t")
        rows.append({"step": int(cols[0]), **{k: float(v) for k, v in zip(LOSS_LOG_COLUMNS[1:], cols[1:])}})
    return rows


def pretrain(
    manifest: str | Path | Manifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    resume: bool = True,
    stop_after: int | None = None,
    progress=None,
) -> Path:
    """Run (or resume) pre-training; returns the path of the final checkpoint.

    ``stop_after`` ends the run early after that many batches (with a
    checkpoint), which is how interruption is exercised in tests.
    Outputs in ``out_dir``: ``init.ckpt``, ``latest.ckpt``, ``final.ckpt``
    and ``loss_log.tsv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    if not records:
        raise DistillError("manifest has no utterances")
    seeds = fan_out(train_cfg.seed)
    plans = epoch_plans(records, train_cfg, seeds["data"])
    flat = [b for plan in plans for b in plan]
    total_steps = len(flat) // train_cfg.update_freq
    latest, log_path = out_dir / "latest.ckpt", out_dir / "loss_log.tsv"

    if resume and latest.exists():
        state = load_checkpoint(latest)
        if state.model_cfg != model_cfg or state.train_cfg != train_cfg:
            raise DistillError(f"{latest} was written with a different configuration")
        kept = log_path.read_text().splitlines()[: state.batches_seen + 1] if log_path.exists() else []
        log_path.write_text("\n".join(kept or ["\t".join(LOSS_LOG_COLUMNS)]) + "\n")
        log.info("resuming from batch %d (step %d)", state.batches_seen, state.step)
    else:
        state = init_state(model_cfg, train_cfg, total_steps)
        save_checkpoint(state, out_dir / "init.ckpt")
        save_checkpoint(state, latest)
        log_path.write_text("\t".join(LOSS_LOG_COLUMNS) + "\n")

    with open(log_path, "a") as fh:
        for b_idx in range(state.batches_seen, len(flat)):
            batch = flat[b_idx]
            state, losses = train_step(batch, state)
            fh.write(_format_row(state.batches_seen, losses, state.last_tau, state.last_lr) + "\n")
            fh.flush()
            if progress is not None:
                progress(state.batches_seen, len(flat), losses)
            if state.batches_seen % train_cfg.checkpoint_every == 0:
                save_checkpoint(state, latest)
            if stop_after is not None and state.batches_seen >= stop_after:
                save_checkpoint(state, latest)
                return latest
    save_checkpoint(state, latest)
    return save_checkpoint(state, out_dir / "final.ckpt")
