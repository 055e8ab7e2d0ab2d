"""Student/teacher networks: conv feature extractor, conv positional encoding,
transformer backbone (standard or MAE-style with a CNN decoder), utterance tokens.

All forward passes work on a single utterance (no padding). Shapes below use
``N_z`` for frames, ``N_u`` for utterance tokens and ``d`` for ``d_model``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Waveform

STYLES = ("standard", "mae_decoder")
TARGET_NORMS = ("instance", "layer", "none")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 32
    d_model: int = 48
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 96
    backbone_style: str = "standard"
    n_utt_tokens: int = 8
    top_k: int | None = None  # None -> n_layers - 1
    decoder_dim: int = 24
    decoder_layers: int = 4
    decoder_kernel: int = 7
    conv_kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    conv_strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    pos_layers: int = 5
    pos_kernel: int = 19
    pos_groups: int = 16
    target_norm: str = "instance"

    def __post_init__(self):
        if self.top_k is None:
            object.__setattr__(self, "top_k", max(1, self.n_layers - 1))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))
        object.__setattr__(self, "conv_strides", tuple(self.conv_strides))
        if self.backbone_style not in STYLES:
            raise ModelError(f"backbone_style must be one of {STYLES}, got {self.backbone_style!r}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.top_k <= self.n_layers:
            raise ModelError(f"top_k must be in [1, {self.n_layers}], got {self.top_k}")
        if self.n_utt_tokens < 0:
            raise ModelError("n_utt_tokens must be >= 0")
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ModelError("conv_kernels and conv_strides differ in length")
        if self.target_norm not in TARGET_NORMS:
            raise ModelError(f"target_norm must be one of {TARGET_NORMS}, got {self.target_norm!r}")
        if self.pos_kernel % 2 == 0:
            raise ModelError("pos_kernel must be odd")

    @property
    def effective_pos_groups(self) -> int:
        return math.gcd(self.pos_groups, self.d_model)

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.conv_strides))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(),
    "tiny": ModelConfig(d_feat=16, d_model=16, n_layers=2, n_heads=2, d_ffn=24, n_utt_tokens=2, top_k=2,
                        decoder_dim=8, pos_layers=2, pos_kernel=3, pos_groups=4),
    "full-base": ModelConfig(d_feat=512, d_model=768, n_layers=12, n_heads=12, d_ffn=3072, n_utt_tokens=8,
                              top_k=8, decoder_dim=384, backbone_style="mae_decoder"),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if "n_layers" in overrides and "top_k" not in overrides:
        overrides["top_k"] = None
    return replace(base, **overrides)


def conv_output_length(n_samples: int, kernels, strides) -> int:
    """Frame count after a stack of unpadded strided convolutions."""
    n = n_samples
    for k, s in zip(kernels, strides):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


@dataclass
class FrameSequence:
    frames: torch.Tensor  # [N_z, d]
    frame_rate: float = 50.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class StudentOutput:
    utt_embeddings: torch.Tensor  # [N_u, d]
    frame_embeddings: torch.Tensor  # [N_z, d]
    backbone_input: torch.Tensor | None = field(default=None, repr=False)


@dataclass
class TeacherTargets:
    targets: torch.Tensor  # [N_z, d]
    layer_outputs: list[torch.Tensor] | None = field(default=None, repr=False)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize each channel of ``[T, d]`` to zero mean, unit variance over time.

    The time-mean of the result is zero, so the time-pooled (utterance)
    target built from such layers is zero as well.
    """
    mean = x.mean(dim=0, keepdim=True)
    var = x.var(dim=0, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def frame_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize each frame of ``[T, d]`` over channels (LayerNorm without affine)."""
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def normalize_target_layer(x: torch.Tensor, how: str) -> torch.Tensor:
    if how == "layer":
        return frame_norm(x)
    if how == "instance":
        return instance_norm(x)
    return x


# ---------------------------------------------------------------------------
# building blocks


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a ``[B, C, T]`` tensor."""

    def __init__(self, channels: int, affine: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(channels, elementwise_affine=affine)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kernels = cfg.conv_kernels
        self.strides = cfg.conv_strides
        convs, norms = [], []
        in_ch = 1
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            convs.append(nn.Conv1d(in_ch, cfg.d_feat, k, stride=s, bias=False))
            norms.append(ChannelNorm(cfg.d_feat))
            in_ch = cfg.d_feat
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.proj = nn.Linear(cfg.d_feat, cfg.d_model)

    def n_frames(self, n_samples: int) -> int:
        return conv_output_length(n_samples, self.kernels, self.strides)

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        n = self.n_frames(samples.shape[-1])
        if n < 1:
            raise ModelError(f"input of {samples.shape[-1]} samples is too short to yield a frame")
        x = samples.reshape(1, 1, -1)
        for conv, norm in zip(self.convs, self.norms):
            x = F.gelu(norm(conv(x)))
        return self.proj(x[0].transpose(0, 1))


class ConvPositionalEncoding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.effective_pos_groups
        pad = cfg.pos_kernel // 2
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.d_model, cfg.d_model, cfg.pos_kernel, padding=pad, groups=g) for _ in range(cfg.pos_layers)
        )
        self.norms = nn.ModuleList(ChannelNorm(cfg.d_model, affine=False) for _ in range(cfg.pos_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.transpose(0, 1).unsqueeze(0)
        for conv, norm in zip(self.convs, self.norms):
            h = F.gelu(norm(conv(h)))
        return x + h[0].transpose(0, 1)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):
        T, d = x.shape
        q, k, v = self.qkv(x).view(T, 3, self.n_heads, d // self.n_heads).permute(1, 2, 0, 3)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads), dim=-1)
        return self.out((att @ v).transpose(0, 1).reshape(T, d))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ffn), nn.GELU(), nn.Linear(cfg.d_ffn, cfg.d_model))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class CNNDecoder(nn.Module):
    """Length-preserving residual conv decoder used by the MAE-style backbone."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pad = cfg.decoder_kernel // 2
        self.inp = nn.Linear(cfg.d_model, cfg.decoder_dim)
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.decoder_dim, cfg.decoder_dim, cfg.decoder_kernel, padding=pad)
            for _ in range(cfg.decoder_layers)
        )
        self.norms = nn.ModuleList(ChannelNorm(cfg.decoder_dim) for _ in range(cfg.decoder_layers))
        self.out = nn.Linear(cfg.decoder_dim, cfg.d_model)

    def forward(self, x):
        h = self.inp(x).transpose(0, 1).unsqueeze(0)
        for conv, norm in zip(self.convs, self.norms):
            h = h + F.gelu(norm(conv(h)))
        return self.out(h[0].transpose(0, 1))


# ---------------------------------------------------------------------------
# full network


class DistillNet(nn.Module):
    """One network of the teacher/student pair.

    Parameter names beginning with ``extractor.`` form the feature extractor
    (copied into the teacher each step); all others form the backbone side
    (moved by EMA).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.extractor = FeatureExtractor(cfg)
        self.pos_conv = ConvPositionalEncoding(cfg)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.mask_emb = nn.Parameter(torch.empty(d))
        self.utt_tokens = nn.Parameter(torch.empty(cfg.n_utt_tokens, d))
        self.head = nn.Linear(d, d)
        self.decoder = CNNDecoder(cfg) if cfg.backbone_style == "mae_decoder" else None

    def reset_parameters(self):
        nn.init.uniform_(self.mask_emb)
        nn.init.normal_(self.utt_tokens)

    # -- pieces -------------------------------------------------------------

    def extract(self, waveform) -> FrameSequence:
        samples = waveform.samples if isinstance(waveform, Waveform) else waveform
        samples = torch.as_tensor(samples, dtype=self.mask_emb.dtype)
        return FrameSequence(self.extractor(samples))

    def run_blocks(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for block in self.blocks:
            if x.shape[0] == 0:
                outs.append(x)
                continue
            x = block(x)
            outs.append(x)
        return outs

    def with_tokens(self, x: torch.Tensor, n_utt: int) -> torch.Tensor:
        if n_utt == 0:
            return x
        tokens = self.utt_tokens[:n_utt]
        return torch.cat([tokens, x], dim=0)

    def backbone_input(self, z: FrameSequence, masked: np.ndarray) -> torch.Tensor:
        """Standard style: masked frames replaced by the mask embedding."""
        x = z.frames
        if len(masked):
            keep = torch.ones(x.shape[0], 1, dtype=x.dtype)
            keep[torch.as_tensor(masked, dtype=torch.long)] = 0
            x = x * keep + self.mask_emb * (1 - keep)
        return x

    # -- teacher ------------------------------------------------------------

    def teacher_layers(self, z: FrameSequence) -> list[torch.Tensor]:
        return self.run_blocks(self.pos_conv(z.frames))

    def encode_teacher(self, z: FrameSequence, k: int | None = None) -> TeacherTargets:
        k = self.cfg.top_k if k is None else k
        if not 1 <= k <= self.cfg.n_layers:
            raise ModelError(f"k must be in [1, {self.cfg.n_layers}], got {k}")
        with torch.no_grad():
            layers = self.teacher_layers(z)
            top = layers[-k:]
            top = [normalize_target_layer(y, self.cfg.target_norm) for y in top]
            targets = torch.stack(top).mean(dim=0)
        return TeacherTargets(targets, layers)

    # -- student ------------------------------------------------------------

    def encode_student(
        self,
        z: FrameSequence,
        masked=(),
        n_utt: int | None = None,
        generator: torch.Generator | None = None,
    ) -> StudentOutput:
        n_z = z.n_frames
        masked = np.asarray(masked, dtype=np.int64)
        if masked.size and (masked.min() < 0 or masked.max() >= n_z):
            raise ModelError(f"mask index out of range [0, {n_z})")
        n_utt = self.cfg.n_utt_tokens if n_utt is None else n_utt
        if n_utt > self.cfg.n_utt_tokens:
            raise ModelError(f"requested {n_utt} utterance tokens, model has {self.cfg.n_utt_tokens}")
        if self.cfg.backbone_style == "standard":
            return self._student_standard(z, masked, n_utt)
        return self._student_mae(z, masked, n_utt, generator)

    def _student_standard(self, z, masked, n_utt):
        x_in = self.backbone_input(z, masked)
        x = self.pos_conv(x_in)
        x = self.run_blocks(self.with_tokens(x, n_utt))[-1]
        out = self.head(x)
        return StudentOutput(out[:n_utt], out[n_utt:], x_in)

    def _student_mae(self, z, masked, n_utt, generator):
        n_z, d = z.frames.shape
        keep = np.ones(n_z, dtype=bool)
        keep[masked] = False
        keep_t = torch.as_tensor(keep)
        # zero-fill before the positional convs so masked content cannot leak
        x_in = z.frames * keep_t.unsqueeze(1).to(z.frames.dtype)
        x = self.pos_conv(x_in)[keep_t]
        enc = self.run_blocks(self.with_tokens(x, n_utt))[-1]
        utt, vis = enc[:n_utt], enc[n_utt:]
        noise = torch.randn(n_z, d, generator=generator, dtype=torch.float64).to(z.frames.dtype)
        dec_in = noise
        if vis.shape[0]:
            idx = torch.as_tensor(np.flatnonzero(keep))
            dec_in = noise.index_put((idx,), vis)
        frames = self.decoder(dec_in)
        return StudentOutput(self.head(utt), frames, x_in)

    # -- frozen features ----------------------------------------------------

    def layer_features(self, waveform) -> list[torch.Tensor]:
        """Per-block outputs of an unmasked, token-free forward pass."""
        z = self.extract(waveform)
        return self.run_blocks(self.pos_conv(z.frames))


def init_parameters(cfg: ModelConfig, seed: int, dtype=torch.float32) -> DistillNet:
    """Deterministic initialization; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DistillNet(cfg)
        net.reset_parameters()
    return net.to(dtype)


def make_teacher(student: DistillNet) -> DistillNet:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def is_extractor_param(name: str) -> bool:
    return name.startswith("extractor.")


# functional aliases


def extract_features(waveform, params: DistillNet) -> FrameSequence:
    return params.extract(waveform)


def encode_teacher(z: FrameSequence, params: DistillNet, k: int | None = None) -> TeacherTargets:
    return params.encode_teacher(z, k)


def encode_student(z: FrameSequence, mask, params: DistillNet, n_utt: int | None = None, generator=None) -> StudentOutput:
    masked = getattr(mask, "masked_indices", mask)
    return params.encode_student(z, masked, n_utt, generator)
