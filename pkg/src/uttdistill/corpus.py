"""Audio ingestion, manifests, synthetic emotion corpora and token-budget batching.

Manifest format (UTF-8, tab separated, one header line)::

    id  audio  n_samples  label  speaker  session  lang

``audio`` is resolved relative to the manifest's directory when it is not
absolute. ``label`` is ``-`` for unlabeled utterances. Audio files are RIFF
WAV, PCM16, 16 kHz, mono.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SAMPLE_RATE = 16000
MANIFEST_COLUMNS = ("id", "audio", "n_samples", "label", "speaker", "session", "lang")
UNLABELED = "-"
EMOTION_NAMES = ("neu", "hap", "sad", "ang", "fea", "dis", "sur", "cal")


class CorpusError(ValueError):
    """Raised for malformed manifests and unusable audio."""


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: Path
    n_samples: int
    label: str | None
    speaker: str
    session: str
    language: str = "en"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise CorpusError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise CorpusError("waveform is empty")
        if self.sample_rate != SAMPLE_RATE:
            raise CorpusError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class Batch:
    waveforms: list[Waveform]
    ids: list[str]
    token_budget: int

    @property
    def n_tokens(self) -> int:
        return sum(len(w) for w in self.waveforms)


class Manifest(list):
    """A list of records that also carries the manifest's label set."""

    def __init__(self, records: Iterable[UtteranceRecord] = (), labels: Sequence[str] | None = None):
        super().__init__(records)
        if labels is None:
            labels = sorted({r.label for r in self if r.label is not None})
        self.labels = list(labels)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.id: r for r in self}


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusError(f"{path}:1: missing header")
    header = tuple(lines[0].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise CorpusError(f"{path}:1: bad header {header!r}, expected {MANIFEST_COLUMNS!r}")

    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise CorpusError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        uid, audio, n_samples, label, speaker, session, lang = cols
        if not uid:
            raise CorpusError(f"{path}:{lineno}: empty id")
        if uid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate id {uid!r}")
        seen.add(uid)
        try:
            n = int(n_samples)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: n_samples is not an integer: {n_samples!r}") from None
        if n <= 0:
            raise CorpusError(f"{path}:{lineno}: n_samples must be positive, got {n}")
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        records.append(
            UtteranceRecord(
                id=uid,
                audio_path=audio_path,
                n_samples=n,
                label=None if label == UNLABELED else label,
                speaker=speaker,
                session=session,
                language=lang,
            )
        )
    return Manifest(records)


def write_manifest(records: Iterable[UtteranceRecord], path: str | Path) -> Path:
    path = Path(path)
    rows = ["\t".join(MANIFEST_COLUMNS)]
    for r in records:
        audio = r.audio_path
        try:
            audio = audio.relative_to(path.parent)
        except ValueError:
            pass
        label = UNLABELED if r.label is None else r.label
        rows.append("\t".join([r.id, audio.as_posix(), str(r.n_samples), label, r.speaker, r.session, r.language]))
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# audio


def read_waveform(record: UtteranceRecord | str | Path) -> Waveform:
    path = record.audio_path if isinstance(record, UtteranceRecord) else Path(record)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            rate = fh.getframerate()
            width = fh.getsampwidth()
            raw = fh.readframes(fh.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise CorpusError(f"cannot read audio {path}: {exc}") from exc
    if channels != 1:
        raise CorpusError(f"{path}: expected mono audio, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise CorpusError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (resample beforehand)")
    if width != 2:
        raise CorpusError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE, channels: int = 1) -> Path:
    """Write float samples in [-1, 1] as little-endian PCM16."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
    return Path(path)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthStyle:
    """Acoustic knobs of the synthetic corpus.

    Class ``c`` owns the F0 band ``f0_base + c * f0_step`` (+/- ``f0_jitter``)
    and the amplitude-modulation rate ``am_rates[c]``. Speakers shift F0 and
    reshape the harmonic spectrum, which is nuisance variation.
    """

    f0_base: float = 140.0
    f0_step: float = 45.0
    f0_jitter: float = 10.0
    speaker_f0_shift: float = 10.0
    am_rates: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 3.0, 5.0, 7.0, 9.0)
    am_depth: float = 0.8
    n_harmonics: int = 6
    noise_level: float = 0.15
    min_seconds: float = 0.5
    max_seconds: float = 3.0


def synth_utterance(
    rng: np.random.Generator, label_idx: int, speaker_idx: int, style: SynthStyle = SynthStyle()
) -> tuple[np.ndarray, dict]:
    seconds = rng.uniform(style.min_seconds, style.max_seconds)
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    spk_rng = np.random.default_rng([speaker_idx, 7919])
    spk_shift = spk_rng.uniform(-style.speaker_f0_shift, style.speaker_f0_shift)
    spk_tilt = spk_rng.uniform(0.3, 1.0, size=style.n_harmonics)

    f0 = style.f0_base + label_idx * style.f0_step + spk_shift + rng.uniform(-style.f0_jitter, style.f0_jitter)
    # slow vibrato keeps frames from being exactly periodic
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vib) / SAMPLE_RATE
    tone = np.zeros(n)
    for h in range(style.n_harmonics):
        tone += spk_tilt[h] / (h + 1) * np.sin((h + 1) * phase + rng.uniform(0, 2 * np.pi))

    am_rate = style.am_rates[label_idx]
    env = 1.0 - style.am_depth * 0.5 * (1.0 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
    x = tone * env
    x = x / (np.max(np.abs(x)) + 1e-9)
    x = x + style.noise_level * rng.standard_normal(n)
    x = 0.9 * x / np.max(np.abs(x))
    return x, {"f0": f0, "am_rate": am_rate}


def synthesize_corpus(
    n_utts: int,
    n_classes: int,
    n_speakers: int,
    seed: int,
    out_dir: str | Path,
    style: SynthStyle = SynthStyle(),
) -> Path:
    """Write a labeled synthetic corpus and return its manifest path.

    Labels cycle over the classes and speakers cycle over blocks of
    ``n_classes`` utterances, so every speaker covers every class. Speakers
    are paired into sessions (``spk00, spk01 -> ses0``), IEMOCAP style.
    """
    if not 2 <= n_classes <= 8:
        raise CorpusError(f"n_classes must be in [2, 8], got {n_classes}")
    if n_utts < 10 * n_classes:
        raise CorpusError(f"n_utts must be >= 10 * n_classes = {10 * n_classes}, got {n_utts}")
    if n_speakers < 1:
        raise CorpusError("n_speakers must be >= 1")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create {wav_dir}: {exc}") from exc

    records = []
    for i in range(n_utts):
        label_idx = i % n_classes
        speaker_idx = (i // n_classes) % n_speakers
        rng = np.random.default_rng([seed, i])
        x, _ = synth_utterance(rng, label_idx, speaker_idx, style)
        uid = f"utt{i:05d}"
        path = write_wav(wav_dir / f"{uid}.wav", x)
        records.append(
            UtteranceRecord(
                id=uid,
                audio_path=path,
                n_samples=len(x),
                label=EMOTION_NAMES[label_idx],
                speaker=f"spk{speaker_idx:02d}",
                session=f"ses{speaker_idx // 2}",
                language="en",
            )
        )
    return write_manifest(records, out_dir / "manifest.tsv")


# ---------------------------------------------------------------------------
# batching


def make_batches(
    records: Sequence[UtteranceRecord],
    token_budget: int,
    shuffle_seed: int,
    load: Callable[[UtteranceRecord], Waveform] = read_waveform,
) -> list[Batch]:
    """Greedy first-fit packing of shuffled records under a sample budget."""
    for r in records:
        if r.n_samples > token_budget:
            raise CorpusError(f"utterance {r.id!r} has {r.n_samples} samples, over the budget of {token_budget}")
    order = np.random.default_rng(shuffle_seed).permutation(len(records))
    bins: list[list[UtteranceRecord]] = []
    fill: list[int] = []
    for idx in order:
        r = records[idx]
        for b, used in enumerate(fill):
            if used + r.n_samples <= token_budget:
                bins[b].append(r)
                fill[b] += r.n_samples
                break
        else:
            bins.append([r])
            fill.append(r.n_samples)
    return [Batch([load(r) for r in b], [r.id for r in b], token_budget) for b in bins]


@dataclass
class WaveformCache:
    """Memoizing loader for repeated epochs over the same records."""

    store: dict = field(default_factory=dict)

    def __call__(self, record: UtteranceRecord) -> Waveform:
        w = self.store.get(record.id)
        if w is None:
            w = self.store[record.id] = read_waveform(record)
        return w
