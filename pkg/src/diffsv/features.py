"""Audio loading, log-mel extraction, SNR mixing and training-batch assembly.

Feature tensors follow the ``[L, F, C, B]`` layout (frames, mel bins,
channels, batch).  Networks work on ``[B, C, L, F]``; use
:meth:`MelFeature.to_tensor` / :meth:`MelFeature.from_tensor` to convert.
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import FeatureError

NOISE_CATEGORIES = ("babble", "music", "noise", "synthetic")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("waveform contains NaN or Inf", code="non-finite-waveform")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    f_min: float = 0.0
    f_max: Optional[float] = None
    log_floor: float = 1e-6
    mean_var_norm: bool = False

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.win_length) // self.hop_length + 1

    def num_samples(self, num_frames: int) -> int:
        """Shortest signal length yielding ``num_frames`` frames."""
        return (num_frames - 1) * self.hop_length + self.win_length


@dataclass
class MelFeature:
    data: np.ndarray  # [L, F, C, B]
    frame_hop_sec: float = 0.01
    is_log: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise FeatureError(f"expected [L, F, C, B] array, got shape {self.data.shape}")
        if self.data.shape[2] not in (1, 3):
            raise FeatureError(f"channel count must be 1 or 3, got {self.data.shape[2]}")

    @property
    def shape(self):
        return self.data.shape

    def to_tensor(self, dtype=None):
        import torch

        t = torch.from_numpy(np.ascontiguousarray(self.data.transpose(3, 2, 0, 1)))
        return t.to(dtype or torch.get_default_dtype())

    @classmethod
    def from_tensor(cls, tensor, frame_hop_sec=0.01, is_log=True) -> "MelFeature":
        arr = tensor.detach().cpu().numpy()
        return cls(arr.transpose(2, 3, 1, 0), frame_hop_sec=frame_hop_sec, is_log=is_log)


@dataclass
class MixSpec:
    snr_db: float
    noise_category: str = "synthetic"
    gain_db: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -10.0 <= self.snr_db <= 40.0:
            raise FeatureError(f"snr_db {self.snr_db} outside [-10, 40]")
        if not -12.0 <= self.gain_db <= 12.0:
            raise FeatureError(f"gain_db {self.gain_db} outside [-12, 12]")
        if self.noise_category not in NOISE_CATEGORIES:
            raise FeatureError(f"unknown noise category {self.noise_category!r}")


@dataclass
class BatchSpec:
    batch_size: int = 32
    crop_frames: int = 200
    snr_range: Tuple[float, float] = (0.0, 20.0)
    gain_range: Tuple[float, float] = (-6.0, 6.0)
    utt_indices: Optional[Sequence[int]] = None


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=8)
def _filterbank(n_mels, n_fft, sample_rate, f_min, f_max):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-style filters, shape ``[n_mels, n_fft // 2 + 1]``, unit peak."""
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    return _filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, float(cfg.f_min), float(f_max))


@functools.lru_cache(maxsize=8)
def _window(win_length):
    return signal.get_window("hamming", win_length, fftbins=True)


def log_mel(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Log-mel of one or more equal-length signals.

    ``samples`` is ``[N]`` or ``[B, N]``; the result is ``[B, L, F]``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    win, hop = cfg.win_length, cfg.hop_length
    if samples.shape[-1] < win:
        raise FeatureError(
            f"{samples.shape[-1]} samples is shorter than one {win}-sample window",
            code="utterance-too-short",
        )
    frames = np.lib.stride_tricks.sliding_window_view(samples, win, axis=-1)[:, ::hop]
    spec = np.fft.rfft(frames * _window(win), n=cfg.n_fft, axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    out = np.log(mel + cfg.log_floor)
    if cfg.mean_var_norm:
        out = (out - out.mean(axis=1, keepdims=True)) / (out.std(axis=1, keepdims=True) + 1e-5)
    return out


def extract_mel(wav: Waveform, cfg: Optional[FeatureConfig] = None) -> MelFeature:
    cfg = cfg or FeatureConfig()
    if len(wav) == 0:
        raise FeatureError("empty waveform", code="utterance-too-short")
    if wav.sample_rate != cfg.sample_rate:
        wav = resample(wav, cfg.sample_rate)
    feats = log_mel(wav.samples, cfg)  # [1, L, F]
    return MelFeature(feats.transpose(1, 2, 0)[:, :, None, :], frame_hop_sec=cfg.hop_ms / 1000.0)


def stack_features(feats: Sequence[MelFeature]) -> MelFeature:
    """Concatenate equal-length features along the batch axis."""
    return MelFeature(np.concatenate([f.data for f in feats], axis=3), feats[0].frame_hop_sec)


# ---------------------------------------------------------------------------
# mixing


def mean_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Tile or crop ``noise`` to ``length`` samples starting at a random offset."""
    n = noise.shape[0]
    if n >= length:
        offset = int(rng.integers(0, n - length + 1))
        return noise[offset : offset + length]
    offset = int(rng.integers(0, n))
    reps = math.ceil((length + offset) / n)
    return np.tile(noise, reps)[offset : offset + length]


def snr_scale(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Factor ``a`` such that ``10 log10(P(speech) / P(a * noise)) == snr_db``."""
    p_speech, p_noise = mean_power(speech), mean_power(noise)
    if p_speech == 0.0:
        raise FeatureError("speech has zero power", code="silent-speech")
    if p_noise == 0.0:
        raise FeatureError("noise has zero power", code="silent-noise")
    return math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(speech: Waveform, noise: Waveform, spec: MixSpec, clip: bool = True) -> Waveform:
    if speech.sample_rate != noise.sample_rate:
        raise FeatureError(
            f"sample rates differ ({speech.sample_rate} vs {noise.sample_rate})", code="rate-mismatch"
        )
    rng = np.random.default_rng(spec.seed)
    segment = fit_noise(noise.samples, len(speech), rng)
    alpha = snr_scale(speech.samples, segment, spec.snr_db)
    mixed = (speech.samples + alpha * segment) * 10.0 ** (spec.gain_db / 20.0)
    if clip:
        mixed = np.clip(mixed, -1.0, 1.0)
    return Waveform(mixed, speech.sample_rate)


# ---------------------------------------------------------------------------
# audio files and manifests


def resample(wav: Waveform, sample_rate: int) -> Waveform:
    if wav.sample_rate == sample_rate:
        return wav
    g = math.gcd(wav.sample_rate, sample_rate)
    out = signal.resample_poly(wav.samples, sample_rate // g, wav.sample_rate // g)
    return Waveform(out, sample_rate)


def read_wav(path, sample_rate: Optional[int] = 16000) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim > 1:
        x = x.mean(axis=1)
    wav = Waveform(x, sr)
    return resample(wav, sample_rate) if sample_rate else wav


def write_wav(path, wav: Waveform) -> None:
    pcm = np.round(np.clip(wav.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(str(path), wav.sample_rate, pcm)


@functools.lru_cache(maxsize=4096)
def _cached_samples(path: str, sample_rate: int, mtime: float) -> np.ndarray:
    x = read_wav(path, sample_rate).samples
    x.setflags(write=False)
    return x


def load_samples(path, sample_rate: int = 16000) -> np.ndarray:
    path = os.fspath(path)
    return _cached_samples(path, sample_rate, os.path.getmtime(path))


@dataclass
class ManifestEntry:
    utt_id: str
    speaker: str
    path: str
    duration_sec: float
    category: Optional[str] = None

    def to_json(self, root: Optional[Path] = None) -> str:
        d = {"utt_id": self.utt_id, "speaker": self.speaker, "path": self.path,
             "duration_sec": round(self.duration_sec, 6)}
        if root is not None:
            d["path"] = os.path.relpath(self.path, root)
        if self.category is not None:
            d["category"] = self.category
        return json.dumps(d, sort_keys=True)


DatasetManifest = List[ManifestEntry]


def read_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}", code="bad-manifest") from None
            missing = {"utt_id", "speaker", "path", "duration_sec"} - row.keys()
            if missing:
                raise FeatureError(f"{path}:{lineno}: missing {sorted(missing)}", code="bad-manifest")
            cat = row.get("category")
            if cat is not None and cat not in NOISE_CATEGORIES:
                raise FeatureError(f"{path}:{lineno}: unknown category {cat!r}", code="bad-manifest")
            p = row["path"]
            if not os.path.isabs(p):
                p = str(root / p)
            entries.append(ManifestEntry(str(row["utt_id"]), str(row["speaker"]), p,
                                         float(row["duration_sec"]), cat))
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json(root) + "\n")


def speaker_index(manifest: DatasetManifest) -> dict:
    return {spk: i for i, spk in enumerate(sorted({e.speaker for e in manifest}))}


# ---------------------------------------------------------------------------
# training batches


def _check_corpus(manifest: DatasetManifest, noise_manifest: DatasetManifest):
    if not manifest:
        raise FeatureError("speech manifest is empty", code="empty-manifest")
    if not noise_manifest:
        raise FeatureError("noise manifest is empty", code="empty-manifest")
    if len({e.speaker for e in manifest}) < 2:
        raise FeatureError("need at least two speakers", code="degenerate-corpus")


def crop_or_wrap(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] >= length:
        start = int(rng.integers(0, x.shape[0] - length + 1))
        return x[start : start + length]
    return np.pad(x, (0, length - x.shape[0]), mode="wrap")


def make_training_batch(
    manifest: DatasetManifest,
    noise_manifest: DatasetManifest,
    batch: BatchSpec,
    seed: int,
    cfg: Optional[FeatureConfig] = None,
) -> Tuple[MelFeature, MelFeature, List[int]]:
    """Assemble frame-aligned (noisy, clean) log-mel crops plus speaker labels.

    Every random choice (utterance, crop offset, noise file and offset, SNR,
    gain) is derived from ``(seed, item index)``.
    """
    cfg = cfg or FeatureConfig()
    _check_corpus(manifest, noise_manifest)
    spk = speaker_index(manifest)
    length = cfg.num_samples(batch.crop_frames)

    if batch.utt_indices is not None:
        indices = list(batch.utt_indices)
    else:
        indices = np.random.default_rng([seed, 0x5EED]).integers(0, len(manifest), batch.batch_size)

    clean_crops, noisy_crops, labels = [], [], []
    for item, idx in enumerate(indices):
        rng = np.random.default_rng([seed, item])
        entry = manifest[int(idx)]
        speech = crop_or_wrap(load_samples(entry.path, cfg.sample_rate), length, rng)
        noise_entry = noise_manifest[int(rng.integers(0, len(noise_manifest)))]
        noise = load_samples(noise_entry.path, cfg.sample_rate)
        mix = MixSpec(
            snr_db=float(rng.uniform(*batch.snr_range)),
            noise_category=noise_entry.category or "synthetic",
            gain_db=float(rng.uniform(*batch.gain_range)),
            seed=int(rng.integers(0, 2**31)),
        )
        noisy = mix_at_snr(Waveform(speech, cfg.sample_rate), Waveform(noise, cfg.sample_rate), mix)
        clean_crops.append(speech)
        noisy_crops.append(noisy.samples)
        labels.append(spk[entry.speaker])

    hop = cfg.hop_ms / 1000.0
    clean = log_mel(np.stack(clean_crops), cfg).transpose(1, 2, 0)[:, :, None, :]
    noisy = log_mel(np.stack(noisy_crops), cfg).transpose(1, 2, 0)[:, :, None, :]
    return MelFeature(noisy, hop), MelFeature(clean, hop), labels


# ---------------------------------------------------------------------------
# toy corpus


@dataclass
class VoiceProfile:
    f0: float
    formants: np.ndarray
    bandwidths: np.ndarray
    tilt: float = 0.97
    breath: float = 0.01

    @classmethod
    def random(cls, rng: np.random.Generator) -> "VoiceProfile":
        return cls(
            f0=float(rng.uniform(90.0, 240.0)),
            formants=np.array([rng.uniform(300, 850), rng.uniform(900, 2300), rng.uniform(2300, 3500)]),
            bandwidths=rng.uniform(60.0, 160.0, size=3),
            tilt=float(rng.uniform(0.9, 0.98)),
            breath=float(rng.uniform(0.005, 0.03)),
        )


def _resonate(x, freqs, bws, sr):
    for f, bw in zip(freqs, bws):
        r = math.exp(-math.pi * bw / sr)
        a = [1.0, -2.0 * r * math.cos(2.0 * math.pi * f / sr), r * r]
        x = signal.lfilter([1.0 - r], a, x)
    return x


def _pulse_train(f0_track: np.ndarray, sr: int) -> np.ndarray:
    phase = np.cumsum(f0_track / sr)
    return (np.diff(np.floor(phase), prepend=0.0) > 0).astype(np.float64)


def synth_voice(profile: VoiceProfile, duration: float, rng: np.random.Generator,
                sr: int = 16000, continuous: bool = False) -> np.ndarray:
    """Pulse-excited three-formant resonator speech with syllable-like gating."""
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    jitter = 1.0 + rng.uniform(-0.05, 0.05)
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    f0 = profile.f0 * jitter * vibrato
    excitation = _pulse_train(f0, sr) + profile.breath * rng.standard_normal(n)
    excitation = signal.lfilter([1.0], [1.0, -profile.tilt], excitation)

    out = np.zeros(n)
    envelope = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.15) * sr)
    while pos < n:
        seg = int(rng.uniform(0.12, 0.35) * sr)
        gap = 0 if continuous else int(rng.uniform(0.03, 0.12) * sr)
        stop = min(n, pos + seg)
        shift = rng.uniform(0.92, 1.08)
        voiced = _resonate(excitation[pos:stop], profile.formants * shift, profile.bandwidths, sr)
        ramp = np.sin(np.linspace(0.0, np.pi, stop - pos)) ** 0.5
        out[pos:stop] = voiced
        envelope[pos:stop] = ramp
        pos = stop + gap
    out *= envelope
    peak = np.max(np.abs(out))
    return out / peak * 0.5 if peak > 0 else out


def _split_seed(seed, *keys):
    return np.random.default_rng([seed, *keys])


def synth_toy_corpus(num_speakers: int, utts_per_speaker: int, seed: int, out_dir,
                     duration_range=(2.5, 3.5), sample_rate: int = 16000) -> DatasetManifest:
    """Write a synthetic multi-speaker corpus and its ``manifest.jsonl``.

    Each speaker owns one random resonator profile; utterances differ by
    pitch jitter, syllable timing and excitation noise.
    """
    if num_speakers < 2:
        raise FeatureError("need at least two speakers", code="degenerate-corpus")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in range(num_speakers):
        profile = VoiceProfile.random(_split_seed(seed, 1, s))
        speaker = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            rng = _split_seed(seed, 2, s, u)
            dur = float(rng.uniform(*duration_range))
            wav = Waveform(synth_voice(profile, dur, rng, sample_rate), sample_rate)
            path = wav_dir / f"{speaker}_{u:03d}.wav"
            write_wav(path, wav)
            duration = round(len(wav) / sample_rate, 6)  # as stored in the manifest
            entries.append(ManifestEntry(f"{speaker}_{u:03d}", speaker, str(path), duration))
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries


def _synth_noise(category: str, duration: float, rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(round(duration * sr))
    if category == "synthetic":
        x = rng.standard_normal(n)
    elif category == "noise":
        # colored noise with slow amplitude modulation and sparse clicks
        x = signal.lfilter([1.0], [1.0, -rng.uniform(0.8, 0.99)], rng.standard_normal(n))
        x *= 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * np.arange(n) / sr)
        clicks = rng.random(n) < 2e-4
        x += clicks * rng.standard_normal(n) * 20 * np.std(x)
    elif category == "babble":
        x = np.zeros(n)
        for _ in range(int(rng.integers(3, 6))):
            x += synth_voice(VoiceProfile.random(rng), duration, rng, sr, continuous=bool(rng.random() < 0.5))
    elif category == "music":
        x = np.zeros(n)
        t = np.arange(n) / sr
        pos = 0
        while pos < n:
            note = int(rng.uniform(0.15, 0.5) * sr)
            stop = min(n, pos + note)
            for _ in range(int(rng.integers(1, 4))):
                f = 220.0 * 2.0 ** (int(rng.integers(-12, 19)) / 12.0)
                tone = sum(np.sin(2 * np.pi * k * f * t[pos:stop]) / k**1.5 for k in range(1, 6))
                x[pos:stop] += tone * np.exp(-np.linspace(0, rng.uniform(1, 5), stop - pos))
            pos = stop
    else:
        raise FeatureError(f"unknown noise category {category!r}")
    peak = np.max(np.abs(x))
    return x / peak * 0.5 if peak > 0 else x


def synth_toy_noise(files_per_category: int, seed: int, out_dir, categories=NOISE_CATEGORIES,
                    duration: float = 6.0, sample_rate: int = 16000, prefix: str = "") -> DatasetManifest:
    """Write synthetic noise recordings and a ``noise.jsonl`` manifest carrying ``category``."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, cat in enumerate(categories):
        if cat not in NOISE_CATEGORIES:
            raise FeatureError(f"unknown noise category {cat!r}")
        for k in range(files_per_category):
            rng = _split_seed(seed, 3, NOISE_CATEGORIES.index(cat), k)
            x = _synth_noise(cat, duration, rng, sample_rate)
            utt = f"{prefix}{cat}_{k:03d}"
            path = wav_dir / f"{utt}.wav"
            write_wav(path, Waveform(x, sample_rate))
            entries.append(ManifestEntry(utt, cat, str(path), duration, category=cat))
    write_manifest(out_dir / "noise.jsonl", entries)
    return entries
