"""Synthetic speech domains: formant audio, SNR-controlled noise, corpora.

A domain is a small inventory of pseudo-phones, each a triplet of damped
sinusoids at fixed formant frequencies. The target domain reuses the
source inventory with all formants scaled up (the adult-to-child analog);
a noisy domain mixes the clean signal with filtered-noise clips at a
random SNR drawn from a configured range. Every sampling operation is a
pure function of (spec, arguments, seed).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ContractError, DataError, DegenerateInputError, VocabularyError

TONAL_DECAY_S = 0.015        # per-formant exponential decay constant
SEGMENT_NOISE_DB = -30.0     # shaped noise level relative to the tonal part
PEAK_AMPLITUDE = 0.5


@dataclass(frozen=True)
class SymbolSpec:
    """One pseudo-phone: three formants with amplitudes and a duration."""
    symbol: str
    formants_hz: tuple[float, float, float]
    amplitudes: tuple[float, float, float]
    duration_s: float = 0.06

    def __post_init__(self):
        f1, f2, f3 = self.formants_hz
        if not 0 < f1 < f2 < f3:
            raise ContractError(f"formants must be increasing, got {self.formants_hz}")
        if self.duration_s <= 0:
            raise ContractError("duration_s must be positive")


@dataclass(frozen=True)
class DomainSpec:
    """Generative description of one synthetic speech domain."""
    name: str
    sample_rate_hz: int
    symbols: tuple[SymbolSpec, ...]
    formant_scale: float = 1.0
    noise_snr_range_db: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        top = max(s.formants_hz[2] for s in self.symbols) * self.formant_scale
        if self.sample_rate_hz < 2 * top:
            raise ContractError(
                f"sample rate {self.sample_rate_hz} Hz aliases top formant {top:.0f} Hz")
        if self.noise_snr_range_db is not None:
            lo, hi = self.noise_snr_range_db
            if lo > hi:
                raise ContractError(f"SNR range [{lo}, {hi}] has low > high")

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(s.symbol for s in self.symbols)

    def symbol_spec(self, token: str) -> SymbolSpec:
        for s in self.symbols:
            if s.symbol == token:
                return s
        raise VocabularyError(f"token {token!r} not in domain {self.name!r}")


@dataclass
class Utterance:
    waveform: np.ndarray
    transcript: tuple[str, ...] | None
    snr_db: float | None = None


@dataclass
class Corpus:
    utterances: list[Utterance]
    domain: str
    split: str
    sample_rate_hz: int

    def __len__(self) -> int:
        return len(self.utterances)

    def fingerprint(self) -> str:
        """Stable digest of the corpus content, for lineage records."""
        h = hashlib.sha256()
        h.update(f"{self.domain}|{self.split}|{self.sample_rate_hz}".encode())
        for utt in self.utterances:
            h.update(utt.waveform.astype(np.float32).tobytes())
            h.update(b"|" if utt.transcript is None else
                     " ".join(utt.transcript).encode())
        return h.hexdigest()


DEFAULT_INVENTORY: tuple[SymbolSpec, ...] = (
    SymbolSpec("pa", (250.0, 700.0, 1900.0), (1.00, 0.55, 0.30)),
    SymbolSpec("ti", (320.0, 1050.0, 2300.0), (0.55, 1.00, 0.40)),
    SymbolSpec("ko", (420.0, 900.0, 2700.0), (0.90, 0.35, 0.65)),
    SymbolSpec("mu", (520.0, 1450.0, 3100.0), (0.50, 0.80, 1.00)),
    SymbolSpec("re", (280.0, 1250.0, 3500.0), (1.00, 0.40, 0.75)),
    SymbolSpec("so", (600.0, 1100.0, 2100.0), (0.65, 1.00, 0.55)),
    SymbolSpec("ne", (380.0, 1600.0, 2600.0), (0.35, 0.70, 1.00)),
    SymbolSpec("li", (480.0, 850.0, 3900.0), (1.00, 0.75, 0.45)),
)


def _synth_segment(spec: DomainSpec, sym: SymbolSpec, rng) -> np.ndarray:
    """One symbol: three damped sinusoids plus low-level shaped noise."""
    sr = spec.sample_rate_hz
    n = int(round(sym.duration_s * sr))
    t = np.arange(n) / sr
    envelope = np.exp(-t / TONAL_DECAY_S)
    tonal = np.zeros(n)
    for f, a in zip(sym.formants_hz, sym.amplitudes):
        phase = rng.uniform(0, 2 * np.pi)
        tonal += a * envelope * np.sin(2 * np.pi * f * spec.formant_scale * t + phase)
    tonal_power = np.mean(tonal ** 2)
    noise = rng.standard_normal(n)
    kernel = np.hanning(9)
    noise = np.convolve(noise, kernel / kernel.sum(), mode="same")
    noise_power = np.mean(noise ** 2)
    gain = np.sqrt(tonal_power / noise_power * 10 ** (SEGMENT_NOISE_DB / 10))
    return tonal + gain * noise


def synth_utterance(spec: DomainSpec, tokens, seed: int) -> np.ndarray:
    """Concatenate per-symbol segments; peak amplitude normalized to 0.5.

    Deterministic given (spec, tokens, seed).
    """
    tokens = list(tokens)
    if not tokens:
        raise ContractError("tokens must be nonempty")
    segments = []
    for i, token in enumerate(tokens):
        sym = spec.symbol_spec(token)
        rng = np.random.default_rng([spec.seed, seed, i])
        segments.append(_synth_segment(spec, sym, rng))
    wav = np.concatenate(segments)
    peak = np.abs(wav).max()
    return wav * (PEAK_AMPLITUDE / peak)


def measure_snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Add `noise` to `clean` scaled so the mix has exactly `snr_db` dB SNR."""
    if len(noise) < len(clean):
        raise ContractError("noise must be at least as long as the clean signal")
    noise = noise[:len(clean)]
    p_clean = np.mean(clean ** 2)
    p_noise = np.mean(noise ** 2)
    if p_clean == 0 or p_noise == 0:
        raise DegenerateInputError("zero-power input to SNR mixing")
    gain = np.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10)))
    return clean + gain * noise


def noise_bank(spec: DomainSpec, n_clips: int = 16, clip_s: float = 1.0) -> np.ndarray:
    """Fixed seeded collection of filtered-noise clips for this domain."""
    rng = np.random.default_rng([spec.seed, 0x6E6F6973])
    n = int(clip_s * spec.sample_rate_hz)
    clips = np.empty((n_clips, n))
    for i in range(n_clips):
        white = rng.standard_normal(n)
        pole = rng.uniform(0.90, 0.995)
        # first-order recursive lowpass; pole varies per clip
        clip = lfilter([1.0 - pole], [1.0, -pole], white)
        clips[i] = clip / np.sqrt(np.mean(clip ** 2))
    return clips


def sample_corpus(spec: DomainSpec, n_utterances: int, len_range: tuple[int, int],
                  labeled: bool, seed: int, split: str = "train") -> Corpus:
    """Draw a corpus of uniformly random token sequences from the domain.

    Transcripts are attached iff `labeled`. When the spec carries an SNR
    range, each utterance is mixed with a freshly chosen noise clip at a
    uniform random SNR from that range.
    """
    lo, hi = len_range
    if n_utterances < 1 or lo < 1 or lo > hi:
        raise ContractError(f"bad corpus request: n={n_utterances}, len_range={len_range}")
    bank = noise_bank(spec) if spec.noise_snr_range_db is not None else None
    vocab = spec.vocabulary
    utterances = []
    # per-utterance derived seeds: utterances are independent streams, so
    # content is stable under parallel synthesis and under toggling noise
    for i in range(n_utterances):
        rng = np.random.default_rng([spec.seed, seed, _split_key(split), i])
        n_tokens = int(rng.integers(lo, hi + 1))
        tokens = tuple(vocab[j] for j in rng.integers(0, len(vocab), size=n_tokens))
        wav = synth_utterance(spec, tokens, seed=int(rng.integers(2 ** 62)))
        snr = None
        if bank is not None:
            lo_db, hi_db = spec.noise_snr_range_db
            snr = float(rng.uniform(lo_db, hi_db))
            clip = bank[int(rng.integers(len(bank)))]
            if len(clip) < len(wav):
                clip = np.tile(clip, int(np.ceil(len(wav) / len(clip))))
            offset = int(rng.integers(0, len(clip) - len(wav) + 1))
            wav = mix_at_snr(wav, clip[offset:offset + len(wav)], snr)
        utterances.append(Utterance(waveform=wav,
                                    transcript=tokens if labeled else None,
                                    snr_db=snr))
    return Corpus(utterances=utterances, domain=spec.name, split=split,
                  sample_rate_hz=spec.sample_rate_hz)


def _split_key(split: str) -> int:
    # disjoint seed streams per split so dev/test never leak into train
    return int.from_bytes(hashlib.sha256(split.encode()).digest()[:4], "little")


# ---------------------------------------------------------------------------
# persistence: manifest + headerless float32 waveforms
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, directory) -> None:
    """Write manifest.tsv plus one raw little-endian float32 file per utterance."""
    from pathlib import Path

    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    lines = [f"#sample_rate_hz={corpus.sample_rate_hz}"]
    for i, utt in enumerate(corpus.utterances):
        rel = f"wav/{i:05d}.f32"
        utt.waveform.astype("<f4").tofile(directory / rel)
        text = " ".join(utt.transcript) if utt.transcript else ""
        lines.append(f"{rel}\t{text}\t{corpus.domain}\t{corpus.split}")
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(directory) -> Corpus:
    from pathlib import Path

    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#sample_rate_hz="):
        raise DataError("manifest missing sample-rate header")
    sample_rate = int(lines[0].split("=", 1)[1])
    utterances = []
    domain = split = ""
    for line in lines[1:]:
        if not line.strip():
            continue
        rel, text, domain, split = line.split("\t")
        wav = np.fromfile(directory / rel, dtype="<f4").astype(np.float64)
        transcript = tuple(text.split()) if text else None
        utterances.append(Utterance(waveform=wav, transcript=transcript))
    return Corpus(utterances=utterances, domain=domain, split=split,
                  sample_rate_hz=sample_rate)


def make_domain(name: str, formant_scale: float = 1.0,
                noise_snr_range_db: tuple[float, float] | None = None,
                seed: int = 0, sample_rate_hz: int = 16000,
                symbols: tuple[SymbolSpec, ...] = DEFAULT_INVENTORY) -> DomainSpec:
    return DomainSpec(name=name, sample_rate_hz=sample_rate_hz, symbols=symbols,
                      formant_scale=formant_scale,
                      noise_snr_range_db=noise_snr_range_db, seed=seed)
