"""Deterministic synthetic-speaker generator.

Each speaker draws a latent signature vector; each utterance adds a channel
offset; each frame adds noise and the whole utterance is smoothed along
time with a random normalized FIR filter so frames are temporally
correlated and TDNN context windows see structure. Separability is
controlled by the ratio of speaker_spread to channel_spread/frame_noise.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import scipy.ndimage

from .features import FeatureMatrix


@dataclass
class SynthSpec:
    n_speakers: int = 200
    utts_per_speaker: int = 20
    frames_per_utt: int = 800
    dim: int = 23
    speaker_spread: float = 1.0
    channel_spread: float = 0.35
    frame_noise: float = 1.2
    temporal_mix: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.speaker_spread, self.channel_spread, self.frame_noise) < 0:
            raise ValueError("spreads must be non-negative")
        if self.temporal_mix < 1:
            raise ValueError("temporal_mix must be >= 1")


def generate(spec: SynthSpec) -> list[FeatureMatrix]:
    """Generate one FeatureMatrix per (speaker, utterance), deterministically
    seed-split per speaker so generation order never matters."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_speakers)
    width = max(4, len(str(spec.n_speakers - 1)))
    out = []
    for s, child in enumerate(children):
        rng = np.random.default_rng(child)
        spk_id = f"spk{s:0{width}d}"
        signature = rng.normal(0.0, spec.speaker_spread, spec.dim)
        for u in range(spec.utts_per_speaker):
            channel = rng.normal(0.0, spec.channel_spread, spec.dim)
            frames = signature + channel + rng.normal(
                0.0, spec.frame_noise, (spec.frames_per_utt, spec.dim))
            if spec.temporal_mix > 1:
                taps = rng.uniform(0.0, 1.0, spec.temporal_mix)
                taps /= taps.sum()
                frames = scipy.ndimage.convolve1d(
                    frames, taps, axis=0, mode="reflect")
            out.append(FeatureMatrix(
                frames, f"{spk_id}_utt{u:04d}", spk_id))
    return out


def spec_to_text(spec: SynthSpec) -> str:
    return "".join(f"{k} {v}\n" for k, v in asdict(spec).items())


def spec_from_text(text: str) -> SynthSpec:
    kwargs = {}
    fields = SynthSpec.__dataclass_fields__
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = line.split(None, 1)
        if key not in fields:
            raise ValueError(f"unknown synth spec key {key!r}")
        typ = fields[key].type
        kwargs[key] = float(value) if typ == "float" else int(value)
    return SynthSpec(**kwargs)
