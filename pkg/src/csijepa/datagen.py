"""Seeded synthetic CSI corpus at desk scale.

Every sample is a smooth multipath-like background (a low-rank sum of slow
sinusoid outer products over subcarriers and time) plus a class-conditional
event plus Gaussian noise, standardized per window. Class 0 ("burst") plants
a localized high-temporal-variation block at a sample-random location; classes
1+ ("tone") modulate a contiguous subcarrier band periodically, with band
position and period varying by class. Discriminative structure therefore
lives along both the temporal and the subcarrier axes, and burst regions
carry concentrated variation-map mass for the channel-aware masker to find.

Splits draw from disjoint keyed streams, so train/val/test/unlabeled never
collide and regeneration is bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Corpus, CsiWindow, standardize
from .rng import stream

__all__ = ["SynthSpec", "SynthDataset", "synth_sample", "background", "generate"]


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale defaults: 1x32x64 windows, 4x8 patches -> an 8x8 token grid."""

    subcarriers: int = 32
    time_steps: int = 64
    num_classes: int = 2
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 200
    unlabeled: int = 2000
    noise_std: float = 0.25
    background_rank: int = 3
    event_gain: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subcarriers < 8 or self.time_steps < 16:
            raise ValueError("window too small for event placement")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.background_rank < 1:
            raise ValueError("background rank must be >= 1")
        if self.noise_std < 0 or self.event_gain < 0:
            raise ValueError("noise_std and event_gain must be non-negative")


@dataclass
class SynthDataset:
    spec: SynthSpec
    unlabeled: Corpus
    train: Corpus
    val: Corpus
    test: Corpus


def background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Low-rank smooth field: sum of outer products of slow sinusoids."""
    k_axis = np.arange(spec.subcarriers) / spec.subcarriers
    t_axis = np.arange(spec.time_steps) / spec.time_steps
    out = np.zeros((spec.subcarriers, spec.time_steps))
    for _ in range(spec.background_rank):
        fk = rng.uniform(0.5, 2.0)
        ft = rng.uniform(0.5, 2.0)
        amp = rng.uniform(0.6, 1.0)
        u = amp * np.sin(2 * np.pi * fk * k_axis + rng.uniform(0, 2 * np.pi))
        w = np.sin(2 * np.pi * ft * t_axis + rng.uniform(0, 2 * np.pi))
        out += np.outer(u, w)
    return out


def _burst_event(spec: SynthSpec, rng: np.random.Generator):
    k, t = spec.subcarriers, spec.time_steps
    span_t = int(rng.integers(t // 8, t // 5 + 1))
    span_k = int(rng.integers(k // 4, k // 3 + 1))
    t0 = int(rng.integers(2, t - span_t - 2))
    k0 = int(rng.integers(1, k - span_k - 1))
    # alternating-sign oscillation: maximal |X(t) - X(t-1)| inside the block.
    # The oscillation carries most of the energy; the DC part is kept small so
    # raw per-class means stay weakly informative (positions are random).
    amp = spec.event_gain * rng.uniform(2.6, 3.6)
    osc = np.cos(np.pi * np.arange(span_t)) * np.hanning(span_t)
    profile = 0.5 + 0.5 * np.hanning(span_k)
    patch = np.outer(profile, amp * osc + 0.15)
    field = np.zeros((k, t))
    field[k0 : k0 + span_k, t0 : t0 + span_t] = patch
    return field, (k0, k0 + span_k, t0, t0 + span_t)


def _tone_event(spec: SynthSpec, class_id: int, rng: np.random.Generator):
    k, t = spec.subcarriers, spec.time_steps
    periods = (16.0, 9.0, 24.0, 6.0, 12.0)
    period = periods[(class_id - 1) % len(periods)]
    # band position varies per class, jittered per sample
    centers = np.linspace(0.3, 0.7, max(spec.num_classes - 1, 1))
    center = centers[(class_id - 1) % len(centers)]
    span_k = max(k // 4, 4)
    k0 = int(round(center * k - span_k / 2)) + int(rng.integers(-k // 8, k // 8 + 1))
    k0 = min(max(k0, 0), k - span_k)
    amp = spec.event_gain * rng.uniform(1.0, 1.4)
    phase = rng.uniform(0, 2 * np.pi)
    # phase-invariant band-presence offset plus the periodic modulation
    wave = amp * np.sin(2 * np.pi * np.arange(t) / period + phase) + 0.6
    profile = 0.5 + 0.5 * np.hanning(span_k)
    field = np.zeros((k, t))
    field[k0 : k0 + span_k, :] = np.outer(profile, wave)
    return field, (k0, k0 + span_k, 0, t)


def synth_sample(
    spec: SynthSpec, class_id: Optional[int], rng: np.random.Generator
) -> tuple[CsiWindow, Optional[tuple[int, int, int, int]]]:
    """One standardized window and its event box (k0, k1, t0, t1), if any.

    ``class_id=None`` produces a background-plus-noise window with no event.
    """
    field = background(spec, rng)
    box = None
    if class_id is not None and spec.event_gain > 0:
        if class_id == 0:
            event, box = _burst_event(spec, rng)
        else:
            event, box = _tone_event(spec, class_id, rng)
        field = field + event
    if spec.noise_std > 0:
        field = field + rng.normal(0.0, spec.noise_std, size=field.shape)
    return standardize(CsiWindow(field[None, :, :])), box


def _labeled_split(spec: SynthSpec, tag: str, per_class: int) -> Corpus:
    windows, labels = [], []
    for i in range(per_class * spec.num_classes):
        cls = i % spec.num_classes
        w, _ = synth_sample(spec, cls, stream(spec.seed, "synth", tag, i))
        windows.append(w)
        labels.append(cls)
    return Corpus(windows=windows, labels=labels, num_classes=spec.num_classes)


def generate(spec: SynthSpec) -> SynthDataset:
    """Labeled train/val/test plus the unlabeled pretraining corpus.

    The unlabeled corpus is the label-stripped union over classes (samples
    cycle through the class set) drawn from its own stream.
    """
    unlabeled_windows = []
    for i in range(spec.unlabeled):
        cls = i % spec.num_classes
        w, _ = synth_sample(spec, cls, stream(spec.seed, "synth", "unlabeled", i))
        unlabeled_windows.append(w)
    return SynthDataset(
        spec=spec,
        unlabeled=Corpus(windows=unlabeled_windows),
        train=_labeled_split(spec, "train", spec.train_per_class),
        val=_labeled_split(spec, "val", spec.val_per_class),
        test=_labeled_split(spec, "test", spec.test_per_class),
    )
