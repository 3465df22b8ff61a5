"""Synthetic listener-rated corpora for desk-scale experiments.

Each utterance gets a pooled feature vector ``v`` drawn around its system's
center, and a true MOS linear in ``v``. Listeners add a fixed bias, each
rating adds noise, and ratings are clipped to 1..5 and rounded. Frame
sequences average exactly to ``v``; their frame-to-frame structure follows a
unit grammar more closely the higher the true MOS, which gives the unit-LM
score something to find. ASR token log-probabilities are drawn around a
quality-dependent mean.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write, dump_json
from .dataset import MAX_SCORE, MIN_SCORE, MosDataset, from_records, write_manifest
from .features import FeatureCache

COMMON_MEAN = 1.0
SYSTEM_STD = 1.0
UTTERANCE_STD = 0.5
MOS_STD = 0.9


@dataclass(frozen=True)
class SynthSpec:
    n_systems: int = 5
    utterances_per_system: int = 20
    n_listeners: int = 8
    listener_bias_std: float = 0.5
    noise_std: float = 0.3
    feature_dim: int = 16
    seed: int = 0
    frames_per_utterance: int = 40
    n_units: int = 8
    listeners_per_utterance: int | None = None  # None: every listener rates every utterance

    def __post_init__(self):
        for name in ("n_systems", "utterances_per_system", "n_listeners", "feature_dim",
                     "frames_per_utterance", "n_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.listener_bias_std < 0 or self.noise_std < 0:
            raise ValueError("standard deviations must be >= 0")
        m = self.listeners_per_utterance
        if m is not None and not 1 <= m <= self.n_listeners:
            raise ValueError("listeners_per_utterance must lie in [1, n_listeners]")


@dataclass(frozen=True, eq=False)
class SynthCorpus:
    spec: SynthSpec
    dataset: MosDataset
    frames: dict[str, np.ndarray]
    posteriors: dict[str, np.ndarray]
    true_mos: dict[str, float]
    weight: np.ndarray
    offset: float
    listener_bias: dict[str, float]


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


def generate(spec: SynthSpec) -> SynthCorpus:
    rng = np.random.default_rng(spec.seed)
    f = spec.feature_dim
    # shared mean: real filterbank features are far from zero-mean
    common = np.full(f, COMMON_MEAN)
    centers = common + rng.normal(0.0, SYSTEM_STD, size=(spec.n_systems, f))
    w = rng.normal(0.0, 1.0, size=f)
    w *= MOS_STD / (np.linalg.norm(w) * np.hypot(SYSTEM_STD, UTTERANCE_STD))
    offset = 3.0 - float(w @ common)
    protos = rng.normal(0.0, 3.0, size=(spec.n_units, f))
    succ = rng.permutation(spec.n_units)
    listener_ids = [f"lis{i:03d}" for i in range(spec.n_listeners)]
    bias = rng.normal(0.0, spec.listener_bias_std, size=spec.n_listeners)

    rows = []
    frames: dict[str, np.ndarray] = {}
    posts: dict[str, np.ndarray] = {}
    true_mos: dict[str, float] = {}
    for s in range(spec.n_systems):
        sid = f"sys{s:02d}"
        for k in range(spec.utterances_per_system):
            uid = f"{sid}_u{k:03d}"
            v = centers[s] + UTTERANCE_STD * rng.normal(size=f)
            mos = float(offset + w @ v)
            true_mos[uid] = mos
            if spec.listeners_per_utterance is None:
                raters = np.arange(spec.n_listeners)
            else:
                raters = np.sort(rng.choice(spec.n_listeners, spec.listeners_per_utterance, replace=False))
            noise = rng.normal(0.0, spec.noise_std, size=raters.size)
            scores = round_half_up(np.clip(mos + bias[raters] + noise, MIN_SCORE, MAX_SCORE))
            for li, sc in zip(raters, scores):
                rows.append((uid, sid, listener_ids[li], int(sc), f"audio/{uid}.wav"))
            frames[uid] = _frames(rng, v, mos, protos, succ, spec.frames_per_utterance)
            posts[uid] = _posteriors(rng, mos)
    ds = from_records(rows, listener_ids)
    return SynthCorpus(spec, ds, frames, posts, true_mos, w, offset,
                       dict(zip(listener_ids, bias.tolist())))


def quality(mos: float) -> float:
    return (min(max(mos, MIN_SCORE), MAX_SCORE) - MIN_SCORE) / (MAX_SCORE - MIN_SCORE)


def _frames(rng, v, mos, protos, succ, t):
    q = quality(mos)
    n_units = protos.shape[0]
    units = []
    k = int(rng.integers(n_units))
    while len(units) < t:
        units.extend([k] * int(rng.integers(1, 4)))
        k = int(succ[k]) if rng.random() < q else int(rng.integers(n_units))
    units = np.array(units[:t])
    offs = protos[units] + rng.normal(0.0, 0.3, size=(t, protos.shape[1]))
    offs -= offs.mean(axis=0)
    return v[None, :] + offs


def _posteriors(rng, mos):
    n = int(rng.integers(5, 16))
    mu = -0.15 - 0.35 * (MAX_SCORE - min(max(mos, MIN_SCORE), MAX_SCORE)) + rng.normal(0.0, 0.25)
    return -np.abs(mu + rng.normal(0.0, 0.1, size=n))


def write_posteriors(posts: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        for uid, lps in posts.items():
            fh.write(uid + " " + " ".join(repr(float(x)) for x in lps) + "\n")


def write_corpus(c: SynthCorpus, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(out / "features")
    for uid, fr in c.frames.items():
        cache.write(uid, fr)
    paths = {"manifest": out / "manifest.csv", "features": out / "features",
             "posteriors": out / "posteriors.txt", "truth": out / "truth.json"}
    write_manifest(c.dataset, paths["manifest"])
    write_posteriors(c.posteriors, paths["posteriors"])
    dump_json({"spec": asdict(c.spec), "offset": c.offset, "weight": c.weight.tolist(),
               "true_mos": c.true_mos, "listener_bias": c.listener_bias}, paths["truth"])
    return paths
