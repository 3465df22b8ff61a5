"""Unsupervised quality metrics: SpeechLMScore and ASR confidence.

SpeechLMScore pipeline: frame features -> k-means units -> unit LM; the
score is the mean log-probability per token (units plus end-of-sequence),
so higher means more natural. The unit LM is an interpolated n-gram model
with add-1 smoothing at the unigram level; fine-tuning mixes its
probabilities with an LM trained on domain data.
"""
from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from ._io import dump_json, load_json
from .errors import ModelFormatError, MosError

FORMAT_VERSION = 1


# -- k-means quantizer -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KMeansQuantizer:
    centroids: np.ndarray  # K x F
    inertia: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("need a K x F centroid matrix with K >= 2")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ValueError("centroids must be pairwise distinct")
        object.__setattr__(self, "centroids", c)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ValueError(f"fewer than {k} distinct frames")
        j = int(rng.choice(n, p=d2 / total))
        idx.append(j)
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(axis=1))
    return X[idx].copy()


def kmeans_fit(frames, K: int = 200, seed: int = 0, max_iter: int = 300,
               tol: float = 1e-6) -> KMeansQuantizer:
    """k-means++ seeding then Lloyd iterations.

    Stops when no centroid moves by ``tol`` or more (Euclidean) or after
    ``max_iter`` iterations. Empty clusters are reseeded to the point farthest
    from its assigned centroid.
    """
    if isinstance(frames, (list, tuple)):
        frames = np.concatenate([getattr(f, "frames", f) for f in frames], axis=0)
    X = np.ascontiguousarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("frames must be a 2-D array")
    if K < 2:
        raise ValueError("K must be >= 2")
    if X.shape[0] < K:
        raise ValueError(f"need at least K={K} frames, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng)
    it = 0
    for it in range(1, max_iter + 1):
        labels, dist = _kernels.nearest_centroid(X, C)
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        new = np.empty_like(C)
        full = counts > 0
        new[full] = sums[full] / counts[full, None]
        dist = dist.copy()
        for j in np.flatnonzero(~full):
            far = int(np.argmax(dist))
            new[j] = X[far]
            dist[far] = -1.0
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    _, dist = _kernels.nearest_centroid(X, C)
    return KMeansQuantizer(C, float(dist.sum()), it)


def quantize(q: KMeansQuantizer, f, dedup: bool = True) -> list[int]:
    """Nearest-centroid unit per frame (ties go to the lowest index)."""
    X = np.ascontiguousarray(getattr(f, "frames", f), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != q.centroids.shape[1]:
        raise ValueError(f"frame dimension {X.shape[-1]} does not match centroids "
                         f"({q.centroids.shape[1]})")
    labels, _ = _kernels.nearest_centroid(X, q.centroids)
    units = labels.tolist()
    if dedup:
        units = [u for i, u in enumerate(units) if i == 0 or u != units[i - 1]]
    return units


def save_quantizer(q: KMeansQuantizer, path: str | os.PathLike) -> None:
    dump_json({"format_version": FORMAT_VERSION, "type": "kmeans", "K": q.K,
               "inertia": q.inertia, "n_iter": q.n_iter,
               "centroids": q.centroids.tolist()}, path)


def load_quantizer(path: str | os.PathLike) -> KMeansQuantizer:
    obj = load_json(path)
    try:
        if obj["format_version"] != FORMAT_VERSION or obj["type"] != "kmeans":
            raise ModelFormatError(f"{path}: not a version-{FORMAT_VERSION} quantizer file")
        return KMeansQuantizer(np.array(obj["centroids"], dtype=np.float64),
                               float(obj["inertia"]), int(obj["n_iter"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed quantizer file: {exc}") from None


# -- unit language model -----------------------------------------------------

def _check_units(units: Sequence[int], K: int) -> None:
    for u in units:
        if not 0 <= u < K:
            raise ValueError(f"unit {u} outside vocabulary [0, {K})")


@dataclass(frozen=True, eq=False)
class NgramLM:
    """Interpolated n-gram LM over K units plus an end token.

    ``counts[k]`` maps a (k)-token context tuple to {next_token: count} for
    the (k+1)-gram level. Token ``K`` is end-of-sequence, ``K + 1`` pads the
    beginning of contexts.
    """
    order: int
    K: int
    counts: tuple[dict, ...]
    lambdas: tuple[float, ...] = ()
    totals: tuple[dict, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 1 or self.K < 1:
            raise ValueError("order and K must be >= 1")
        lam = self.lambdas or tuple([1.0 / self.order] * self.order)
        if len(lam) != self.order or min(lam) < 0 or abs(sum(lam) - 1.0) > 1e-9:
            raise ValueError("need `order` non-negative interpolation weights summing to 1")
        if len(self.counts) != self.order:
            raise ValueError("one count table per order required")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in lam))
        totals = []
        for table in self.counts:
            tot = {}
            for ctx, nxt in table.items():
                if any(c < 0 for c in nxt.values()):
                    raise ValueError("counts must be non-negative")
                tot[ctx] = sum(nxt.values())
            totals.append(tot)
        object.__setattr__(self, "totals", tuple(totals))

    @property
    def eos(self) -> int:
        return self.K

    @property
    def bos(self) -> int:
        return self.K + 1

    def _level(self, k: int, token: int, history: tuple) -> float:
        # k = 0 is the add-1 unigram; higher levels back off to k-1 on unseen contexts
        if k == 0:
            c = self.counts[0].get((), {})
            return (c.get(token, 0) + 1) / (self.totals[0].get((), 0) + self.K + 1)
        ctx = history[len(history) - k:]
        tot = self.totals[k].get(ctx, 0)
        if tot == 0:
            return self._level(k - 1, token, history)
        return self.counts[k][ctx].get(token, 0) / tot

    def prob(self, token: int, history: Sequence[int]) -> float:
        h = self.pad(history)
        return sum(lam * self._level(k, token, h) for k, lam in enumerate(self.lambdas) if lam)

    def pad(self, history: Sequence[int]) -> tuple:
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        return (self.bos,) * (self.order - 1 - len(h)) + h


@dataclass(frozen=True, eq=False)
class MixtureLM:
    """Probability-level mixture of unit LMs sharing order and vocabulary."""
    components: tuple[tuple[float, "UnitLM"], ...]

    def __post_init__(self):
        ws = [w for w, _ in self.components]
        if not ws or min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        lms = [lm for _, lm in self.components]
        if len({(lm.order, lm.K) for lm in lms}) != 1:
            raise ValueError("mixture components must share order and K")

    @property
    def order(self) -> int:
        return self.components[0][1].order

    @property
    def K(self) -> int:
        return self.components[0][1].K

    def prob(self, token: int, history: Sequence[int]) -> float:
        return sum(w * lm.prob(token, history) for w, lm in self.components)


UnitLM = NgramLM | MixtureLM


def ulm_train(sequences: Iterable[Sequence[int]], order: int = 3, K: int = 200,
              lambdas: Sequence[float] = ()) -> NgramLM:
    seqs = [list(s) for s in sequences]
    if not seqs:
        raise ValueError("empty corpus")
    counts = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    bos, eos = K + 1, K
    for s in seqs:
        if not s:
            raise ValueError("empty unit sequence in corpus")
        _check_units(s, K)
        padded = [bos] * (order - 1) + s + [eos]
        for t in range(order - 1, len(padded)):
            tok = padded[t]
            for k in range(order):
                counts[k][tuple(padded[t - k:t])][tok] += 1
    frozen = tuple({ctx: dict(nxt) for ctx, nxt in table.items()} for table in counts)
    return NgramLM(order, K, frozen, tuple(lambdas))


def ulm_finetune(lm: UnitLM, domain_sequences: Iterable[Sequence[int]], mix: float = 0.5) -> MixtureLM:
    """(1 - mix) * base + mix * (LM trained on the domain corpus alone)."""
    if not 0.0 < mix <= 1.0:
        raise ValueError("mix must lie in (0, 1]")
    lambdas = lm.lambdas if isinstance(lm, NgramLM) else ()
    domain = ulm_train(domain_sequences, lm.order, lm.K, lambdas)
    return MixtureLM(((1.0 - mix, lm), (mix, domain)))


def speechlm_score(lm: UnitLM, units: Sequence[int]) -> float:
    """Mean natural-log probability over the units and the end token."""
    units = list(units)
    if not units:
        raise ValueError("empty unit sequence")
    _check_units(units, lm.K)
    total = 0.0
    for t, tok in enumerate(units + [lm.K]):
        total += math.log(lm.prob(tok, units[:t]))
    return total / (len(units) + 1)


def _lm_to_dict(lm: UnitLM) -> dict:
    if isinstance(lm, NgramLM):
        return {"type": "ngram", "order": lm.order, "K": lm.K, "lambdas": list(lm.lambdas),
                "counts": [sorted([list(ctx), tok, c] for ctx, nxt in table.items()
                                  for tok, c in nxt.items())
                           for table in lm.counts]}
    return {"type": "mixture",
            "components": [{"weight": w, "lm": _lm_to_dict(c)} for w, c in lm.components]}


def _lm_from_dict(obj: dict) -> UnitLM:
    if obj["type"] == "ngram":
        tables = []
        for entries in obj["counts"]:
            table: dict = {}
            for ctx, tok, c in entries:
                table.setdefault(tuple(ctx), {})[int(tok)] = int(c)
            tables.append(table)
        return NgramLM(int(obj["order"]), int(obj["K"]), tuple(tables), tuple(obj["lambdas"]))
    if obj["type"] == "mixture":
        return MixtureLM(tuple((float(c["weight"]), _lm_from_dict(c["lm"]))
                               for c in obj["components"]))
    raise ModelFormatError(f"unknown LM type {obj['type']!r}")


def save_lm(lm: UnitLM, path: str | os.PathLike) -> None:
    dump_json({"format_version": FORMAT_VERSION, **_lm_to_dict(lm)}, path)


def load_lm(path: str | os.PathLike) -> UnitLM:
    obj = load_json(path)
    try:
        if obj.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"{path}: not a version-{FORMAT_VERSION} LM file")
        return _lm_from_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed LM file: {exc}") from None


# -- ASR confidence ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfidenceRecord:
    utterance_id: str
    token_logprobs: tuple[float, ...]

    def __post_init__(self):
        if not self.token_logprobs:
            raise ValueError(f"{self.utterance_id}: empty token sequence")
        if any(not lp <= 0.0 for lp in self.token_logprobs):
            raise ValueError(f"{self.utterance_id}: log-probability must be ≤ 0")


def confidence_score(r: ConfidenceRecord) -> float:
    """Mean token log-probability."""
    return math.fsum(r.token_logprobs) / len(r.token_logprobs)


class PosteriorFormatError(MosError, ValueError):
    pass


def load_posteriors(path: str | os.PathLike) -> list[ConfidenceRecord]:
    """Parse ``<utterance_id> <logprob_1> <logprob_2> ...`` lines."""
    records: list[ConfidenceRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            uid, vals = parts[0], parts[1:]
            if not vals:
                raise PosteriorFormatError(f"{path}: line {lineno}: no log-probabilities for {uid!r}")
            try:
                lps = tuple(float(v) for v in vals)
            except ValueError:
                raise PosteriorFormatError(f"{path}: line {lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in lps):
                raise PosteriorFormatError(f"{path}: line {lineno}: non-finite value")
            if any(v > 0.0 for v in lps):
                raise PosteriorFormatError(f"{path}: line {lineno}: log-probability must be ≤ 0")
            if uid in seen:
                raise PosteriorFormatError(
                    f"{path}: line {lineno}: duplicate utterance {uid!r} (first on line {seen[uid]})")
            seen[uid] = lineno
            records.append(ConfidenceRecord(uid, lps))
    return records
