"""MOS rating datasets: (utterance, system, listener, score) records.

A manifest is a UTF-8 CSV with one row per rating::

    utterance_id,system_id,listener_id,score,audio_path

Listener embedding indices are assigned in lexicographic listener-id order so
that shuffled manifests produce the same registry.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write, dump_json
from .errors import ManifestError

MANIFEST_HEADER = ("utterance_id", "system_id", "listener_id", "score", "audio_path")
# accepted for MOS-only work; ratings get placeholder listener ids
ANONYMOUS_HEADER = ("utterance_id", "system_id", "score", "audio_path")
ANONYMOUS_PREFIX = "_anon"
MIN_SCORE = 1
MAX_SCORE = 5


@dataclass(frozen=True)
class OpinionScore:
    utterance_id: str
    listener_id: str
    score: int

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, (int, np.integer)):
            raise ManifestError(f"score must be an integer, got {self.score!r}")
        if not MIN_SCORE <= self.score <= MAX_SCORE:
            raise ManifestError(f"score {self.score} outside {MIN_SCORE}..{MAX_SCORE}")


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    system_id: str
    audio_path: str
    ratings: tuple[OpinionScore, ...]

    def __post_init__(self):
        if not self.ratings:
            raise ManifestError(f"utterance {self.utterance_id!r} has no ratings")
        for r in self.ratings:
            if r.utterance_id != self.utterance_id:
                raise ManifestError(
                    f"rating for {r.utterance_id!r} attached to {self.utterance_id!r}")

    @property
    def scores(self) -> list[int]:
        return [r.score for r in self.ratings]


@dataclass(frozen=True)
class Listener:
    listener_id: str
    index: int


@dataclass(frozen=True)
class MosDataset:
    utterances: tuple[Utterance, ...]
    listeners: tuple[Listener, ...]
    systems: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.utterances:
            raise ManifestError("no utterances")
        ids = [l.listener_id for l in self.listeners]
        if [l.index for l in self.listeners] != list(range(len(ids))) or ids != sorted(ids):
            raise ManifestError("listener indices must be 0..L-1 in lexicographic id order")
        known = set(ids)
        seen: set[str] = set()
        for u in self.utterances:
            if u.utterance_id in seen:
                raise ManifestError(f"duplicate utterance {u.utterance_id!r}")
            seen.add(u.utterance_id)
            if u.system_id not in self.systems:
                raise ManifestError(f"unknown system {u.system_id!r}")
            pairs = set()
            for r in u.ratings:
                if r.listener_id not in known:
                    raise ManifestError(f"unknown listener {r.listener_id!r}")
                if r.listener_id in pairs:
                    raise ManifestError(
                        f"duplicate rating ({u.utterance_id}, {r.listener_id})")
                pairs.add(r.listener_id)

    def __len__(self) -> int:
        return len(self.utterances)

    @cached_property
    def listener_index(self) -> dict[str, int]:
        return {l.listener_id: l.index for l in self.listeners}

    @cached_property
    def by_id(self) -> dict[str, Utterance]:
        return {u.utterance_id: u for u in self.utterances}

    @property
    def utterance_ids(self) -> list[str]:
        return [u.utterance_id for u in self.utterances]

    def labels(self) -> np.ndarray:
        """Mean opinion score per utterance, in dataset order."""
        return np.array([mean_opinion_score(u) for u in self.utterances])

    def subset(self, utterance_ids: Iterable[str]) -> "MosDataset":
        """Dataset restricted to ``utterance_ids``; keeps the full listener registry."""
        keep = set(utterance_ids)
        utts = tuple(u for u in self.utterances if u.utterance_id in keep)
        return MosDataset(utts, self.listeners, frozenset(u.system_id for u in utts))

    def filter_min_mos(self, threshold: float) -> "MosDataset":
        """Utterances whose MOS is strictly greater than ``threshold``."""
        return self.subset(u.utterance_id for u in self.utterances
                           if mean_opinion_score(u) > threshold)


def make_registry(listener_ids: Iterable[str]) -> tuple[Listener, ...]:
    return tuple(Listener(lid, i) for i, lid in enumerate(sorted(set(listener_ids))))


def from_records(rows: Sequence[tuple[str, str, str, int, str]],
                 listeners: Iterable[str] | None = None) -> MosDataset:
    """Build a dataset from (utterance, system, listener, score, audio) tuples.

    Utterances keep first-appearance order, ratings keep row order. Extra
    ``listeners`` may be supplied to widen the registry.
    """
    grouped: dict[str, list] = {}
    meta: dict[str, tuple[str, str]] = {}
    for uid, sid, lid, score, audio in rows:
        if uid in meta and meta[uid] != (sid, audio):
            raise ManifestError(f"utterance {uid!r} has inconsistent system/audio")
        meta.setdefault(uid, (sid, audio))
        grouped.setdefault(uid, []).append(OpinionScore(uid, lid, score))
    lids = {r.listener_id for rs in grouped.values() for r in rs}
    if listeners is not None:
        lids |= set(listeners)
    utts = tuple(Utterance(uid, meta[uid][0], meta[uid][1], tuple(rs))
                 for uid, rs in grouped.items())
    return MosDataset(utts, make_registry(lids), frozenset(s for s, _ in meta.values()))


def read_manifest_header(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        return next(csv.reader(fh), [])


def load_manifest(path: str | os.PathLike, listeners: Iterable[str] | None = None) -> MosDataset:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: no such manifest")
    rows = []
    seen: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        header = tuple(h.strip() for h in header) if header is not None else None
        if header not in (MANIFEST_HEADER, ANONYMOUS_HEADER):
            raise ManifestError(f"{path}: row 1: expected header {','.join(MANIFEST_HEADER)}")
        anonymous = header == ANONYMOUS_HEADER
        per_utt: dict[str, int] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(
                    f"{path}: row {rowno}: expected {len(header)} columns, got {len(row)}")
            if anonymous:
                uid, sid, raw, audio = (c.strip() for c in row)
                per_utt[uid] = per_utt.get(uid, 0) + 1
                lid = f"{ANONYMOUS_PREFIX}{per_utt[uid]:04d}"
            else:
                uid, sid, lid, raw, audio = (c.strip() for c in row)
            if not uid or not sid or not lid:
                raise ManifestError(f"{path}: row {rowno}: empty id")
            try:
                score = int(raw)
            except ValueError:
                raise ManifestError(f"{path}: row {rowno}: score {raw!r} is not an integer") from None
            if not MIN_SCORE <= score <= MAX_SCORE:
                raise ManifestError(
                    f"{path}: row {rowno}: score {score} outside {MIN_SCORE}..{MAX_SCORE}")
            if (uid, lid) in seen:
                raise ManifestError(
                    f"{path}: row {rowno}: duplicate rating ({uid}, {lid}), first at row {seen[uid, lid]}")
            seen[uid, lid] = rowno
            rows.append((uid, sid, lid, score, audio))
    if not rows:
        raise ManifestError(f"{path}: no utterances")
    try:
        return from_records(rows, listeners)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def write_manifest(d: MosDataset, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for u in d.utterances:
            for r in u.ratings:
                w.writerow((u.utterance_id, u.system_id, r.listener_id, r.score, u.audio_path))


def mean_opinion_score(u: Utterance) -> float:
    return sum(r.score for r in u.ratings) / len(u.ratings)


def split(d: MosDataset, seed: int, val_fraction: float,
          system_disjoint: bool) -> tuple[MosDataset, MosDataset]:
    """Deterministic train/validation split.

    With ``system_disjoint`` whole systems are moved to validation, in seeded
    shuffle order, until it holds at least ``val_fraction * N`` utterances.
    Both halves share the full listener registry.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(d)
    need = val_fraction * n - 1e-9  # 0.3 * 100 == 30.000000000000004
    if system_disjoint:
        systems = sorted(d.systems)
        if len(systems) < 2:
            raise ValueError("system-disjoint split needs at least 2 systems")
        sizes = {s: 0 for s in systems}
        for u in d.utterances:
            sizes[u.system_id] += 1
        val_sys: set[str] = set()
        count = 0
        for i in rng.permutation(len(systems)):
            if count >= need:
                break
            val_sys.add(systems[i])
            count += sizes[systems[i]]
        if len(val_sys) == len(systems):
            raise ValueError(
                f"val_fraction {val_fraction} leaves no system for training")
        val_ids = [u.utterance_id for u in d.utterances if u.system_id in val_sys]
    else:
        if n < 2:
            raise ValueError("utterance-level split needs at least 2 utterances")
        n_val = min(max(1, math.ceil(need)), n - 1)
        pick = set(rng.permutation(n)[:n_val].tolist())
        val_ids = [u.utterance_id for i, u in enumerate(d.utterances) if i in pick]
    val_set = set(val_ids)
    train_ids = [u.utterance_id for u in d.utterances if u.utterance_id not in val_set]
    return d.subset(train_ids), d.subset(val_ids)


def write_split(train: MosDataset, val: MosDataset, out_dir: str | os.PathLike,
                params: dict) -> None:
    out_dir = Path(out_dir)
    write_manifest(train, out_dir / "train.csv")
    write_manifest(val, out_dir / "val.csv")
    dump_json({
        **params,
        "listeners": [l.listener_id for l in train.listeners],
        "n_train": len(train),
        "n_val": len(val),
        "train_systems": sorted(train.systems),
        "val_systems": sorted(val.systems),
    }, out_dir / "split.json")
