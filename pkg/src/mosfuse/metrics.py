"""MSE, LCC, SRCC and KTAU at utterance and system level."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .dataset import MosDataset, mean_opinion_score
from .errors import UndefinedCorrelation

METRIC_NAMES = ("mse", "lcc", "srcc", "ktau")
UNDEFINED = "undefined"


def _pair(pred, truth, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {x.size}")
    return x, y


def mse(pred, truth) -> float:
    x, y = _pair(pred, truth)
    return float(np.mean((x - y) ** 2))


def lcc(pred, truth) -> float:
    """Pearson correlation."""
    x, y = _pair(pred, truth, 2)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation()
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:  # spread lost to underflow
        raise UndefinedCorrelation()
    r = float(xc @ yc) / denom
    return min(1.0, max(-1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [x.size]])
    avg = (starts + ends + 1) / 2.0  # mean of positions start+1..end
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def srcc(pred, truth) -> float:
    """Spearman correlation: Pearson on fractional ranks."""
    x, y = _pair(pred, truth, 2)
    return lcc(rankdata(x), rankdata(y))


def ktau(pred, truth) -> float:
    """Kendall tau-b."""
    x, y = _pair(pred, truth, 2)
    c, d, tx, ty, _ = _kernels.pair_counts(x, y)
    denom = math.sqrt(float(c + d + tx) * float(c + d + ty))
    if denom == 0.0:
        raise UndefinedCorrelation()
    return (c - d) / denom


_FUNCS = {"mse": mse, "lcc": lcc, "srcc": srcc, "ktau": ktau}


def _as_vector(pred, d: MosDataset) -> np.ndarray:
    if isinstance(pred, Mapping):
        missing = [uid for uid in d.utterance_ids if uid not in pred]
        if missing:
            raise ValueError(f"no prediction for utterance {missing[0]!r}"
                             + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        return np.array([float(pred[uid]) for uid in d.utterance_ids])
    v = np.asarray(pred, dtype=np.float64).ravel()
    if v.size != len(d):
        raise ValueError(f"{v.size} predictions for {len(d)} utterances")
    return v


def system_level(pred, d: MosDataset) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-system means of predictions and MOS labels, systems sorted by id."""
    p = _as_vector(pred, d)
    groups: dict[str, list[int]] = {}
    for i, u in enumerate(d.utterances):
        groups.setdefault(u.system_id, []).append(i)
    labels = d.labels()
    ids = sorted(groups)
    sys_pred = np.array([p[groups[s]].mean() for s in ids])
    sys_true = np.array([labels[groups[s]].mean() for s in ids])
    return ids, sys_pred, sys_true


def _grid(x: np.ndarray, y: np.ndarray) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for name in METRIC_NAMES:
        try:
            out[name] = _FUNCS[name](x, y)
        except (UndefinedCorrelation, ValueError):
            out[name] = None
    return out


@dataclass
class EvalReport:
    utterance: dict[str, float | None]
    system: dict[str, float | None]
    n_utterances: int
    n_systems: int
    meta: dict = field(default_factory=lambda: {"ktau_variant": "tau-b",
                                                "system_truth": "mean of utterance MOS"})

    def to_dict(self) -> dict:
        fix = lambda g: {k: (UNDEFINED if v is None else v) for k, v in g.items()}
        return {"utterance": fix(self.utterance), "system": fix(self.system),
                "n_utterances": self.n_utterances, "n_systems": self.n_systems,
                "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def cell(v):
            return f"{UNDEFINED:>9}" if v is None else f"{v:9.3f}"
        head = f"{'':<10}" + "".join(f"{m.upper():>9}" for m in METRIC_NAMES)
        lines = [head]
        for level, grid in (("utterance", self.utterance), ("system", self.system)):
            lines.append(f"{level:<10}" + "".join(cell(grid[m]) for m in METRIC_NAMES))
        lines.append(f"N={self.n_utterances} utterances, {self.n_systems} systems")
        return "\n".join(lines) + "\n"


def evaluate(pred, d: MosDataset) -> EvalReport:
    p = _as_vector(pred, d)
    ids, sp, st = system_level(p, d)
    return EvalReport(_grid(p, d.labels()), _grid(sp, st), len(d), len(ids))
