"""Top-Q subsystem selection and a bias-free linear fuser trained with RMSProp."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from ._io import atomic_write, dump_json, load_json
from .dataset import MosDataset
from .early_stopping import EarlyStopping
from .errors import ModelFormatError, MosError, UndefinedCorrelation
from .metrics import lcc, srcc

KINDS = ("predictor", "confidence", "speechlm")
FORMAT_VERSION = 1


class FusionInputError(MosError, ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    P: int
    Q: int
    R: int = 0
    S: int = 0

    def __post_init__(self):
        if min(self.P, self.Q, self.R, self.S) < 0:
            raise ValueError("P, Q, R, S must be >= 0")
        if self.Q > 2 * self.P:
            raise ValueError("Q cannot exceed 2P (two architectures per SSL model)")
        if self.Q + self.R + self.S < 1:
            raise ValueError("need at least one subsystem")


@dataclass(frozen=True)
class FuserConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    max_epochs: int = 1000
    patience: int = 20
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "rmsprop_decay", "rmsprop_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class SubsystemScores:
    utterance_ids: tuple[str, ...]
    columns: tuple[tuple[str, str], ...]  # (name, kind)
    matrix: np.ndarray  # N x C

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape != (len(self.utterance_ids), len(self.columns)):
            raise FusionInputError("matrix shape does not match ids x columns")
        if not np.all(np.isfinite(m)):
            raise FusionInputError("score matrix has missing or non-finite cells")
        names = [c[0] for c in self.columns]
        if len(set(names)) != len(names):
            raise FusionInputError("column names must be unique")
        if len(set(self.utterance_ids)) != len(self.utterance_ids):
            raise FusionInputError("utterance ids must be unique")
        for _, kind in self.columns:
            if kind not in KINDS:
                raise FusionInputError(f"unknown column kind {kind!r}")
        object.__setattr__(self, "matrix", m)

    @property
    def names(self) -> list[str]:
        return [c[0] for c in self.columns]


def select_top_q(candidates: Mapping[str, tuple[Sequence[float], Sequence[float]]], Q: int) -> list[str]:
    """Rank by utterance-level SRCC, then LCC (both descending), then name."""
    if not 1 <= Q <= len(candidates):
        raise ValueError(f"Q={Q} must lie in [1, {len(candidates)}]")
    lengths = {len(p) for p, _ in candidates.values()} | {len(t) for _, t in candidates.values()}
    if len(lengths) != 1:
        raise FusionInputError("candidate predictions and labels are not aligned")

    def key(name):
        pred, labels = candidates[name]
        try:
            s = srcc(pred, labels)
        except UndefinedCorrelation:
            s = -math.inf
        try:
            r = lcc(pred, labels)
        except UndefinedCorrelation:
            r = -math.inf
        return (-s, -r, name)

    return sorted(candidates, key=key)[:Q]


def assemble(columns: Sequence[tuple[str, str, Mapping[str, float]]],
             labels: MosDataset) -> tuple[SubsystemScores, np.ndarray]:
    """Join per-subsystem ``{utterance_id: score}`` maps in dataset order."""
    if not columns:
        raise FusionInputError("no subsystem columns")
    ids = labels.utterance_ids
    mat = np.empty((len(ids), len(columns)))
    for j, (name, _, scores) in enumerate(columns):
        for i, uid in enumerate(ids):
            try:
                mat[i, j] = scores[uid]
            except KeyError:
                raise FusionInputError(f"subsystem {name!r} has no score for utterance {uid!r}") from None
    return (SubsystemScores(tuple(ids), tuple((n, k) for n, k, _ in columns), mat),
            labels.labels())


@dataclass(frozen=True, eq=False)
class FusionModel:
    weights: np.ndarray
    column_names: tuple[str, ...]
    column_kinds: tuple[str, ...] = ()
    config: FuserConfig = field(default_factory=FuserConfig)
    calibration: Calibration | None = None
    best_val_mse: float | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.column_names),):
            raise ModelFormatError("one weight per column required")
        object.__setattr__(self, "weights", w)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return X if self.calibration is None else self.calibration.apply(X)


@dataclass(frozen=True, eq=False)
class Calibration:
    """Per-column affine map onto the label scale, fitted on fusion-train data.

    Each column is z-scored and then rescaled to the label mean and standard
    deviation. The map is increasing, so per-column rankings are unchanged,
    and the bias-free fuser starts out matching the label mean.
    """
    mean: np.ndarray
    std: np.ndarray
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Calibration":
        std = X.std(axis=0)
        std[std == 0] = 1.0
        ts = float(np.std(y))
        return cls(X.mean(axis=0), std, float(np.mean(y)), ts if ts > 0 else 1.0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std * self.target_std + self.target_mean


def fuse_forward(m: FusionModel, row: Sequence[float]) -> float:
    x = np.asarray(row, dtype=np.float64)
    if x.shape != m.weights.shape:
        raise ValueError(f"expected {m.weights.size} columns, got {x.size}")
    return float(m.transform(x) @ m.weights)


def fuse_apply(m: FusionModel, scores: SubsystemScores) -> np.ndarray:
    if tuple(scores.names) != m.column_names:
        raise FusionInputError(f"column schema {scores.names} does not match model {list(m.column_names)}")
    return m.transform(scores.matrix) @ m.weights


@dataclass
class FuserLog:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def rmsprop_step(w: np.ndarray, v: np.ndarray, g: np.ndarray, lr: float,
                 rho: float = 0.9, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """v <- rho*v + (1-rho)*g^2;  w <- w - lr*g/(sqrt(v)+eps)."""
    v = rho * v + (1.0 - rho) * g * g
    return w - lr * g / (np.sqrt(v) + eps), v


def train_fuser(train: tuple[SubsystemScores, np.ndarray], val: tuple[SubsystemScores, np.ndarray],
                cfg: FuserConfig = FuserConfig(), calibrate: bool = False) -> tuple[FusionModel, FuserLog]:
    """Minibatch RMSProp on MSE, starting from uniform 1/C weights.

    Early stops when validation MSE has not strictly improved for
    ``cfg.patience`` epochs and returns the best-epoch weights.
    """
    (tr, ytr), (va, yva) = train, val
    if tr.columns != va.columns:
        raise FusionInputError("train and validation column schemas differ")
    if len(ytr) == 0 or len(yva) == 0:
        raise FusionInputError("empty fusion inputs")
    if len(ytr) != tr.matrix.shape[0] or len(yva) != va.matrix.shape[0]:
        raise FusionInputError("labels do not match score rows")
    cal = None
    Xtr, Xva = tr.matrix, va.matrix
    if calibrate:
        cal = Calibration.fit(Xtr, ytr)
        Xtr, Xva = cal.apply(Xtr), cal.apply(Xva)
    Xtr = np.ascontiguousarray(Xtr)
    ytr = np.ascontiguousarray(ytr, dtype=np.float64)
    yva = np.asarray(yva, dtype=np.float64)
    c = Xtr.shape[1]
    w = np.full(c, 1.0 / c)
    v = np.zeros(c)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    log = FuserLog()
    best = w.copy()
    for _ in range(cfg.max_epochs):
        order = rng.permutation(Xtr.shape[0]).astype(np.int64)
        tr_mse = _kernels.rmsprop_epoch(Xtr, ytr, w, v, order, cfg.batch_size,
                                        float(cfg.learning_rate), float(cfg.rmsprop_decay),
                                        float(cfg.rmsprop_epsilon))
        val_mse = float(np.mean((Xva @ w - yva) ** 2))
        log.train_mse.append(float(tr_mse))
        log.val_mse.append(val_mse)
        stop = stopper.step(val_mse)
        if stopper.improved:
            best = w.copy()
        if stop:
            log.stopped_early = True
            break
    log.best_epoch = stopper.best_epoch
    model = FusionModel(best, tuple(tr.names), tuple(k for _, k in tr.columns), cfg,
                        cal, stopper.best if stopper.best_epoch else None)
    return model, log


# -- files -------------------------------------------------------------------

def write_scores(s: SubsystemScores, path: str | os.PathLike) -> None:
    """CSV ``utterance_id,<col>...`` plus a ``.schema.json`` sidecar with kinds."""
    path = os.fspath(path)
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", *s.names])
        for uid, row in zip(s.utterance_ids, s.matrix):
            w.writerow([uid, *(repr(float(x)) for x in row)])
    dump_json({"format_version": FORMAT_VERSION,
               "columns": [{"name": n, "kind": k} for n, k in s.columns]},
              schema_path(path))


def schema_path(path: str | os.PathLike) -> str:
    base = os.fspath(path)
    if base.endswith(".csv"):
        base = base[:-4]
    return base + ".schema.json"


def read_scores(path: str | os.PathLike) -> SubsystemScores:
    schema = load_json(schema_path(path))
    cols = tuple((c["name"], c["kind"]) for c in schema["columns"])
    ids, rows = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "utterance_id" or tuple(header[1:]) != tuple(n for n, _ in cols):
            raise FusionInputError(f"{path}: header does not match schema sidecar")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(cols) + 1:
                raise FusionInputError(f"{path}: row {rowno}: expected {len(cols) + 1} columns")
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError:
                raise FusionInputError(f"{path}: row {rowno}: non-numeric score") from None
            ids.append(row[0])
    return SubsystemScores(tuple(ids), cols, np.array(rows, dtype=np.float64).reshape(len(ids), len(cols)))


def model_to_dict(m: FusionModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "weights": m.weights.tolist(),
        "columns": list(m.column_names),
        "kinds": list(m.column_kinds),
        "config": asdict(m.config),
        "calibration": None if m.calibration is None else {
            "mean": m.calibration.mean.tolist(), "std": m.calibration.std.tolist(),
            "target_mean": m.calibration.target_mean, "target_std": m.calibration.target_std},
        "best_val_mse": m.best_val_mse,
    }


def model_from_dict(obj: dict) -> FusionModel:
    try:
        if obj["format_version"] != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported fusion format_version {obj['format_version']}")
        c = obj.get("calibration")
        cal = None if c is None else Calibration(
            np.array(c["mean"], dtype=np.float64), np.array(c["std"], dtype=np.float64),
            float(c["target_mean"]), float(c["target_std"]))
        return FusionModel(np.array(obj["weights"], dtype=np.float64), tuple(obj["columns"]),
                           tuple(obj.get("kinds", ())), FuserConfig(**obj["config"]),
                           cal, obj.get("best_val_mse"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed fusion model: {exc}") from None


def save_fusion(m: FusionModel, path: str | os.PathLike) -> None:
    dump_json(model_to_dict(m), path)


def load_fusion(path: str | os.PathLike) -> FusionModel:
    return model_from_dict(load_json(path))
