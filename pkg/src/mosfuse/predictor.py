"""SSL-MOS and listener-enhanced (LE-SSL-MOS) predictors over pooled features.

Both share an encoder adapter ``W`` (F x D) applied to the mean-pooled
utterance vector ``v``; the MOS head is a linear layer on ``h = W.T @ v``.
The LE variant adds a listener head: a linear layer on ``[h, E[listener]]``
trained on individual ratings. Only the MOS head is used for prediction.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from ._io import atomic_write, dump_json, load_json
from .dataset import MosDataset, mean_opinion_score
from .early_stopping import EarlyStopping
from .errors import ModelFormatError
from .features import FeatureCache

MODES = ("ssl_mos", "le_ssl_mos")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 0
    adapter_dim: int = 64
    embedding_dim: int = 128

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta == 0:
            raise ValueError("alpha and beta must be >= 0 and not both zero")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "adapter_dim", "embedding_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass(frozen=True, eq=False)
class EncoderAdapter:
    weight: np.ndarray  # F x D


@dataclass(frozen=True, eq=False)
class MosHead:
    weight: np.ndarray  # D
    bias: float


@dataclass(frozen=True, eq=False)
class ListenerHead:
    embeddings: np.ndarray  # L x E
    weight: np.ndarray  # D + E
    bias: float


@dataclass(frozen=True, eq=False)
class PredictorModel:
    adapter: EncoderAdapter
    mos_head: MosHead
    listener_head: ListenerHead | None = None
    listeners: tuple[str, ...] = ()
    mode: str = "ssl_mos"
    config: TrainingConfig = field(default_factory=TrainingConfig)
    best_val_loss: float | None = None

    def __post_init__(self):
        f, d = self.adapter.weight.shape
        if self.mos_head.weight.shape != (d,):
            raise ModelFormatError("MOS head weight must have length D")
        if (self.listener_head is not None) != (self.mode == "le_ssl_mos"):
            raise ModelFormatError("listener head present iff mode is le_ssl_mos")
        if self.listener_head is not None:
            lh = self.listener_head
            if lh.embeddings.shape[0] != len(self.listeners):
                raise ModelFormatError("embedding rows must equal listener count")
            if lh.weight.shape != (d + lh.embeddings.shape[1],):
                raise ModelFormatError("listener head weight must have length D + E")
        for arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError("non-finite model weights")

    def _arrays(self):
        out = [self.adapter.weight, self.mos_head.weight, np.array([self.mos_head.bias])]
        if self.listener_head is not None:
            lh = self.listener_head
            out += [lh.embeddings, lh.weight, np.array([lh.bias])]
        return out

    @property
    def feature_dim(self) -> int:
        return self.adapter.weight.shape[0]

    @property
    def adapter_dim(self) -> int:
        return self.adapter.weight.shape[1]


def init_model(feature_dim: int, cfg: TrainingConfig, mode: str = "ssl_mos",
               listeners: Sequence[str] = (), rng: np.random.Generator | None = None) -> PredictorModel:
    """Uniform(+-1/sqrt(fan_in)) layers; embeddings Uniform(+-0.1).

    Draw order is adapter, MOS head, then listener parameters, so both modes
    share identical adapter/MOS-head initial weights for a given seed.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    f, d, e = feature_dim, cfg.adapter_dim, cfg.embedding_dim
    lim = 1.0 / math.sqrt(f)
    adapter = rng.uniform(-lim, lim, size=(f, d))
    lim = 1.0 / math.sqrt(d)
    mos_w = rng.uniform(-lim, lim, size=d)
    mos_b = float(rng.uniform(-lim, lim))
    head = None
    if mode == "le_ssl_mos":
        if not listeners:
            raise ValueError("le_ssl_mos needs a non-empty listener registry")
        emb = rng.uniform(-0.1, 0.1, size=(len(listeners), e))
        lim = 1.0 / math.sqrt(d + e)
        lw = rng.uniform(-lim, lim, size=d + e)
        lb = float(rng.uniform(-lim, lim))
        head = ListenerHead(emb, lw, lb)
    return PredictorModel(EncoderAdapter(adapter), MosHead(mos_w, mos_b), head,
                          tuple(listeners), mode, cfg)


def _check_vector(model: PredictorModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.feature_dim,):
        raise ValueError(f"expected a vector of length {model.feature_dim}, got shape {v.shape}")
    return v


def forward_mos(model: PredictorModel, v) -> float:
    h = model.adapter.weight.T @ _check_vector(model, v)
    return float(model.mos_head.weight @ h + model.mos_head.bias)


def forward_listener(model: PredictorModel, v, listener_index: int) -> float:
    lh = model.listener_head
    if lh is None:
        raise ValueError("model has no listener head")
    if not 0 <= listener_index < lh.embeddings.shape[0]:
        raise IndexError(f"listener index {listener_index} out of range")
    h = model.adapter.weight.T @ _check_vector(model, v)
    z = np.concatenate([h, lh.embeddings[listener_index]])
    return float(lh.weight @ z + lh.bias)


def predict(model: PredictorModel, v) -> float:
    """MOS prediction; the listener branch is never consulted."""
    return forward_mos(model, v)


def predict_many(model: PredictorModel, V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != model.feature_dim:
        raise ValueError(f"expected N x {model.feature_dim} features, got {V.shape}")
    return np.array([forward_mos(model, v) for v in V])


def loss_ssl(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    if p.size == 0:
        raise ValueError("empty loss input")
    return float(np.mean(np.abs(t - p)))


def loss_le(pred: Mapping[tuple[str, str], float], target: Mapping[tuple[str, str], float]) -> float:
    """Mean absolute error over all (utterance, listener) rating pairs."""
    if set(pred) != set(target):
        raise ValueError("prediction and target rating pairs differ")
    if not pred:
        raise ValueError("empty loss input")
    return float(np.mean([abs(target[k] - pred[k]) for k in pred]))


def loss_total(l_ssl: float, l_le: float, cfg: TrainingConfig) -> float:
    return cfg.alpha * l_ssl + cfg.beta * l_le


# -- training data -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingData:
    """Pooled features, MOS labels and ratings in CSR form (``ptr`` over utterances)."""
    V: np.ndarray
    y: np.ndarray
    ptr: np.ndarray
    listener_idx: np.ndarray
    scores: np.ndarray
    utterance_ids: tuple[str, ...] = ()

    def __len__(self):
        return self.V.shape[0]


def training_data(d: MosDataset, pooled: np.ndarray,
                  listener_index: Mapping[str, int] | None = None) -> TrainingData:
    listener_index = listener_index if listener_index is not None else d.listener_index
    ptr = [0]
    lis: list[int] = []
    sc: list[float] = []
    for u in d.utterances:
        for r in u.ratings:
            if r.listener_id not in listener_index:
                raise ValueError(f"listener {r.listener_id!r} missing from registry")
            lis.append(listener_index[r.listener_id])
            sc.append(float(r.score))
        ptr.append(len(lis))
    pooled = np.ascontiguousarray(pooled, dtype=np.float64)
    if pooled.shape[0] != len(d):
        raise ValueError("pooled features do not match dataset size")
    return TrainingData(pooled, np.array([mean_opinion_score(u) for u in d.utterances]),
                        np.array(ptr, dtype=np.int64), np.array(lis, dtype=np.int64),
                        np.array(sc), tuple(d.utterance_ids))


def subset_data(data: TrainingData, idx: Sequence[int]) -> TrainingData:
    idx = np.asarray(idx, dtype=np.int64)
    counts = data.ptr[idx + 1] - data.ptr[idx]
    sel = np.concatenate([np.arange(data.ptr[i], data.ptr[i + 1]) for i in idx]) if idx.size else np.zeros(0, np.int64)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    ids = tuple(data.utterance_ids[i] for i in idx) if data.utterance_ids else ()
    return TrainingData(data.V[idx], data.y[idx], ptr, data.listener_idx[sel],
                        data.scores[sel], ids)


# -- gradients ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Gradients:
    adapter: np.ndarray
    mos_weight: np.ndarray
    mos_bias: float
    embeddings: np.ndarray | None = None
    listener_weight: np.ndarray | None = None
    listener_bias: float | None = None
    loss_ssl: float = 0.0
    loss_le: float = 0.0

    def items(self):
        out = [("adapter", self.adapter), ("mos_weight", self.mos_weight),
               ("mos_bias", np.array([self.mos_bias]))]
        if self.embeddings is not None:
            out += [("embeddings", self.embeddings), ("listener_weight", self.listener_weight),
                    ("listener_bias", np.array([self.listener_bias]))]
        return out


def _unpack(model: PredictorModel):
    """Mutable copies of the parameters in kernel layout."""
    W = model.adapter.weight.copy()
    a = model.mos_head.weight.copy()
    b = np.array([model.mos_head.bias])
    lh = model.listener_head
    if lh is None:
        d = model.adapter_dim
        E = np.zeros((1, 1))
        return W, a, b, E, np.zeros(d), np.zeros(1), np.zeros(1)
    d = W.shape[1]
    return (W, a, b, lh.embeddings.copy(), lh.weight[:d].copy(), lh.weight[d:].copy(),
            np.array([lh.bias]))


def _pack(model: PredictorModel, W, a, b, E, ch, ce, dd, **changes) -> PredictorModel:
    head = None
    if model.listener_head is not None:
        head = ListenerHead(E.copy(), np.concatenate([ch, ce]), float(dd[0]))
    return replace(model, adapter=EncoderAdapter(W.copy()), mos_head=MosHead(a.copy(), float(b[0])),
                   listener_head=head, **changes)


def gradients(model: PredictorModel, batch: TrainingData, cfg: TrainingConfig) -> Gradients:
    """Exact (sub)gradients of alpha*L_ssl + beta*L_le on one batch.

    Embedding rows of listeners absent from the batch get zero gradient; the
    subgradient of |x| at 0 is taken as 0.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.V.shape[1] != model.feature_dim:
        raise ValueError("batch feature dimension does not match the model")
    le = model.listener_head is not None
    W, a, b, E, ch, ce, d = _unpack(model)
    gW, ga, gb, gE, gch, gce, gd, l_ssl, l_le = _kernels.batch_gradients(
        batch.V, batch.y, batch.ptr, batch.listener_idx, batch.scores,
        np.arange(len(batch), dtype=np.int64), W, a, b, E, ch, ce, d,
        float(cfg.alpha), float(cfg.beta), le)
    if not le:
        return Gradients(gW, ga, float(gb[0]), loss_ssl=l_ssl)
    return Gradients(gW, ga, float(gb[0]), gE, np.concatenate([gch, gce]), float(gd[0]),
                     l_ssl, l_le)


def batch_loss(model: PredictorModel, batch: TrainingData, cfg: TrainingConfig) -> float:
    """alpha*L_ssl + beta*L_le evaluated through the forward functions."""
    preds = [forward_mos(model, v) for v in batch.V]
    total = cfg.alpha * loss_ssl(preds, batch.y)
    if model.listener_head is not None:
        p, t = {}, {}
        for i, v in enumerate(batch.V):
            for q in range(batch.ptr[i], batch.ptr[i + 1]):
                key = (i, int(batch.listener_idx[q]))
                p[key] = forward_listener(model, v, key[1])
                t[key] = batch.scores[q]
        total += cfg.beta * loss_le(p, t)
    return total


def sgd_step(model: PredictorModel, g: Gradients, lr: float) -> PredictorModel:
    """Return the model after ``param -= lr * grad`` on every parameter."""
    W, a, b, E, ch, ce, d = _unpack(model)
    W -= lr * g.adapter
    a -= lr * g.mos_weight
    b -= lr * np.array([g.mos_bias])
    if model.listener_head is not None:
        dim = W.shape[1]
        E -= lr * g.embeddings
        ch -= lr * g.listener_weight[:dim]
        ce -= lr * g.listener_weight[dim:]
        d -= lr * np.array([g.listener_bias])
    return _pack(model, W, a, b, E, ch, ce, d)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss_ssl: float
    train_loss_le: float
    val_loss_ssl: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path: str | os.PathLike) -> None:
        with atomic_write(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss_ssl", "train_loss_le", "val_loss_ssl"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss_ssl), repr(r.train_loss_le),
                            repr(r.val_loss_ssl)])


def train_arrays(train: TrainingData, val: TrainingData, cfg: TrainingConfig,
                 mode: str = "ssl_mos", listeners: Sequence[str] = ()) -> tuple[PredictorModel, TrainingLog]:
    """SGD on shuffled utterance minibatches with early stopping on validation L_ssl.

    Returns the weights of the epoch with the lowest validation L_ssl.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if len(val) == 0:
        raise ValueError("empty validation set")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    le = mode == "le_ssl_mos"
    if le and train.listener_idx.size and train.listener_idx.max() >= len(listeners):
        raise ValueError("training ratings reference listeners outside the registry")
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(train.V.shape[1], cfg, mode, listeners, np.random.default_rng(init_ss))
    shuffle = np.random.default_rng(shuffle_ss)
    W, a, b, E, ch, ce, d = _unpack(model)
    stopper = EarlyStopping(cfg.patience)
    log = TrainingLog()
    best = None
    Vval = val.V
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(len(train)).astype(np.int64)
        l_ssl, l_le = _kernels.sgd_epoch(
            train.V, train.y, train.ptr, train.listener_idx, train.scores, order,
            cfg.batch_size, W, a, b, E, ch, ce, d, float(cfg.learning_rate),
            float(cfg.alpha), float(cfg.beta), le)
        val_loss = float(np.mean(np.abs(val.y - ((Vval @ W) @ a + b[0]))))
        log.records.append(EpochRecord(epoch, float(l_ssl), float(l_le), val_loss))
        stop = stopper.step(val_loss)
        if stopper.improved:
            best = tuple(p.copy() for p in (W, a, b, E, ch, ce, d))
        if stop:
            log.stopped_early = True
            break
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}; lower the learning rate")
    if best is None:
        raise FloatingPointError("validation loss never finite; lower the learning rate")
    log.best_epoch = stopper.best_epoch
    return _pack(model, *best, best_val_loss=stopper.best), log


def train(train_set: MosDataset, val_set: MosDataset, cache: FeatureCache, cfg: TrainingConfig,
          mode: str = "ssl_mos") -> tuple[PredictorModel, TrainingLog]:
    registry = [l.listener_id for l in train_set.listeners]
    index = train_set.listener_index
    tr = training_data(train_set, cache.pooled(train_set), index)
    va = training_data(val_set, cache.pooled(val_set), val_set.listener_index)
    return train_arrays(tr, va, cfg, mode, registry)


def out_of_fold_predictions(d: MosDataset, cache: FeatureCache, cfg: TrainingConfig,
                            mode: str, folds: int) -> dict[str, float]:
    """K-fold out-of-fold MOS predictions for every utterance of ``d``.

    Each fold's model early-stops on the held-out fold itself, so these are
    meant only as leakage-reduced fusion inputs.
    """
    if not 2 <= folds <= len(d):
        raise ValueError("folds must lie in [2, N]")
    data = training_data(d, cache.pooled(d))
    perm = np.random.default_rng(cfg.seed).permutation(len(d))
    out: dict[str, float] = {}
    registry = [l.listener_id for l in d.listeners]
    for k in range(folds):
        held = np.sort(perm[k::folds])
        rest = np.sort(np.setdiff1d(perm, held))
        model, _ = train_arrays(subset_data(data, rest), subset_data(data, held), cfg, mode, registry)
        for i in held:
            out[d.utterances[i].utterance_id] = forward_mos(model, data.V[i])
    return {uid: out[uid] for uid in d.utterance_ids}


# -- serialization -----------------------------------------------------------

def model_to_dict(model: PredictorModel) -> dict:
    lh = model.listener_head
    return {
        "format_version": FORMAT_VERSION,
        "mode": model.mode,
        "F": model.feature_dim,
        "D": model.adapter_dim,
        "E_dim": int(lh.embeddings.shape[1]) if lh is not None else None,
        "listeners": list(model.listeners),
        "adapter": model.adapter.weight.tolist(),
        "mos_head": {"weight": model.mos_head.weight.tolist(), "bias": model.mos_head.bias},
        "listener_head": None if lh is None else {
            "embeddings": lh.embeddings.tolist(),
            "weight": lh.weight.tolist(),
            "bias": lh.bias,
        },
        "config": asdict(model.config),
        "best_val_loss": model.best_val_loss,
    }


def model_from_dict(obj: dict) -> PredictorModel:
    try:
        if obj["format_version"] != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format_version {obj['format_version']}")
        f, d = obj["F"], obj["D"]
        adapter = np.array(obj["adapter"], dtype=np.float64).reshape(f, d)
        mh = obj["mos_head"]
        head = None
        if obj["listener_head"] is not None:
            lh = obj["listener_head"]
            emb = np.array(lh["embeddings"], dtype=np.float64).reshape(len(obj["listeners"]), obj["E_dim"])
            head = ListenerHead(emb, np.array(lh["weight"], dtype=np.float64), float(lh["bias"]))
        return PredictorModel(EncoderAdapter(adapter),
                              MosHead(np.array(mh["weight"], dtype=np.float64), float(mh["bias"])),
                              head, tuple(obj["listeners"]), obj["mode"],
                              TrainingConfig(**obj["config"]), obj.get("best_val_loss"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from None


def save_model(model: PredictorModel, path: str | os.PathLike) -> None:
    dump_json(model_to_dict(model), path)


def load_model(path: str | os.PathLike) -> PredictorModel:
    return model_from_dict(load_json(path))
