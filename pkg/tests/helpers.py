"""Shared builders for the test suite."""
import re

import numpy as np

from mosfuse import predictor as pr


def random_le_model(rng, F=4, D=3, E=5, L=4):
    cfg = pr.TrainingConfig(adapter_dim=D, embedding_dim=E)
    m = pr.init_model(F, cfg, "le_ssl_mos", [f"lis{i}" for i in range(L)], rng)
    # move away from the small-init regime so every path carries gradient
    lh = m.listener_head
    return pr.PredictorModel(pr.EncoderAdapter(m.adapter.weight * 3), pr.MosHead(m.mos_head.weight * 3, 2.5),
                             pr.ListenerHead(lh.embeddings * 5, lh.weight * 3, 2.0), m.listeners,
                             "le_ssl_mos", cfg)


def random_batch(rng, model, n=4, listeners=None):
    """``n`` utterances with continuous targets and 1..3 ratings each."""
    L = len(model.listeners) if model.listeners else 1
    pool = np.arange(L) if listeners is None else np.asarray(listeners)
    V = rng.normal(size=(n, model.feature_dim))
    ptr, lis, sc = [0], [], []
    for _ in range(n):
        k = int(rng.integers(1, min(3, pool.size) + 1))
        lis.extend(rng.choice(pool, k, replace=False).tolist())
        sc.extend(rng.uniform(1, 5, k).tolist())
        ptr.append(len(lis))
    y = np.array([np.mean(sc[ptr[i]:ptr[i + 1]]) for i in range(n)])
    return pr.TrainingData(V, y, np.array(ptr, np.int64), np.array(lis, np.int64), np.array(sc))


def params(model):
    """Parameter blocks in ``Gradients.items()`` order."""
    out = [model.adapter.weight, model.mos_head.weight, np.array([model.mos_head.bias])]
    lh = model.listener_head
    if lh is not None:
        out += [lh.embeddings, lh.weight, np.array([lh.bias])]
    return out


def finite_difference(model, batch, cfg, name, h=1e-5):
    """Central finite differences of batch_loss with respect to one parameter block."""
    W, a, b, E, ch, ce, d = pr._unpack(model)
    params = {"adapter": W, "mos_weight": a, "mos_bias": b, "embeddings": E,
              "listener_weight": np.concatenate([ch, ce]), "listener_bias": d}
    p = params[name]
    out = np.zeros_like(p)
    dim = W.shape[1]

    def rebuild():
        lw = params["listener_weight"]
        return pr._pack(model, W, a, b, E, lw[:dim], lw[dim:], d)

    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        up = pr.batch_loss(rebuild(), batch, cfg)
        p[idx] = orig - h
        down = pr.batch_loss(rebuild(), batch, cfg)
        p[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


def help_default(help_text, flag):
    """The ``[default: ...]`` value click prints for ``flag``."""
    m = re.search(re.escape(flag) + r"\b[^\[]*?\[default:\s*([^\];]+)", help_text, re.S)
    assert m, f"{flag} default missing"
    return m.group(1).strip()
