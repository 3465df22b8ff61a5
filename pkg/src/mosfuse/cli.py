"""``mosfuse`` command line.

Every command echoes its resolved options as one JSON line on stderr, writes
its outputs atomically and is deterministic for fixed inputs and seeds.
Defaults for any command can come from a JSON run file passed with
``--config``; its keys mirror the command tree, e.g.
``{"train": {"lr": 0.001}, "speechlm": {"fit": {"clusters": 50}}}``.
"""
from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path

import click

from . import __version__, dataset as ds, features, fusion, metrics, predictor, unsupervised as us
from ._io import atomic_write, dump_json, load_json
from .errors import MosError

PRED_HEADER = ("utterance_id", "score")


# -- plumbing ----------------------------------------------------------------

def _config_errors(cmd: click.Command, cfg, path: str) -> list[str]:
    if not isinstance(cfg, dict):
        return [f"{path or '<root>'}: expected an object"]
    errors = []
    if isinstance(cmd, click.Group):
        for key, sub in cfg.items():
            child = cmd.commands.get(key)
            if child is None:
                errors.append(f"unknown key {path + key!r}")
            else:
                errors.extend(_config_errors(child, sub, f"{path}{key}."))
    else:
        names = {p.name for p in cmd.params}
        errors.extend(f"unknown key {path + k!r}" for k in cfg if k not in names)
    return errors


def _load_config(ctx: click.Context, _param, value):
    if value is None:
        return None
    try:
        cfg = load_json(value)
    except (OSError, ValueError) as exc:
        raise click.BadParameter(f"cannot read run file: {exc}") from None
    errors = _config_errors(ctx.command, cfg, "")
    if errors:
        raise click.BadParameter("; ".join(errors))
    ctx.default_map = cfg
    return value


def _echo_config(ctx: click.Context) -> None:
    names = []
    c = ctx
    while c is not None:
        names.append(c.info_name)
        c = c.parent
    resolved = {k: v for k, v in sorted(ctx.params.items())}
    click.echo("config " + json.dumps({"command": " ".join(reversed(names[:-1])),
                                       "options": resolved}, sort_keys=True, default=str),
               err=True)


class _Command(click.Command):
    """Echo the resolved config and map library errors to exit code 1."""

    def invoke(self, ctx):
        _echo_config(ctx)
        try:
            return super().invoke(ctx)
        except (MosError, ValueError, OSError, FloatingPointError) as exc:
            raise click.ClickException(str(exc)) from None


class _Group(click.Group):
    command_class = _Command
    group_class = type


def write_predictions(scores: dict[str, float], path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for uid, s in scores.items():
            w.writerow([uid, repr(float(s))])


def read_predictions(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRED_HEADER:
            raise MosError(f"{path}: row 1: expected header utterance_id,score")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise MosError(f"{path}: row {rowno}: expected 2 columns")
            try:
                val = float(row[1])
            except ValueError:
                raise MosError(f"{path}: row {rowno}: non-numeric score {row[1]!r}") from None
            if not math.isfinite(val):
                raise MosError(f"{path}: row {rowno}: non-finite score")
            if row[0] in out:
                raise MosError(f"{path}: row {rowno}: duplicate utterance {row[0]!r}")
            out[row[0]] = val
    return out


def _frames_for(d: ds.MosDataset, feats: str):
    cache = features.FeatureCache(feats)
    return [cache.load(uid).frames for uid in d.utterance_ids]


_existing = click.Path(exists=True, dir_okay=False)
_existing_dir = click.Path(exists=True, file_okay=False)
_out = click.Path(dir_okay=False)


# -- commands ----------------------------------------------------------------

@click.group(cls=_Group, context_settings={"show_default": True})
@click.version_option(__version__, prog_name="mosfuse")
@click.option("--config", type=_existing, callback=_load_config, is_eager=True, expose_value=False,
              help="JSON run file with per-command defaults.")
def main():
    """MOS prediction, unsupervised quality scores and score fusion."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-systems", default=5, type=click.IntRange(1))
@click.option("--utterances-per-system", default=20, type=click.IntRange(1))
@click.option("--n-listeners", default=8, type=click.IntRange(1))
@click.option("--listener-bias-std", default=0.5, type=click.FloatRange(0))
@click.option("--noise-std", default=0.3, type=click.FloatRange(0))
@click.option("--feature-dim", default=16, type=click.IntRange(1))
@click.option("--frames-per-utterance", default=40, type=click.IntRange(1))
@click.option("--n-units", default=8, type=click.IntRange(1))
@click.option("--listeners-per-utterance", default=0, type=click.IntRange(0),
              help="Raters per utterance; 0 means every listener.")
@click.option("--seed", default=0, type=int)
def synth(out_dir, n_systems, utterances_per_system, n_listeners, listener_bias_std, noise_std,
          feature_dim, frames_per_utterance, n_units, listeners_per_utterance, seed):
    """Generate a synthetic listener-rated corpus with cached features."""
    from .synth import SynthSpec, generate, write_corpus

    spec = SynthSpec(n_systems, utterances_per_system, n_listeners, listener_bias_std, noise_std,
                     feature_dim, seed, frames_per_utterance, n_units,
                     listeners_per_utterance or None)
    paths = write_corpus(generate(spec), out_dir)
    click.echo(f"wrote {paths['manifest']}")


@main.command()
@click.option("--manifest", required=True, type=_existing)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--val-fraction", default=0.2, type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--system-disjoint/--utterance-level", default=True)
@click.option("--seed", default=0, type=int)
def prepare(manifest, out_dir, val_fraction, system_disjoint, seed):
    """Validate a manifest and write a train/validation split."""
    d = ds.load_manifest(manifest)
    tr, va = ds.split(d, seed, val_fraction, system_disjoint)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    ds.write_split(tr, va, out_dir, {"seed": seed, "val_fraction": val_fraction,
                                     "system_disjoint": system_disjoint})
    click.echo(f"train {len(tr)} / val {len(va)} utterances")


@main.command("features")
@click.option("--manifest", required=True, type=_existing)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--target-rms-db", default=-26.0, type=float)
@click.option("--no-normalize", is_flag=True, help="Skip level normalization.")
@click.option("--base-dir", default=None, type=_existing_dir,
              help="Directory relative audio paths resolve against [default: cwd].")
@click.option("--jobs", default=1, type=click.IntRange(1))
def features_cmd(manifest, out_dir, target_rms_db, no_normalize, base_dir, jobs):
    """Extract and cache log-mel frames for every utterance."""
    d = ds.load_manifest(manifest)
    done = features.cache_features(d, out_dir, None if no_normalize else target_rms_db, jobs, base_dir)
    click.echo(f"cached {len(done)} utterances ({len(d) - len(done)} up to date)")


def _training_options(f):
    opts = [
        click.option("--mode", default="ssl_mos", type=click.Choice(predictor.MODES)),
        click.option("--seed", default=0, type=int),
        click.option("--batch-size", default=4, type=click.IntRange(1)),
        click.option("--lr", default=1e-4, type=click.FloatRange(0, min_open=True)),
        click.option("--max-epochs", default=1000, type=click.IntRange(1)),
        click.option("--patience", default=10, type=click.IntRange(1)),
        click.option("--alpha", default=1.0, type=click.FloatRange(0)),
        click.option("--beta", default=1.0, type=click.FloatRange(0)),
        click.option("--embedding-dim", default=128, type=click.IntRange(1)),
        click.option("--adapter-dim", default=64, type=click.IntRange(1)),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _require_listeners(manifest: str, mode: str) -> None:
    if mode == "le_ssl_mos" and "listener_id" not in [h.strip() for h in ds.read_manifest_header(manifest)]:
        raise click.UsageError(f"--mode le_ssl_mos needs a listener_id column in {manifest}")


@main.command()
@click.option("--train", "train_manifest", required=True, type=_existing)
@click.option("--val", "val_manifest", required=True, type=_existing)
@click.option("--features", "feats", required=True, type=_existing_dir)
@click.option("--out", required=True, type=_out)
@click.option("--log", "log_path", default=None, type=_out, help="Per-epoch loss CSV.")
@_training_options
def train(train_manifest, val_manifest, feats, out, log_path, mode, seed, batch_size, lr, max_epochs,
          patience, alpha, beta, embedding_dim, adapter_dim):
    """Train an SSL-MOS or LE-SSL-MOS predictor with early stopping."""
    _require_listeners(train_manifest, mode)
    cfg = predictor.TrainingConfig(alpha, beta, lr, batch_size, max_epochs, patience, seed,
                                   adapter_dim, embedding_dim)
    tr = ds.load_manifest(train_manifest)
    va = ds.load_manifest(val_manifest)
    model, log = predictor.train(tr, va, features.FeatureCache(feats), cfg, mode)
    predictor.save_model(model, out)
    if log_path:
        log.write_csv(log_path)
    click.echo(f"best epoch {log.best_epoch}, validation L1 {model.best_val_loss:.6f}")


@main.command()
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--manifest", required=True, type=_existing)
@click.option("--features", "feats", required=True, type=_existing_dir)
@click.option("--out", required=True, type=_out)
@click.option("--oof", default=0, type=click.IntRange(0),
              help="Instead of applying the model, retrain its recipe in K folds over the "
                   "manifest and write out-of-fold predictions (0 disables).")
def predict(model_path, manifest, feats, out, oof):
    """Write utterance_id,score predictions from the MOS branch."""
    model = predictor.load_model(model_path)
    if oof == 1:
        raise click.BadParameter("need at least 2 folds", param_hint="--oof")
    cache = features.FeatureCache(feats)
    if oof:
        _require_listeners(manifest, model.mode)
        d = ds.load_manifest(manifest)
        scores = predictor.out_of_fold_predictions(d, cache, model.config, model.mode, oof)
    else:
        d = ds.load_manifest(manifest)
        pooled = cache.pooled(d)
        scores = dict(zip(d.utterance_ids, predictor.predict_many(model, pooled).tolist()))
    write_predictions(scores, out)


@main.group(cls=_Group)
def speechlm():
    """Unit quantizer and unit LM for SpeechLMScore."""


@speechlm.command("fit")
@click.option("--manifest", required=True, type=_existing)
@click.option("--features", "feats", required=True, type=_existing_dir)
@click.option("--quantizer-out", required=True, type=_out)
@click.option("--lm-out", required=True, type=_out)
@click.option("--clusters", default=200, type=click.IntRange(2))
@click.option("--order", default=3, type=click.IntRange(1))
@click.option("--max-iter", default=300, type=click.IntRange(1))
@click.option("--tol", default=1e-6, type=click.FloatRange(0))
@click.option("--no-dedup", is_flag=True, help="Keep repeated consecutive units.")
@click.option("--seed", default=0, type=int)
def speechlm_fit(manifest, feats, quantizer_out, lm_out, clusters, order, max_iter, tol, no_dedup, seed):
    """Fit k-means units on all frames and a unit LM on the unit sequences."""
    d = ds.load_manifest(manifest)
    frames = _frames_for(d, feats)
    q = us.kmeans_fit(frames, clusters, seed, max_iter, tol)
    lm = us.ulm_train([us.quantize(q, f, not no_dedup) for f in frames], order, q.K)
    us.save_quantizer(q, quantizer_out)
    us.save_lm(lm, lm_out)
    click.echo(f"k-means converged in {q.n_iter} iterations, inertia {q.inertia:.6g}")


@speechlm.command("finetune")
@click.option("--lm", "lm_path", required=True, type=_existing)
@click.option("--quantizer", required=True, type=_existing)
@click.option("--manifest", required=True, type=_existing)
@click.option("--features", "feats", required=True, type=_existing_dir)
@click.option("--out", required=True, type=_out)
@click.option("--min-mos", default=4.0, type=float, help="Keep utterances with MOS strictly above this.")
@click.option("--mix", default=0.5, type=click.FloatRange(0, 1, min_open=True))
@click.option("--no-dedup", is_flag=True)
def speechlm_finetune(lm_path, quantizer, manifest, feats, out, min_mos, mix, no_dedup):
    """Adapt the unit LM toward high-MOS domain speech."""
    lm = us.load_lm(lm_path)
    q = us.load_quantizer(quantizer)
    d = ds.load_manifest(manifest).filter_min_mos(min_mos)
    seqs = [us.quantize(q, f, not no_dedup) for f in _frames_for(d, feats)]
    us.save_lm(us.ulm_finetune(lm, seqs, mix), out)
    click.echo(f"fine-tuned on {len(seqs)} utterances")


@speechlm.command("score")
@click.option("--lm", "lm_path", required=True, type=_existing)
@click.option("--quantizer", required=True, type=_existing)
@click.option("--manifest", required=True, type=_existing)
@click.option("--features", "feats", required=True, type=_existing_dir)
@click.option("--out", required=True, type=_out)
@click.option("--no-dedup", is_flag=True)
def speechlm_score(lm_path, quantizer, manifest, feats, out, no_dedup):
    """Write per-utterance SpeechLMScore (mean log-probability per token)."""
    lm = us.load_lm(lm_path)
    q = us.load_quantizer(quantizer)
    d = ds.load_manifest(manifest)
    scores = {uid: us.speechlm_score(lm, us.quantize(q, f, not no_dedup))
              for uid, f in zip(d.utterance_ids, _frames_for(d, feats))}
    write_predictions(scores, out)


@main.command()
@click.option("--posteriors", required=True, type=_existing)
@click.option("--out", required=True, type=_out)
@click.option("--manifest", default=None, type=_existing,
              help="If given, require a score for every utterance and write them in manifest order.")
def confidence(posteriors, out, manifest):
    """Write per-utterance ASR confidence (mean token log-probability)."""
    recs = {r.utterance_id: us.confidence_score(r) for r in us.load_posteriors(posteriors)}
    if manifest:
        d = ds.load_manifest(manifest)
        missing = [uid for uid in d.utterance_ids if uid not in recs]
        if missing:
            raise MosError(f"{posteriors}: no posteriors for utterance {missing[0]!r}")
        recs = {uid: recs[uid] for uid in d.utterance_ids}
    write_predictions(recs, out)


def _named_paths(values, what):
    out = {}
    for v in values:
        name, sep, path = v.partition("=")
        if not sep or not name or not path:
            raise click.BadParameter(f"expected NAME=PATH, got {v!r}", param_hint=what)
        if name in out:
            raise click.BadParameter(f"duplicate name {name!r}", param_hint=what)
        out[name] = path
    return out


@main.command()
@click.option("--manifest", required=True, type=_existing, help="Labels used for ranking.")
@click.option("--candidate", "candidates", multiple=True, required=True, metavar="NAME=PATH",
              help="Prediction CSV of one supervised subsystem; repeatable.")
@click.option("--q", "Q", required=True, type=click.IntRange(1))
@click.option("--out", required=True, type=_out)
def select(manifest, candidates, Q, out):
    """Keep the top-Q supervised subsystems by utterance-level SRCC."""
    paths = _named_paths(candidates, "--candidate")
    if Q > len(paths):
        raise click.BadParameter(f"Q={Q} exceeds the {len(paths)} candidates", param_hint="--q")
    d = ds.load_manifest(manifest)
    labels = d.labels()
    cands = {}
    for name, path in paths.items():
        preds = read_predictions(path)
        cands[name] = (metrics._as_vector(preds, d), labels)
    chosen = fusion.select_top_q(cands, Q)
    dump_json({"selected": chosen, "candidates": {n: paths[n] for n in sorted(paths)}}, out)
    click.echo(" ".join(chosen))


@main.group(cls=_Group)
def fuse():
    """Assemble subsystem columns, train the linear fuser, apply it."""


@fuse.command("assemble")
@click.option("--manifest", required=True, type=_existing)
@click.option("--column", "columns", multiple=True, required=True, metavar="NAME:KIND=PATH",
              help=f"Score CSV for one subsystem; KIND is one of {', '.join(fusion.KINDS)}.")
@click.option("--out", required=True, type=_out)
def fuse_assemble(manifest, columns, out):
    """Join score CSVs into one fusion table (plus a schema sidecar)."""
    d = ds.load_manifest(manifest)
    cols = []
    for key, path in _named_paths(columns, "--column").items():
        name, _, kind = key.partition(":")
        if kind not in fusion.KINDS:
            raise click.BadParameter(f"column {key!r}: kind must be one of {fusion.KINDS}",
                                     param_hint="--column")
        cols.append((name, kind, read_predictions(path)))
    scores, _ = fusion.assemble(cols, d)
    fusion.write_scores(scores, out)


def _scores_with_labels(scores_path, manifest):
    s = fusion.read_scores(scores_path)
    d = ds.load_manifest(manifest)
    by_id = {uid: i for i, uid in enumerate(s.utterance_ids)}
    missing = [uid for uid in d.utterance_ids if uid not in by_id]
    if missing:
        raise MosError(f"{scores_path}: no row for utterance {missing[0]!r}")
    idx = [by_id[uid] for uid in d.utterance_ids]
    return fusion.SubsystemScores(tuple(d.utterance_ids), s.columns, s.matrix[idx]), d.labels()


@fuse.command("train")
@click.option("--train", "train_scores", required=True, type=_existing)
@click.option("--train-manifest", required=True, type=_existing)
@click.option("--val", "val_scores", required=True, type=_existing)
@click.option("--val-manifest", required=True, type=_existing)
@click.option("--out", required=True, type=_out)
@click.option("--log", "log_path", default=None, type=_out, help="Per-epoch MSE CSV.")
@click.option("--lr", default=1e-5, type=click.FloatRange(0, min_open=True))
@click.option("--batch-size", default=4, type=click.IntRange(1))
@click.option("--max-epochs", default=1000, type=click.IntRange(1))
@click.option("--patience", default=20, type=click.IntRange(1))
@click.option("--rho", default=0.9, type=click.FloatRange(0, 1, min_open=True, max_open=True),
              help="RMSProp decay.")
@click.option("--eps", default=1e-8, type=click.FloatRange(0, min_open=True), help="RMSProp epsilon.")
@click.option("--calibrate", is_flag=True,
              help="Map each column affinely onto the training label scale before fusing.")
@click.option("--seed", default=0, type=int)
def fuse_train(train_scores, train_manifest, val_scores, val_manifest, out, log_path, lr, batch_size,
               max_epochs, patience, rho, eps, calibrate, seed):
    """Train bias-free linear fusion weights with RMSProp on MSE."""
    cfg = fusion.FuserConfig(lr, batch_size, max_epochs, patience, rho, eps, seed)
    tr = _scores_with_labels(train_scores, train_manifest)
    va = _scores_with_labels(val_scores, val_manifest)
    model, log = fusion.train_fuser(tr, va, cfg, calibrate)
    fusion.save_fusion(model, out)
    if log_path:
        with atomic_write(log_path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for i, (a, b) in enumerate(zip(log.train_mse, log.val_mse), start=1):
                w.writerow([i, repr(a), repr(b)])
    click.echo("weights " + " ".join(f"{n}={w:.6g}" for n, w in zip(model.column_names, model.weights)))


@fuse.command("apply")
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--scores", required=True, type=_existing)
@click.option("--out", required=True, type=_out)
def fuse_apply(model_path, scores, out):
    """Write fused utterance_id,score predictions."""
    m = fusion.load_fusion(model_path)
    s = fusion.read_scores(scores)
    write_predictions(dict(zip(s.utterance_ids, fusion.fuse_apply(m, s).tolist())), out)


@main.command("eval")
@click.option("--pred", required=True, type=_existing)
@click.option("--manifest", required=True, type=_existing)
@click.option("--out", default=None, type=_out, help="JSON report path.")
def eval_cmd(pred, manifest, out):
    """Utterance- and system-level MSE, LCC, SRCC and KTAU."""
    d = ds.load_manifest(manifest)
    try:
        report = metrics.evaluate(read_predictions(pred), d)
    except ValueError as exc:
        raise MosError(f"{pred}: {exc}") from None
    if out:
        with atomic_write(out) as fh:
            fh.write(report.to_json())
    click.echo(report.to_text(), nl=False)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
