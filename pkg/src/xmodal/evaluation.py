"""Frozen-feature evaluation: linear probe, few-shot episodes, the
objective ablation and the rendered-image-count sweep."""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import models as M
from . import pointcloud as pc
from .errors import ArchMismatch, ConfigError, DegenerateSplit, InsufficientSamples, IoError, ShapeError
from .streams import stream

log = logging.getLogger(__name__)

ABLATION_OBJECTIVES = ("imid", "cmid", "joint")
RANDOM_BASELINE = "random"


@dataclass(eq=False)
class FeatureTable:
    rows: np.ndarray
    labels: np.ndarray
    checkpoint_hash: int = None
    n_pts: int = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise ShapeError(f"{self.rows.shape} rows for {len(self.labels)} labels")
        if not np.isfinite(self.rows).all():
            raise ShapeError("feature table has non-finite entries")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return FeatureTable(self.rows[idx], self.labels[idx], self.checkpoint_hash, self.n_pts)


def _params_of(source, arch):
    """(ModelParams, hash) from a Checkpoint or ModelParams."""
    params = source.params if hasattr(source, "state") else source
    if arch is not None and params.arch != arch:
        raise ArchMismatch(f"checkpoint architecture {params.arch} differs from {arch}")
    return params, getattr(source, "hash", None)


def extract_features(source, ds, n_pts=None, seed=0, arch=None):
    """Point-encoder embeddings (no projection head, no augmentation).

    Every sample draws its points from its own stream and runs through the
    encoder alone, so a row does not depend on which other samples are
    processed or in what order.
    """
    params, digest = _params_of(source, arch)
    p = params.tensors()
    rows = []
    for s in ds.samples:
        cloud = s.cloud if n_pts is None else pc.sample_points(s.cloud, n_pts, stream(seed, "eval", s.sample_id))
        rows.append(M.point_forward([cloud], p, params.arch).data[0])
    width = params.arch.feature_dim
    table = np.array(rows).reshape(len(rows), width)
    return FeatureTable(table, ds.labels, digest, n_pts)


# ---------------------------------------------------------------------------
# linear probe


@dataclass(eq=False)
class LinearClassifier:
    weights: np.ndarray  # C x F
    bias: np.ndarray  # C
    classes: np.ndarray  # sorted class ids, row c of weights scores classes[c]
    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray  # features with zero spread on the fit split are dropped
    hyper: dict = field(default_factory=dict)

    def standardize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"features of width {x.shape[-1]} for a classifier of width {self.weights.shape[1]}")
        return np.where(self.mask, (x - self.mean) / self.std, 0.0)

    def scores(self, x):
        return self.standardize(x) @ self.weights.T + self.bias

    def predict(self, x):
        # argmax returns the first maximum, i.e. the smallest class id on ties
        return self.classes[np.argmax(self.scores(x), axis=1)]


def fit_linear(features, lam=1e-3, epochs=200, step=0.1, seed=0, batch_size=32, classes=None):
    """One-vs-rest hinge classifier by seeded mini-batch sub-gradient descent.

    Minimizes (1/M) sum max(0, 1 - y (w.x + b)) + lam |w|^2 per class on
    standardized features. The step size at epoch t (1-based) is step / t and
    the regularizer is applied as an implicit shrink w / (1 + 2 eta lam),
    which stays stable for any lam.
    """
    x, y = features.rows, features.labels
    present = np.unique(y)
    classes = present if classes is None else np.asarray(sorted(classes))
    missing = np.setdiff1d(classes, present)
    if len(classes) < 2:
        raise DegenerateSplit(f"need at least 2 classes, got {classes.tolist()}")
    if len(missing):
        raise DegenerateSplit(f"classes {missing.tolist()} absent from the fit split")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    mask = std > 1e-12
    std = np.where(mask, std, 1.0)
    z = np.where(mask, (x - mean) / std, 0.0)
    targets = np.where(y[:, None] == classes[None, :], 1.0, -1.0)  # M x C
    m, f = z.shape
    w = np.zeros((len(classes), f))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(seed)
    bs = min(batch_size, m)
    for t in range(1, epochs + 1):
        eta = step / t
        order = rng.permutation(m)
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            zb, tb = z[idx], targets[idx]
            margin = tb * (zb @ w.T + b)
            active = np.where(margin < 1.0, tb, 0.0)  # B x C
            gw = active.T @ zb / len(idx)
            gb = active.sum(axis=0) / len(idx)
            w = (w + eta * gw) / (1.0 + 2.0 * eta * lam)
            b = b + eta * gb
    hyper = {"lam": lam, "epochs": epochs, "step": step, "seed": seed, "batch_size": batch_size}
    return LinearClassifier(w, b, classes, mean, std, mask, hyper)


def evaluate(clf, features):
    """Overall accuracy of ``clf`` on a FeatureTable."""
    if len(features) == 0:
        raise ShapeError("empty feature table")
    return float(np.mean(clf.predict(features.rows) == features.labels))


# ---------------------------------------------------------------------------
# few-shot episodes


@dataclass
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    episodes: int = 10
    seed: int = 0

    def validate(self):
        for key in ("n_way", "k_shot", "q_query", "episodes"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        if self.n_way < 2:
            raise ConfigError("episodes need at least 2 classes", key="n_way")


@dataclass(eq=False)
class Episode:
    classes: np.ndarray
    support: np.ndarray
    query: np.ndarray


@dataclass(eq=False)
class FewShotResult:
    mean: float
    std: float
    accuracies: list
    episodes: list

    def __iter__(self):
        return iter((self.mean, self.std))


def sample_episode(labels, spec, index):
    rng = stream(spec.seed, "episode", index)
    need = spec.k_shot + spec.q_query
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= need]
    if len(eligible) < spec.n_way:
        raise InsufficientSamples(
            f"{spec.n_way}-way {spec.k_shot}-shot with {spec.q_query} queries needs {spec.n_way} classes "
            f"with >= {need} samples; only {len(eligible)} qualify"
        )
    chosen = np.sort(rng.choice(eligible, spec.n_way, replace=False))
    support, query = [], []
    for c in chosen:
        members = rng.permutation(np.flatnonzero(labels == c))
        support.append(members[:spec.k_shot])
        query.append(members[spec.k_shot:need])
    return Episode(chosen, np.concatenate(support), np.concatenate(query))


def fewshot_eval(features, spec, **fit_kw):
    """Mean and population std of query accuracy over ``spec.episodes`` episodes."""
    spec.validate()
    accs, episodes = [], []
    for e in range(spec.episodes):
        ep = sample_episode(features.labels, spec, e)
        seed = int(stream(spec.seed, "episode-fit", e).integers(2**31))
        clf = fit_linear(features.subset(ep.support), seed=seed, **fit_kw)
        accs.append(evaluate(clf, features.subset(ep.query)))
        episodes.append(ep)
    accs = np.array(accs)
    return FewShotResult(float(accs.mean()), float(accs.std()), accs.tolist(), episodes)


# ---------------------------------------------------------------------------
# ablation and image-count sweep


def linear_probe(source, train_ds, test_ds, n_pts=None, seed=0, **fit_kw):
    train = extract_features(source, train_ds, n_pts, seed)
    test = extract_features(source, test_ds, n_pts, seed)
    clf = fit_linear(train, seed=seed, **fit_kw)
    return evaluate(clf, test)


def _write_table(path, header, rows, echo):
    buf = io.StringIO()
    buf.write(f"# version={__version__}\n")
    buf.write(f"# config={json.dumps(echo, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r[h] for h in header])
    _atomic_text(path, buf.getvalue())


def _write_jsonl(path, records):
    _atomic_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _atomic_text(path, text):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _run_cell(config, train_ds, test_ds, out_dir, tag, workers, n_pts, untrained=False):
    from .training import pretrain

    cell_dir = None if out_dir is None else os.path.join(out_dir, tag)
    if untrained:
        source = M.init_params(config.arch, config.seed)
        digest = None
    else:
        source, _ = pretrain(config, train_ds, out_dir=cell_dir, workers=workers)
        digest = source.hash
    acc = linear_probe(source, train_ds, test_ds, n_pts=n_pts, seed=config.seed)
    metrics = None if cell_dir is None or digest is None else os.path.join(cell_dir, "metrics.csv")
    return acc, digest, metrics


def ablation_run(train_ds, test_ds, base, objectives=ABLATION_OBJECTIVES, seeds=(0, 1, 2),
                 out_dir=None, workers=1, n_pts=None):
    """Pretrain + linear probe for every (objective, seed) cell.

    ``objectives`` may include "random" for an untrained encoder baseline.
    Writes ``ablation.csv`` and ``ablation.jsonl`` under ``out_dir`` when given.
    """
    for obj in objectives:
        if obj not in ABLATION_OBJECTIVES + (RANDOM_BASELINE,):
            raise ConfigError(f"unknown objective {obj!r}", key="objectives")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    for obj in objectives:
        for seed in seeds:
            untrained = obj == RANDOM_BASELINE
            cfg = replace(base, objective=base.objective if untrained else obj, seed=seed)
            acc, digest, metrics = _run_cell(cfg, train_ds, test_ds, out_dir, f"{obj}_seed{seed}", workers,
                                             n_pts, untrained)
            log.info("ablation %s seed %d: accuracy %.4f", obj, seed, acc)
            rows.append({"objective": obj, "seed": seed, "accuracy": acc, "checkpoint": digest,
                         "metrics": metrics})
    if out_dir is not None:
        echo = base.echo()
        _write_table(os.path.join(out_dir, "ablation.csv"), ["objective", "seed", "accuracy"], rows, echo)
        _write_jsonl(os.path.join(out_dir, "ablation.jsonl"),
                     [dict(r, config=echo, version=__version__) for r in rows])
    return rows


def mean_by_objective(rows):
    out = {}
    for r in rows:
        out.setdefault(r["objective"], []).append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in out.items()}


def image_count_sweep(train_ds, test_ds, base, n_values=(1, 2, 3), out_dir=None, workers=1, n_pts=None):
    """One pretrain + linear probe per number of rendered images per sample."""
    pool = train_ds.render.pool
    for n in n_values:
        if not 1 <= n <= pool:
            raise ConfigError(f"n_images {n} outside [1, {pool}]", key="n_values")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    for n in n_values:
        cfg = replace(base, n_images=n)
        acc, digest, metrics = _run_cell(cfg, train_ds, test_ds, out_dir, f"n{n}", workers, n_pts)
        log.info("sweep n_images=%d: accuracy %.4f", n, acc)
        rows.append({"n_images": n, "accuracy": acc, "checkpoint": digest, "metrics": metrics,
                     "config": cfg.echo()})
    if out_dir is not None:
        _write_table(os.path.join(out_dir, "sweep.csv"), ["n_images", "accuracy"], rows, base.echo())
        _write_jsonl(os.path.join(out_dir, "sweep.jsonl"), [dict(r, version=__version__) for r in rows])
    return rows
