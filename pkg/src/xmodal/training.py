"""Pretraining loop: Adam with L2 weight decay, cosine-annealed learning
rate, XPT1 checkpoints and a per-epoch CSV metrics log."""

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from . import losses as L
from . import models as M
from . import tensor as T
from ._kernels import fnv1a64
from .data import make_batch
from .errors import ConfigError, CorruptCheckpoint, IoError, NonFiniteLoss, ShapeError, VersionError
from .pointcloud import AugmentationConfig, ImageAugConfig
from .streams import stream

log = logging.getLogger(__name__)

OBJECTIVES = ("imid", "cmid", "joint")
CHECKPOINT_MAGIC = b"XPT1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "epoch,lr,loss,loss_imid,loss_cmid"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    tau: float = L.DEFAULT_TAU
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    objective: str = "joint"
    n_images: int = 1
    seed: int = 0
    checkpoint_every: int = 10
    arch: M.Architecture = field(default_factory=M.Architecture)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    image_augment: ImageAugConfig = field(default_factory=ImageAugConfig)

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}", key="objective")
        for key in ("epochs", "batch_size", "n_images", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        if self.batch_size < 2:
            raise ConfigError("contrastive batches need at least 2 samples", key="batch_size")
        if not self.tau > 0:
            raise ConfigError("temperature must be positive", key="tau")
        if self.lr_max < 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        self.arch.validate()
        self.augment.validate()
        self.image_augment.validate()

    def echo(self):
        """Plain-dict view embedded in checkpoints and summaries."""
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return json.loads(json.dumps(d, default=list))


def trainable_groups(objective):
    if objective == "imid":
        return ("point_encoder", "point_head")
    return M.GROUPS


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass(eq=False)
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled: bool = False

    @classmethod
    def zeros_like(cls, arrays, weight_decay=1e-4, decoupled=False):
        return cls({n: np.zeros_like(a) for n, a in arrays.items()},
                   {n: np.zeros_like(a) for n, a in arrays.items()},
                   weight_decay=weight_decay, decoupled=decoupled)


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction for every name in ``grads``.

    ``params`` maps names to arrays, updated in place and returned. Weight
    decay is folded into the gradient (g + lambda*w) unless the state asks
    for the decoupled form.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise ShapeError(f"gradient / state for {name} not aligned with {w.shape}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * w
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            update = update + lr * state.weight_decay * w
        params[name] = w - update
    return params, state


def cosine_lr(t, total, lr_max, lr_min=0.0):
    if not 0 <= t <= total:
        raise ConfigError(f"epoch {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# forward pass for one batch


def batch_losses(batch, p, config):
    """(selected loss, L_imid or None, L_cmid or None) for an assembled batch."""
    arch, tau = config.arch, config.tau
    z1 = M.project_points(batch.clouds_t1, p, arch)
    z2 = M.project_points(batch.clouds_t2, p, arch)
    if config.objective == "imid":
        li = L.imid_loss(L.ProjectedBatch(z1, z2, z1, tau))
        return li, li, None
    views = [M.project_images([imgs[j] for imgs in batch.images], p, arch) for j in range(config.n_images)]
    h = L.multi_image_feature(views)
    pb = L.ProjectedBatch(z1, z2, h, tau)
    if config.objective == "cmid":
        lc = L.cmid_loss(pb)
        return lc, None, lc
    return L.joint_loss(pb)


def epoch_batches(n_samples, batch_size, seed, epoch):
    """Shuffled index batches; a trailing partial batch is dropped unless it is the only one."""
    order = stream(seed, epoch, "shuffle").permutation(n_samples)
    if n_samples <= batch_size:
        return [order]
    count = n_samples // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(count)]


def _value(x):
    return float("nan") if x is None else x.item()


def train_step(params, state, batch, config, lr):
    groups = trainable_groups(config.objective)
    p = params.tensors(requires_grad=True, groups=groups)
    loss, li, lc = batch_losses(batch, p, config)
    if not np.isfinite(loss.item()):
        raise NonFiniteLoss(
            f"loss={loss.item()} L_imid={_value(li)} L_cmid={_value(lc)} at step {state.t + 1}, "
            f"samples {batch.sample_ids}"
        )
    leaves = [p[n] for n in params.names(groups)]
    T.backward(loss, leaves=leaves)
    grads = {n: p[n].grad for n in params.names(groups)}
    adam_step(params.arrays, grads, state, lr)
    return loss.item(), _value(li), _value(lc)


def train_epoch(ds, params, state, config, epoch, workers=1):
    """One pass over ``ds``; returns mean (loss, loss_imid, loss_cmid) and the lr used."""
    lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
    with_images = config.objective != "imid"
    rows = []
    for idx in epoch_batches(len(ds), config.batch_size, config.seed, epoch):
        batch = make_batch(ds, idx, config.augment, config.image_augment, config.seed, epoch,
                           config.n_images, workers=workers, with_images=with_images)
        rows.append(train_step(params, state, batch, config, lr))
    mean = np.mean(np.array(rows), axis=0)
    return {"epoch": epoch, "lr": float(lr), "loss": float(mean[0]), "loss_imid": float(mean[1]),
            "loss_cmid": float(mean[2])}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class Checkpoint:
    arch: M.Architecture
    arrays: dict
    state: OptimizerState
    epoch: int
    config: dict
    version: int = CHECKPOINT_VERSION
    hash: int = None

    @property
    def params(self):
        return M.ModelParams(self.arch, self.arrays)


def _descriptor(ckpt):
    return {
        "arch": ckpt.arch.to_dict(),
        "names": [[n, list(a.shape)] for n, a in ckpt.arrays.items()],
        "keep": ["point_encoder"],
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "code_version": __version__,
        "optimizer": {
            "t": ckpt.state.t, "beta1": ckpt.state.beta1, "beta2": ckpt.state.beta2,
            "eps": ckpt.state.eps, "weight_decay": ckpt.state.weight_decay,
            "decoupled": ckpt.state.decoupled,
        },
    }


def encode_checkpoint(ckpt):
    desc = json.dumps(_descriptor(ckpt), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(desc)), desc]
    for table in (ckpt.arrays, ckpt.state.m, ckpt.state.v):
        for name in ckpt.arrays:
            block = np.ascontiguousarray(table[name], dtype="<f8").tobytes()
            parts.append(struct.pack("<Q", len(block)))
            parts.append(block)
    body = b"".join(parts)
    digest = fnv1a64(body)
    ckpt.hash = digest
    return body + struct.pack("<Q", digest)


def decode_checkpoint(buf):
    if len(buf) < 20 or buf[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("not an XPT1 checkpoint")
    body, (digest,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if fnv1a64(body) != digest:
        raise CorruptCheckpoint("checkpoint hash mismatch")
    (version,) = struct.unpack("<I", body[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", body[8:12])
    desc = json.loads(body[12:12 + dlen].decode("utf-8"))
    pos = 12 + dlen
    tables = []
    for _ in range(3):
        table = {}
        for name, shape in desc["names"]:
            (blen,) = struct.unpack("<Q", body[pos:pos + 8])
            pos += 8
            table[name] = np.frombuffer(body[pos:pos + blen], dtype="<f8").astype(np.float64).reshape(shape)
            pos += blen
        tables.append(table)
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes in checkpoint payload")
    arch = M.Architecture.from_dict(desc["arch"])
    opt = desc["optimizer"]
    state = OptimizerState(tables[1], tables[2], opt["t"], opt["beta1"], opt["beta2"], opt["eps"],
                           opt["weight_decay"], opt["decoupled"])
    return Checkpoint(arch, tables[0], state, desc["epoch"], desc["config"], version, digest)


def save_checkpoint(path, ckpt):
    """Atomic write (temp file then rename); returns the content hash."""
    payload = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return ckpt.hash


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            return decode_checkpoint(fh.read())
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# metrics log


def _comment_lines(config_echo):
    return [f"# version={__version__}", f"# config={json.dumps(config_echo, sort_keys=True)}"]


def write_metrics(path, rows, config_echo):
    lines = _comment_lines(config_echo) + [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r['epoch']},{r['lr']!r},{r['loss']!r},{r['loss_imid']!r},{r['loss_cmid']!r}")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write metrics {path}: {exc}") from exc


def read_metrics(path):
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != METRICS_HEADER:
        raise IoError(f"{path} lacks the metrics header")
    for ln in lines[1:]:
        e, lr, loss, li, lc = ln.split(",")
        rows.append({"epoch": int(e), "lr": float(lr), "loss": float(loss),
                     "loss_imid": float(li), "loss_cmid": float(lc)})
    return rows


# ---------------------------------------------------------------------------
# full run


def pretrain(config, ds, out_dir=None, workers=1, resume=None, initial=None, until=None):
    """Train for ``config.epochs`` epochs (or the remainder after ``resume``).

    Writes ``checkpoint.xpt`` every ``checkpoint_every`` epochs and at the end,
    plus ``metrics.csv``, when ``out_dir`` is given. ``until`` stops early
    after that many epochs of the schedule. Returns (checkpoint, rows).
    """
    config.validate()
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        if ckpt.arch != config.arch:
            raise ConfigError("checkpoint architecture differs from the configuration", key="arch")
        params = M.ModelParams(ckpt.arch, {n: a.copy() for n, a in ckpt.arrays.items()})
        state = OptimizerState({n: a.copy() for n, a in ckpt.state.m.items()},
                               {n: a.copy() for n, a in ckpt.state.v.items()}, ckpt.state.t,
                               ckpt.state.beta1, ckpt.state.beta2, ckpt.state.eps,
                               ckpt.state.weight_decay, ckpt.state.decoupled)
        start = ckpt.epoch
    else:
        params = initial.copy() if initial is not None else M.init_params(config.arch, config.seed)
        state = OptimizerState.zeros_like(params.arrays, config.weight_decay, config.decoupled_weight_decay)
        start = 0
    echo = config.echo()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    ckpt = Checkpoint(config.arch, params.arrays, state, start, echo)
    stop = config.epochs if until is None else min(until, config.epochs)
    for epoch in range(start, stop):
        row = train_epoch(ds, params, state, config, epoch, workers=workers)
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.5f imid %.5f cmid %.5f", epoch, row["lr"], row["loss"],
                 row["loss_imid"], row["loss_cmid"])
        ckpt = Checkpoint(config.arch, params.arrays, state, epoch + 1, echo)
        if out_dir is not None:
            write_metrics(os.path.join(out_dir, "metrics.csv"), rows, echo)
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == stop:
                save_checkpoint(os.path.join(out_dir, "checkpoint.xpt"), ckpt)
    if ckpt.hash is None:
        encode_checkpoint(ckpt)
    return ckpt, rows


def with_overrides(config, **changes):
    return replace(config, **changes)
