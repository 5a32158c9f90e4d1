"""Command-line entry point: ``xmodal <command> [--config FILE] [--preset NAME] [--key value ...]``.

Exit codes: 0 success, 1 domain or runtime error, 2 configuration error
or bad usage.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import config as C
from . import data as D
from . import evaluation as E
from . import losses as L
from . import models as M
from . import pointcloud as pc
from . import tensor as T
from . import training as TR
from .errors import ConfigError, IoError, XModalError

log = logging.getLogger("xmodal")

COMMANDS = ("gen-data", "pretrain", "eval-linear", "eval-fewshot", "ablate", "sweep-images", "grad-check",
            "render", "selftest")

GRAD_CHECK_ARCH = dict(point_widths=(8, 16), feature_dim=12, proj_dim=6, k=3, image_size=8, conv_channels=(2, 3))
GRAD_CHECK_TOL = 1e-5


# ---------------------------------------------------------------------------
# helpers


def _split_dir(cfg, split):
    return os.path.join(cfg["data_dir"], split)


def _load(cfg, split):
    path = _split_dir(cfg, split)
    if not os.path.exists(os.path.join(path, D.MANIFEST)):
        raise IoError(f"no dataset at {path}; run gen-data first")
    return D.load_dataset(path)


def _checkpoint_path(cfg):
    return cfg["checkpoint"] or os.path.join(cfg["out_dir"], "checkpoint.xpt")


def _append_summary(cfg, command, record):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    record = dict(record, command=command, config=cfg.echo(), version=__version__)
    with open(os.path.join(cfg["out_dir"], "summary.jsonl"), "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args):
    for split in ("train", "test"):
        ds = D.build_dataset(cfg.dataset_config(split))
        D.persist(ds, _split_dir(cfg, split), comment=cfg.echo_text())
        print(f"{split}: {len(ds)} samples, checksum {ds.checksum:016x} -> {_split_dir(cfg, split)}")
    return 0


def cmd_pretrain(cfg, args):
    ds = _load(cfg, "train")
    tc = cfg.train_config()
    t0 = time.time()
    ckpt, rows = TR.pretrain(tc, ds, out_dir=cfg["out_dir"], workers=cfg["workers"],
                             resume=cfg["checkpoint"] or None)
    for r in rows:
        print(f"epoch {r['epoch']:3d}  lr {r['lr']:.2e}  loss {r['loss']:.4f}  "
              f"imid {r['loss_imid']:.4f}  cmid {r['loss_cmid']:.4f}")
    print(f"checkpoint {ckpt.hash:016x} ({time.time() - t0:.1f}s)")
    _append_summary(cfg, "pretrain", {"checkpoint": ckpt.hash, "epochs": len(rows)})
    return 0


def cmd_eval_linear(cfg, args):
    ckpt = TR.load_checkpoint(_checkpoint_path(cfg))
    arch = cfg.architecture()
    train, test = _load(cfg, "train"), _load(cfg, "test")
    n_pts = cfg["eval_n_pts"]
    ftrain = E.extract_features(ckpt, train, n_pts, cfg["seed"], arch=arch)
    ftest = E.extract_features(ckpt, test, n_pts, cfg["seed"], arch=arch)
    acc = E.evaluate(E.fit_linear(ftrain, seed=cfg["seed"], **cfg.fit_options()), ftest)
    print(f"linear accuracy {acc:.4f}")
    _append_summary(cfg, "eval-linear", {"checkpoint": ckpt.hash, "accuracy": acc})
    return 0


def cmd_eval_fewshot(cfg, args):
    ckpt = TR.load_checkpoint(_checkpoint_path(cfg))
    feats = E.extract_features(ckpt, _load(cfg, "test"), cfg["eval_n_pts"], cfg["seed"], arch=cfg.architecture())
    spec = cfg.episode_spec()
    res = E.fewshot_eval(feats, spec, **cfg.fit_options())
    print(f"{spec.n_way}-way {spec.k_shot}-shot: {res.mean:.4f} +/- {res.std:.4f} over {spec.episodes} episodes")
    _append_summary(cfg, "eval-fewshot", {"checkpoint": ckpt.hash, "mean": res.mean, "std": res.std,
                                          "accuracies": res.accuracies})
    return 0


def cmd_ablate(cfg, args):
    train, test = _load(cfg, "train"), _load(cfg, "test")
    out = os.path.join(cfg["out_dir"], "ablation")
    rows = E.ablation_run(train, test, cfg.train_config(), cfg["objectives"], cfg["seeds"], out_dir=out,
                          workers=cfg["workers"], n_pts=cfg["eval_n_pts"])
    print("objective,seed,accuracy")
    for r in rows:
        print(f"{r['objective']},{r['seed']},{r['accuracy']:.4f}")
    for obj, acc in E.mean_by_objective(rows).items():
        print(f"mean {obj}: {acc:.4f}")
    return 0


def cmd_sweep_images(cfg, args):
    train, test = _load(cfg, "train"), _load(cfg, "test")
    out = os.path.join(cfg["out_dir"], "sweep")
    rows = E.image_count_sweep(train, test, cfg.train_config(), cfg["n_values"], out_dir=out,
                               workers=cfg["workers"], n_pts=cfg["eval_n_pts"])
    print("n_images,accuracy,checkpoint")
    for r in rows:
        print(f"{r['n_images']},{r['accuracy']:.4f},{r['checkpoint']:016x}")
    return 0


def grad_check_joint(variant="pointnet_lite", tau=0.1, seed=0):
    """Max relative finite-difference error of the joint loss through the
    full toy model on a 2-sample batch."""
    arch = M.Architecture(variant=variant, **GRAD_CHECK_ARCH)
    params = M.init_params(arch, seed).arrays
    rng = np.random.default_rng(seed)
    v1, v2 = rng.uniform(-1, 1, (2, 2, 10, 3))
    imgs = rng.uniform(0, 1, (2, arch.image_size, arch.image_size, 3))

    def loss(p):
        z1 = M.project_points(v1, p, arch)
        z2 = M.project_points(v2, p, arch)
        h = M.project_images(imgs, p, arch)
        return L.joint_loss(L.ProjectedBatch(z1, z2, h, tau))[0]

    return T.grad_check(loss, params)


def cmd_grad_check(cfg, args):
    err = grad_check_joint(cfg["variant"], cfg["tau"], cfg["seed"])
    ok = err <= GRAD_CHECK_TOL
    print(f"grad-check {cfg['variant']}: max rel. err {err:.3e} ({'pass' if ok else 'FAIL'}, tol {GRAD_CHECK_TOL:g})")
    return 0 if ok else 1


def cmd_render(cfg, args):
    rng = np.random.default_rng(cfg["seed"])
    kind = cfg["classes"][0]
    cloud = D.pose(D.generate_shape(kind, cfg["n_pts"], rng), rng)
    cam = pc.sample_camera(rng, cfg["camera_radius"], cloud.points.mean(axis=0), cfg["focal"],
                           cfg["image_size"], cfg["image_size"])
    img = pc.render(cloud, cam)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    path = os.path.join(cfg["out_dir"], f"render_{kind}_{cfg['seed']}.ppm")
    pc.write_ppm(path, img, comment=cfg.echo_text())
    print(f"{kind} -> {path} ({int((img.pixels[..., 0] > 0).sum())} lit pixels)")
    return 0


def selftest_checks(seed=0):
    """(name, passed, detail) rows for the loss oracles and gradient checks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(25):
        n, d = rng.choice([2, 3, 5, 8]), rng.choice([2, 8, 16])
        tau = rng.choice([0.05, 0.1, 0.5])
        b = L.ProjectedBatch(*rng.normal(size=(3, n, d)), tau)
        for which, fn in (("imid", L.imid_loss), ("cmid", L.cmid_loss), ("joint", lambda x: L.joint_loss(x)[0])):
            ref = L.naive_oracle(b, which)
            worst = max(worst, abs(fn(b).item() - ref) / abs(ref))
    rows = [("oracle equivalence", worst <= 1e-12, f"max rel. diff {worst:.2e}")]

    one = L.ProjectedBatch(*rng.normal(size=(3, 1, 4)))
    zero = L.joint_loss(one)[0].item() == 0.0
    same = np.ones((2, 3))
    log3 = abs(L.ntxent_pair(L.ProjectedBatch(same, same, same), 0) - np.log(3))
    rows.append(("degenerate batches", zero and log3 <= 1e-12, f"N=1 -> 0, identical -> log 3 ({log3:.1e})"))

    z1, z2, h = (T.Tensor(x, requires_grad=True) for x in rng.normal(size=(3, 4, 5)))
    T.backward(L.cmid_loss(L.ProjectedBatch(z1, z2, h, 0.2)), leaves=[z1, z2, h])
    rows.append(("prototype gradient split", bool(np.array_equal(z1.grad, z2.grad)), "dL/dz_t1 == dL/dz_t2"))

    for variant in ("pointnet_lite", "dgcnn_lite"):
        err = grad_check_joint(variant, 0.5, seed)
        rows.append((f"grad check {variant}", err <= GRAD_CHECK_TOL, f"max rel. err {err:.2e}"))
    return rows


def cmd_selftest(cfg, args):
    rows = selftest_checks(cfg["seed"])
    width = max(len(name) for name, _, _ in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 1


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "eval-linear": cmd_eval_linear,
    "eval-fewshot": cmd_eval_fewshot, "ablate": cmd_ablate, "sweep-images": cmd_sweep_images,
    "grad-check": cmd_grad_check, "render": cmd_render, "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    parser = argparse.ArgumentParser(
        prog="xmodal", usage="xmodal command [--config FILE] [--preset NAME] [--KEY VALUE ...]", description="Cross-modal contrastive point-cloud pretraining.")
    parser.add_argument("--version", action="version", version=f"xmodal {__version__}")
    parser.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--preset", default="toy", choices=sorted(C.PRESETS))
    parser.add_argument("-v", "--verbose", action="store_true")
    group = parser.add_argument_group("overrides (any config key)")
    for key in C.KEYS:
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        group.add_argument(*flags, dest=f"key_{key}", metavar="VALUE", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage text on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
    try:
        cfg = C.parse_config(args.config, overrides, args.preset)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except XModalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
