"""Run configuration: a flat ``key = value`` text format with ``#`` comments,
named presets, and command-line overrides."""

import json
from dataclasses import dataclass

from . import __version__
from . import models as M
from .data import SHAPE_KINDS, DatasetConfig, RenderConfig
from .errors import ConfigError
from .evaluation import EpisodeSpec
from .pointcloud import TRANSFORM_KINDS, AugmentationConfig, ImageAugConfig
from .training import TrainConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text):
    items = tuple(x.strip() for x in text.split(",") if x.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _int_list(text):
    return tuple(int(x) for x in _str_list(text))


def _float_pair(text):
    lo, hi = (float(x) for x in _str_list(text))
    return (lo, hi)


# key -> (parser, default); defaults are the desk ("toy") preset
KEYS = {
    # dataset
    "classes": (_str_list, SHAPE_KINDS),
    "per_class": (int, 150),
    "test_per_class": (int, 50),
    "n_pts": (int, 256),
    "random_pose": (_bool, True),
    "prerender": (_bool, False),
    "image_size": (int, 32),
    "focal": (float, 2.0),
    "camera_radius": (_float_pair, (2.0, 3.0)),
    "render_pool": (int, 8),
    # model
    "variant": (str, "pointnet_lite"),
    "point_widths": (_int_list, (64, 128)),
    "feature_dim": (int, 128),
    "proj_dim": (int, 64),
    "k": (int, 8),
    "conv_channels": (_int_list, (8, 16)),
    # training
    "objective": (str, "joint"),
    "epochs": (int, 30),
    "batch_size": (int, 16),
    "tau": (float, 0.1),
    "lr_max": (float, 1e-3),
    "lr_min": (float, 0.0),
    "weight_decay": (float, 1e-4),
    "decoupled_weight_decay": (_bool, False),
    "n_images": (int, 1),
    "checkpoint_every": (int, 10),
    # point augmentation
    **{f"p_{kind}": (float, p) for kind, p in AugmentationConfig().probabilities.items()},
    "scale_range": (_float_pair, (0.8, 1.25)),
    "translation_range": (float, 0.2),
    "jitter_sigma": (float, 0.01),
    "jitter_clip": (float, 0.05),
    "elastic_grid": (int, 4),
    "elastic_magnitude": (float, 0.05),
    # image augmentation
    "crop_min": (float, 0.8),
    "color_jitter": (_float_pair, (0.8, 1.2)),
    "flip_prob": (float, 0.5),
    # evaluation
    "eval_n_pts": (int, 128),
    "svm_lambda": (float, 1e-3),
    "svm_epochs": (int, 200),
    "svm_step": (float, 0.1),
    "n_way": (int, 5),
    "k_shot": (int, 1),
    "q_query": (int, 15),
    "episodes": (int, 10),
    "objectives": (_str_list, ("imid", "cmid", "joint", "random")),
    "seeds": (_int_list, (0, 1, 2)),
    "n_values": (_int_list, (1, 2, 3)),
    # run
    "seed": (int, 0),
    "workers": (int, 1),
    "data_dir": (str, "data"),
    "out_dir": (str, "runs"),
    "checkpoint": (str, ""),
}

PRESETS = {
    "toy": {},
    # the full-scale recipe; recorded for reference, far beyond a laptop budget
    "paper": {"epochs": 100, "n_pts": 2048, "eval_n_pts": 1024, "variant": "dgcnn_lite", "k": 20,
              "point_widths": (64, 128), "feature_dim": 1024, "proj_dim": 256, "image_size": 64,
              "episodes": 10},
}

# keys that change how a run executes but never its results
RUNTIME_KEYS = ("workers", "data_dir", "out_dir", "checkpoint")


def _parse_value(key, text, line=None):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", key=key, line=line)
    parser = KEYS[key][0]
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value: {exc}", key=key, line=line) from exc


def parse_text(text):
    """Parse ``key = value`` lines into a dict; ``#`` starts a comment."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(key, value, number)
    return values


@dataclass(eq=False)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def echo(self):
        """Resolved values as JSON-ready data, with the code version."""
        out = {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}
        out["version"] = __version__
        return out

    def echo_text(self):
        return json.dumps(self.echo(), sort_keys=True)

    def architecture(self):
        v = self.values
        return M.Architecture(variant=v["variant"], point_widths=v["point_widths"], feature_dim=v["feature_dim"],
                              proj_dim=v["proj_dim"], k=v["k"], image_size=v["image_size"],
                              conv_channels=v["conv_channels"])

    def augmentation(self):
        v = self.values
        return AugmentationConfig(
            probabilities={kind: v[f"p_{kind}"] for kind in TRANSFORM_KINDS},
            scale_range=v["scale_range"], translation_range=v["translation_range"],
            jitter_sigma=v["jitter_sigma"], jitter_clip=v["jitter_clip"],
            elastic_grid=v["elastic_grid"], elastic_magnitude=v["elastic_magnitude"],
        )

    def image_augmentation(self):
        v = self.values
        return ImageAugConfig(crop_min=v["crop_min"], jitter_range=v["color_jitter"], flip_prob=v["flip_prob"])

    def train_config(self):
        v = self.values
        return TrainConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], tau=v["tau"], lr_max=v["lr_max"], lr_min=v["lr_min"],
            weight_decay=v["weight_decay"], decoupled_weight_decay=v["decoupled_weight_decay"],
            objective=v["objective"], n_images=v["n_images"], seed=v["seed"],
            checkpoint_every=v["checkpoint_every"], arch=self.architecture(), augment=self.augmentation(),
            image_augment=self.image_augmentation(),
        )

    def dataset_config(self, split):
        v = self.values
        render = RenderConfig(v["image_size"], v["focal"], v["camera_radius"], v["render_pool"])
        per_class = v["per_class"] if split == "train" else v["test_per_class"]
        return DatasetConfig(classes=v["classes"], per_class=per_class, n_pts=v["n_pts"], seed=v["seed"],
                             split=split, random_pose=v["random_pose"], prerender=v["prerender"], render=render)

    def episode_spec(self):
        v = self.values
        return EpisodeSpec(v["n_way"], v["k_shot"], v["q_query"], v["episodes"], v["seed"])

    def fit_options(self):
        v = self.values
        return {"lam": v["svm_lambda"], "epochs": v["svm_epochs"], "step": v["svm_step"]}

    def validate(self):
        if self.values["workers"] < 1:
            raise ConfigError("workers must be >= 1", key="workers")
        if self.values["eval_n_pts"] < 1:
            raise ConfigError("eval_n_pts must be >= 1", key="eval_n_pts")
        self.train_config().validate()
        for split in ("train", "test"):
            self.dataset_config(split).validate()
        self.episode_spec().validate()
        return self


def resolve(file_values=None, overrides=None, preset="toy"):
    """Defaults, then preset, then config file, then overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", key="preset")
    values = {k: default for k, (_, default) in KEYS.items()}
    values.update(PRESETS[preset])
    values.update(file_values or {})
    for key, text in (overrides or {}).items():
        values[key] = _parse_value(key, text) if isinstance(text, str) else text
    return RunConfig(values).validate()


def parse_config(path=None, overrides=None, preset="toy"):
    """RunConfig from an optional config file plus string overrides."""
    file_values = {}
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", key="config") from exc
        file_values = parse_text(text)
    return resolve(file_values, overrides, preset)
