"""Synthetic labelled primitives, dataset persistence, and assembly of
index-aligned (view t1, view t2, rendered images) training batches."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import pointcloud as pc
from ._kernels import fnv1a64
from .errors import ConfigError, IoError
from .pointcloud import PointCloud
from .streams import stream

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "cone", "pyramid")
MANIFEST = "manifest.tsv"


# ---------------------------------------------------------------------------
# primitive surfaces (uniform by area)


def sphere_surface(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def box_surface(n, rng, extents=(1.0, 1.0, 1.0)):
    e = np.asarray(extents, dtype=np.float64)
    # faces perpendicular to x, y, z come in pairs; area of each pair member
    areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * e
    pts[np.arange(n), axis] = sign * e[axis] / 2
    return pts


def cylinder_surface(n, rng, radius=0.5, height=1.0):
    side, cap = 2 * np.pi * radius * height, np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(part == 1, height / 2, -height / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def torus_surface(n, rng, ring_radius=0.5, tube_radius=0.2):
    """Area-uniform torus via rejection on the tube angle."""
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1, 2 * n) <= (ring_radius + tube_radius * np.cos(v)) / (ring_radius + tube_radius)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = ring_radius + tube_radius * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), tube_radius * np.sin(v)], axis=1)


def cone_surface(n, rng, radius=0.5, height=1.0):
    slant = np.hypot(radius, height)
    lateral, base = np.pi * radius * slant, np.pi * radius**2
    on_side = rng.uniform(0, 1, n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    frac = np.sqrt(rng.uniform(0, 1, n))  # distance from apex, area-uniform
    rad = radius * frac
    z = np.where(on_side, height / 2 - height * frac, -height / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _triangle_samples(a, b, c, n, rng):
    r1, r2 = np.sqrt(rng.uniform(0, 1, (n, 1))), rng.uniform(0, 1, (n, 1))
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def pyramid_surface(n, rng, base=1.0, height=1.0):
    h = base / 2
    apex = np.array([0.0, 0.0, height / 2])
    corners = np.array([[-h, -h, -height / 2], [h, -h, -height / 2], [h, h, -height / 2], [-h, h, -height / 2]])
    tris = [(apex, corners[i], corners[(i + 1) % 4]) for i in range(4)]
    tris += [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
    areas = np.array([0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris])
    which = rng.choice(len(tris), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for t, (a, b, c) in enumerate(tris):
        sel = which == t
        pts[sel] = _triangle_samples(a, b, c, int(sel.sum()), rng)
    return pts


def sample_aspect(kind, rng):
    """Random shape parameters for one instance of ``kind``."""
    if kind == "sphere":
        return {"axes": np.array([1.0, *rng.uniform(0.75, 1.25, 2)])}
    if kind == "cube":
        return {"extents": np.array([1.0, *rng.uniform(0.6, 1.4, 2)])}
    if kind == "cylinder":
        return {"radius": 0.5, "height": rng.uniform(0.6, 2.0)}
    if kind == "torus":
        return {"ring_radius": 0.5, "tube_radius": 0.5 * rng.uniform(0.2, 0.5)}
    if kind == "cone":
        return {"radius": 0.5, "height": rng.uniform(0.6, 1.6)}
    if kind == "pyramid":
        return {"base": 1.0, "height": rng.uniform(0.6, 1.6)}
    raise ConfigError(f"unknown shape kind {kind!r}", key="classes")


def generate_shape(kind, n_pts, rng, label=None):
    """Surface sample of a unit-scale primitive with random aspect parameters."""
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}", key="classes")
    if n_pts < 8:
        raise ConfigError("shapes need at least 8 points", key="n_pts")
    params = sample_aspect(kind, rng)
    if kind == "sphere":
        pts = sphere_surface(n_pts, rng) * params["axes"]
    elif kind == "cube":
        pts = box_surface(n_pts, rng, params["extents"])
    elif kind == "cylinder":
        pts = cylinder_surface(n_pts, rng, params["radius"], params["height"])
    elif kind == "torus":
        pts = torus_surface(n_pts, rng, params["ring_radius"], params["tube_radius"])
    elif kind == "cone":
        pts = cone_surface(n_pts, rng, params["radius"], params["height"])
    else:
        pts = pyramid_surface(n_pts, rng, params["base"], params["height"])
    return PointCloud(pts, label)


def pose(cloud, rng):
    """Centre, scale to unit radius and rotate uniformly at random."""
    out = pc.apply_transform(cloud, pc.Normalize())
    return pc.apply_transform(out, pc.Rotation(pc.random_rotation(rng)))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class RenderConfig:
    image_size: int = 32
    focal: float = 2.0
    radius_range: tuple = (2.0, 3.0)
    pool: int = 8  # distinct camera views available per sample


@dataclass
class DatasetConfig:
    classes: tuple = SHAPE_KINDS
    per_class: int = 150
    n_pts: int = 256
    seed: int = 0
    split: str = "train"
    random_pose: bool = True
    prerender: bool = False
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self):
        if not self.classes:
            raise ConfigError("no classes configured", key="classes")
        for c in self.classes:
            if c not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {c!r}", key="classes")
        if self.per_class < 1:
            raise ConfigError("per-class count must be >= 1", key="per_class")
        if self.split not in ("train", "test"):
            raise ConfigError("split must be train or test", key="split")
        if self.render.pool < 1:
            raise ConfigError("render pool must be >= 1", key="render_pool")


@dataclass(eq=False)
class Sample:
    sample_id: int
    cloud: PointCloud
    images: list = None  # pre-rendered pool, or None for on-the-fly rendering

    @property
    def label(self):
        return self.cloud.label


@dataclass(eq=False)
class Dataset:
    samples: list
    class_names: tuple
    split: str
    seed: int
    render: RenderConfig

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def manifest(self):
        return build_manifest(self)

    @property
    def checksum(self):
        return fnv1a64(self.manifest())

    def camera(self, sample, view):
        """Camera of pool view ``view`` for ``sample`` (fixed per dataset)."""
        r = self.render
        return pc.sample_camera(stream(self.seed, self.split, "camera", sample.sample_id, view),
                                r.radius_range, sample.cloud.points.mean(axis=0), r.focal,
                                r.image_size, r.image_size)

    def view(self, sample, view):
        if sample.images is not None:
            return sample.images[view]
        return pc.render(sample.cloud, self.camera(sample, view))


def build_dataset(config):
    """Deterministic labelled dataset of posed primitives."""
    config.validate()
    samples = []
    sid = 0
    for label, kind in enumerate(config.classes):
        for _ in range(config.per_class):
            rng = stream(config.seed, config.split, "shape", sid)
            cloud = generate_shape(kind, config.n_pts, rng, label)
            if config.random_pose:
                cloud = pose(cloud, rng)
            samples.append(Sample(sid, cloud))
            sid += 1
    ds = Dataset(samples, tuple(config.classes), config.split, config.seed, config.render)
    if config.prerender:
        for s in samples:
            s.images = [ds.view(s, j) for j in range(config.render.pool)]
    return ds


def _content_hash(ds):
    buf = b"".join(pc.encode_pcf(s.cloud) for s in ds.samples)
    return fnv1a64(buf)


def _point_file(sid):
    return f"points/{sid:06d}.pcf"


def _image_files(sample):
    if sample.images is None:
        return []
    return [f"images/{sample.sample_id:06d}_{j:02d}.ppm" for j in range(len(sample.images))]


def build_manifest(ds):
    r = ds.render
    lines = [
        "# xmodal dataset manifest v1",
        f"# version={__version__}",
        f"# split={ds.split}",
        f"# seed={ds.seed}",
        f"# classes={','.join(ds.class_names)}",
        f"# render=image_size:{r.image_size},focal:{r.focal!r},radius:{r.radius_range[0]!r}:{r.radius_range[1]!r},pool:{r.pool}",
        f"# content={_content_hash(ds):016x}",
    ]
    for s in ds.samples:
        lines.append("\t".join([str(s.sample_id), ds.class_names[s.label], _point_file(s.sample_id),
                                ",".join(_image_files(s))]))
    return ("\n".join(lines) + "\n").encode("utf-8")


def persist(ds, path, comment=None):
    """Write manifest, PCF1 point files and (pre-rendered) PPM images under ``path``."""
    try:
        os.makedirs(os.path.join(path, "points"), exist_ok=True)
        if any(s.images is not None for s in ds.samples):
            os.makedirs(os.path.join(path, "images"), exist_ok=True)
        for s in ds.samples:
            pc.write_pcf(os.path.join(path, _point_file(s.sample_id)), s.cloud)
            for name, img in zip(_image_files(s), s.images or []):
                pc.write_ppm(os.path.join(path, name), img, comment=comment)
        tmp = os.path.join(path, MANIFEST + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(ds.manifest())
        os.replace(tmp, os.path.join(path, MANIFEST))
    except OSError as exc:
        raise IoError(f"cannot persist dataset to {path}: {exc}") from exc
    return os.path.join(path, MANIFEST)


def _parse_render(text):
    fields = dict(item.split(":", 1) for item in text.split(","))
    lo, hi = fields["radius"].split(":")
    return RenderConfig(int(fields["image_size"]), float(fields["focal"]), (float(lo), float(hi)),
                        int(fields["pool"]))


def load_dataset(path):
    manifest = os.path.join(path, MANIFEST)
    try:
        with open(manifest, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {manifest}: {exc}") from exc
    header, samples = {}, []
    rows = []
    for line in raw.decode("utf-8").splitlines():
        if line.startswith("#"):
            if "=" in line:
                key, value = line[1:].strip().split("=", 1)
                header[key] = value
            continue
        if line.strip():
            rows.append(line.split("\t"))
    try:
        classes = tuple(header["classes"].split(","))
        render = _parse_render(header["render"])
        seed, split = int(header["seed"]), header["split"]
    except (KeyError, ValueError) as exc:
        raise IoError(f"malformed manifest header in {manifest}") from exc
    for row in rows:
        if len(row) != 4:
            raise IoError(f"malformed manifest line: {row}")
        sid, cls, pfile, ifiles = row
        cloud = pc.read_pcf(os.path.join(path, pfile), classes.index(cls))
        images = None
        if ifiles:
            images = [pc.read_ppm(os.path.join(path, f)) for f in ifiles.split(",")]
        samples.append(Sample(int(sid), cloud, images))
    ds = Dataset(samples, classes, split, seed, render)
    if ds.manifest() != raw:
        raise IoError(f"dataset at {path} does not match its manifest")
    return ds


# ---------------------------------------------------------------------------
# batches


@dataclass(eq=False)
class Batch:
    clouds_t1: list
    clouds_t2: list
    images: list  # per sample, a list of n_images ImageTensors
    labels: np.ndarray
    sample_ids: list

    @property
    def n(self):
        return len(self.clouds_t1)

    def check_alignment(self):
        sizes = {len(self.clouds_t1), len(self.clouds_t2), len(self.labels), len(self.sample_ids)}
        if self.images is not None:
            sizes.add(len(self.images))
        if len(sizes) != 1:
            raise ConfigError("batch lists are not index-aligned")


def _assemble(ds, index, aug, img_aug, seed, epoch, n_images, with_images):
    s = ds.samples[index]
    sid = s.sample_id
    t1 = pc.sample_pipeline(aug, stream(seed, epoch, sid, "t1"))
    t2 = pc.sample_pipeline(aug, stream(seed, epoch, sid, "t2"))
    v1, v2 = pc.apply_pipeline(s.cloud, t1), pc.apply_pipeline(s.cloud, t2)
    images = None
    if with_images:
        pool = ds.render.pool
        pick = stream(seed, epoch, sid, "views")
        views = pick.choice(pool, size=n_images, replace=n_images > pool)
        images = []
        for j, view in enumerate(views):
            img = ds.view(s, int(view))
            images.append(pc.augment_image(img, stream(seed, epoch, sid, "image_aug", j), img_aug))
    return v1, v2, images, s.label, sid


def make_batch(ds, indices, aug, img_aug, seed, epoch, n_images=1, workers=1, with_images=True):
    """Two augmented views and ``n_images`` augmented renders per sample.

    Each sample's randomness is keyed by (seed, epoch, sample id, purpose), so
    the batch is identical for any worker count.
    """
    if n_images < 1:
        raise ConfigError("n_images must be >= 1", key="n_images")
    job = lambda i: _assemble(ds, i, aug, img_aug, seed, epoch, n_images, with_images)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, indices))
    else:
        parts = [job(i) for i in indices]
    v1, v2, imgs, labels, sids = zip(*parts) if parts else ((), (), (), (), ())
    batch = Batch(list(v1), list(v2), list(imgs) if with_images else None,
                  np.array(labels, dtype=np.int64), list(sids))
    batch.check_alignment()
    return batch
