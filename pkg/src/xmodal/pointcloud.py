"""Point clouds, the geometric augmentation set, a point-splat renderer and
image-space augmentation, plus the PCF1 / PPM file codecs."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DegenerateCamera, DegenerateInput, IoError, ShapeError

ROTATION_TOL = 1e-9
PIXEL_NUDGE = 1e-9


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    label: int = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ShapeError(f"point cloud must be N x 3 with N >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise DegenerateInput("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points):
        return PointCloud(points, self.label)


@dataclass(eq=False)
class ImageTensor:
    """H x W x C raster with every pixel in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeError(f"image must be H x W x C with C in (1, 3), got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ShapeError("pixel values outside [0, 1]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True, eq=False)
class Rotation:
    matrix: np.ndarray
    kind = "rotation"

    def __post_init__(self):
        r = np.asarray(self.matrix, dtype=np.float64)
        if r.shape != (3, 3):
            raise ShapeError("rotation must be 3 x 3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL or abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ConfigError("rotation matrix is not a proper orthonormal matrix")
        object.__setattr__(self, "matrix", r)

    def apply(self, points):
        return points @ self.matrix.T

    def params(self):
        return self.matrix


@dataclass(frozen=True, eq=False)
class Scale:
    factors: tuple
    kind = "scale"

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=np.float64).reshape(3)
        if (f <= 0).any():
            raise ConfigError("scale factors must be positive")
        object.__setattr__(self, "factors", f)

    def apply(self, points):
        return points * self.factors

    def params(self):
        return self.factors


@dataclass(frozen=True, eq=False)
class Translation:
    offset: tuple
    kind = "translation"

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))

    def apply(self, points):
        return points + self.offset

    def params(self):
        return self.offset


@dataclass(frozen=True, eq=False)
class Jitter:
    """Clipped Gaussian noise; ``seed`` fixes the noise draw for this transform."""

    sigma: float
    clip: float
    seed: int = 0
    kind = "jitter"

    def __post_init__(self):
        if self.sigma < 0 or self.clip < 0:
            raise ConfigError("jitter sigma and clip must be non-negative")

    def apply(self, points):
        noise = np.random.default_rng(self.seed).normal(0.0, 1.0, points.shape) * self.sigma
        return points + np.clip(noise, -self.clip, self.clip)

    def params(self):
        return np.array([self.sigma, self.clip, self.seed], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Normalize:
    kind = "normalize"

    def apply(self, points):
        centered = points - points.mean(axis=0)
        radius = np.sqrt((centered * centered).sum(axis=1)).max()
        if radius < 1e-12:
            raise DegenerateInput("cannot normalize a cloud whose points coincide")
        return centered / radius

    def params(self):
        return np.zeros(0)


@dataclass(frozen=True, eq=False)
class Elastic:
    """Smooth displacement field: vectors of norm <= magnitude on a g^3 grid
    spanning the cloud's bounding box, trilinearly interpolated per point."""

    grid: np.ndarray
    magnitude: float
    kind = "elastic"

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        g = grid.shape[0]
        if grid.shape != (g, g, g, 3) or g < 2:
            raise ConfigError("elastic grid must be g x g x g x 3 with g >= 2")
        if self.magnitude < 0:
            raise ConfigError("elastic magnitude must be non-negative")
        if np.sqrt((grid * grid).sum(axis=-1)).max() > self.magnitude * (1 + 1e-12):
            raise ConfigError("elastic grid vector exceeds magnitude")
        object.__setattr__(self, "grid", grid)

    @property
    def granularity(self):
        return self.grid.shape[0]

    def displacement(self, points):
        pts = np.ascontiguousarray(points)
        return _kernels.trilinear(pts, self.grid, pts.min(axis=0), pts.max(axis=0))

    def apply(self, points):
        return points + self.displacement(points)

    def params(self):
        return self.grid


TRANSFORM_KINDS = ("rotation", "scale", "translation", "jitter", "elastic", "normalize")


def random_rotation(rng):
    """Uniform over SO(3) via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class AugmentationConfig:
    """Per-transform inclusion probabilities and parameter ranges.

    Transforms with probability 0 are disabled. When no enabled transform is
    drawn, one enabled transform is picked uniformly so pipelines are never
    empty.
    """

    probabilities: dict = field(default_factory=lambda: {
        "rotation": 1.0, "scale": 0.8, "translation": 0.8,
        "jitter": 0.8, "elastic": 0.5, "normalize": 0.5,
    })
    scale_range: tuple = (0.8, 1.25)
    translation_range: float = 0.2
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    elastic_grid: int = 4
    elastic_magnitude: float = 0.05
    shuffle_order: bool = True

    def enabled(self):
        return [k for k in TRANSFORM_KINDS if self.probabilities.get(k, 0.0) > 0]

    def validate(self):
        unknown = set(self.probabilities) - set(TRANSFORM_KINDS)
        if unknown:
            raise ConfigError(f"unknown transform kinds {sorted(unknown)}")
        if not self.enabled():
            raise ConfigError("augmentation config enables no transform")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale range must satisfy 0 < lo <= hi")
        if self.translation_range < 0 or self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ConfigError("translation range and jitter parameters must be non-negative")
        if self.elastic_grid < 2 or self.elastic_magnitude < 0:
            raise ConfigError("elastic grid must be >= 2 and magnitude >= 0")

    @classmethod
    def identity(cls):
        """Only a zero translation: every sampled pipeline is an exact identity."""
        return cls(probabilities={"translation": 1.0}, translation_range=0.0, shuffle_order=False)


@dataclass(eq=False)
class AugmentationPipeline:
    transforms: list

    def __post_init__(self):
        if not self.transforms:
            raise ConfigError("augmentation pipeline is empty")

    @property
    def kinds(self):
        return [t.kind for t in self.transforms]

    def fingerprint(self):
        parts = []
        for t in self.transforms:
            parts.append(t.kind.encode())
            parts.append(np.asarray(t.params(), dtype=np.float64).tobytes())
        return b"|".join(parts)


def _sample_transform(kind, config, rng):
    if kind == "rotation":
        return Rotation(random_rotation(rng))
    if kind == "scale":
        return Scale(rng.uniform(*config.scale_range, size=3))
    if kind == "translation":
        r = config.translation_range
        return Translation(rng.uniform(-r, r, size=3))
    if kind == "jitter":
        return Jitter(config.jitter_sigma, config.jitter_clip, int(rng.integers(0, 2**63 - 1)))
    if kind == "elastic":
        g = config.elastic_grid
        vec = rng.normal(size=(g, g, g, 3))
        norms = np.linalg.norm(vec, axis=-1, keepdims=True)
        norms[norms == 0] = 1.0
        lengths = rng.uniform(0.0, 1.0, size=(g, g, g, 1)) * config.elastic_magnitude
        return Elastic(vec / norms * lengths, config.elastic_magnitude)
    if kind == "normalize":
        return Normalize()
    raise ConfigError(f"unknown transform kind {kind!r}")


def sample_pipeline(config, rng):
    """Draw a random sequential composition of transforms (one view t1 or t2)."""
    config.validate()
    enabled = config.enabled()
    chosen = [k for k in enabled if rng.uniform() < config.probabilities[k]]
    if not chosen:
        chosen = [enabled[int(rng.integers(len(enabled)))]]
    if config.shuffle_order and len(chosen) > 1:
        chosen = [chosen[i] for i in rng.permutation(len(chosen))]
    return AugmentationPipeline([_sample_transform(k, config, rng) for k in chosen])


def apply_transform(cloud, transform):
    return cloud.with_points(transform.apply(cloud.points))


def apply_pipeline(cloud, pipeline):
    points = cloud.points
    for t in pipeline.transforms:
        points = t.apply(points)
    return cloud.with_points(points)


def sample_points(cloud, n, rng):
    """n points uniformly without replacement, or with replacement if the cloud is smaller."""
    if n < 1:
        raise ConfigError("sample size must be >= 1")
    total = len(cloud)
    idx = rng.choice(total, size=n, replace=total < n)
    return cloud.with_points(cloud.points[idx])


# ---------------------------------------------------------------------------
# camera and renderer


@dataclass(eq=False)
class Camera:
    eye: np.ndarray
    target: np.ndarray
    up: np.ndarray = (0.0, 0.0, 1.0)
    focal: float = 2.0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64).reshape(3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if self.focal <= 0 or self.height < 1 or self.width < 1:
            raise ConfigError("camera needs focal > 0 and a positive image size")

    def frame(self):
        """Orthonormal (right, up, forward) axes of the camera."""
        forward = self.target - self.eye
        dist = np.linalg.norm(forward)
        if dist < 1e-12:
            raise DegenerateCamera("eye coincides with the look-at target")
        forward = forward / dist
        right = np.cross(forward, self.up)
        norm = np.linalg.norm(right)
        if norm < 1e-9 * max(1.0, np.linalg.norm(self.up)):
            raise DegenerateCamera("up hint is parallel to the view direction")
        right = right / norm
        return right, np.cross(right, forward), forward


def inverse_depth_intensity(depth):
    return 1.0 / (1.0 + depth)


def render(cloud, camera, channels=3):
    """Perspective 1-pixel splats; nearest point wins; intensity 1/(1+depth)."""
    right, up, forward = camera.frame()
    rel = cloud.points - camera.eye
    x, y, z = rel @ right, rel @ up, rel @ forward
    h, w = camera.height, camera.width
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = w / 2.0 + camera.focal * (x / safe_z) * (w / 2.0)
    v = h / 2.0 - camera.focal * (y / safe_z) * (h / 2.0)
    ok = front & np.isfinite(u) & np.isfinite(v) & (u > -1) & (u < w + 1) & (v > -1) & (v < h + 1)
    # the nudge keeps projections that land exactly on a pixel edge from
    # flipping sides through round-off in the camera frame
    cols = np.where(ok, np.floor(np.where(ok, u, 0.0) + PIXEL_NUDGE), -1).astype(np.int64)
    rows = np.where(ok, np.floor(np.where(ok, v, 0.0) + PIXEL_NUDGE), -1).astype(np.int64)
    depth = np.where(front, z, -1.0)
    img = _kernels.zbuffer_splat(rows, cols, depth, inverse_depth_intensity(safe_z), h, w)
    return ImageTensor(np.repeat(img[:, :, None], channels, axis=2))


def sample_camera(rng, radius_range=(2.0, 3.0), center=(0.0, 0.0, 0.0), focal=2.0, height=32, width=32):
    """Eye uniform on a sphere of random radius about ``center``, looking at it."""
    lo, hi = radius_range
    if not 0 < lo <= hi:
        raise ConfigError("radius range must be positive and ordered")
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(lo, hi)
    center = np.asarray(center, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    if abs(direction @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    return Camera(center + radius * direction, center, up, focal, height, width)


# ---------------------------------------------------------------------------
# image augmentation


@dataclass
class ImageAugConfig:
    crop_min: float = 0.8  # smallest crop side as a fraction of the image side
    jitter_range: tuple = (0.8, 1.2)
    flip_prob: float = 0.5

    def validate(self):
        if not 0 < self.crop_min <= 1:
            raise ConfigError("crop_min must lie in (0, 1]")
        lo, hi = self.jitter_range
        if not 0 <= lo <= hi:
            raise ConfigError("jitter range must satisfy 0 <= lo <= hi")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip probability must lie in [0, 1]")


def crop_resize(img, top, left, crop_h, crop_w):
    """Crop a window and resize it back to the full frame (nearest neighbour)."""
    h, w = img.height, img.width
    if not (1 <= crop_h <= h and 1 <= crop_w <= w and 0 <= top <= h - crop_h and 0 <= left <= w - crop_w):
        raise ConfigError(f"invalid crop {crop_h}x{crop_w} at ({top}, {left}) for a {h}x{w} image")
    rows = top + (np.arange(h) * crop_h) // h
    cols = left + (np.arange(w) * crop_w) // w
    return ImageTensor(img.pixels[rows][:, cols])


def color_jitter(img, factors):
    factors = np.asarray(factors, dtype=np.float64).reshape(-1)
    return ImageTensor(np.clip(img.pixels * factors, 0.0, 1.0))


def hflip(img):
    return ImageTensor(img.pixels[:, ::-1].copy())


def augment_image(img, rng, config=None):
    """Random crop + resize, per-channel multiplicative jitter, random horizontal flip."""
    config = config or ImageAugConfig()
    config.validate()
    h, w = img.height, img.width
    ch = int(rng.integers(max(1, int(np.ceil(config.crop_min * h))), h + 1))
    cw = int(rng.integers(max(1, int(np.ceil(config.crop_min * w))), w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    factors = rng.uniform(*config.jitter_range, size=img.channels)
    flip = rng.uniform() < config.flip_prob
    out = color_jitter(crop_resize(img, top, left, ch, cw), factors)
    return hflip(out) if flip else out


# ---------------------------------------------------------------------------
# codecs

PCF_MAGIC = b"PCF1"


def encode_pcf(cloud):
    pts = np.ascontiguousarray(cloud.points, dtype="<f8")
    return PCF_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes()


def decode_pcf(buf, label=None):
    if len(buf) < 8 or buf[:4] != PCF_MAGIC:
        raise IoError("not a PCF1 point file")
    (count,) = struct.unpack("<I", buf[4:8])
    if len(buf) != 8 + 24 * count:
        raise IoError("PCF1 payload length does not match its point count")
    pts = np.frombuffer(buf, dtype="<f8", offset=8).reshape(count, 3).astype(np.float64)
    return PointCloud(pts, label)


def write_pcf(path, cloud):
    try:
        with open(path, "wb") as fh:
            fh.write(encode_pcf(cloud))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_pcf(path, label=None):
    try:
        with open(path, "rb") as fh:
            return decode_pcf(fh.read(), label)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def encode_ppm(img, comment=None):
    px = img.pixels
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    q = np.round(px * 255).astype(np.uint8)
    header = b"P6\n"
    if comment:
        for line in str(comment).splitlines():
            header += b"# " + line.encode("utf-8") + b"\n"
    header += f"{img.width} {img.height}\n255\n".encode()
    return header + q.tobytes()


def _ppm_tokens(buf):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_ppm(buf):
    try:
        tokens, offset = _ppm_tokens(buf)
    except ValueError:
        raise IoError("truncated PPM header") from None
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise IoError("only binary 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return ImageTensor(data.reshape(h, w, 3) / 255.0)


def write_ppm(path, img, comment=None):
    try:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(img, comment))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_ppm(path):
    try:
        with open(path, "rb") as fh:
            return decode_ppm(fh.read())
    except OSError as exc:
        raise IoError(str(exc)) from exc
