"""Point encoders (PointNet-lite, DGCNN-lite), a small conv image encoder and
the two-layer projection heads, all built on :mod:`xmodal.tensor`."""

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError, ShapeError
from .pointcloud import ImageTensor, PointCloud
from .tensor import Tensor

VARIANTS = ("pointnet_lite", "dgcnn_lite")
GROUPS = ("point_encoder", "image_encoder", "point_head", "image_head")


@dataclass(frozen=True)
class Architecture:
    variant: str = "pointnet_lite"
    point_widths: tuple = (64, 128)  # hidden widths of the shared per-point perceptron
    feature_dim: int = 128  # F, encoder output width
    proj_dim: int = 64  # d, invariant-space width
    k: int = 8  # neighbours for dgcnn_lite
    image_size: int = 32
    image_channels: int = 3
    conv_channels: tuple = (8, 16)
    kernel_size: int = 3
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

    def conv_output_side(self):
        side = self.image_size
        for _ in self.conv_channels:
            side = (side - self.kernel_size) // self.stride + 1
        return side

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}", key="variant")
        if len(self.point_widths) != 2 or min(self.point_widths) < 1:
            raise ConfigError("point_widths needs two positive widths", key="point_widths")
        if self.feature_dim < 1 or self.proj_dim < 1 or self.k < 1:
            raise ConfigError("feature_dim, proj_dim and k must be positive")
        if self.image_channels not in (1, 3) or not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("bad image encoder channels")
        side = self.image_size
        for _ in self.conv_channels:
            if side < self.kernel_size:
                raise ConfigError("image too small for the conv stack", key="image_size")
            side = (side - self.kernel_size) // self.stride + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(arch):
    """Ordered mapping name -> shape for every learnable array."""
    arch.validate()
    h1, h2 = arch.point_widths
    f, d = arch.feature_dim, arch.proj_dim
    shapes = {}
    if arch.variant == "pointnet_lite":
        shapes["point_encoder.w0"] = (3, h1)
    else:
        shapes["point_encoder.w0"] = (6, h1)  # edge feature concat(x_i, x_j - x_i)
    shapes["point_encoder.b0"] = (h1,)
    shapes["point_encoder.w1"] = (h1, h2)
    shapes["point_encoder.b1"] = (h2,)
    shapes["point_encoder.w2"] = (h2, f)
    shapes["point_encoder.b2"] = (f,)
    c_in, ks = arch.image_channels, arch.kernel_size
    for i, c_out in enumerate(arch.conv_channels):
        shapes[f"image_encoder.conv{i}"] = (c_out, c_in, ks, ks)
        shapes[f"image_encoder.conv{i}_b"] = (c_out,)
        c_in = c_out
    side = arch.conv_output_side()
    shapes["image_encoder.fc_w"] = (c_in * side * side, f)
    shapes["image_encoder.fc_b"] = (f,)
    for head in ("point_head", "image_head"):
        shapes[f"{head}.w0"] = (f, f)
        shapes[f"{head}.b0"] = (f,)
        shapes[f"{head}.w1"] = (f, d)
        shapes[f"{head}.b1"] = (d,)
    return shapes


def _fans(shape):
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


@dataclass(eq=False)
class ModelParams:
    arch: Architecture
    arrays: dict

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if list(self.arrays) != list(expected):
            raise ConfigError("parameter names do not match the architecture")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} has non-finite entries")

    def names(self, groups=GROUPS):
        return [n for n in self.arrays if n.split(".")[0] in groups]

    def tensors(self, requires_grad=False, groups=GROUPS):
        """Wrap arrays as Tensors; only ``groups`` get requires_grad."""
        return {
            n: Tensor(a, requires_grad=requires_grad and n.split(".")[0] in groups)
            for n, a in self.arrays.items()
        }

    def copy(self):
        return ModelParams(self.arch, {n: a.copy() for n, a in self.arrays.items()})


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(arch).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, arrays)


# ---------------------------------------------------------------------------
# point encoders


def _stack_points(batch):
    if isinstance(batch, np.ndarray):
        pts = np.asarray(batch, dtype=np.float64)
    else:
        sizes = {len(c) for c in batch}
        if len(sizes) != 1:
            raise ShapeError(f"clouds in a batch must share a point count, got {sorted(sizes)}")
        pts = np.stack([c.points if isinstance(c, PointCloud) else np.asarray(c) for c in batch])
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ShapeError(f"point batch must be B x n x 3, got {pts.shape}")
    return pts


def _dense(x, p, w, b):
    return T.leaky_relu(x @ p[w] + p[b])


def pointnet_forward(batch, p):
    """Shared perceptron 3 -> h1 -> h2 -> F per point, then max over points."""
    pts = _stack_points(batch)
    bsz, n, _ = pts.shape
    x = Tensor(pts.reshape(bsz * n, 3))
    x = _dense(x, p, "point_encoder.w0", "point_encoder.b0")
    x = _dense(x, p, "point_encoder.w1", "point_encoder.b1")
    x = _dense(x, p, "point_encoder.w2", "point_encoder.b2")
    return T.reduce(T.reshape(x, (bsz, n, -1)), 1, "max")


def knn_graph(cloud, k):
    """n x k neighbour indices by Euclidean distance, self excluded, ties to the smaller index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k={k} needs 1 <= k < n_pts={n}", key="k")
    return _kernels.knn_indices(np.ascontiguousarray(pts), k)


def edge_features(pts, k):
    """Edge features concat(x_i, x_j - x_i) for every point and neighbour, as
    a (B*n*k) x 6 array. Plain-array helper used by tests."""
    bsz, n, _ = pts.shape
    rows = []
    for b in range(bsz):
        nbr = knn_graph(pts[b], k)
        xi = np.repeat(pts[b][:, None, :], k, axis=1)
        rows.append(np.concatenate([xi, pts[b][nbr] - xi], axis=2).reshape(-1, 6))
    return np.concatenate(rows, axis=0)


def dgcnn_forward(batch, p, k):
    """One edge-convolution stage (max over k neighbours), a per-point
    perceptron, then max over points."""
    pts = _stack_points(batch)
    bsz, n, _ = pts.shape
    nbr = np.concatenate([knn_graph(pts[b], k) + b * n for b in range(bsz)], axis=0)
    x = Tensor(pts.reshape(bsz * n, 3))
    self_idx = np.repeat(np.arange(bsz * n)[:, None], k, axis=1)
    xi = T.gather_rows(x, self_idx)
    xj = T.gather_rows(x, nbr)
    edge = T.reshape(T.concat(xi, xj - xi, 2), (bsz * n * k, 6))
    h = _dense(edge, p, "point_encoder.w0", "point_encoder.b0")
    h = T.reduce(T.reshape(h, (bsz * n, k, -1)), 1, "max")
    h = _dense(h, p, "point_encoder.w1", "point_encoder.b1")
    h = _dense(h, p, "point_encoder.w2", "point_encoder.b2")
    return T.reduce(T.reshape(h, (bsz, n, -1)), 1, "max")


def point_forward(batch, p, arch):
    if arch.variant == "pointnet_lite":
        return pointnet_forward(batch, p)
    return dgcnn_forward(batch, p, arch.k)


# ---------------------------------------------------------------------------
# image encoder and heads


def _stack_images(batch):
    if isinstance(batch, np.ndarray):
        px = np.asarray(batch, dtype=np.float64)
    else:
        shapes = {img.pixels.shape for img in batch}
        if len(shapes) != 1:
            raise ShapeError(f"images in a batch must share H, W, C; got {sorted(shapes)}")
        px = np.stack([img.pixels for img in batch])
    if px.ndim != 4:
        raise ShapeError("image batch must be B x H x W x C")
    return np.ascontiguousarray(px.transpose(0, 3, 1, 2))


def image_forward(batch, p, arch):
    """conv + leaky_relu stages (stride 2), flatten, dense to F."""
    x = Tensor(_stack_images(batch))
    if x.shape[1] != arch.image_channels:
        raise ShapeError(f"expected {arch.image_channels} channels, got {x.shape[1]}")
    for i in range(len(arch.conv_channels)):
        w = p[f"image_encoder.conv{i}"]
        b = T.reshape(p[f"image_encoder.conv{i}_b"], (-1, 1, 1))
        x = T.leaky_relu(T.conv2d(x, w, stride=arch.stride) + b)
    flat = T.reshape(x, (x.shape[0], -1))
    if flat.shape[1] != p["image_encoder.fc_w"].shape[0]:
        raise ShapeError("image size does not match the architecture")
    return flat @ p["image_encoder.fc_w"] + p["image_encoder.fc_b"]


def project(e, p, head):
    """Two-layer head: dense F->F with leaky_relu, then dense F->d (linear)."""
    if e.shape[-1] != p[f"{head}.w0"].shape[0]:
        raise ShapeError(f"embedding width {e.shape[-1]} does not match {head}")
    h = T.leaky_relu(e @ p[f"{head}.w0"] + p[f"{head}.b0"])
    return h @ p[f"{head}.w1"] + p[f"{head}.b1"]


def project_points(batch, p, arch):
    """z = g_P(f_P(P)) for a batch of clouds."""
    return project(point_forward(batch, p, arch), p, "point_head")


def project_images(batch, p, arch):
    """h = g_I(f_I(I)) for a batch of images."""
    return project(image_forward(batch, p, arch), p, "image_head")


def as_images(pixels):
    return [ImageTensor(px) for px in pixels]
