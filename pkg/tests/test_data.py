import numpy as np
import pytest

from xmodal import data as D
from xmodal import pointcloud as pc
from xmodal.errors import ConfigError, IoError
from xmodal.streams import stream


def _small(**kw):
    cfg = dict(classes=("sphere", "cube", "torus"), per_class=4, n_pts=64, seed=3)
    cfg.update(kw)
    return D.DatasetConfig(**cfg)


def test_sphere_points_on_unit_sphere():
    pts = D.sphere_surface(500, np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)


def test_cube_points_on_faces():
    pts = D.box_surface(500, np.random.default_rng(1))
    on_face = np.isclose(np.abs(pts), 0.5, atol=1e-9).any(axis=1)
    assert on_face.all()
    assert (np.abs(pts) <= 0.5 + 1e-12).all()


@pytest.mark.parametrize("ring,tube", [(0.5, 0.2), (1.0, 0.1), (0.7, 0.35)])
def test_torus_implicit_residual(ring, tube):
    pts = D.torus_surface(400, np.random.default_rng(2), ring, tube)
    resid = (np.hypot(pts[:, 0], pts[:, 1]) - ring) ** 2 + pts[:, 2] ** 2 - tube**2
    assert np.abs(resid).max() <= 1e-9


@pytest.mark.parametrize("kind", D.SHAPE_KINDS)
def test_every_class_is_non_degenerate(kind):
    for seed in range(5):
        cloud = D.generate_shape(kind, 64, np.random.default_rng(seed))
        diff = cloud.points[:, None] - cloud.points[None]
        assert np.sqrt((diff**2).sum(-1)).max() >= 0.1
        assert np.isfinite(cloud.points).all()


def test_generate_shape_errors():
    with pytest.raises(ConfigError):
        D.generate_shape("teapot", 64, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        D.generate_shape("sphere", 7, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        D.build_dataset(_small(per_class=0))


def test_build_dataset_is_deterministic_and_counts_exact():
    a, b = D.build_dataset(_small()), D.build_dataset(_small())
    assert a.manifest() == b.manifest()
    assert a.checksum == b.checksum
    assert np.bincount(a.labels).tolist() == [4, 4, 4]
    assert D.build_dataset(_small(seed=4)).checksum != a.checksum
    for s, t in zip(a.samples, b.samples):
        assert np.array_equal(s.cloud.points, t.cloud.points)


def test_persist_load_round_trip(tmp_path):
    ds = D.build_dataset(_small(prerender=True, render=D.RenderConfig(image_size=16, pool=2)))
    D.persist(ds, str(tmp_path))
    back = D.load_dataset(str(tmp_path))
    assert back.checksum == ds.checksum
    for s, t in zip(ds.samples, back.samples):
        assert np.array_equal(s.cloud.points, t.cloud.points)
        assert s.label == t.label
        assert len(t.images) == 2
        for u, v in zip(s.images, t.images):
            # 8-bit PPM quantization
            assert np.abs(u.pixels - v.pixels).max() <= 0.5 / 255 + 1e-12


def test_load_detects_tampering(tmp_path):
    ds = D.build_dataset(_small())
    D.persist(ds, str(tmp_path))
    path = tmp_path / "points" / "000000.pcf"
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IoError):
        D.load_dataset(str(tmp_path))
    with pytest.raises(IoError):
        D.load_dataset(str(tmp_path / "missing"))


def test_identity_augmentation_returns_sources():
    ds = D.build_dataset(_small())
    batch = D.make_batch(ds, [0, 5, 7], pc.AugmentationConfig.identity(), pc.ImageAugConfig(), 0, 0)
    for i, idx in enumerate([0, 5, 7]):
        src = ds.samples[idx].cloud.points
        assert np.array_equal(batch.clouds_t1[i].points, src)
        assert np.array_equal(batch.clouds_t2[i].points, src)


def test_batch_alignment_and_image_count():
    ds = D.build_dataset(_small())
    idx = [3, 1, 10]
    for n in (1, 3):
        batch = D.make_batch(ds, idx, pc.AugmentationConfig(), pc.ImageAugConfig(), 1, 2, n_images=n)
        assert batch.sample_ids == [ds.samples[i].sample_id for i in idx]
        assert batch.labels.tolist() == [ds.samples[i].label for i in idx]
        assert all(len(imgs) == n for imgs in batch.images)
        assert batch.images[0][0].pixels.shape == (32, 32, 3)
    with pytest.raises(ConfigError):
        D.make_batch(ds, idx, pc.AugmentationConfig(), pc.ImageAugConfig(), 1, 2, n_images=0)


def test_two_views_differ_under_default_augmentation():
    ds = D.build_dataset(_small())
    batch = D.make_batch(ds, [0, 1], pc.AugmentationConfig(), pc.ImageAugConfig(), 0, 0)
    assert not np.array_equal(batch.clouds_t1[0].points, batch.clouds_t2[0].points)


def test_batch_independent_of_worker_count():
    ds = D.build_dataset(_small())
    idx = list(range(len(ds)))
    args = (pc.AugmentationConfig(), pc.ImageAugConfig(), 7, 3)
    a = D.make_batch(ds, idx, *args, n_images=2, workers=1)
    b = D.make_batch(ds, idx, *args, n_images=2, workers=4)
    for i in range(len(idx)):
        assert np.array_equal(a.clouds_t1[i].points, b.clouds_t1[i].points)
        assert np.array_equal(a.clouds_t2[i].points, b.clouds_t2[i].points)
        for u, v in zip(a.images[i], b.images[i]):
            assert np.array_equal(u.pixels, v.pixels)


def test_batch_depends_on_epoch_not_position():
    ds = D.build_dataset(_small())
    args = (pc.AugmentationConfig(), pc.ImageAugConfig(), 7)
    a = D.make_batch(ds, [2, 4], *args, 0)
    b = D.make_batch(ds, [4, 2], *args, 0)
    c = D.make_batch(ds, [2, 4], *args, 1)
    assert np.array_equal(a.clouds_t1[0].points, b.clouds_t1[1].points)
    assert not np.array_equal(a.clouds_t1[0].points, c.clouds_t1[0].points)


def test_camera_is_fixed_per_sample_view():
    ds = D.build_dataset(_small())
    s = ds.samples[0]
    assert np.array_equal(ds.view(s, 1).pixels, ds.view(s, 1).pixels)
    assert np.array_equal(ds.camera(s, 0).eye, D.build_dataset(_small()).camera(s, 0).eye)
    assert ds.view(s, 0).pixels.any()


def test_streams_are_keyed():
    a = stream(1, "x", 2).integers(0, 2**63)
    assert a == stream(1, "x", 2).integers(0, 2**63)
    assert a != stream(1, "x", 3).integers(0, 2**63)
