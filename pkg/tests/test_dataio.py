"""File formats, scene synthesis, and dataset generation."""

import struct

import numpy as np
import pytest

from mmfocus import dataio, ifnet
from mmfocus.core import ApertureConfig, wavenumber
from mmfocus.metrics import amplitude_normalized, psnr
from mmfocus.phase_error import Trajectory

AP = ApertureConfig(nx=32, ny=32, dx=1e-3, dy=1e-3, z_target=0.3)
K = wavenumber(77e9)


def random_grid(seed, shape=(9, 7)):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    # quantize to f32 so the storage format is lossless for this grid
    return z.astype(np.complex64).astype(np.complex128)


def test_grid_single_cell_layout(tmp_path):
    path = tmp_path / "one.csg"
    dataio.write_grid(path, np.array([[1.0 + 2.0j]]))
    blob = path.read_bytes()
    assert len(blob) == 24
    assert blob[:4] == b"CSG1"
    assert struct.unpack_from("<III", blob, 4) == (1, 1, 2)
    assert struct.unpack_from("<f", blob, 16)[0] == 1.0
    assert struct.unpack_from("<f", blob, 20)[0] == 2.0


def test_grid_round_trip_bitwise(tmp_path):
    for seed in range(5):
        z = random_grid(seed)
        path = tmp_path / f"g{seed}.csg"
        dataio.write_grid(path, z)
        back = dataio.read_grid(path)
        assert back.dtype == np.complex64
        assert np.array_equal(back.astype(np.complex128), z)
        # rewriting what was read reproduces the file bytes exactly
        dataio.write_grid(tmp_path / "again.csg", back)
        assert (tmp_path / "again.csg").read_bytes() == path.read_bytes()


def test_grid_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "g.csg"
    dataio.write_grid(path, random_grid(3))
    blob = path.read_bytes()
    (tmp_path / "bad.csg").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(dataio.FormatError):
        dataio.read_grid(tmp_path / "bad.csg")
    (tmp_path / "short.csg").write_bytes(blob[:-4])
    with pytest.raises(dataio.FormatError):
        dataio.read_grid(tmp_path / "short.csg")
    (tmp_path / "long.csg").write_bytes(blob + b"\x00" * 8)
    with pytest.raises(dataio.FormatError):
        dataio.read_grid(tmp_path / "long.csg")


def test_grid_no_stray_temp_file(tmp_path):
    dataio.write_grid(tmp_path / "g.csg", random_grid(1))
    assert [p.name for p in tmp_path.iterdir()] == ["g.csg"]


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    traj = Trajectory(dz=rng.standard_normal(64) * 1e-3)
    path = tmp_path / "t.trj"
    dataio.write_trajectory(path, traj)
    back = dataio.read_trajectory(path)
    assert np.array_equal(back.dz, traj.dz)


def test_trajectory_rejects_empty_and_mismatch(tmp_path):
    with pytest.raises(dataio.FormatError):
        dataio.write_trajectory(tmp_path / "e.trj", Trajectory(dz=np.zeros(0)))
    path = tmp_path / "t.trj"
    dataio.write_trajectory(path, Trajectory(dz=np.ones(4)))
    blob = path.read_bytes()
    # claim five values but supply four
    (tmp_path / "m.trj").write_bytes(blob[:4] + struct.pack("<I", 5) + blob[8:])
    with pytest.raises(dataio.FormatError):
        dataio.read_trajectory(tmp_path / "m.trj")
    (tmp_path / "z.trj").write_bytes(blob[:4] + struct.pack("<I", 0))
    with pytest.raises(dataio.FormatError):
        dataio.read_trajectory(tmp_path / "z.trj")


def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    ap = ApertureConfig(nx=16, ny=16, dx=1e-3, dy=1e-3, z_target=0.3)
    model = ifnet.UnfoldingModel(ifnet.IfnetArch(2, 2), ap, K, dtype=np.float32, seed=5)
    model.focusing[1].identity_prox = True
    rng = np.random.default_rng(0)
    z = rng.random((16, 16)) + 1j * rng.random((16, 16))
    sigma, phi = model.forward_pass(z)

    path = tmp_path / "model.ifn"
    dataio.write_checkpoint(path, model, {"epochs": 3, "note": "fixture"})
    reloaded, meta = dataio.read_checkpoint(path)
    assert meta == {"epochs": 3, "note": "fixture"}
    assert reloaded.arch == model.arch
    assert [s.identity_prox for s in reloaded.focusing] == [False, True]
    sigma2, phi2 = reloaded.forward_pass(z)
    assert np.array_equal(sigma, sigma2)
    assert np.array_equal(phi, phi2)
    # saving the reloaded model reproduces the same file
    dataio.write_checkpoint(tmp_path / "again.ifn", reloaded, meta)
    assert (tmp_path / "again.ifn").read_bytes() == path.read_bytes()


def test_checkpoint_version_and_length_errors(tmp_path):
    ap = ApertureConfig(nx=16, ny=16, dx=1e-3, dy=1e-3, z_target=0.3)
    model = ifnet.UnfoldingModel(ifnet.IfnetArch(1, 1), ap, K, dtype=np.float32, seed=1)
    path = tmp_path / "model.ifn"
    dataio.write_checkpoint(path, model)
    blob = path.read_bytes()
    (tmp_path / "v.ifn").write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(dataio.FormatError):
        dataio.read_checkpoint(tmp_path / "v.ifn")
    (tmp_path / "p.ifn").write_bytes(blob[:-8])
    with pytest.raises(dataio.FormatError):
        dataio.read_checkpoint(tmp_path / "p.ifn")
    (tmp_path / "m.ifn").write_bytes(b"ZZZZ" + blob[4:])
    with pytest.raises(dataio.FormatError):
        dataio.read_checkpoint(tmp_path / "m.ifn")


def test_pgm_export_quantization(tmp_path):
    rng = np.random.default_rng(21)
    z = rng.standard_normal((12, 8)) + 1j * rng.standard_normal((12, 8))
    path = tmp_path / "img.pgm"
    dataio.export_amplitude_image(z, path)
    blob = path.read_bytes()
    header, rest = blob.split(b"\n", 1)
    assert header == b"P5"
    dims, rest = rest.split(b"\n", 1)
    maxval, pixels = rest.split(b"\n", 1)
    width, height = (int(v) for v in dims.split())
    assert (width, height) == (12, 8)
    assert maxval == b"65535"
    img = np.frombuffer(pixels, dtype=">u2").reshape(height, width)
    want = amplitude_normalized(z)
    got = img.T.astype(np.float64) / 65535.0
    assert np.max(np.abs(got - want)) <= 1.0 / 65535.0


def test_pgm_constant_grid_all_zero(tmp_path):
    path = tmp_path / "flat.pgm"
    dataio.export_amplitude_image(np.full((6, 6), 3.0 + 4.0j), path)
    pixels = path.read_bytes().split(b"\n", 3)[3]
    assert np.frombuffer(pixels, dtype=">u2").max() == 0


def test_random_point_scene_margin_and_count():
    scene = dataio.random_point_scene(AP, 8, seed=2)
    assert scene.n_scatterers == 8
    xs = scene.positions[:, 0]
    ys = scene.positions[:, 1]
    span_x = AP.x_positions[-1] - AP.x_positions[0]
    assert xs.min() >= AP.x_positions[0] + 0.24 * span_x
    assert xs.max() <= AP.x_positions[-1] - 0.24 * span_x
    assert ys.min() >= AP.y_positions[0] + 0.24 * span_x
    # distinct cells
    assert len({(x, y) for x, y in zip(xs, ys)}) == 8
    with pytest.raises(ValueError):
        dataio.random_point_scene(AP, 10_000, seed=0)


def test_letter_like_scene_properties():
    sizes = []
    for seed in range(6):
        scene = dataio.letter_like_scene(AP, seed=seed)
        assert scene.n_scatterers >= 3
        assert np.all(scene.positions[:, 2] == AP.z_target)
        assert np.all(scene.reflectivity == 1.0)
        sizes.append(scene.n_scatterers)
    # different seeds draw different glyphs
    assert len(set(sizes)) > 1
    # determinism
    a = dataio.letter_like_scene(AP, seed=4)
    b = dataio.letter_like_scene(AP, seed=4)
    assert np.array_equal(a.positions, b.positions)


def test_generate_dataset_counts_and_disjoint_splits(tmp_path):
    scenes = [dataio.letter_like_scene(AP, seed=s) for s in range(2)]
    manifest = dataio.generate_dataset(
        scenes, AP, K, tmp_path, error_levels=(0.0005,), trajectories_per_scene=3, seed=9
    )
    assert len(manifest.entries) == 6
    split_of = {}
    for e in manifest.entries:
        assert split_of.setdefault(e.scene_id, e.split) == e.split
        assert (tmp_path / e.distorted_path).exists()
        assert (tmp_path / e.clean_path).exists()
    assert (tmp_path / "manifest.json").exists()


def test_generate_dataset_zero_std_pass_through(tmp_path):
    scenes = [dataio.random_point_scene(AP, 4, seed=1)]
    manifest = dataio.generate_dataset(
        scenes, AP, K, tmp_path, error_levels=(0.0,), trajectories_per_scene=2, seed=3
    )
    for e in manifest.entries:
        clean = dataio.read_grid(manifest.resolve(e.clean_path))
        distorted = dataio.read_grid(manifest.resolve(e.distorted_path))
        scale = np.max(np.abs(clean))
        assert np.max(np.abs(distorted - clean)) <= 1e-10 * scale


def test_generate_dataset_deterministic(tmp_path):
    scenes = [dataio.letter_like_scene(AP, seed=0)]
    a = dataio.generate_dataset(
        scenes, AP, K, tmp_path / "a", trajectories_per_scene=2, seed=5
    )
    b = dataio.generate_dataset(
        scenes, AP, K, tmp_path / "b", trajectories_per_scene=2, seed=5
    )
    for ea, eb in zip(a.entries, b.entries):
        assert ea.trajectory_seed == eb.trajectory_seed
        fa = (tmp_path / "a" / ea.distorted_path).read_bytes()
        fb = (tmp_path / "b" / eb.distorted_path).read_bytes()
        assert fa == fb


def test_generate_dataset_distortion_hurts(tmp_path):
    scenes = [dataio.random_point_scene(AP, 5, seed=8)]
    manifest = dataio.generate_dataset(
        scenes, AP, K, tmp_path, error_levels=(0.0005,), trajectories_per_scene=4, seed=2
    )
    for e in manifest.entries:
        clean = dataio.read_grid(manifest.resolve(e.clean_path))
        distorted = dataio.read_grid(manifest.resolve(e.distorted_path))
        value = psnr(amplitude_normalized(clean), amplitude_normalized(distorted))
        assert value < 99.0


def test_manifest_rejects_cross_split_scene():
    entry = dict(
        trajectory_seed=1,
        error_std_m=0.0,
        clean_path="c.csg",
        distorted_path="d.csg",
    )
    with pytest.raises(ValueError):
        dataio.DatasetManifest(
            entries=[
                dataio.DatasetEntry(scene_id=0, split="train", **entry),
                dataio.DatasetEntry(scene_id=0, split="test", **entry),
            ],
            config={},
        )


def test_manifest_save_load_round_trip(tmp_path):
    scenes = [dataio.letter_like_scene(AP, seed=s) for s in range(3)]
    manifest = dataio.generate_dataset(scenes, AP, K, tmp_path, trajectories_per_scene=2)
    back = dataio.DatasetManifest.load(tmp_path / "manifest.json")
    assert back.entries == manifest.entries
    assert back.config == manifest.config


def test_load_training_pairs_normalized(tmp_path):
    scenes = [dataio.letter_like_scene(AP, seed=s) for s in range(3)]
    manifest = dataio.generate_dataset(
        scenes, AP, K, tmp_path, trajectories_per_scene=2, split_fractions=(0.34, 0.33, 0.33)
    )
    pairs = dataio.load_training_pairs(manifest, "train")
    assert len(pairs) == 2
    for distorted, clean in pairs:
        for grid in (distorted, clean):
            assert grid.shape == (AP.nx, AP.ny)
            assert 0.0 <= grid.real.min() and grid.real.max() <= 1.0
            assert 0.0 <= grid.imag.min() and grid.imag.max() <= 1.0
            assert grid.real.max() == 1.0 or np.all(grid.real == 0.0)
