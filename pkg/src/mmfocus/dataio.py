"""Binary grid/trajectory/checkpoint formats and dataset synthesis.

All formats are little-endian and round-trip bit-exact. Dataset
generation pairs each clean reconstruction with ensemble-distorted
copies of itself and enforces scene-disjoint train/val/test splits.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ifnet
from .core import ApertureConfig, as_complex_grid, normalize_minmax
from .forward import Scene, scene_to_plane, simulate_mono_plane
from .imaging import rma_reconstruct
from .metrics import amplitude_normalized
from .phase_error import Trajectory, corrupt_signal, gen_trajectory, mix_mean, traj_to_phase_screen

GRID_MAGIC = b"CSG1"
TRAJECTORY_MAGIC = b"TRJ1"
CHECKPOINT_MAGIC = b"IFN1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not conform to one of the binary formats."""


def _atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_grid(path, grid: np.ndarray) -> None:
    """Store a complex 2D grid as magic + u32 dims + f32 (re, im) pairs."""
    z = as_complex_grid(grid)
    rows, cols = z.shape
    if rows >= 2**32 or cols >= 2**32:
        raise FormatError("grid dimensions exceed the u32 header fields")
    payload = np.empty((rows, cols, 2), dtype="<f4")
    payload[..., 0] = z.real
    payload[..., 1] = z.imag
    blob = GRID_MAGIC + struct.pack("<III", rows, cols, 2) + payload.tobytes()
    _atomic_write_bytes(path, blob)


def read_grid(path) -> np.ndarray:
    """Load a grid written by write_grid; returns complex64."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: not a CSG1 grid file")
    rows, cols, channels = struct.unpack_from("<III", blob, 4)
    if channels != 2:
        raise FormatError(f"{path}: expected 2 channels, header says {channels}")
    if len(blob) != 16 + rows * cols * 8:
        raise FormatError(f"{path}: payload length does not match header dims")
    flat = np.frombuffer(blob, dtype="<c8", offset=16)
    return flat.reshape(rows, cols).copy()


def write_trajectory(path, traj: Trajectory) -> None:
    """Store per-position range deviations as magic + u32 count + f64 values."""
    dz = np.ascontiguousarray(traj.dz, dtype="<f8")
    if dz.size < 1:
        raise FormatError("refusing to write an empty trajectory")
    blob = TRAJECTORY_MAGIC + struct.pack("<I", dz.size) + dz.tobytes()
    _atomic_write_bytes(path, blob)


def read_trajectory(path) -> Trajectory:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != TRAJECTORY_MAGIC:
        raise FormatError(f"{path}: not a TRJ1 trajectory file")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count < 1:
        raise FormatError(f"{path}: trajectory count must be at least 1")
    if len(blob) != 8 + 8 * count:
        raise FormatError(f"{path}: payload length does not match count")
    dz = np.frombuffer(blob, dtype="<f8", offset=8)
    return Trajectory(dz=dz.copy())


def write_checkpoint(path, model: ifnet.UnfoldingModel, metadata: dict | None = None) -> None:
    """Store a model as a JSON header plus concatenated f32 parameters.

    The payload is always 32-bit, so reloading a float32 model reproduces
    its forward pass bitwise; saving a float64 model rounds it.
    """
    table = []
    chunks = []
    offset = 0
    for p in model.store.params():
        arr = np.ascontiguousarray(p.value, dtype="<f4")
        table.append({"name": p.name, "shape": list(p.value.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    header = {
        "architecture": {
            "n_stages": model.arch.n_stages,
            "n_resblocks": model.arch.n_resblocks,
        },
        "geometry": {
            "nx": model.aperture.nx,
            "ny": model.aperture.ny,
            "dx": model.aperture.dx,
            "dy": model.aperture.dy,
            "z_target": model.aperture.z_target,
            "k_r": model.k_r,
            "depth": model.r,
        },
        "identity_prox": [bool(s.identity_prox) for s in model.focusing],
        "params": table,
        "payload_bytes": offset,
        "training": dict(metadata or {}),
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hdr)) + hdr + b"".join(chunks)
    _atomic_write_bytes(path, blob)


def read_checkpoint(path) -> tuple[ifnet.UnfoldingModel, dict]:
    """Rebuild the model a checkpoint was saved from; returns (model, metadata)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an IFN1 checkpoint file")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: undecodable header ({exc})") from exc
    payload = blob[12 + header_len :]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: header/payload length mismatch")

    geo = header["geometry"]
    arch = ifnet.IfnetArch(**header["architecture"])
    aperture = ApertureConfig(
        nx=geo["nx"], ny=geo["ny"], dx=geo["dx"], dy=geo["dy"], z_target=geo["z_target"]
    )
    model = ifnet.UnfoldingModel(
        arch, aperture, geo["k_r"], r=geo["depth"], dtype=np.float32, init_noise=0.0
    )
    for stage, flag in zip(model.focusing, header["identity_prox"]):
        stage.identity_prox = bool(flag)

    by_name = {p.name: p for p in model.store.params()}
    listed = {entry["name"] for entry in header["params"]}
    if listed != set(by_name):
        missing = sorted(set(by_name) - listed)
        extra = sorted(listed - set(by_name))
        raise FormatError(f"{path}: parameter table mismatch: missing={missing} extra={extra}")
    for entry in header["params"]:
        p = by_name[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise FormatError(f"{path}: shape mismatch for {entry['name']}")
        n = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        if start < 0 or start + 4 * n > len(payload):
            raise FormatError(f"{path}: parameter {entry['name']} overruns the payload")
        vals = np.frombuffer(payload, dtype="<f4", count=n, offset=start).reshape(shape)
        p.value[...] = vals
    return model, header["training"]


def export_amplitude_image(grid, path) -> None:
    """Render min-max-normalized amplitude as a 16-bit binary PGM.

    Pixel rows run top-to-bottom with increasing y, columns with
    increasing x, so the file is the transpose of the (x, y) grid.
    """
    a = amplitude_normalized(grid)
    pixels = np.round(a * 65535.0).astype(">u2")
    width, height = a.shape
    header = f"P5\n{width} {height}\n65535\n".encode("ascii")
    _atomic_write_bytes(path, header + np.ascontiguousarray(pixels.T).tobytes())


def random_point_scene(
    aperture: ApertureConfig, n_scatterers: int, seed: int = 0, margin: float = 0.25
) -> Scene:
    """Scatterers on distinct lattice cells inside the central region.

    margin is the fraction of the aperture kept clear on every side, so
    reconstruction wraparound cannot fold scene content onto itself.
    """
    if n_scatterers < 1:
        raise ValueError("need at least one scatterer")
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must be in [0, 0.5)")
    rng = np.random.default_rng(seed)
    i_lo, i_hi = int(np.floor(aperture.nx * margin)), int(np.ceil(aperture.nx * (1 - margin)))
    j_lo, j_hi = int(np.floor(aperture.ny * margin)), int(np.ceil(aperture.ny * (1 - margin)))
    cells = [(i, j) for i in range(i_lo, i_hi) for j in range(j_lo, j_hi)]
    if n_scatterers > len(cells):
        raise ValueError("more scatterers than interior cells")
    picks = rng.choice(len(cells), size=n_scatterers, replace=False)
    xs, ys = aperture.x_positions, aperture.y_positions
    positions = np.array(
        [(xs[cells[p][0]], ys[cells[p][1]], aperture.z_target) for p in picks]
    )
    reflectivity = rng.uniform(0.5, 1.0, size=n_scatterers).astype(np.complex128)
    return Scene(positions=positions, reflectivity=reflectivity)


def letter_like_scene(
    aperture: ApertureConfig,
    seed: int = 0,
    margin: float = 0.25,
    n_strokes: int | None = None,
    stroke_halfwidth: int = 1,
) -> Scene:
    """Unit scatterers along a few random thick strokes, glyph style.

    Stroke endpoints stay inside the central region; cells within
    stroke_halfwidth of a stroke's path join the mask.
    """
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must be in [0, 0.5)")
    if stroke_halfwidth < 0:
        raise ValueError("stroke_halfwidth must be non-negative")
    rng = np.random.default_rng(seed)
    strokes = int(rng.integers(2, 5)) if n_strokes is None else n_strokes
    if strokes < 1:
        raise ValueError("need at least one stroke")
    i_lo, i_hi = int(np.floor(aperture.nx * margin)), int(np.ceil(aperture.nx * (1 - margin))) - 1
    j_lo, j_hi = int(np.floor(aperture.ny * margin)), int(np.ceil(aperture.ny * (1 - margin))) - 1
    mask = np.zeros((aperture.nx, aperture.ny), dtype=bool)
    # Chain the strokes: each starts where the previous ended, like pen lifts
    # are rare in a glyph. Endpoints are drawn on the interior lattice.
    pt = np.array([rng.integers(i_lo, i_hi + 1), rng.integers(j_lo, j_hi + 1)])
    for _ in range(strokes):
        nxt = np.array([rng.integers(i_lo, i_hi + 1), rng.integers(j_lo, j_hi + 1)])
        length = int(np.max(np.abs(nxt - pt))) + 1
        for t in np.linspace(0.0, 1.0, 2 * length):
            ci, cj = np.round(pt + t * (nxt - pt)).astype(int)
            lo_i = max(ci - stroke_halfwidth, i_lo)
            hi_i = min(ci + stroke_halfwidth, i_hi)
            lo_j = max(cj - stroke_halfwidth, j_lo)
            hi_j = min(cj + stroke_halfwidth, j_hi)
            mask[lo_i : hi_i + 1, lo_j : hi_j + 1] = True
        pt = nxt
    ii, jj = np.nonzero(mask)
    xs, ys = aperture.x_positions, aperture.y_positions
    positions = np.stack([xs[ii], ys[jj], np.full(ii.shape, aperture.z_target)], axis=1)
    return Scene(positions=positions, reflectivity=np.ones(ii.shape[0], dtype=np.complex128))


@dataclass(frozen=True)
class DatasetEntry:
    scene_id: int
    trajectory_seed: int
    error_std_m: float
    clean_path: str
    distorted_path: str
    split: str


@dataclass
class DatasetManifest:
    """Entry list plus the generator's config snapshot.

    Paths are relative to the manifest's directory; base_dir is set when
    the manifest is saved or loaded and is not serialized.
    """

    entries: list[DatasetEntry]
    config: dict
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        split_of: dict[int, str] = {}
        for e in self.entries:
            if e.split not in ("train", "val", "test"):
                raise ValueError(f"unknown split tag {e.split!r}")
            if split_of.setdefault(e.scene_id, e.split) != e.split:
                raise ValueError(f"scene {e.scene_id} appears in more than one split")

    def split_entries(self, split: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == split]

    def resolve(self, relpath: str) -> Path:
        if self.base_dir is None:
            raise ValueError("manifest has no base directory; save or load it first")
        return Path(self.base_dir) / relpath

    def save(self, path) -> None:
        path = Path(path)
        doc = {"entries": [asdict(e) for e in self.entries], "config": self.config}
        _atomic_write_bytes(path, json.dumps(doc, indent=2, sort_keys=True).encode("utf-8"))
        self.base_dir = path.parent

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = [DatasetEntry(**e) for e in doc["entries"]]
        return DatasetManifest(entries=entries, config=doc["config"], base_dir=path.parent)


def generate_dataset(
    scenes: list[Scene],
    aperture: ApertureConfig,
    k_r: float,
    out_dir,
    error_levels: tuple[float, ...] = (0.0005,),
    trajectories_per_scene: int = 20,
    mix_group_size: int = 5,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    smoothness: float = 5.0,
    noise_snr_db: float | None = None,
) -> DatasetManifest:
    """Distort every scene's clean reconstruction with trajectory ensembles.

    Each distorted entry mixes mix_group_size freshly drawn trajectories
    into their pointwise mean before building the phase screen; the
    recorded error_std_m is the per-trajectory level, so the mixed
    deviation is smaller by roughly sqrt(mix_group_size). All per-entry
    randomness derives from (seed, scene, level, draw), so generation is
    order-independent and reproducible from the manifest alone.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if trajectories_per_scene < 1:
        raise ValueError("need at least one trajectory per scene")
    if mix_group_size < 1:
        raise ValueError("mix_group_size must be at least 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if any(level < 0 for level in error_levels):
        raise ValueError("error levels must be non-negative")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be (train, val, test) summing to 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(len(scenes) * split_fractions[0])
    n_val = int(len(scenes) * split_fractions[1])
    split_of = {}
    for rank, scene_idx in enumerate(order):
        if rank < n_train:
            split_of[int(scene_idx)] = "train"
        elif rank < n_train + n_val:
            split_of[int(scene_idx)] = "val"
        else:
            split_of[int(scene_idx)] = "test"

    entries = []
    for sid, scene in enumerate(scenes):
        plane = scene_to_plane(scene, aperture)
        signal = simulate_mono_plane(plane, aperture, k_r)
        clean = rma_reconstruct(signal, aperture, k_r)
        clean_rel = f"scene{sid:03d}_clean.csg"
        write_grid(out_dir / clean_rel, clean)
        for li, level in enumerate(error_levels):
            for ti in range(trajectories_per_scene):
                entry_seq = np.random.SeedSequence([seed, sid, li, ti])
                tseed = int(entry_seq.generate_state(1)[0])
                member_seeds = np.random.SeedSequence(tseed).generate_state(mix_group_size)
                members = [
                    gen_trajectory(aperture.nx, level, smoothness, int(s))
                    for s in member_seeds
                ]
                screen = traj_to_phase_screen(mix_mean(members), k_r, aperture.ny)
                corrupted = corrupt_signal(signal, screen, noise_snr_db=noise_snr_db, seed=tseed)
                distorted = rma_reconstruct(corrupted, aperture, k_r)
                rel = f"scene{sid:03d}_L{li}_t{ti:03d}.csg"
                write_grid(out_dir / rel, distorted)
                entries.append(
                    DatasetEntry(
                        scene_id=sid,
                        trajectory_seed=tseed,
                        error_std_m=float(level),
                        clean_path=clean_rel,
                        distorted_path=rel,
                        split=split_of[sid],
                    )
                )

    config = {
        "aperture": {
            "nx": aperture.nx,
            "ny": aperture.ny,
            "dx": aperture.dx,
            "dy": aperture.dy,
            "z_target": aperture.z_target,
        },
        "k_r": k_r,
        "n_scenes": len(scenes),
        "error_levels": list(error_levels),
        "trajectories_per_scene": trajectories_per_scene,
        "mix_group_size": mix_group_size,
        "seed": seed,
        "split_fractions": list(split_fractions),
        "smoothness": smoothness,
        "noise_snr_db": noise_snr_db,
    }
    manifest = DatasetManifest(entries=entries, config=config, base_dir=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_training_pairs(manifest: DatasetManifest, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """(normalized distorted, normalized clean) grids for one split.

    Each grid is min-max normalized against its own extrema, matching
    what inference does before running the stages.
    """
    pairs = []
    for e in manifest.split_entries(split):
        distorted = read_grid(manifest.resolve(e.distorted_path)).astype(np.complex128)
        clean = read_grid(manifest.resolve(e.clean_path)).astype(np.complex128)
        pairs.append((normalize_minmax(distorted)[0], normalize_minmax(clean)[0]))
    return pairs
