"""Operator-facing command line: simulate, corrupt, image, autofocus,
train, infer, eval, ablate.

Each subcommand reads a JSON config merged over built-in defaults, with
``--set dotted.key=value`` overrides on top, and writes the effective
config next to its outputs. Heavy imports happen inside the command
functions so thread caps set by ``--threads`` (or the
``IFNET_DETERMINISTIC=1`` environment variable) land before the numeric
libraries load.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """A config key is unknown or its value cannot be used."""


_APERTURE = {"nx": 64, "ny": 64, "dx": 0.001, "dy": 0.001, "z_target": 0.3}

DEFAULTS: dict[str, dict] = {
    "simulate": {
        "aperture": dict(_APERTURE),
        "frequency_hz": 77.0e9,
        "scene": {"kind": "letter", "seed": 0, "n_scatterers": 5, "margin": 0.25},
        "out_dir": "out/simulate",
        "emit_pgm": True,
    },
    "corrupt": {
        "signal": "out/simulate/signal.csg",
        "aperture": dict(_APERTURE),
        "frequency_hz": 77.0e9,
        "error_std_m": 0.0005,
        "smoothness": 5.0,
        "mix_group_size": 1,
        "noise_snr_db": None,
        "seed": 0,
        "out_dir": "out/corrupt",
        "emit_pgm": True,
    },
    "image": {
        "signal": "out/corrupt/distorted_signal.csg",
        "aperture": dict(_APERTURE),
        "frequency_hz": 77.0e9,
        "method": "rma",
        "pad": 1,
        "depth": None,
        "out_dir": "out/image",
        "emit_pgm": True,
    },
    "autofocus": {
        "signal": "out/corrupt/distorted_signal.csg",
        "aperture": dict(_APERTURE),
        "frequency_hz": 77.0e9,
        "solver": {
            "mu": 0.5,
            "rho": 0.5,
            "lam": 0.01,
            "gamma": 0.0,
            "max_iters": 300,
            "tol": 1e-6,
        },
        "out_dir": "out/autofocus",
        "emit_pgm": True,
    },
    "train": {
        "manifest": "out/dataset/manifest.json",
        "arch": {"n_stages": 5, "n_resblocks": 4},
        "train": {
            "epochs": 80,
            "learning_rate": 1e-4,
            "decay_start_epoch": 50,
            "batch_size": 10,
            "seed": 0,
        },
        "init_seed": 0,
        "out_dir": "out/train",
    },
    "infer": {
        "checkpoint": "out/train/model.ifn",
        "inputs": None,
        "manifest": None,
        "split": "test",
        "out_dir": "out/infer",
        "emit_pgm": True,
    },
    "eval": {
        "pairs": None,
        "manifest": None,
        "split": "test",
        "test_dir": "out/infer",
        "test_suffix": "_focused",
        "out_dir": "out/eval",
    },
    "ablate": {
        "manifest": "out/dataset/manifest.json",
        "stage_list": [2, 3, 4],
        "n_resblocks": 2,
        "train": {
            "epochs": 8,
            "learning_rate": 1e-4,
            "decay_start_epoch": 5,
            "batch_size": 10,
            "seed": 0,
        },
        "init_seed": 0,
        "out_dir": "out/ablate",
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs KEY=VALUE, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key: {'.'.join(keys[: i + 1])}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


def effective_config(command: str, config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for assignment in overrides:
        _apply_override(cfg, assignment)
    return cfg


def _prepare_out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8"
    )
    return out


def _aperture_from(cfg: dict):
    from .core import ApertureConfig

    return ApertureConfig(**cfg["aperture"])


def _read_signal(cfg: dict, aperture):
    from .dataio import read_grid

    signal = read_grid(cfg["signal"]).astype(complex)
    if signal.shape != (aperture.nx, aperture.ny):
        raise ConfigError(
            f"aperture.nx/ny {aperture.nx}x{aperture.ny} do not match "
            f"signal file dims {signal.shape[0]}x{signal.shape[1]}"
        )
    return signal


def _build_scene(cfg: dict, aperture):
    from . import dataio

    scene_cfg = cfg["scene"]
    kind = scene_cfg["kind"]
    if kind == "letter":
        return dataio.letter_like_scene(aperture, seed=scene_cfg["seed"], margin=scene_cfg["margin"])
    if kind == "points":
        return dataio.random_point_scene(
            aperture, scene_cfg["n_scatterers"], seed=scene_cfg["seed"], margin=scene_cfg["margin"]
        )
    raise ConfigError("scene.kind must be 'letter' or 'points'")


def cmd_simulate(cfg: dict) -> None:
    from . import dataio
    from .core import wavenumber
    from .forward import scene_to_plane, simulate_mono_plane
    from .imaging import rma_reconstruct

    aperture = _aperture_from(cfg)
    k_r = wavenumber(cfg["frequency_hz"])
    out = _prepare_out_dir(cfg)
    scene = _build_scene(cfg, aperture)
    plane = scene_to_plane(scene, aperture)
    signal = simulate_mono_plane(plane, aperture, k_r)
    image = rma_reconstruct(signal, aperture, k_r)
    dataio.write_grid(out / "signal.csg", signal)
    dataio.write_grid(out / "clean_image.csg", image)
    if cfg["emit_pgm"]:
        dataio.export_amplitude_image(image, out / "clean_image.pgm")
    print(f"simulated {scene.n_scatterers} scatterers -> {out / 'signal.csg'}")


def cmd_corrupt(cfg: dict) -> None:
    import numpy as np

    from . import dataio
    from .core import wavenumber
    from .imaging import rma_reconstruct
    from .metrics import compare_images
    from .phase_error import corrupt_signal, gen_trajectory, mix_mean, traj_to_phase_screen

    aperture = _aperture_from(cfg)
    k_r = wavenumber(cfg["frequency_hz"])
    out = _prepare_out_dir(cfg)
    signal = _read_signal(cfg, aperture)
    group = int(cfg["mix_group_size"])
    if group < 1:
        raise ConfigError("mix_group_size must be at least 1")
    member_seeds = np.random.SeedSequence(cfg["seed"]).generate_state(group)
    members = [
        gen_trajectory(aperture.nx, cfg["error_std_m"], cfg["smoothness"], int(s))
        for s in member_seeds
    ]
    traj = mix_mean(members)
    screen = traj_to_phase_screen(traj, k_r, aperture.ny)
    distorted = corrupt_signal(signal, screen, noise_snr_db=cfg["noise_snr_db"], seed=cfg["seed"])
    dataio.write_trajectory(out / "trajectory.trj", traj)
    dataio.write_grid(out / "distorted_signal.csg", distorted)
    clean_image = rma_reconstruct(signal, aperture, k_r)
    distorted_image = rma_reconstruct(distorted, aperture, k_r)
    dataio.write_grid(out / "distorted_image.csg", distorted_image)
    if cfg["emit_pgm"]:
        dataio.export_amplitude_image(distorted_image, out / "distorted_image.pgm")
    report = compare_images(clean_image, distorted_image)
    print(
        f"corrupted with std {cfg['error_std_m'] * 1e3:.3g} mm: "
        f"psnr vs clean {report.psnr_db:.2f} dB, ssim {report.ssim:.4f}"
    )


def cmd_image(cfg: dict) -> None:
    from . import dataio
    from .core import wavenumber
    from .imaging import bpa_reconstruct_mono, rma_reconstruct

    aperture = _aperture_from(cfg)
    k_r = wavenumber(cfg["frequency_hz"])
    out = _prepare_out_dir(cfg)
    signal = _read_signal(cfg, aperture)
    if cfg["method"] == "rma":
        image = rma_reconstruct(signal, aperture, k_r, r=cfg["depth"], pad=cfg["pad"])
    elif cfg["method"] == "bpa":
        image = bpa_reconstruct_mono(signal, aperture, k_r, r=cfg["depth"])
    else:
        raise ConfigError("method must be 'rma' or 'bpa'")
    dataio.write_grid(out / "image.csg", image)
    if cfg["emit_pgm"]:
        dataio.export_amplitude_image(image, out / "image.pgm")
    print(f"reconstructed via {cfg['method']} -> {out / 'image.csg'}")


def cmd_autofocus(cfg: dict) -> None:
    from . import dataio
    from .autofocus_classic import ClassicConfig, run_coordinate_descent
    from .core import require_finite, wavenumber

    aperture = _aperture_from(cfg)
    k_r = wavenumber(cfg["frequency_hz"])
    out = _prepare_out_dir(cfg)
    signal = _read_signal(cfg, aperture)
    result = run_coordinate_descent(signal, aperture, k_r, cfg=ClassicConfig(**cfg["solver"]))
    require_finite("focused image", result.image)
    dataio.write_grid(out / "focused_image.csg", result.image)
    dataio.write_grid(out / "compensator.csg", result.compensator)
    with open(out / "objective.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective"])
        for i, value in enumerate(result.objective_trace):
            writer.writerow([i, f"{value:.12g}"])
    if cfg["emit_pgm"]:
        dataio.export_amplitude_image(result.image, out / "focused_image.pgm")
    print(
        f"autofocus ran {result.iterations_run} iterations, "
        f"objective {result.objective_trace[0]:.6g} -> {result.objective_trace[-1]:.6g}"
    )


def _load_split_pairs(manifest_path: str, split: str):
    from .dataio import DatasetManifest, load_training_pairs

    manifest = DatasetManifest.load(manifest_path)
    return manifest, load_training_pairs(manifest, split)


def _manifest_geometry(manifest):
    from .core import ApertureConfig

    aperture = ApertureConfig(**manifest.config["aperture"])
    return aperture, float(manifest.config["k_r"])


def _pairs_to_arrays(pairs, dtype):
    import numpy as np

    from .diffcompute import complex_to_channels

    inputs = complex_to_channels(np.stack([p[0] for p in pairs])).astype(dtype)
    targets = complex_to_channels(np.stack([p[1] for p in pairs])).astype(dtype)
    return inputs, targets


def cmd_train(cfg: dict) -> None:
    import numpy as np

    from . import dataio, ifnet

    out = _prepare_out_dir(cfg)
    manifest, pairs = _load_split_pairs(cfg["manifest"], "train")
    if not pairs:
        raise ConfigError("manifest has no train entries")
    _, val_pairs = _load_split_pairs(cfg["manifest"], "val")
    aperture, k_r = _manifest_geometry(manifest)
    model = ifnet.UnfoldingModel(
        ifnet.IfnetArch(**cfg["arch"]), aperture, k_r, dtype=np.float32, seed=cfg["init_seed"]
    )
    result = ifnet.train(
        model,
        pairs,
        ifnet.TrainConfig(**cfg["train"]),
        val_pairs=val_pairs or None,
        log_path=out / "training_log.csv",
    )
    had_val = result.best_epoch >= 0
    metadata = {
        "epochs": cfg["train"]["epochs"],
        "best_epoch": result.best_epoch if had_val else None,
        "best_val_loss": result.best_val_loss if had_val else None,
        "final_train_loss": result.history[-1]["train_loss"],
    }
    dataio.write_checkpoint(out / "model.ifn", model, metadata)
    print(
        f"trained {cfg['train']['epochs']} epochs: train loss "
        f"{result.history[0]['train_loss']:.6g} -> {result.history[-1]['train_loss']:.6g}, "
        f"checkpoint {out / 'model.ifn'}"
    )


def cmd_infer(cfg: dict) -> None:
    from . import dataio, ifnet

    out = _prepare_out_dir(cfg)
    model, _ = dataio.read_checkpoint(cfg["checkpoint"])
    if cfg["inputs"]:
        paths = [Path(p) for p in cfg["inputs"]]
    elif cfg["manifest"]:
        manifest = dataio.DatasetManifest.load(cfg["manifest"])
        paths = [manifest.resolve(e.distorted_path) for e in manifest.split_entries(cfg["split"])]
    else:
        raise ConfigError("need inputs (list of grid files) or manifest")
    if not paths:
        raise ConfigError(f"no input grids in split {cfg['split']!r}")
    for path in paths:
        distorted = dataio.read_grid(path).astype(complex)
        focused, _, _ = ifnet.infer(model, distorted)
        target = out / f"{path.stem}_focused.csg"
        dataio.write_grid(target, focused)
        if cfg["emit_pgm"]:
            dataio.export_amplitude_image(focused, out / f"{path.stem}_focused.pgm")
    print(f"focused {len(paths)} grids -> {out}")


def cmd_eval(cfg: dict) -> None:
    import numpy as np

    from . import dataio
    from .metrics import compare_images

    out = _prepare_out_dir(cfg)
    if cfg["pairs"]:
        pair_paths = [(Path(ref), Path(test)) for ref, test in cfg["pairs"]]
    elif cfg["manifest"]:
        manifest = dataio.DatasetManifest.load(cfg["manifest"])
        entries = manifest.split_entries(cfg["split"])
        if not entries:
            raise ConfigError(f"no entries in split {cfg['split']!r}")
        test_dir = Path(cfg["test_dir"])
        pair_paths = [
            (
                manifest.resolve(e.clean_path),
                test_dir / f"{Path(e.distorted_path).stem}{cfg['test_suffix']}.csg",
            )
            for e in entries
        ]
    else:
        raise ConfigError("need pairs (list of [reference, test]) or manifest")
    rows = []
    for ref_path, test_path in pair_paths:
        report = compare_images(dataio.read_grid(ref_path), dataio.read_grid(test_path))
        rows.append((test_path.name, report.psnr_db, report.ssim, report.entropy))
    table = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "psnr_db", "ssim", "entropy"])
        for name, p, s, e in rows:
            writer.writerow([name, f"{p:.6f}", f"{s:.6f}", f"{e:.6f}"])
        writer.writerow(["mean"] + [f"{v:.6f}" for v in table.mean(axis=0)])
        writer.writerow(["std"] + [f"{v:.6f}" for v in table.std(axis=0)])
    print(
        f"evaluated {len(rows)} pairs: psnr {table[:, 0].mean():.2f} +- {table[:, 0].std():.2f} dB, "
        f"ssim {table[:, 1].mean():.4f} +- {table[:, 1].std():.4f}"
    )


def cmd_ablate(cfg: dict) -> None:
    import numpy as np

    from . import ifnet

    out = _prepare_out_dir(cfg)
    manifest, pairs = _load_split_pairs(cfg["manifest"], "train")
    if not pairs:
        raise ConfigError("manifest has no train entries")
    _, val_pairs = _load_split_pairs(cfg["manifest"], "val")
    _, test_pairs = _load_split_pairs(cfg["manifest"], "test")
    if not test_pairs:
        raise ConfigError("manifest has no test entries")
    aperture, k_r = _manifest_geometry(manifest)
    test_in, test_tg = _pairs_to_arrays(test_pairs, np.float32)
    results = []
    for n_stages in cfg["stage_list"]:
        model = ifnet.UnfoldingModel(
            ifnet.IfnetArch(n_stages=int(n_stages), n_resblocks=cfg["n_resblocks"]),
            aperture,
            k_r,
            dtype=np.float32,
            seed=cfg["init_seed"],
        )
        history = ifnet.train(
            model, pairs, ifnet.TrainConfig(**cfg["train"]), val_pairs=val_pairs or None
        ).history
        loss, mean_psnr, mean_ssim = ifnet.evaluate(model, test_in, test_tg)
        results.append((int(n_stages), history[-1]["train_loss"], loss, mean_psnr, mean_ssim))
        print(
            f"stages {n_stages}: test psnr {mean_psnr:.2f} dB, ssim {mean_ssim:.4f}"
        )
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_stages", "train_loss", "test_loss", "test_psnr_db", "test_ssim"])
        for n_stages, train_loss, loss, mean_psnr, mean_ssim in results:
            writer.writerow(
                [n_stages, f"{train_loss:.6g}", f"{loss:.6g}", f"{mean_psnr:.4f}", f"{mean_ssim:.6f}"]
            )
    print(f"ablation table -> {out / 'ablation.csv'}")


COMMANDS = {
    "simulate": cmd_simulate,
    "corrupt": cmd_corrupt,
    "image": cmd_image,
    "autofocus": cmd_autofocus,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _cap_threads(n: int | None) -> None:
    """Pin the numeric libraries' thread pools before they are loaded."""
    if os.environ.get("IFNET_DETERMINISTIC") == "1":
        n = 1 if n is None else min(n, 1)
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfocus",
        description="Near-field SAR simulation, corruption, reconstruction, and autofocus.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap numeric thread pools")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__ or name)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            dest="overrides",
            help="dotted-path config override, value parsed as JSON when possible",
        )
        sp.add_argument(
            "--print-config",
            action="store_true",
            help="print the effective config and exit",
        )
    return parser


def _classify_failure(exc: Exception) -> int:
    from .core import NonFiniteError
    from .dataio import FormatError

    if isinstance(exc, NonFiniteError):
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(exc, FormatError) or isinstance(exc, OSError):
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if isinstance(exc, (ConfigError, ValueError, TypeError, KeyError)):
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _cap_threads(args.threads)
        cfg = effective_config(args.command, args.config, args.overrides)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except Exception as exc:  # mapped to the documented exit codes
        return _classify_failure(exc)


if __name__ == "__main__":
    sys.exit(main())
