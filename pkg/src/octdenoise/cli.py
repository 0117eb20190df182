"""Command-line pipeline: phantom -> augment -> train -> denoise -> eval.

Every stage reads and writes under one ``--out`` directory::

    phantom/   clean phantoms, label maps, manifest skeleton
    augment/   clean/noisy pairs, manifest.tsv, noise.txt, metadata
    train/     checkpoints, train_log.csv
    denoise/   <scan>.den.octf
    eval/      report.csv, montages/*.pgm, *.svg
    config/    resolved configuration per command
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .augment import AugmentationSpec, ElasticSpec, OcclusionSpec, expand_dataset, scan_id
from .config import ConfigError, RunConfig, load_config, split_overrides
from .image_core import (NO_FILE, TISSUES, DatasetManifest, ManifestEntry, ScanFormatError, ScanMeta, load_bscan,
                         read_manifest, save_bscan, validate_manifest, write_manifest, write_pgm)
from .metrics import (KINDS, evaluate, label_map_path, label_map_rois, load_label_map, read_roi_file,
                      scan_id_for)
from .network import NetworkConfig, build_network, count_parameters, denoise, load_weights
from .phantom import (CalibrationError, LaminaRegion, NoiseSpec, PhantomConfig, calibrate_noise_sigma,
                      generate_phantom)
from .training import NumericalAbort, TrainConfig, gradient_check, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.tsv"


class DataError(RuntimeError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _checked(cls, *args, **kwargs):
    try:
        return cls(*args, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _meta_from_entry(entry: ManifestEntry, kind: str = "clean") -> ScanMeta:
    stem = Path(entry.clean_path).name.split(".")[0]
    index = int(stem.split("_")[2]) if stem.count("_") >= 2 else 0
    return ScanMeta(entry.subject_id, entry.eye, index, kind)


def _require_manifest(path: Path) -> DatasetManifest:
    if not path.is_file():
        raise DataError(f"missing manifest {path}; run the previous stage first")
    return read_manifest(path)


# -- stages -----------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, out: Path) -> int:
    p = cfg.section("phantom")
    if p["n_subjects"] < 2 or p["scans_per_eye"] < 1:
        raise ConfigError("need n_subjects >= 2 and scans_per_eye >= 1")
    n_train = int(round(p["n_subjects"] * p["train_fraction"]))
    if not 0 < n_train < p["n_subjects"]:
        raise ConfigError("train_fraction must leave subjects in both splits")
    subjects = [f"S{i + 1:02d}" for i in range(p["n_subjects"])]
    order = np.random.default_rng([cfg.seed, 1]).permutation(len(subjects))
    train_subjects = {subjects[i] for i in order[:n_train]}

    base = _checked(PhantomConfig,
        height=p["height"], width=p["width"], texture_sigma=p["texture_sigma"],
        curve_amplitude=p["curve_amplitude"], cup_depth=p["cup_depth"],
        lamina=LaminaRegion() if p["lamina"] else None,
        **({} if p["vessel_shadows"] else {"vessel_shadows": ()}),
        **({} if p["lamina"] else {"intensities": PhantomConfig().intensities[:-1]}),
    )
    target = out / "phantom"
    target.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest([], target)
    for s_num, subject in enumerate(subjects):
        split = "train" if subject in train_subjects else "test"
        for e_num, eye in enumerate(("left", "right")):
            for idx in range(p["scans_per_eye"]):
                seed = _derived_seed(cfg.seed, s_num, e_num, idx)
                meta = ScanMeta(subject, eye, idx, "phantom")
                scan, labels = generate_phantom(replace(base, seed=seed), meta)
                name = f"{scan_id(scan)}.octf"
                save_bscan(scan, target / name)
                write_pgm(labels, label_map_path(target / name), 255)
                manifest.entries.append(ManifestEntry(name, NO_FILE, subject, eye, split))
    write_manifest(manifest, target / MANIFEST, header=["phantom manifest skeleton (no noisy scans yet)"])
    report = validate_manifest(read_manifest(target / MANIFEST))
    for line in report.lines():
        _log(line)
    return EXIT_OK if report.ok else EXIT_DATA


def cmd_augment(cfg: RunConfig, out: Path) -> int:
    a = cfg.section("augment")
    source = _require_manifest(out / "phantom" / MANIFEST)
    train_entries, test_entries = source.split("train"), source.split("test")
    if not train_entries:
        raise DataError("phantom manifest has no training scans")

    def load(entry):
        return load_bscan(source.resolve(entry.clean_path), _meta_from_entry(entry))

    train_scans = [load(e) for e in train_entries]
    test_scans = [load(e) for e in test_entries]
    if a["grid_spacing"] < 8 or a["displacement_sigma"] < 0:
        raise ConfigError("grid_spacing must be >= 8 and displacement_sigma >= 0")
    if a["noise_mode"] == "calibrated":
        sigma = calibrate_noise_sigma(train_scans, a["target_snr_db"], seed=_derived_seed(cfg.seed, 2))
    elif a["noise_mode"] == "literal":
        sigma = a["sigma"]
    else:
        raise ConfigError(f"noise_mode must be calibrated or literal, got {a['noise_mode']!r}")
    _log(f"noise sigma = {sigma!r} ({a['noise_mode']})")

    spec = _checked(
        AugmentationSpec,
        elastic=ElasticSpec(a["grid_spacing"], a["displacement_sigma"]),
        rotation_degrees=a["rotation_degrees"],
        occlusion=_checked(OcclusionSpec, a["occlusion_count"], a["patch_height"], a["patch_width"],
                           a["factor_min"], a["factor_max"]),
        seed=_derived_seed(cfg.seed, 3),
    )
    noise = _checked(NoiseSpec, mu=a["mu"], sigma=sigma, clip=a["clip"])
    target = out / "augment"
    scans = train_scans + test_scans
    entries = train_entries + test_entries
    labels = []
    for e in entries:
        path = label_map_path(source.resolve(e.clean_path))
        labels.append(load_label_map(path) if path.is_file() else None)
    manifest = expand_dataset(
        scans, spec, noise, target,
        factor=[a["factor"]] * len(train_scans) + [1] * len(test_scans),
        splits=[e.split for e in entries], label_maps=labels, jobs=cfg.jobs)
    (target / "noise.txt").write_text(
        f"mode={a['noise_mode']}\nsigma={sigma!r}\nmu={a['mu']!r}\nclip={a['clip']}\n"
        f"target_snr_db={a['target_snr_db']!r}\n")
    write_manifest(manifest, target / MANIFEST)
    counts = manifest.counts()
    _log(f"wrote {counts['train']} train and {counts['test']} test pairs")
    return EXIT_OK


def _network_config(cfg: RunConfig, height: int, width: int) -> NetworkConfig:
    n = cfg.section("network")
    return _checked(NetworkConfig, input_height=height, input_width=width, **n)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return _checked(TrainConfig, seed=cfg.seed, workers=cfg.jobs, **cfg.section("train"))


def cmd_train(cfg: RunConfig, out: Path) -> int:
    manifest = _require_manifest(out / "augment" / MANIFEST)
    first = manifest.split("train")[0]
    probe = load_bscan(manifest.resolve(first.clean_path))
    net_cfg = _network_config(cfg, *probe.shape)
    train_cfg = _train_config(cfg)
    _log(f"network parameters: {count_parameters(build_network(net_cfg))}")
    result = train(manifest, net_cfg, train_cfg, out / "train",
                   on_epoch=lambda e, loss: _log(f"epoch {e + 1}/{train_cfg.epochs} mean loss {loss:.5f}"))
    _log(f"{len(result.log)} steps; checkpoint {out / 'train' / 'final.octw'}")
    return EXIT_OK


def _load_trained(cfg: RunConfig, out: Path, shape):
    ckpt = out / "train" / "final.octw"
    if not ckpt.is_file():
        raise DataError(f"missing checkpoint {ckpt}; run train first")
    net = build_network(_network_config(cfg, *shape))
    load_weights(ckpt, net)
    return net


def cmd_denoise(cfg: RunConfig, out: Path) -> int:
    manifest = _require_manifest(out / "augment" / MANIFEST)
    entries = manifest.split("test")
    if not entries:
        raise DataError("no test rows to denoise")
    target = out / "denoise"
    target.mkdir(parents=True, exist_ok=True)
    net = None
    elapsed = []
    for entry in entries:
        noisy = load_bscan(manifest.resolve(entry.noisy_path), _meta_from_entry(entry, "noisy"))
        if net is None:
            net = _load_trained(cfg, out, noisy.shape)
        t0 = time.perf_counter()
        result = denoise(net, noisy)
        elapsed.append(time.perf_counter() - t0)
        save_bscan(result, target / f"{scan_id_for(entry)}.den.octf")
    _log(f"denoised {len(entries)} scans, {1000 * np.mean(elapsed):.1f} ms per scan")
    return EXIT_OK


def _summary(report, kind: str, metric: str):
    return report.aggregates()[(kind, metric)]


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    from . import plotting

    m = cfg.section("metrics")
    manifest = _require_manifest(out / "augment" / MANIFEST)
    entries = manifest.split("test")
    den_dir = out / "denoise"

    def load_denoised(entry, noisy):
        path = den_dir / f"{scan_id_for(entry)}.den.octf"
        if not path.is_file():
            raise DataError(f"missing denoised scan {path}; run denoise first")
        return load_bscan(path, _meta_from_entry(entry, "denoised"))

    if m["roi_file"]:
        def rois_for(entry, clean):
            return read_roi_file(m["roi_file"], clean.width)
    else:
        rois_for = label_map_rois(manifest, m["roi_seed"], m["rois_per_tissue"])

    report = evaluate(manifest, load_denoised, rois_for, entries, variant=m["cnr_variant"])
    target = out / "eval"
    (target / "montages").mkdir(parents=True, exist_ok=True)
    report.save(target / "report.csv")

    for entry in entries[: m["montages"]]:
        sid = scan_id_for(entry)
        clean = load_bscan(manifest.resolve(entry.clean_path))
        noisy = load_bscan(manifest.resolve(entry.noisy_path))
        plotting.montage([clean.pixels, noisy.pixels, load_denoised(entry, noisy).pixels],
                         target / "montages" / f"{sid}.pgm")

    kinds = [k for k in KINDS if k in report.kinds()]
    plotting.bar_chart({k: _summary(report, k, "snr_db") for k in kinds if k != "clean"},
                       "SNR vs clean", "dB", target / "snr.svg")
    plotting.bar_chart({k: _summary(report, k, "mssim") for k in kinds},
                       "MSSIM vs clean", "MSSIM", target / "mssim.svg")
    plotting.cnr_chart({k: {t: _summary(report, k, f"cnr_{t}") for t in TISSUES} for k in kinds},
                       target / "cnr.svg")

    for k in kinds:
        snr_mean, snr_sd = _summary(report, k, "snr_db")
        ms_mean, ms_sd = _summary(report, k, "mssim")
        _log(f"{k:>9}: SNR {snr_mean:.2f} +/- {snr_sd:.2f} dB, MSSIM {ms_mean:.3f} +/- {ms_sd:.3f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Optional[Path], tolerance: float, sample: Optional[int],
                  corrupt: bool) -> int:
    report = gradient_check(tolerance=tolerance, sample=sample, seed=cfg.seed, corrupt=corrupt)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


STAGES = {
    "phantom": cmd_phantom,
    "augment": cmd_augment,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [phantom] [augment] [network] [train] [metrics]")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker cap; 1 guarantees bit-reproducibility")

    parser = argparse.ArgumentParser(
        prog="octdenoise",
        description="OCT B-scan denoising pipeline. Override any config key with --section.key=value.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common])
    grad = sub.add_parser("gradcheck", parents=[common])
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.add_argument("--sample", type=int, help="check a random subset of this many parameters")
    grad.add_argument("--corrupt", action="store_true", help="inject a doubled gradient entry")
    sub.add_parser("version")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_overrides(argv)
        args = parser.parse_args(rest)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    if args.command == "version":
        print(f"octdenoise {__version__}")
        return EXIT_OK

    try:
        cfg = load_config(args.config, overrides, seed=args.seed, jobs=args.jobs)
        torch.set_num_threads(max(1, cfg.jobs))
        out = Path(args.out)
        cfg.write(out / "config" / f"{args.command}.ini")
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out, args.tolerance, args.sample, args.corrupt)
        return STAGES[args.command](cfg, out)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except (DataError, ScanFormatError, FileNotFoundError, CalibrationError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except NumericalAbort as exc:
        _log(f"numerical abort: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
