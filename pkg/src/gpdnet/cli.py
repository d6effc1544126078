"""``gpd`` command-line entry point.

Grammar: ``gpd <generate|train|denoise|evaluate|ablate|rfield> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import plotting
from .config import RunConfig, resolve, write_config
from .errors import (ConfigError, ContractError, DataIOError, DimensionError, GeometryError,
                     NumericError, VersionError)
from .evaluation import (evaluate_cloud, receptive_field_radius, write_metrics_csv)
from .geometry import (PointCloud, add_gaussian_noise, add_structured_noise, normalize_diameter,
                       read_off, read_xyz, sample_mesh, sample_primitive, write_xyz)
from .network import ForwardTrace, GpdNet
from .training import train

log = logging.getLogger("gpdnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("generate", "train", "denoise", "evaluate", "ablate", "rfield")
MANIFEST_HEADER = ["cloud_id", "source", "noise", "sigma", "seed", "points",
                   "clean_file", "noisy_file", "normals_file"]


# ---------------------------------------------------------------- datasets on disk

@dataclass
class DatasetEntry:
    cloud_id: str
    noisy: PointCloud   # carries clean_reference
    clean: PointCloud   # carries ground-truth normals
    sigma: float


def _cloud_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _sources(cfg: RunConfig):
    """(cloud_id, source label, sampler) for every cloud to generate."""
    if cfg.mesh_dir:
        paths = sorted(Path(cfg.mesh_dir).glob("*.off"))
        if not paths:
            raise DataIOError(f"no .off meshes found in {cfg.mesh_dir}")
        kinds = [(p.stem, str(p), p) for p in paths]
    else:
        kinds = [(s, s, None) for s in cfg.shapes]
    for name, label, path in kinds:
        for c in range(cfg.clouds_per_shape):
            cloud_id = name if cfg.clouds_per_shape == 1 else f"{name}_{c:03d}"
            yield cloud_id, label, path


def _load_mesh(path: Path):
    try:
        return read_off(path)
    except OSError as exc:
        raise DataIOError(f"cannot read mesh {path}: {exc.strerror}") from None
    except GeometryError as exc:
        raise DataIOError(f"unreadable mesh {path}: {exc}") from None


def cmd_generate(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (cloud_id, label, path) in enumerate(_sources(cfg)):
        cseed = _cloud_seed(cfg.seed, i)
        if path is None:
            clean = sample_primitive(label, cfg.n_points, [cseed, 0])
        else:
            clean = sample_mesh(_load_mesh(path), cfg.n_points, [cseed, 0])
        clean = normalize_diameter(clean)
        if cfg.noise == "gaussian":
            noisy = add_gaussian_noise(clean, cfg.noise_sigma, [cseed, 1])
            sigma = cfg.noise_sigma
        else:
            noisy = add_structured_noise(clean, cfg.sigma_bias, cfg.sigma_ray, cfg.scan_origin,
                                         [cseed, 1])
            sigma = cfg.sigma_ray
        files = [f"{cloud_id}_clean.xyz", f"{cloud_id}_noisy.xyz", f"{cloud_id}_normals.xyz"]
        write_xyz(out / files[0], clean.points)
        write_xyz(out / files[1], noisy.points)
        write_xyz(out / files[2], clean.normals)
        rows.append([cloud_id, label, cfg.noise, repr(float(sigma)), cseed, len(clean)] + files)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    log.info("wrote %d clouds to %s", len(rows), out)
    return out


def load_dataset(directory) -> list[DatasetEntry]:
    d = Path(directory)
    manifest = d / "manifest.csv"
    try:
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
        entries = []
        for row in rows:
            clean_pts = read_xyz(d / row["clean_file"]).points
            normals = read_xyz(d / row["normals_file"]).points
            noisy_pts = read_xyz(d / row["noisy_file"]).points
            clean = PointCloud(clean_pts, normals=normals / np.linalg.norm(normals, axis=1,
                                                                            keepdims=True))
            noisy = PointCloud(noisy_pts, clean_reference=clean_pts)
            entries.append(DatasetEntry(row["cloud_id"], noisy, clean, float(row["sigma"])))
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {d}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise DataIOError(f"malformed dataset {d}: {exc}") from None
    if not entries:
        raise DataIOError(f"dataset {d} is empty")
    return entries


# ---------------------------------------------------------------- training and inference

def _write_loss_csv(path, trace) -> None:
    # the seconds column is the only run-to-run difference between identical runs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "seconds"])
        for rec in trace:
            w.writerow([rec.iteration, "%.9g" % rec.loss, "%.3f" % rec.seconds])


def cmd_train(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg, train_cfg = cfg.net_config(), cfg.train_config()
    data = [e.noisy for e in load_dataset(cfg.dataset)]
    state = None
    if cfg.resume:
        state = _load_checkpoint(cfg.resume).to_state(train_cfg)
        net_cfg = state.net_config

    def save_periodic(st):
        ckpt_io.save(out / f"ckpt_{st.iteration:07d}.ckpt", ckpt_io.Checkpoint.from_state(st))

    def report(rec):
        if rec.iteration % 100 == 0:
            log.info("iteration %d loss %.6g (%.1f s)", rec.iteration, rec.loss, rec.seconds)

    state, trace = train(data, net_cfg, train_cfg, state, save_periodic, report)
    final = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    ckpt_io.save(final, ckpt_io.Checkpoint.from_state(state))
    _write_loss_csv(out / "loss.csv", trace)
    if trace:
        plotting.plot_loss([r.iteration for r in trace], [r.loss for r in trace], out / "loss.png")
    return final


def _load_checkpoint(path) -> ckpt_io.Checkpoint:
    if not path:
        raise ConfigError("this command needs --checkpoint")
    try:
        return ckpt_io.load(path)
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _read_cloud(path) -> PointCloud:
    if not path:
        raise ConfigError("this command needs --input")
    try:
        return read_xyz(path)
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, GeometryError) as exc:
        raise DataIOError(f"cannot parse {path}: {exc}") from None


def cmd_denoise(cfg: RunConfig) -> Path:
    ck = _load_checkpoint(cfg.checkpoint)
    cloud = _read_cloud(cfg.input)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    trace = ForwardTrace() if cfg.dump_graph else None
    denoised = GpdNet(ck.net_config, ck.params).denoise(cloud.points, cfg.graph_mode, trace)
    target = Path(cfg.output_file) if cfg.output_file else out / "denoised.xyz"
    write_xyz(target, denoised)
    if trace is not None:
        for b, g in enumerate(trace.graphs):
            (out / f"graph_{b}.txt").write_text(g.format_lines(), newline="\n")
    return target


def cmd_evaluate(cfg: RunConfig) -> Path:
    ck = _load_checkpoint(cfg.checkpoint)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    model = GpdNet(ck.net_config, ck.params)
    reports = [evaluate_cloud(model, e.noisy, e.clean, cloud_id=e.cloud_id, sigma=e.sigma,
                              graph_mode=cfg.graph_mode, k_n=cfg.k_n,
                              checkpoint_id=Path(cfg.checkpoint).name)
               for e in load_dataset(cfg.dataset)]
    write_metrics_csv(out / "metrics.csv", reports)
    plotting.plot_metrics([r.cloud_id for r in reports], [r.baseline["chamfer"] for r in reports],
                          [r.chamfer for r in reports], out / "metrics.png")
    return out / "metrics.csv"


# ---------------------------------------------------------------- ablation

def _ablation_cell(args):
    cfg, mode, k = args
    net_cfg = cfg.net_config(k=k, search_size=max(cfg.search_size, k))
    train_cfg = cfg.train_config(graph_mode=mode)
    train_data = [e.noisy for e in load_dataset(cfg.dataset)]
    state, _ = train(train_data, net_cfg, train_cfg)
    model = GpdNet(net_cfg, state.params)
    rows = []
    for e in load_dataset(cfg.test_dataset or cfg.dataset):
        r = evaluate_cloud(model, e.noisy, e.clean, cloud_id=e.cloud_id, sigma=e.sigma,
                           graph_mode=mode, k_n=cfg.k_n)
        rows.append((mode, k, r.cloud_id, r.chamfer, r.baseline["chamfer"], r.rmsd, r.unae_deg))
    return rows


def cmd_ablate(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    ks = cfg.ks or (cfg.k,)
    cells = [(cfg, mode, k) for mode in cfg.graph_modes for k in ks]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_ablation_cell, cells))
    else:
        results = [_ablation_cell(c) for c in cells]
    rows = [row for cell in results for row in cell]
    with open(out / "ablation_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_mode", "k", "cloud_id", "chamfer", "chamfer_e6", "noisy_chamfer",
                    "rmsd", "unae_deg"])
        for mode, k, cid, ch, noisy_ch, rm, un in rows:
            w.writerow([mode, k, cid, "%.9g" % ch, "%.9g" % (ch * 1e6), "%.9g" % noisy_ch,
                        "%.9g" % rm, "%.9g" % un])
    # one row per noise level and loss, one column per sweep cell
    labels = [mode if len(ks) == 1 else f"{mode} k={k}" for _, mode, k in cells]
    means = {lab: float(np.mean([r[3] for r in cell])) for lab, cell in zip(labels, results)}
    with open(out / "ablation_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting"] + labels)
        w.writerow([f"sigma={cfg.sigma:g} loss={cfg.loss}"]
                   + ["%.6g" % (means[lab] * 1e6) for lab in labels])
    plotting.plot_ablation(means, out / "ablation.png")
    return out / "ablation_table.csv"


# ---------------------------------------------------------------- receptive field

def cmd_rfield(cfg: RunConfig) -> Path:
    ck = _load_checkpoint(cfg.checkpoint)
    noisy = _read_cloud(cfg.input)
    if not cfg.clean:
        raise ConfigError("rfield needs --clean, the index-aligned clean cloud")
    clean = _read_cloud(cfg.clean)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    model = GpdNet(ck.net_config, ck.params)
    stats = {mode: receptive_field_radius(model, noisy, clean, cfg.block, mode)
             for mode in cfg.graph_modes}
    modes = list(stats)
    with open(out / "rfield.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point"] + [f"radius_{m}" for m in modes] + [f"size_{m}" for m in modes])
        for i in range(len(noisy)):
            w.writerow([i] + ["%.9g" % stats[m].radius[i] for m in modes]
                       + [int(stats[m].sizes[i, -1]) for m in modes])
    radii = {m: stats[m].radius for m in modes}
    hi = max(float(r.max()) for r in radii.values())
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, 41)
    with open(out / "rfield_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + [f"count_{m}" for m in modes])
        counts = {m: np.histogram(radii[m], edges)[0] for m in modes}
        for b in range(len(edges) - 1):
            w.writerow(["%.9g" % edges[b], "%.9g" % edges[b + 1]] + [counts[m][b] for m in modes])
    with open(out / "rfield_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_mode", "block", "mean_radius", "median_radius", "mean_size"])
        for m in modes:
            w.writerow([m, cfg.block, "%.9g" % radii[m].mean(), "%.9g" % np.median(radii[m]),
                        "%.9g" % stats[m].sizes[:, -1].mean()])
    plotting.plot_receptive_field(radii, out / "rfield.png")
    return out / "rfield.csv"


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "denoise": cmd_denoise,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "rfield": cmd_rfield}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpd", description="Graph-convolutional point cloud denoiser")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        for f in fields(RunConfig):
            flags = [f"--{f.name}"]
            if "_" in f.name:
                flags.append(f"--{f.name.replace('_', '-')}")
            p.add_argument(*flags, dest=f.name, default=None, metavar="VALUE")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    try:
        cfg = resolve(args.config, overrides)
        Path(cfg.output).mkdir(parents=True, exist_ok=True)
        write_config(Path(cfg.output) / "resolved_config.ini", cfg)
        result = HANDLERS[args.command](cfg)
    except (ConfigError, ContractError, DimensionError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (OSError, VersionError, GeometryError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    log.info("done: %s", result)
    return EXIT_OK


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
