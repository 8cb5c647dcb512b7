"""Command-line entry points.

    opflow gen-data --config C --out data.ufds
    opflow gen-obs  --config C --out obs.json
    opflow train    --config C --data data.ufds --out ckpt_dir [--ckpt resume.opfl]
    opflow sample   --ckpt model.opfl --count N [--resolution R] --out samples.ufds
    opflow regress  --ckpt model.opfl --data obs.json --config C --out run_dir
    opflow eval     --data samples.ufds|posterior.npz --config C [--obs obs.json] --out run_dir
    opflow plot     --data samples.ufds|posterior.npz|metrics_dir [--obs obs.json] --out fig_dir

Exit codes: 0 success, 2 configuration or argument error, 3 numerical
failure, 4 I/O or file-format error. See ``opflow.config`` for the schema.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import ExperimentConfig, copy_config, load_config
from .datasets import Dataset, generate_dataset, load_dataset, pair_channels, save_dataset
from .errors import ConfigError, DivergenceError, FactorizationError, FileFormatError, RejectionLimitError
from .flow import OpFlow, checkpoint_load
from .gp import Observations, cholesky_with_jitter, gpr_posterior
from .grid import Grid, IndexSet
from .metrics import MetricReport, averaged_regression_scores, generation_report, msll, smse
from .regression import load_observations, map_estimate, save_observations, sgld_sample
from .training import TrainHistory, train

logger = logging.getLogger("opflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def build_model(cfg: ExperimentConfig) -> OpFlow:
    torch.manual_seed(cfg.model.init_seed)
    return OpFlow(cfg.flow_config(), cfg.latent.build())


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n} is required for '{args.command}'")


def _path(cfg: ExperimentConfig | None, p) -> Path:
    return cfg.resolve(p) if cfg is not None else Path(p)


def make_dataset(cfg: ExperimentConfig, seed: int | None = None, count: int | None = None) -> Dataset:
    d = cfg.data
    ds = generate_dataset(d.kind, d.build(), cfg.grid.build(), d.count if count is None else count,
                          d.seed if seed is None else seed, d.truncation(), d.element_type)
    if d.pair_channels:
        ds = pair_channels(ds, d.pair_seed)
    return ds


def make_observations(cfg: ExperimentConfig, seed: int | None = None) -> tuple[Observations, np.ndarray]:
    """Draw a ground-truth function from the data process and observe it with noise."""
    o = cfg.regression.observations
    grid = cfg.grid.build()
    truth_seed = o.truth_seed if seed is None else seed
    sel_seed = o.seed if seed is None else seed
    truth = make_dataset(cfg, seed=truth_seed, count=2 if cfg.data.pair_channels else 1).data[0].astype(np.float64)
    if o.rule == "random":
        points = IndexSet.random(grid, o.count, sel_seed)
    else:
        points = IndexSet(grid, tuple(sorted(o.indices)))
    rng = np.random.default_rng([sel_seed, 1])
    clean = truth.reshape(truth.shape[0], -1)[:, points.array]
    noisy = clean + np.sqrt(cfg.regression.noise_variance) * rng.standard_normal(clean.shape)
    return Observations(points, noisy, cfg.regression.noise_variance), truth


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _require(args, "config", "out")
    cfg = load_config(args.config)
    ds = make_dataset(cfg, seed=args.seed, count=args.count)
    out = _path(cfg, args.out)
    save_dataset(ds, out)
    print(f"wrote {ds.count} x {ds.channels} x {'x'.join(map(str, ds.grid.resolution))} samples to {out}")
    return EXIT_OK


def cmd_gen_obs(args) -> int:
    _require(args, "config", "out")
    cfg = load_config(args.config)
    obs, truth = make_observations(cfg, args.seed)
    out = _path(cfg, args.out)
    save_observations(obs, out, truth, extra={"data": cfg.data.build().to_dict(), "kind": cfg.data.kind})
    print(f"wrote {len(obs)} observations to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "config", "data", "out")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.model.init_seed = args.seed
    out = _path(cfg, args.out)
    ds = load_dataset(_path(cfg, args.data))
    if args.ckpt:
        model = checkpoint_load(_path(cfg, args.ckpt))
        logger.info("resuming at iteration %d", model.meta.get("iteration", 0))
    else:
        model = build_model(cfg)
    if model.config.data_channels != ds.channels:
        raise ConfigError(f"model.channels: model has {model.config.data_channels}, data has {ds.channels}")
    copy_config(cfg, out)
    history = TrainHistory()
    model, history = train(model, ds.data, cfg.train, checkpoint_dir=out, history=history)
    history.write_jsonl(out / "history.jsonl")
    print(json.dumps({"final": history.final, "iteration": model.meta["iteration"], "tags": history.tags,
                      "warnings": history.warnings}))
    return EXIT_OK


def cmd_sample(args) -> int:
    _require(args, "ckpt", "count", "out")
    if args.count <= 0:
        raise UsageError("--count must be positive")
    cfg = load_config(args.config) if args.config else None
    ckpt = _path(cfg, args.ckpt)
    model = checkpoint_load(ckpt)
    dims = model.config.dims
    if args.resolution is None:
        if cfg is None:
            raise UsageError("--resolution is required without --config")
        grid = cfg.grid.build()
    else:
        grid = Grid((args.resolution,) * dims)
    seed = 0 if args.seed is None else args.seed
    gen = torch.Generator().manual_seed(seed)
    chunks = []
    for start in range(0, args.count, 256):
        chunks.append(model.sample(min(256, args.count - start), grid.resolution, gen).numpy())
    etype = cfg.data.element_type if cfg else "f4"
    data = np.concatenate(chunks).astype("<f4" if etype == "f4" else "<f8")
    ds = Dataset(data, grid, "model", {"checkpoint": str(ckpt), "seed": seed,
                                       "latent": model.latent_spec.to_dict()}, etype)
    out = _path(cfg, args.out)
    save_dataset(ds, out)
    if cfg is not None:
        copy_config(cfg, out.parent)
    print(f"wrote {ds.count} samples at resolution {grid.resolution} to {out}")
    return EXIT_OK


def _write_posterior(out: Path, result, obs: Observations):
    q05, q95 = np.quantile(result.samples, [0.05, 0.95], axis=0) if len(result.samples) else (result.mean,) * 2
    np.savez(out / "posterior.npz", map=result.map_estimate, mean=result.mean, std=result.std,
             q05=q05, q95=q95, samples=result.samples.astype(np.float32),
             resolution=np.asarray(obs.grid.resolution))
    if len(result.samples):
        save_dataset(Dataset(np.asarray(result.samples, dtype=np.float64), obs.grid, "posterior",
                             {"summary": result.summary()}, "f8"), out / "posterior_samples.ufds")


def regression_scores(mean, var, obs: Observations, truth, cfg: ExperimentConfig) -> dict:
    scores = {}
    if truth is not None:
        t = np.asarray(truth)[: mean.shape[0]]
        scores["smse_truth"] = smse(mean, t)
        scores["msll_truth"] = msll(mean, var, t)
    if cfg.data.kind in ("gp", "grf") and not cfg.data.pair_channels:
        # test draws from the analytic GP posterior of the data process
        post = gpr_posterior(cfg.data.build(), obs)
        L = cholesky_with_jitter(post.cov, base=1e-10)
        rng = np.random.default_rng(cfg.regression.test_seed)
        z = rng.standard_normal((cfg.regression.test_draws, post.dim))
        draws = post.mean + z @ L.T
        s = averaged_regression_scores(mean.ravel(), var.ravel(), draws)
        scores.update(smse=s["smse"], msll=s["msll"], test_draws=float(s["num_test_draws"]))
    return scores


def cmd_regress(args) -> int:
    _require(args, "ckpt", "data", "config", "out")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.regression.sgld.seed = args.seed
    out = _path(cfg, args.out)
    model = checkpoint_load(_path(cfg, args.ckpt))
    obs, truth, _ = load_observations(_path(cfg, args.data))
    if model.config.dims != obs.grid.dims:
        raise ConfigError("regression: observation grid dimension differs from the model")
    copy_config(cfg, out)
    u_map = map_estimate(obs, model, cfg.regression.map)
    result = sgld_sample(obs, model, cfg.regression.sgld, u_map=u_map)
    _write_posterior(out, result, obs)
    var = np.maximum(result.std ** 2, 1e-12)
    report = MetricReport(provenance={"checkpoint": str(args.ckpt), "observations": str(args.data),
                                      "sgld_seed": cfg.regression.sgld.seed,
                                      "test_seed": cfg.regression.test_seed})
    report.scalars.update(regression_scores(result.mean[: obs.values.shape[0]], var[: obs.values.shape[0]],
                                            obs, truth, cfg))
    report.scalars["num_samples"] = float(len(result.samples))
    report.scalars["diverged"] = float(result.diverged)
    report.write(out)
    print(json.dumps(report.scalars))
    return EXIT_OK if not result.diverged else EXIT_NUMERIC


def _load_batch(path: Path):
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    ds = load_dataset(path)
    return ds


def cmd_eval(args) -> int:
    _require(args, "data", "config", "out")
    cfg = load_config(args.config)
    out = _path(cfg, args.out)
    src = _load_batch(_path(cfg, args.data))
    copy_config(cfg, out)
    if isinstance(src, dict):
        _require(args, "obs")
        obs, truth, _ = load_observations(_path(cfg, args.obs))
        k = obs.values.shape[0]
        var = np.maximum(src["std"][:k] ** 2, 1e-12)
        report = MetricReport(provenance={"posterior": str(args.data), "observations": str(args.obs)})
        report.scalars.update(regression_scores(src["mean"][:k], var, obs, truth, cfg))
    else:
        ref_name = cfg.metrics.reference
        reference = None if ref_name == "none" else (cfg.data.build() if ref_name == "data" else cfg.latent.build())
        vr = tuple(cfg.metrics.value_range) if cfg.metrics.value_range else None
        report = generation_report(src.data.astype(np.float64), src.grid, reference, cfg.metrics.max_lag,
                                   cfg.metrics.bins, vr)
        report.provenance = {"dataset": str(args.data), "generator": src.generator, "reference": ref_name}
        if cfg.data.bounds is not None:
            lo, hi = cfg.data.bounds
            report.scalars["fraction_in_bounds"] = float(np.mean((src.data >= lo) & (src.data <= hi)))
    report.write(out)
    print(json.dumps(report.scalars))
    return EXIT_OK


def _read_curve(path: Path) -> dict:
    with path.open() as fh:
        rows = list(csv.reader(fh))
    cols = rows[0]
    vals = np.asarray(rows[1:], dtype=float)
    return {c: vals[:, i] for i, c in enumerate(cols)}


def cmd_plot(args) -> int:
    _require(args, "data", "out")
    cfg = load_config(args.config) if args.config else None
    src_path = _path(cfg, args.data)
    out = _path(cfg, args.out)
    written = []
    if src_path.is_dir():
        ac = _read_curve(src_path / "autocovariance.csv")
        hist = _read_curve(src_path / "histogram.csv")
        written.append(plotting.metric_curves_plot(ac["lag"], ac["value"], hist["center"], hist["mass"],
                                                   out / "metric_curves.png", reference=ac.get("reference"),
                                                   stderr=ac.get("stderr")))
        hist_path = src_path / "history.jsonl"
        if hist_path.exists():
            recs = [json.loads(line) for line in hist_path.read_text().splitlines()]
            written.append(plotting.training_curve_plot([r for r in recs if "iteration" in r],
                                                        out / "training.png"))
    else:
        src = _load_batch(src_path)
        if isinstance(src, dict):
            grid = Grid(tuple(int(r) for r in src["resolution"]))
            obs, truth = (None, None)
            if args.obs:
                obs, truth, _ = load_observations(_path(cfg, args.obs))
            if grid.dims == 1:
                written.append(plotting.posterior_band_plot(grid, src["mean"], src["q05"], src["q95"],
                                                            out / "posterior_band.png", obs, truth,
                                                            src["samples"]))
            else:
                stack = np.stack([src["map"], src["mean"], src["std"]])
                written.append(plotting.heatmap_grid(stack, out / "posterior_maps.png", ncols=3))
        elif src.grid.dims == 1:
            written.append(plotting.sample_lines_plot(src.grid, src.data, out / "samples.png"))
        else:
            written.append(plotting.heatmap_grid(src.data, out / "samples.png"))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "gen-obs": cmd_gen_obs, "train": cmd_train, "sample": cmd_sample,
            "regress": cmd_regress, "eval": cmd_eval, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opflow", description="Neural operator flows on function spaces.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--ckpt")
        p.add_argument("--out")
        p.add_argument("--obs")
        p.add_argument("--seed", type=int)
        p.add_argument("--resolution", type=int)
        p.add_argument("--count", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FactorizationError, RejectionLimitError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
