"""``duq`` command line: synthetic data, toy-model training and sampling, fusion, evaluation, ICP.

Exit codes: 0 success, 1 usage error, 2 data or format error.

Every file written carries the seed and a hash of the command's settings:
rasters through a ``<file>.meta.json`` sidecar, PLY through comment lines,
CSV through a leading ``#`` line, JSON reports through a ``provenance``
block and checkpoints through their header.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from duq import io as dio
from duq import synth
from duq.errors import DegenerateCorrespondenceError, DuqError, TrainingError
from duq.geometry import (
    DEFAULT_PERCENTILES,
    CameraIntrinsics,
    IcpConfig,
    PosePair,
    RigidTransform,
    backproject,
    default_workers,
    icp_align,
    percentile_filter,
    percentile_sweep,
)
from duq.metrics import auce, ause_rmse, depth_metrics
from duq.predictive import SIGMA_MIN, fuse_samples
from duq.toynet import (
    DROPOUT_PRESETS,
    EnsembleModel,
    ToyNetConfig,
    TrainSettings,
    ensemble_sample,
    mc_dropout_sample,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_NOT_HASHED = {"func", "out", "out_dir"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# provenance helpers

def _settings(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}


def _provenance(args, seed=None, **extra) -> dict:
    prov = {"command": args.command, "seed": seed, "config_hash": dio.config_hash(_settings(args))}
    prov.update(extra)
    return prov


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def _write_raster(bundle, path, prov: dict) -> None:
    dio.write_raster(bundle, path)
    dio.write_report(prov, _meta_path(path))


def _read_meta(path) -> dict:
    p = _meta_path(path)
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise dio.FormatError(f"{p}: bad sidecar JSON ({exc})") from None


def _inherited_seed(*paths):
    seeds = [_read_meta(p).get("seed") for p in paths]
    seeds = [s for s in seeds if s is not None]
    return seeds[0] if len(set(map(str, seeds))) == 1 else (seeds or None)


def _exists(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# tabular data (1-D regression sets and feature files)

def _write_table(path, columns: dict, prov: dict) -> None:
    names = list(columns)
    rows = zip(*(np.asarray(columns[n], dtype=np.float64) for n in names))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow(["%.17g" % v for v in r])


def _read_table(path) -> dict:
    lines = [ln for ln in _exists(path).read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise dio.FormatError(f"{path}: no header row", line=1)
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    cols = {h: [] for h in header}
    for k, rec in enumerate(reader, start=2):
        if len(rec) != len(header):
            raise dio.FormatError(f"{path}: expected {len(header)} fields, got {len(rec)}", line=k)
        try:
            for h, v in zip(header, rec):
                cols[h].append(float(v))
        except ValueError:
            raise dio.FormatError(f"{path}: non-numeric field", line=k) from None
    return {h: np.asarray(v) for h, v in cols.items()}


def _features(table: dict) -> np.ndarray:
    names = [h for h in table if h != "y"]
    if not names:
        raise dio.FormatError("feature table has no input columns")
    return np.stack([table[h] for h in names], axis=1)


# commands

def cmd_synth(args) -> int:
    if args.kind == "pairset" and args.noise is not None:
        raise UsageError("--noise does not apply to pairset; corruption is on unless --clean")
    if args.kind != "pairset" and args.clean:
        raise UsageError("--clean only applies to --kind pairset")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args, args.seed, kind=args.kind)
    if args.kind == "regress1d":
        slope = 0.1 if args.noise is None else args.noise
        x, y = synth.regress1d(args.n, args.seed, slope=slope)
        _write_table(out / "data.csv", {"x": x, "y": y}, prov)
        return EXIT_OK

    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.n)
    if args.kind == "depthscene":
        noise = 0.05 if args.noise is None else args.noise
        for i, s in enumerate(seeds):
            gt, samples, intr = synth.depthscene(int(s), args.width, args.height, M=args.samples, noise=noise)
            item = dict(prov, item=i, item_seed=int(s),
                        intrinsics={"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy})
            _write_raster(dio.depth_to_bundle(gt), out / f"scene_{i:03d}_gt.duq", item)
            _write_raster(dio.samples_to_bundle(samples), out / f"scene_{i:03d}_samples.duq", item)
        return EXIT_OK

    # pairset
    pairs = []
    for i, s in enumerate(seeds):
        views = synth.make_pair(int(s), args.width, args.height, corrupt=not args.clean)
        pp = views.to_pose_pair()
        comments = [f"seed {int(s)}", f"config_hash {prov['config_hash']}", f"pair {i}"]
        for role, cloud in (("source", pp.source), ("target", pp.target)):
            dio.write_ply(cloud, out / f"pair_{i:03d}_{role}.ply", comments + [f"role {role}"])
        pairs.append({"source": f"pair_{i:03d}_source.ply", "target": f"pair_{i:03d}_target.ply",
                      "gt": views.gt.matrix().tolist(), "seed": int(s)})
    # full float repr: the pose must stay orthonormal to machine precision
    doc = json.dumps({"pairs": pairs, "provenance": prov}, sort_keys=True, indent=1)
    (out / "manifest.json").write_text(doc + "\n", encoding="utf-8")
    return EXIT_OK


def _load_config(args) -> ToyNetConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(_exists(args.config).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise dio.FormatError(f"{args.config}: bad JSON ({exc})") from None
    sizes = _csv_floats(args.layers) if args.layers else base.get("layer_sizes", [1, 32, 32, 2])
    preset = args.dropout or base.get("dropout", "none")
    p = args.p if args.p is not None else base.get("p", 0.0)
    if isinstance(preset, list):
        return ToyNetConfig(tuple(int(s) for s in sizes), tuple(preset), p)
    if preset not in DROPOUT_PRESETS:
        raise UsageError(f"unknown dropout preset {preset!r}; choose from {', '.join(DROPOUT_PRESETS)}")
    return ToyNetConfig.from_preset([int(s) for s in sizes], preset, p)


def cmd_train(args) -> int:
    config = _load_config(args)
    table = _read_table(args.data)
    if "y" not in table:
        raise dio.FormatError(f"{args.data}: training data needs a 'y' column")
    x = _features(table)
    settings = TrainSettings(lr=args.lr, batch_size=args.batch, epochs=args.epochs)
    prov = _provenance(args, args.seed)
    if args.members == 1:
        params = train(config, (x, table["y"]), settings, args.seed)
        params.meta["provenance"] = prov
        dio.write_checkpoint(params, config, args.out)
        return EXIT_OK
    if config.has_dropout:
        raise UsageError("ensemble members (--members > 1) are trained without dropout")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.members):
        s = args.seed + k
        params = train(config, (x, table["y"]), settings, s)
        params.meta["provenance"] = dict(prov, member=k, seed=s)
        dio.write_checkpoint(params, config, out / f"member_{k:03d}.duqm")
    return EXIT_OK


def _load_ensemble(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    files = sorted(d.glob("*.duqm"))
    if not files:
        raise dio.FormatError(f"{d}: no .duqm checkpoints")
    members, seeds, config = [], [], None
    for f in files:
        params, cfg = dio.read_checkpoint(f)
        if config is not None and cfg != config:
            raise dio.FormatError(f"{f}: network config differs from the other members")
        config = cfg
        members.append(params)
        seeds.append(int(params.meta.get("train_seed", len(seeds))))
    return EnsembleModel(members, seeds), config


def _read_inputs(path):
    """Features as (n, d) from a table, or per-pixel scalars of shape (h, w) from a raster."""
    p = _exists(path)
    if dio.is_raster_file(p):
        bundle = dio.read_raster(p)
        return bundle.planes[0][1].astype(np.float64)[..., None]
    return _features(_read_table(p))


def cmd_predict(args) -> int:
    if (args.model is None) == (args.ensemble is None):
        raise UsageError("give exactly one of --model or --ensemble")
    x = _read_inputs(args.input)
    if args.mode == "mcdropout":
        if args.model is None:
            raise UsageError("--mode mcdropout needs --model")
        params, config = dio.read_checkpoint(_exists(args.model))
        samples = mc_dropout_sample(params, config, x, args.samples, args.seed)
    else:
        if args.ensemble is None:
            raise UsageError("--mode ensemble needs --ensemble")
        ens, config = _load_ensemble(args.ensemble)
        m = len(ens.members) if args.samples is None else args.samples
        if not 1 <= m <= len(ens.members):
            raise UsageError(f"--samples {m} but the ensemble has {len(ens.members)} members")
        samples = ensemble_sample(EnsembleModel(ens.members[:m], ens.seeds[:m]), config, x)
    _write_raster(dio.samples_to_bundle(samples), args.out, _provenance(args, args.seed, M=samples.M))
    return EXIT_OK


def _load_prediction(path):
    bundle = dio.read_raster(_exists(path))
    tags = bundle.tags()
    alternating = len(tags) >= 2 and len(tags) % 2 == 0 and all(
        t == (dio.Channel.DEPTH if i % 2 == 0 else dio.Channel.SIGMA) for i, t in enumerate(tags))
    if alternating:
        return fuse_samples(dio.bundle_to_samples(bundle))
    return dio.bundle_to_gaussian(bundle)


def cmd_fuse(args) -> int:
    samples = dio.bundle_to_samples(dio.read_raster(_exists(args.input)))
    pred = fuse_samples(samples, sigma_min=args.sigma_min)
    _write_raster(dio.gaussian_to_bundle(pred), args.out,
                  _provenance(args, _inherited_seed(args.input), M=samples.M))
    return EXIT_OK


def _load_gt(path):
    bundle = dio.read_raster(_exists(path))
    d = bundle.first(dio.Channel.DEPTH)
    if d is None:
        raise dio.FormatError(f"{path}: ground truth raster has no depth plane")
    d = d.astype(np.float64)
    m = bundle.first(dio.Channel.MASK)
    valid = (m == 1.0) if m is not None else np.isfinite(d)
    return np.where(valid, d, np.nan)


def _image_metrics(pred, gt, which) -> dict:
    block = {}
    if "depth" in which:
        block["depth"] = depth_metrics(pred.mean, gt).as_dict()
    if "auce" in which:
        c = auce(pred, gt)
        block["auce"] = {"levels": c.levels, "coverage": c.coverage, "auce": c.auce}
    if "ause" in which:
        s = ause_rmse(pred.sigma_total, pred.mean, gt)
        block["ause"] = {"fractions": s.fractions, "curve_by_uncertainty": s.curve_by_uncertainty,
                         "curve_oracle": s.curve_oracle, "error_curve": s.error_curve, "ause": s.ause}
    return block


def _mean_blocks(blocks: list[dict]) -> dict:
    out = {}
    for key in blocks[0]:
        vals = [b[key] for b in blocks]
        if isinstance(vals[0], dict):
            out[key] = _mean_blocks(vals)
        else:
            out[key] = np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in vals]), axis=0)
    return out


def cmd_eval(args) -> int:
    which = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(which) - {"depth", "auce", "ause"}
    if unknown or not which:
        raise UsageError(f"--metrics takes depth,auce,ause; got {args.metrics!r}")
    if len(args.pred) != len(args.gt):
        raise UsageError(f"{len(args.pred)} --pred files but {len(args.gt)} --gt files")
    preds = [_load_prediction(p) for p in args.pred]
    gts = [_load_gt(g) for g in args.gt]
    for p, g, name in zip(preds, gts, args.pred):
        if p.mean.shape != g.shape:
            raise dio.FormatError(f"{name}: prediction shape {p.mean.shape} != ground truth {g.shape}")
    if args.aggregate == "pooled":
        from duq.predictive import GaussianPrediction

        pooled = GaussianPrediction.from_parts(
            np.concatenate([p.mean.ravel() for p in preds]),
            np.concatenate([p.var_epistemic.ravel() for p in preds]),
            np.concatenate([p.var_aleatoric.ravel() for p in preds]))
        result = _image_metrics(pooled, np.concatenate([g.ravel() for g in gts]), which)
    else:
        result = _mean_blocks([_image_metrics(p, g, which) for p, g in zip(preds, gts)])
    report = {"schema_version": dio.REPORT_SCHEMA_VERSION, **result,
              "provenance": _provenance(args, _inherited_seed(*args.pred, *args.gt),
                                        inputs={"pred": args.pred, "gt": args.gt},
                                        aggregate=args.aggregate, n_images=len(preds))}
    if args.out:
        dio.write_report(report, args.out)
    else:
        sys.stdout.write(dio.dumps_report(report))
    return EXIT_OK


def _sigma_plane(bundle):
    s = bundle.first(dio.Channel.SIGMA)
    if s is not None:
        return s.astype(np.float64)
    v = bundle.all(dio.Channel.VAR)
    return np.sqrt(v[-1].astype(np.float64)) if v else None


def cmd_backproject(args) -> int:
    bundle = dio.read_raster(_exists(args.depth))
    depth = bundle.first(dio.Channel.DEPTH)
    if depth is None:
        raise dio.FormatError(f"{args.depth}: no depth plane")
    depth = depth.astype(np.float64)
    sigma = _sigma_plane(dio.read_raster(_exists(args.sigma))) if args.sigma else _sigma_plane(bundle)
    if sigma is None:
        raise UsageError("no sigma plane in --depth; pass --sigma")
    if sigma.shape != depth.shape:
        raise dio.FormatError(f"sigma shape {sigma.shape} != depth shape {depth.shape}")
    mask = bundle.first(dio.Channel.MASK)
    valid = (mask == 1.0) if mask is not None else np.isfinite(depth) & (depth > 0)
    given = {k: getattr(args, k) for k in ("fx", "fy", "cx", "cy")}
    if any(v is None for v in given.values()):
        side = _read_meta(args.depth).get("intrinsics", {})
        given = {k: v if v is not None else side.get(k) for k, v in given.items()}
        if any(v is None for v in given.values()):
            raise UsageError("intrinsics missing: pass --fx --fy --cx --cy")
    cloud = backproject(depth, sigma, CameraIntrinsics(**given), args.stride, valid)
    prov = _provenance(args, _inherited_seed(args.depth))
    dio.write_ply(cloud, args.out, [f"seed {prov['seed']}", f"config_hash {prov['config_hash']}"])
    return EXIT_OK


def _icp_config(args) -> IcpConfig:
    return IcpConfig(max_iterations=args.max_iter, tol_delta_rmse=args.tol, max_corr_dist=args.max_corr_dist)


def _ply_seed(path):
    for ln in _exists(path).read_text(encoding="utf-8").splitlines():
        if ln.startswith("comment seed "):
            tok = ln.split()[2]
            return int(tok) if tok.lstrip("-").isdigit() else tok
        if ln == "end_header":
            break
    return None


def cmd_icp(args) -> int:
    if not 0.0 < args.percentile <= 1.0:
        raise UsageError(f"--percentile must lie in (0, 1], got {args.percentile}")
    src = percentile_filter(dio.read_ply(_exists(args.source)), args.percentile)
    tgt = percentile_filter(dio.read_ply(_exists(args.target)), args.percentile)
    res = icp_align(src, tgt, _icp_config(args))
    report = {
        "transform": res.transform.matrix(),
        "iterations": res.iterations,
        "final_rmse": res.final_rmse,
        "converged": res.converged,
        "matched_fraction": res.matched_fraction,
        "max_corr_dist": res.max_corr_dist,
        "percentile": args.percentile,
        "n_source": len(src),
        "n_target": len(tgt),
        "provenance": _provenance(args, _ply_seed(args.source),
                                  inputs={"source": args.source, "target": args.target}),
    }
    if args.out:
        dio.write_report(report, args.out)
    else:
        sys.stdout.write(dio.dumps_report(report))
    return EXIT_OK


def _load_manifest(path):
    p = _exists(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
        entries = doc["pairs"]
        pairs = [PosePair(dio.read_ply(_exists(p.parent / e["source"])),
                          dio.read_ply(_exists(p.parent / e["target"])),
                          RigidTransform.from_matrix(np.asarray(e["gt"], dtype=np.float64)))
                 for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, DuqError):
            raise
        raise dio.FormatError(f"{p}: bad manifest ({exc})") from None
    return pairs, doc.get("provenance", {})


def cmd_sweep(args) -> int:
    percentiles = _csv_floats(args.percentiles)
    if not percentiles or any(not 0.0 < q <= 1.0 for q in percentiles):
        raise UsageError("--percentiles must be values in (0, 1]")
    pairs, upstream = _load_manifest(args.pairs)
    workers = args.workers if args.workers else default_workers()
    rows = percentile_sweep(pairs, percentiles, _icp_config(args), workers)
    prov = _provenance(args, upstream.get("seed"))
    prov.pop("command")
    if args.out:
        dio.write_sweep_csv(rows, args.out, prov)
    else:
        sys.stdout.write(dio.encode_sweep_csv(rows, prov))
    return EXIT_OK


# parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="duq", description="Depth uncertainty toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic data")
    p.add_argument("--kind", choices=("regress1d", "depthscene", "pairset"), required=True)
    p.add_argument("--n", type=int, default=8, help="examples (regress1d) or scenes/pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=None,
                   help="regress1d: noise slope; depthscene: relative noise")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--samples", type=int, default=8, help="depthscene: samples per scene")
    p.add_argument("--clean", action="store_true", help="pairset: no corruption at discontinuities")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy regressor (or an ensemble)")
    p.add_argument("--config", help="JSON with layer_sizes, dropout, p")
    p.add_argument("--layers", help="comma-separated widths, input..output (output must be 2)")
    p.add_argument("--dropout", help=f"placement preset: {'|'.join(DROPOUT_PRESETS)}")
    p.add_argument("--p", type=float, default=None, help="dropout rate")
    p.add_argument("--data", required=True, help="CSV with x columns and y")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=1, help="> 1 writes an ensemble directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="draw predictive samples")
    p.add_argument("--model")
    p.add_argument("--ensemble", help="directory of .duqm checkpoints")
    p.add_argument("--mode", choices=("mcdropout", "ensemble"), required=True)
    p.add_argument("--samples", type=int, default=None, help="M (default 32 for mcdropout, all members)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", required=True, help="feature CSV or raster")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse", help="sample set raster -> Gaussian prediction raster")
    p.add_argument("--input", required=True)
    p.add_argument("--sigma-min", type=float, default=SIGMA_MIN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="depth, calibration and sparsification metrics")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--metrics", default="depth,auce,ause")
    p.add_argument("--aggregate", choices=("pooled", "per-image"), default="pooled")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("backproject", help="depth + sigma raster -> PLY")
    p.add_argument("--depth", required=True)
    p.add_argument("--sigma")
    for k in ("fx", "fy", "cx", "cy"):
        p.add_argument(f"--{k}", type=float)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backproject)

    def icp_flags(q):
        q.add_argument("--max-iter", type=int, default=50)
        q.add_argument("--tol", type=float, default=1e-6)
        q.add_argument("--max-corr-dist", type=float, default=None)

    p = sub.add_parser("icp", help="align two PLY clouds")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--percentile", type=float, default=1.0)
    icp_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_icp)

    p = sub.add_parser("sweep", help="ICP pose error per certainty percentile")
    p.add_argument("--pairs", required=True, help="manifest.json from synth --kind pairset")
    p.add_argument("--percentiles", default=",".join("%.2f" % q for q in DEFAULT_PERCENTILES))
    p.add_argument("--workers", type=int, default=0, help="0: DUQ_THREADS or all cores")
    icp_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return ap


def _fill_defaults(args) -> None:
    if args.command == "synth":
        if args.width is None:
            args.width = 192 if args.kind == "pairset" else 64
        if args.height is None:
            args.height = args.width * 3 // 4
    if args.command == "predict" and args.samples is None and args.mode == "mcdropout":
        args.samples = 32


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _fill_defaults(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"duq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DuqError, DegenerateCorrespondenceError, TrainingError, OSError) as exc:
        print(f"duq {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
