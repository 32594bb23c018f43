"""``pcqa`` command line: extract, score, train, eval, bench, distort."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .cache import Cache
from .cloud_io import compute_norm_params, denormalize, normalize, read_ply, save_ply
from .config import PipelineConfig
from .diff import column_names
from .distort import DistortionKind, DistortionSpec, apply_distortion
from .errors import IO_EXIT_CODE, ConfigError, InsufficientData, PcqaError, ShapeError
from .evaluation import evaluate, normalize_mos, shuffle_split
from .multiscale import scale_name
from .pipeline import STAGES, _Timer, extract_pair
from .regress import load_model, predict, save_model, train
from .seeds import derive_seed

log = logging.getLogger("pcqa")

MANIFEST_COLUMNS = ("id", "original_path", "distorted_path", "mos")
REPORT_COLUMNS = ("dataset", "round", "plcc", "srocc", "krocc", "rmse", "n", "converged")


def _fmt(x) -> str:
    return repr(float(x))


class _Output:
    """Write to ``--output`` if given, else stdout."""

    def __init__(self, path):
        self.path = path

    def write(self, text: str):
        if self.path:
            Path(self.path).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_manifest(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"manifest {path} lacks columns {missing}")
        rows = []
        for r in reader:
            rows.append({
                "id": r["id"],
                "original_path": str((path.parent / r["original_path"]).resolve()),
                "distorted_path": str((path.parent / r["distorted_path"]).resolve()),
                "mos": float(r["mos"]),
            })
    return rows


def _config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "cache_dir": args.cache_dir}
    if args.config:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def _threads(args):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=args.threads)


class _Extractor:
    """Caches raw clouds and tensors across the rows of one invocation."""

    def __init__(self, cfg: PipelineConfig, workers: int):
        self.cfg = cfg
        self.workers = workers
        self.cache = Cache(cfg.cache_dir)
        self._clouds = {}

    def cloud(self, path):
        if path not in self._clouds:
            self._clouds[path] = read_ply(path)
        return self._clouds[path]

    def pair(self, original, distorted, timer=None):
        timer = timer or _Timer()
        with timer.stage("parse"):
            o, d = self.cloud(original), self.cloud(distorted)
        return extract_pair(o, d, self.cfg, self.cache, self.workers, timer)

    def dataset(self, rows):
        X = np.empty((len(rows), len(self.cfg.scales) * len(self.cfg.features) * (self.cfg.neighbors + 4)))
        for i, r in enumerate(rows):
            X[i] = self.pair(r["original_path"], r["distorted_path"]).vector.flat
            log.info("extracted %s (%d/%d)", r["id"], i + 1, len(rows))
        return X


def _targets(rows, cfg):
    mos = np.array([r["mos"] for r in rows])
    if cfg.mos_lo is not None and cfg.mos_hi is not None:
        mos = normalize_mos(mos, cfg.mos_lo, cfg.mos_hi)
    return mos


# -- commands ----------------------------------------------------------------


def cmd_extract(args, cfg):
    ex = _Extractor(cfg, args.threads)
    names = column_names(cfg.scales, cfg.features, cfg.neighbors + 4)
    if args.manifest:
        rows = read_manifest(args.manifest)
        X = ex.dataset(rows)
        mos = _targets(rows, cfg)
        body = _csv_text(["id", "mos", *names],
                         [[r["id"], _fmt(m), *map(_fmt, x)] for r, m, x in zip(rows, mos, X)])
        _Output(args.output).write(body)
        return 0
    if not (args.original and args.distorted):
        raise ConfigError("extract needs ORIGINAL and DISTORTED, or --manifest")
    res = ex.pair(args.original, args.distorted)
    vec = res.vector
    if args.format == "json":
        doc = {"columns": names, "vector": [float(v) for v in vec.flat], "meta": res.meta,
               "config": cfg.as_dict()}
        _Output(args.output).write(json.dumps(doc, indent=1) + "\n")
    elif args.format == "long":
        rows = []
        for g, values in zip(vec.groups, vec.values):
            rows += [[scale_name(g.scale), g.feature.value, k, _fmt(v)] for k, v in enumerate(values)]
        _Output(args.output).write(_csv_text(["group_scale", "group_feature", "k", "value"], rows))
    else:
        _Output(args.output).write(_csv_text(["id", *names], [[args.id, *map(_fmt, vec.flat)]]))
    sys.stderr.write(json.dumps(res.meta) + "\n")
    return 0


def cmd_score(args, cfg):
    model, stats = load_model(args.model)
    if model.dims != cfg.dims:
        raise ShapeError(f"model expects {model.dims}, configuration produces {cfg.dims}")
    res = _Extractor(cfg, args.threads).pair(args.original, args.distorted)
    score = predict(model, stats, res.vector)
    sys.stdout.write(f"{score:.6f}\n")
    if args.report:
        doc = {"score": score, "original": args.original, "distorted": args.distorted,
               "meta": res.meta, "config": cfg.as_dict()}
        Path(args.report).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_train(args, cfg):
    rows = read_manifest(args.manifest)
    if len(rows) < 4:
        raise InsufficientData(f"training needs at least 4 manifest rows, got {len(rows)}")
    X = _Extractor(cfg, args.threads).dataset(rows)
    y = _targets(rows, cfg)
    model, stats, history = train(X, y, cfg.train, cfg.dims)
    out = args.output or "model.pcqa"
    save_model(model, stats, out)
    hist_path = args.history or f"{out}.history.csv"
    Path(hist_path).write_text(
        _csv_text(["epoch", "lr", "total", "mse", "plcc_loss", "rank_loss"],
                  [[h.epoch, _fmt(h.lr), _fmt(h.total), _fmt(h.mse), _fmt(h.plcc_loss), _fmt(h.rank_loss)]
                   for h in history]),
        encoding="utf-8",
    )
    Path(f"{out}.config.txt").write_text(cfg.to_text(), encoding="utf-8")
    sys.stderr.write(json.dumps({"model": out, "history": hist_path, "rows": len(rows),
                                 "final": history[-1].__dict__}) + "\n")
    return 0


def _converged(rep) -> str:
    return "n/a" if rep.logistic is None else str(rep.logistic.converged)


def eval_rows(rows, X, y, cfg, model_path=None, dataset="dataset"):
    """Per-round (and mean) report rows for the shuffle-split protocol.

    Test folds under five items are scored without the logistic map.
    """
    out = []
    if model_path:
        model, stats = load_model(model_path)
        rep = evaluate(predict(model, stats, X), y)
        return [[dataset, "full", _fmt(rep.plcc), _fmt(rep.srocc), _fmt(rep.krocc), _fmt(rep.rmse),
                 rep.n, _converged(rep)]]
    plan = shuffle_split(len(rows), cfg.split_ratio, cfg.split_rounds, derive_seed(cfg.seed, "split"))
    reports = []
    for r, (tr, te) in enumerate(plan.rounds):
        model, stats, _ = train(X[tr], y[tr], cfg.train, cfg.dims,
                                init_seed=derive_seed(cfg.seed, "init", r),
                                shuffle_seed=derive_seed(cfg.seed, "shuffle", r))
        rep = evaluate(predict(model, stats, X[te]), y[te], fit=len(te) >= 5)
        reports.append(rep)
        out.append([dataset, r, _fmt(rep.plcc), _fmt(rep.srocc), _fmt(rep.krocc), _fmt(rep.rmse),
                    rep.n, _converged(rep)])
    mean = [np.mean([getattr(rep, f) for rep in reports]) for f in ("plcc", "srocc", "krocc", "rmse")]
    flags = {_converged(rep) for rep in reports}
    out.append([dataset, "mean", *map(_fmt, mean), int(np.mean([rep.n for rep in reports])),
                flags.pop() if len(flags) == 1 else "False"])
    return out


def cmd_eval(args, cfg):
    rows = read_manifest(args.manifest)
    if len(rows) < 10:
        raise InsufficientData(f"evaluation needs at least 10 manifest rows, got {len(rows)}")
    X = _Extractor(cfg, args.threads).dataset(rows)
    y = _targets(rows, cfg)
    dataset = args.dataset or Path(args.manifest).stem
    _Output(args.output).write(_csv_text(REPORT_COLUMNS, eval_rows(rows, X, y, cfg, args.model, dataset)))
    return 0


def cmd_bench(args, cfg):
    timer = _Timer()
    t0 = time.perf_counter()
    with timer.stage("parse"):
        raw = read_ply(args.cloud)
    params = compute_norm_params(raw)
    noisy = apply_distortion(normalize(raw, params),
                             DistortionSpec(DistortionKind.GaussianGeometry, args.sigma,
                                            derive_seed(cfg.seed, "distort")))
    partner = denormalize(noisy, params)
    extract_pair(raw, partner, cfg, Cache(None), args.threads, timer)
    total = time.perf_counter() - t0
    rows = [[s, f"{timer.t[s]:.6f}", raw.count] for s in STAGES]
    rows.append(["total", f"{total:.6f}", raw.count])
    _Output(args.output).write(_csv_text(["stage", "seconds", "points"], rows))
    return 0


def cmd_distort(args, cfg):
    raw = read_ply(args.cloud)
    params = compute_norm_params(raw)
    base = normalize(raw, params)
    kind = DistortionKind.parse(args.kind)
    levels = [float(v) for v in args.levels.replace(",", " ").split()]
    if not levels:
        raise ConfigError("--levels is empty")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = derive_seed(cfg.seed, "distort")
    top = max(levels) if kind is not DistortionKind.ColorQuantize else None
    stem = Path(args.cloud).stem
    rows = []
    for i, lvl in enumerate(levels):
        spec = DistortionSpec(kind, lvl, root + i)
        path = out_dir / f"{stem}_{kind.value}_{i:02d}.ply"
        if spec.is_identity:
            save_ply(raw, path)
        else:
            save_ply(denormalize(apply_distortion(base, spec), params), path)
        if kind is DistortionKind.ColorQuantize:
            mos = (lvl - 1) / 7.0
        else:
            mos = 1.0 - (lvl / top if top > 0 else 0.0)
        # manifest paths are relative to the manifest's own directory
        rows.append([f"{stem}_{i:02d}", os.path.relpath(Path(args.cloud).resolve(), out_dir.resolve()),
                     path.name, _fmt(mos)])
    (out_dir / "manifest.csv").write_text(_csv_text(MANIFEST_COLUMNS, rows), encoding="utf-8")
    sys.stdout.write(str(out_dir / "manifest.csv") + "\n")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--cache-dir", help="feature/tensor cache directory (default $PCQ_CACHE_DIR)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--output", "-o", help="output path (default stdout)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="pcqa", description="Full-reference point cloud quality assessment")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="coefficient-difference vector of a pair")
    s.add_argument("original", nargs="?")
    s.add_argument("distorted", nargs="?")
    s.add_argument("--manifest", help="extract every row of a manifest into one wide CSV")
    s.add_argument("--format", choices=("wide", "long", "json"), default="wide")
    s.add_argument("--id", default="sample")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("score", parents=[common], help="predict the quality of a pair")
    s.add_argument("original")
    s.add_argument("distorted")
    s.add_argument("--model", required=True)
    s.add_argument("--report", help="write a JSON report here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    s.add_argument("manifest")
    s.add_argument("--history", help="history CSV path (default <output>.history.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="repeated shuffle-split evaluation")
    s.add_argument("manifest")
    s.add_argument("--model", help="score the whole manifest with this model instead of cross-validating")
    s.add_argument("--dataset", help="dataset label in the report (default manifest stem)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="per-stage timing on one cloud")
    s.add_argument("cloud")
    s.add_argument("--sigma", type=float, default=1.0, help="noise of the synthetic partner cloud")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("distort", parents=[common], help="write a distortion ladder and manifest")
    s.add_argument("cloud")
    s.add_argument("--kind", default="gaussian", help="gaussian | dropout | quantize")
    s.add_argument("--levels", default="0,0.5,1,2,4")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_distort)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _config(args)
        with _threads(args):
            return args.func(args, cfg)
    except PcqaError as exc:
        sys.stderr.write(f"pcqa: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"pcqa: IOError: {exc}\n")
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
