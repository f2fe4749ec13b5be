"""Command-line entry point: ``lact gen|train|infer|eval|gradcheck``.

Settings come from an optional JSON config file; command-line flags override
it. Every command writes the fully resolved configuration next to its
outputs. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (SyntheticConfig, case_name, generate_case, read_case,
                   read_volume, write_case, write_volume)
from .errors import ConfigError, DataError, FormatError, LactError, NumericalError, ShapeError
from .gradcheck import run_gradcheck
from .metrics import lesion_metrics, report_document
from .model import ModelConfig, build, load, save
from .pipeline import TrainConfig, load_train_state, save_train_state, tiled_infer, train

log = logging.getLogger("lact")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def derive_seed(root: int, subsystem: str, index: int = 0) -> int:
    """Deterministic child seed for one subsystem of a run."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(subsystem.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    synthetic: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    infer: dict = field(default_factory=lambda: {"tile": [16, 16, 16], "stride": [8, 8, 8],
                                                 "workers": 1})
    threshold: float = 0.5
    split: dict | None = None
    time_points: int | None = None

    @classmethod
    def load(cls, path: str | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        raw = json.loads(Path(path).read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)} in {path}")
        return cls(**raw)

    def dump(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> list[int]:
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or D,H,W, got {text!r}")
    return parts


def _set(d: dict, key: str, value):
    if value is not None:
        d[key] = value


def _read_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise DataError(f"{data_dir} has no manifest.json (run `lact gen` first)")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _split_counts(n: int, split: dict | None) -> dict:
    if split is None:
        test, val = n // 4, n // 8
        return {"train": n - test - val, "val": val, "test": test}
    counts = {k: int(split.get(k, 0)) for k in ("train", "val", "test")}
    if sum(counts.values()) != n:
        raise ConfigError(f"split {counts} does not add up to {n} cases")
    return counts


def cmd_gen(args, cfg: ExperimentConfig) -> int:
    _set(cfg.synthetic, "shape", args.shape)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.t is not None:
        cfg.time_points = args.t
    if args.split is not None:
        cfg.split = dict(zip(("train", "val", "test"), args.split))
    T = 3 if cfg.time_points is None else cfg.time_points
    if T < 2:
        raise ConfigError(f"--t must be >= 2 (activity needs a baseline and a follow-up), got {T}")
    n = args.cases
    if n < 1:
        raise ConfigError("--cases must be >= 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    counts = _split_counts(n, cfg.split)
    base = SyntheticConfig.from_dict(cfg.synthetic)
    for i in range(n):
        syn = dataclasses.replace(base, seed=derive_seed(cfg.seed, "data", i))
        series, mask = generate_case(syn, T)
        meta = {"case_id": case_name(i), "T": T, "seed": syn.seed, "synthetic": syn.to_dict()}
        write_case(out, i, series, mask, meta)
    order = np.random.default_rng(derive_seed(cfg.seed, "split")).permutation(n)
    names = [case_name(int(i)) for i in order]
    a, b = counts["train"], counts["train"] + counts["val"]
    manifest = {"T": T, "cases": [case_name(i) for i in range(n)],
                "split": {"train": sorted(names[:a]), "val": sorted(names[a:b]),
                          "test": sorted(names[b:])}}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    cfg.time_points = T
    cfg.dump(out / "config.json")
    print(f"wrote {n} cases (T={T}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_model_config(cfg: ExperimentConfig, T: int) -> ModelConfig:
    m = dict(cfg.model)
    m.setdefault("seed", derive_seed(cfg.seed, "model"))
    if m.get("aggregation", "convgru") == "concat":
        m["concat_T"] = T
    else:
        m.pop("concat_T", None)
    mc = ModelConfig.from_dict(m)
    mc.validate()
    return mc


def cmd_train(args, cfg: ExperimentConfig) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    manifest = _read_manifest(data_dir)
    if args.seed is not None:
        cfg.seed = args.seed
    _set(cfg.model, "aggregation", args.aggregation)
    _set(cfg.model, "levels", args.levels)
    _set(cfg.model, "base_channels", args.base_channels)
    _set(cfg.train, "epochs", args.epochs)
    _set(cfg.train, "learning_rate", args.lr)
    _set(cfg.train, "decay", args.decay)
    _set(cfg.train, "crop", args.crop)
    if args.t is not None:
        cfg.time_points = args.t
    T = cfg.time_points or manifest["T"]
    if T > manifest["T"] or T < 1:
        raise ConfigError(f"model needs T={T} time points but the data has {manifest['T']}")
    cfg.time_points = T

    mc = _resolve_model_config(cfg, T)
    tr = dict(cfg.train)
    tr.setdefault("seed", derive_seed(cfg.seed, "train"))
    tc = TrainConfig.from_dict(tr)
    tc.validate()
    cfg.model, cfg.train = mc.to_dict(), tc.to_dict()

    names = manifest["split"]["train"] or manifest["cases"]
    cases = []
    for name in names:
        series, mask, _ = read_case(data_dir / name)
        cases.append((series.last(T), mask))

    if args.resume:
        state = load_train_state(Path(args.resume).read_bytes(), mc)
        if state.config != tc:
            raise ConfigError("resume state was produced with a different training config")
        model = state.model
    else:
        state, model = None, build(mc)

    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    state = train(model, cases, tc, state=state, stop_epoch=args.stop_epoch,
                  on_epoch=lambda e, lr, loss: log.info("epoch %d lr %.3g loss %.5f", e, lr, loss))
    (out / "state.lact").write_bytes(save_train_state(state))
    (out / "model.lact").write_bytes(save(model))
    lines = [f"{e} {lr:.17g} {loss:.17g}" for e, (lr, loss)
             in enumerate(zip(state.lr_history, state.loss_history))]
    (out / "loss.log").write_text("\n".join(lines) + "\n")
    print(f"trained {mc.aggregation} model (T={T}) to epoch {state.epoch}; "
          f"final loss {state.loss_history[-1]:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args, cfg: ExperimentConfig) -> int:
    model = load(Path(args.checkpoint).read_bytes())
    ckpt_cfg = Path(args.checkpoint).with_name("config.json")
    trained_T = None
    if ckpt_cfg.exists():
        trained_T = json.loads(ckpt_cfg.read_text()).get("time_points")
    if args.tile is not None:
        cfg.infer["tile"] = args.tile
    if args.stride is not None:
        cfg.infer["stride"] = args.stride
    if args.workers is not None:
        cfg.infer["workers"] = args.workers
    T = args.t or model.config.concat_T or trained_T
    cfg.time_points = T

    if args.case:
        jobs = [(Path(args.case), Path(args.out))]
    else:
        data_dir = Path(args.data)
        manifest = _read_manifest(data_dir)
        names = manifest["cases"] if args.split == "all" else manifest["split"][args.split]
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(data_dir / n, out_dir / f"{n}.lsv") for n in names]

    tile = tuple(cfg.infer["tile"])
    stride = tuple(cfg.infer["stride"])
    m = model.spatial_multiple
    if any(t % m for t in tile):
        raise ShapeError(f"tile {tile} must be a multiple of {m} (2^(levels-1)) in every dim")
    for case_dir, out_path in jobs:
        series, _, _ = read_case(case_dir)
        use_T = T or series.T
        if use_T > series.T:
            raise DataError(f"{case_dir} has {series.T} time points, model needs {use_T}")
        full_tile = tuple(min(t, n) for t, n in zip(tile, series.shape))
        full_stride = tuple(min(s, t) for s, t in zip(stride, full_tile))
        prob = tiled_infer(model, series.last(use_T), full_tile, full_stride,
                           workers=int(cfg.infer.get("workers", 1)))
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_volume(out_path, prob.astype(np.float32))
    target = Path(args.out) if not args.case else Path(args.out).parent
    cfg.dump(target / ("infer_config.json" if args.case else "config.json"))
    print(f"wrote {len(jobs)} prediction(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if args.threshold is not None:
        cfg.threshold = args.threshold
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_ids = sorted(p.stem for p in pred_dir.glob("case_*.lsv"))
    if args.split:
        expected = _read_manifest(gt_dir)["split"][args.split]
    else:
        expected = sorted(p.name for p in gt_dir.glob("case_*") if p.is_dir())
    missing_gt = sorted(set(pred_ids) - set(expected))
    missing_pred = sorted(set(expected) - set(pred_ids))
    if missing_gt or missing_pred:
        raise DataError(f"unmatched cases: no ground truth for {missing_gt}, "
                        f"no prediction for {missing_pred}")
    if not pred_ids:
        raise DataError(f"no predictions found in {pred_dir}")
    reports = []
    for cid in pred_ids:
        pred = read_volume(pred_dir / f"{cid}.lsv")
        gt = read_volume(gt_dir / cid / "activity.lsv")
        reports.append(lesion_metrics(pred, gt, cfg.threshold, case_id=cid))
    doc = report_document(reports)
    out = Path(args.out) if args.out else pred_dir / "report.json"
    out.write_text(doc)
    agg = json.loads(doc)["aggregate"]
    print(f"n={agg['n_cases']} dice={agg['dice']:.4f} lfpr={agg['lfpr']:.4f} "
          f"fps={agg['fp_count']:.3f} ltpr={agg['ltpr']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    max_coords = None if args.scale == "full" else 8
    results = run_gradcheck(seed=args.seed or 0, max_coords=max_coords,
                            corrupt=1e-3 if args.corrupt else 0.0)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name:24s} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e}")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lact", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lact {__version__}")
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic longitudinal cases")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, required=True)
    g.add_argument("--t", type=int, help="time points per case (>= 2)")
    g.add_argument("--seed", type=int)
    g.add_argument("--shape", type=_triple)
    g.add_argument("--split", type=_triple, help="TRAIN,VAL,TEST case counts")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on the training split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--aggregation", choices=("convgru", "concat"))
    t.add_argument("--t", type=int, help="use the T most recent time points")
    t.add_argument("--levels", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--crop", type=_triple)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="train state checkpoint to continue from")
    t.add_argument("--stop-epoch", type=int, help="stop early after this many epochs")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="tiled inference with overlap averaging")
    i.add_argument("--checkpoint", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--case", help="single case directory; --out is the output file")
    src.add_argument("--data", help="dataset directory; --out is an output directory")
    i.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    i.add_argument("--out", required=True)
    i.add_argument("--tile", type=_triple)
    i.add_argument("--stride", type=_triple)
    i.add_argument("--workers", type=int)
    i.add_argument("--t", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="lesion-wise metrics of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--threshold", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all components")
    c.add_argument("--scale", choices=("full", "quick"), default="full")
    c.add_argument("--seed", type=int)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"lact: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"lact: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, LactError, TypeError) as exc:
        print(f"lact: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
