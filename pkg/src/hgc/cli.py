"""Command-line entry point: simulate, train, infer, eval and benchmark."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .gnn import load_model, save_model
from .metrics import aggregate_der, speaker_count_mae
from .pipeline import METHODS, InferenceConfig, diarize, evaluate
from .train import (TrainConfig, fit_training_plda, read_train_config, train_e2e, train_gnn,
                    write_loss_csv)
from .overlap import train_overlap

log = logging.getLogger("hgc")

EMB_SUFFIX = ".emb"
RTTM_SUFFIX = ".rttm"
REGION_SUFFIX = ".ovl"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("HGC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HGC_SEED must be an integer, got {env!r}") from None


def _int_range(text: str) -> tuple[int, int]:
    """``"3"`` or ``"3:5"`` (inclusive)."""
    lo, _, hi = text.partition(":")
    try:
        lo_i, hi_i = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO:HI, got {text!r}") from None
    if lo_i < 1 or hi_i < lo_i:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    return lo_i, hi_i


def _expand(paths, suffix: str) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob(f"*{suffix}")))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    if not out:
        raise UsageError(f"no {suffix} files found in {', '.join(map(str, paths))}")
    return out


def _read_rttms(paths) -> dict:
    turns = {}
    for p in _expand(paths, RTTM_SUFFIX):
        for rec, t in dataio.read_rttm(p).items():
            turns.setdefault(rec, []).extend(t)
    return turns


def _read_regions(paths) -> list:
    regions = []
    for p in _expand(paths, REGION_SUFFIX):
        regions.extend(dataio.read_overlap_regions(p))
    return dataio.normalize_regions(regions)


def _load_sequences(paths) -> list:
    return [dataio.read_embeddings(p) for p in _expand(paths, EMB_SUFFIX)]


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_csv(rows: list[dict], path: Optional[str]):
    if not rows:
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: f"{v:.4f}" if isinstance(v, float) else v for k, v in row.items()})
    if path is None or path == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for r in range(args.recordings):
        n_spk = int(rng.integers(args.speakers[0], args.speakers[1] + 1))
        n_seg = int(rng.integers(args.segments[0], args.segments[1] + 1))
        rec_seed = seed + r
        spec = dataio.SyntheticSpec(n_spk, args.dim, n_seg, args.within, args.between,
                                    overlap_fraction=args.overlap, turn_length_mean=args.turn_length,
                                    seed=rec_seed, recording_id=f"{args.prefix}{rec_seed}")
        seq, regions = dataio.generate_synthetic(spec)
        stem = out / seq.recording_id
        dataio.write_embeddings(seq, stem.with_suffix(EMB_SUFFIX))
        dataio.write_rttm(dataio.reference_hypothesis(seq), stem.with_suffix(RTTM_SUFFIX))
        dataio.write_overlap_regions(regions, stem.with_suffix(REGION_SUFFIX))
        log.info("simulated %s: %d speakers, %d segments, %d overlap regions",
                 seq.recording_id, n_spk, n_seg, len(regions))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {"epochs": "epochs", "lr": "lr_gnn", "lr_frontend": "lr_frontend", "k": "k_train",
                "d_hidden": "d_hidden", "mlp_hidden": "mlp_hidden", "frontend_layers": "frontend_layers",
                "scorer": "scorer", "keep_intra": "keep_intra", "rotate": "rotation_augment"}


def _train_config(args, seed: int) -> TrainConfig:
    if args.stage == "e2e":
        base = TrainConfig.e2e_defaults()
    elif args.stage == "overlap":
        base = TrainConfig.overlap_defaults()
    else:
        base = TrainConfig()
    if args.config:
        base = read_train_config(args.config, base)
    updates = {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items()
               if getattr(args, flag) is not None}
    if "rotation_augment" in updates:
        updates["rotation_augment"] = bool(updates["rotation_augment"])
    if args.seed is not None or "HGC_SEED" in os.environ or not args.config:
        updates["seed"] = seed
    return replace(base, **updates)


def cmd_train(args) -> int:
    seed = _seed(args)
    config = _train_config(args, seed)
    if args.stage in ("e2e", "overlap") and not args.init:
        raise UsageError(f"--stage {args.stage} needs --init with a trained checkpoint")
    data = _load_sequences(args.embeddings)
    for seq in data:
        if not seq.is_labeled:
            raise UsageError(f"{seq.recording_id}: training needs a speaker label on every segment")
    init, plda, meta = (None, None, {})
    if args.init:
        init, plda, meta = load_model(args.init)
        if init.dim != data[0].dim:
            raise UsageError(f"embedding dimension {data[0].dim} does not match checkpoint dimension {init.dim}")
    if plda is None and config.scorer == "plda":
        plda = fit_training_plda(data)
    history = []
    if args.stage == "gnn":
        model = train_gnn(data, config, plda=plda, init=init, history=history)
    elif args.stage == "e2e":
        model = train_e2e(data, init, config, plda=plda, history=history)
    else:
        if not args.ref:
            raise UsageError("--stage overlap needs --ref reference RTTM files for second speakers")
        ref = _read_rttms(args.ref)
        missing = [s.recording_id for s in data if s.recording_id not in ref]
        if missing:
            raise UsageError(f"no reference turns for recordings: {', '.join(missing)}")
        data = [dataio.attach_secondary_labels(s, ref[s.recording_id]) for s in data]
        model = train_overlap(data, init, config, plda=plda, history=history)
    save_model(args.out, model, plda, {"stage": args.stage, "epochs": config.epochs,
                                       "scorer": config.scorer, "plda_alpha": config.plda_alpha})
    if args.loss_csv:
        write_loss_csv(history, args.loss_csv)
    log.info("wrote checkpoint %s", args.out)
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _infer_config(args, seed: int, method: Optional[str] = None, **kw) -> InferenceConfig:
    return InferenceConfig(method=method or args.method, k=args.k, tau=args.tau,
                           ahc_threshold=args.ahc_threshold, num_speakers=args.num_speakers,
                           k_prime=args.k_prime, seed=seed, **kw)


class _Job:
    """Picklable per-recording inference task for ``--jobs``."""

    def __init__(self, model_path, config, regions):
        self.model_path, self.config, self.regions = model_path, config, regions
        self._loaded = None

    def __call__(self, seq):
        if self._loaded is None:
            self._loaded = load_model(self.model_path)
        model, plda, meta = self._loaded
        if seq.dim != model.dim:
            raise UsageError(f"{seq.recording_id}: embedding dimension {seq.dim} does not match "
                             f"checkpoint dimension {model.dim}")
        if plda is None:
            raise UsageError("checkpoint carries no PLDA model")
        config = replace(self.config, plda_alpha=float(meta.get("plda_alpha", self.config.plda_alpha)))
        regions = [r for r in self.regions if r.recording_id == seq.recording_id]
        return diarize(seq, plda, config, model, regions or None)


def _run_inference(args, seqs, config, regions) -> list:
    return _map(_Job(args.model, config, regions), seqs, args.jobs)


def cmd_infer(args) -> int:
    seed = _seed(args)
    config = _infer_config(args, seed)
    seqs = _load_sequences(args.embeddings)
    regions = _read_regions(args.overlap_regions) if args.overlap_regions else []
    hyps = _run_inference(args, seqs, config, regions)
    text = "".join(dataio.format_rttm(h.recording_id, h.turns()) for h in hyps)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    for h in hyps:
        log.info("%s: %d speakers", h.recording_id, h.num_speakers)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _score(ref: dict, hyp: dict, collar: float, skip_overlap: bool) -> list:
    missing_hyp = sorted(set(ref) - set(hyp))
    missing_ref = sorted(set(hyp) - set(ref))
    if missing_hyp or missing_ref:
        parts = []
        if missing_hyp:
            parts.append(f"missing from hypothesis: {', '.join(missing_hyp)}")
        if missing_ref:
            parts.append(f"missing from reference: {', '.join(missing_ref)}")
        raise UsageError("unmatched recording ids; " + "; ".join(parts))
    return [evaluate(ref[rec], hyp[rec], rec, collar, not skip_overlap) for rec in sorted(ref)]


def _summary_row(reports, label: dict) -> dict:
    total = aggregate_der([r.result for r in reports]).as_dict()
    purity = float(np.mean([r.purity for r in reports]))
    coverage = float(np.mean([r.coverage for r in reports]))
    mae = speaker_count_mae([(r.true_speakers, r.predicted_speakers) for r in reports])
    return {**label, "der": total["der"], "fa": total["fa"], "miss": total["miss"],
            "confusion": total["confusion"], "purity": purity, "coverage": coverage, "count_mae": mae}


def _parse_sweep(tokens) -> tuple[list[int], list[float]]:
    grid = {"k": [30], "tau": [0.8]}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or key not in grid:
            raise UsageError(f"bad sweep term {tok!r}; expected k=... or tau=...")
        if ".." in val:
            lo, _, rest = val.partition("..")
            hi, _, step = rest.partition(":")
            conv = int if key == "k" else float
            lo_v, hi_v = conv(lo), conv(hi)
            step_v = conv(step) if step else (10 if key == "k" else 0.1)
            n = int(round((hi_v - lo_v) / step_v)) + 1
            grid[key] = [conv(round(lo_v + i * step_v, 10)) for i in range(n)]
        else:
            grid[key] = [int(v) if key == "k" else float(v) for v in val.split(",")]
    return grid["k"], grid["tau"]


def cmd_eval(args) -> int:
    seed = _seed(args)
    ref = _read_rttms(args.ref)
    if args.sweep:
        if not (args.embeddings and args.model):
            raise UsageError("--sweep needs --embeddings and --model")
        ks, taus = _parse_sweep(args.sweep)
        seqs = _load_sequences(args.embeddings)
        rows = []
        for k in ks:
            for tau in taus:
                config = InferenceConfig(method=args.method, k=k, tau=tau, ahc_threshold=args.ahc_threshold,
                                         seed=seed)
                hyps = _run_inference(args, seqs, config, [])
                hyp = {h.recording_id: h.turns() for h in hyps}
                reports = _score({r: ref[r] for r in hyp if r in ref}, hyp, args.collar, args.skip_overlap)
                rows.append(_summary_row(reports, {"k": k, "tau": tau}))
        _write_csv(rows, args.csv)
        return 0
    if not args.hyp:
        raise UsageError("eval needs --hyp (or --sweep)")
    reports = _score(ref, _read_rttms(args.hyp), args.collar, args.skip_overlap)
    rows = []
    for r in reports:
        row = r.row()
        if not args.purity:
            row.pop("purity")
            row.pop("coverage")
        rows.append(row)
    if args.csv:
        _write_csv(rows, args.csv)
    total = _summary_row(reports, {})
    line = "DER {der:.2f}  FA {fa:.2f}  Miss {miss:.2f}  Conf {confusion:.2f}".format(**total)
    if args.purity:
        line += "  Purity {purity:.2f}  Coverage {coverage:.2f}".format(**total)
    print(line)
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    seed = _seed(args)
    seqs = _load_sequences(args.embeddings)
    for seq in seqs:
        if not seq.is_labeled:
            raise UsageError(f"{seq.recording_id}: benchmark needs labeled embeddings as reference")
    ref = {s.recording_id: dataio.reference_hypothesis(s).turns() for s in seqs}
    rows = []
    for method in args.methods:
        if method == "ahc" and args.ahc_threshold is None and args.num_speakers is None:
            raise UsageError("ahc needs --ahc-threshold or --num-speakers")
        hyps = _run_inference(args, seqs, _infer_config(args, seed, method), [])
        reports = _score(ref, {h.recording_id: h.turns() for h in hyps}, args.collar, args.skip_overlap)
        rows.append(_summary_row(reports, {"method": method}))
    _write_csv(rows, args.csv)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (falls back to $HGC_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_infer_flags(p, method_flag: bool = True):
    p.add_argument("--model", required=True, help="checkpoint written by `train`")
    if method_flag:
        p.add_argument("--method", choices=METHODS, default="sharc")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--ahc-threshold", type=float, default=None, help="AHC stopping score (PLDA log-likelihood ratio)")
    p.add_argument("--num-speakers", type=int, default=None, help="fixed speaker count for ahc/sc")
    p.add_argument("--k-prime", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1, help="recordings processed in parallel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgc", description="Supervised hierarchical graph clustering for diarization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic labeled recordings")
    _add_common(p)
    p.add_argument("--speakers", type=_int_range, default=(3, 3), help="N or LO:HI")
    p.add_argument("--segments", type=_int_range, default=(200, 200), help="N or LO:HI")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--within", type=float, default=0.05)
    p.add_argument("--between", type=float, default=1.0)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--turn-length", type=float, default=8.0)
    p.add_argument("--recordings", type=int, default=1)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a scorer checkpoint")
    _add_common(p)
    p.add_argument("embeddings", nargs="+", help="labeled embedding files or directories")
    p.add_argument("--stage", choices=("gnn", "e2e", "overlap"), default="gnn")
    p.add_argument("--init", help="checkpoint to start from (required for e2e and overlap)")
    p.add_argument("--config", help="key=value training config file; flags override it")
    p.add_argument("--ref", nargs="+", help="reference RTTM files (overlap stage)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="GNN learning rate")
    p.add_argument("--lr-frontend", type=float)
    p.add_argument("--k", type=int, help="k-NN size of training graphs")
    p.add_argument("--d-hidden", type=int)
    p.add_argument("--mlp-hidden", type=int)
    p.add_argument("--frontend-layers", type=int)
    p.add_argument("--keep-intra", type=float)
    p.add_argument("--scorer", choices=("plda", "cosine"))
    p.add_argument("--rotate", type=int, choices=(0, 1), help="random-rotation feature augmentation")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="cluster recordings and write RTTM")
    _add_common(p)
    p.add_argument("embeddings", nargs="+")
    _add_infer_flags(p)
    p.add_argument("--overlap-regions", nargs="+", help="overlap region files for second-speaker assignment")
    p.add_argument("--out", help="RTTM output path (default standard output)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score hypotheses against references")
    _add_common(p)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--hyp", nargs="+")
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--skip-overlap", action="store_true")
    p.add_argument("--purity", action="store_true", help="also report purity and coverage")
    p.add_argument("--csv", help="per-recording (or sweep grid) CSV; '-' for standard output")
    p.add_argument("--sweep", nargs="+", metavar="TERM", help="k=LO..HI[:STEP] and/or tau=a,b,c")
    p.add_argument("--embeddings", nargs="+", help="embeddings for --sweep")
    p.add_argument("--model", help="checkpoint for --sweep")
    p.add_argument("--method", choices=METHODS, default="sharc")
    p.add_argument("--ahc-threshold", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="compare baselines and SHARC on labeled embeddings")
    _add_common(p)
    p.add_argument("embeddings", nargs="+")
    _add_infer_flags(p, method_flag=False)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--skip-overlap", action="store_true")
    p.add_argument("--csv", help="output CSV (default standard output)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
