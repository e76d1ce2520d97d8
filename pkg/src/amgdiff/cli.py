"""Command-line entry point: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AmgError, ConfigError, MissingInputError

EXIT_CODES = """exit codes:
  0  success
  2  configuration / schema error (bad flag, unknown config key, unsupported version)
  3  data-format error (corrupt container, checkpoint or IMS file)
  4  numeric fault (NaN/Inf during training or generation, degenerate statistics)
  5  missing input file or directory
"""

log = logging.getLogger("amgdiff")


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")


def _float_list(s: str) -> list[float]:
    return [_parse_float(x) for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {s!r}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="master seed (PCG64 streams are derived from it)")
    p.add_argument("--config", type=Path, default=d, help="run config JSON (sections: sim, schedule, model, "
                   "train, guidance, detect, eval)")
    p.add_argument("--out", type=Path, default=d, help="primary output path of the stage")
    p.add_argument("--threads", type=int, default=d, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amgdiff",
        description="Anomaly-map guided diffusion health monitoring for vibration data.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=EXIT_CODES,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("simulate", "write the six-setting simulated bearing dataset (2010 samples) as a container")
    p.add_argument("--samples-per-setting", type=int, help="override the 400 samples of settings 1-5")

    p = add("inject-noise", "add white Gaussian noise at a given SNR")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--snr-db", type=_parse_float, required=True, help="target SNR in dB ('inf' for none)")

    p = add("train", "train the conditional denoiser on the Healthy and Anomaly samples of a container")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--uncon", type=float, help="label-dropout probability")
    p.add_argument("--T", type=int, dest="T", help="diffusion steps")
    p.add_argument("--loss-csv", type=Path, help="write the per-step loss trace (step, epoch, loss)")

    p = add("generate", "regenerate healthy counterparts of every sample in a container")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--w", type=float, help="guidance weight (default 3)")
    p.add_argument("--t-star-frac", type=float, help="fraction of T to forward-diffuse before denoising")

    p = add("anomaly-map", "locate the dominant envelope-spectrum discrepancy of the anomalies")
    p.add_argument("--anomalies", type=Path, required=True, help="container; only Anomaly-labelled rows are used")
    p.add_argument("--counterparts", type=Path, required=True)
    p.add_argument("--exclusion-floor-hz", type=float)
    p.add_argument("--tolerance-bins", type=float)
    p.add_argument("--band", type=int, help="half-width of an optional pulse band (default 0)")
    p.add_argument("--geometry", choices=["config", "rexnord"], default="config",
                   help="bearing geometry used for fault matching")

    p = add("hi", "health indicator per measured sample")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--counterparts", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)

    p = add("detect", "mu +- k sigma threshold detection on an HI series")
    p.add_argument("--hi", type=Path, required=True)
    p.add_argument("--baseline-window", type=int, help="number of leading HI values forming the baseline (M)")
    p.add_argument("--k", type=float)
    p.add_argument("--consecutive", type=int)

    p = add("evaluate", "metrics.json: AUROC/AUPRC, cosine/Pearson against ground truth, detection")
    p.add_argument("--hi", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="container carrying per-record depth_um3 (simulation)")
    p.add_argument("--label-boundary", type=int,
                   help="index of the first anomalous measured sample (required for AUROC without --truth)")
    p.add_argument("--baseline-window", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--consecutive", type=int)

    p = add("sweep-snr", "noise-robustness sweep: similarity of HI to ground truth per SNR")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--snr-list", type=_float_list, help="comma-separated dB values, e.g. inf,0,-5,-10,-20")
    p.add_argument("--seeds", type=_int_list, help="comma-separated sweep seeds")
    p.add_argument("--w", type=float)
    p.add_argument("--t-star-frac", type=float)

    p = add("ims-import", "segment raw IMS files of one bearing into a container")
    p.add_argument("--dir", type=Path, required=True)
    p.add_argument("--dataset", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--bearing", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--segment-len", type=int, default=1024)
    p.add_argument("--healthy-first", type=int, default=0, help="label the first N files Healthy")
    p.add_argument("--anomaly-last", type=int, default=0, help="label the last N files Anomaly")
    p.add_argument("--limit", type=int, help="import only the first N files")
    return parser


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--out is required for {what}")
    return path


def _exists(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"input {path} not found")
    return path


def _load_config(args):
    from .io import RunConfig

    return RunConfig.load(args.config) if args.config else RunConfig()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


# ------------------------------------------------------------------ stages

def cmd_simulate(args, cfg):
    from .bearing import generate_table2_dataset
    from .io import write_container

    sim = replace(cfg.sim, seed=_seed(args, cfg.sim.seed))
    if args.samples_per_setting:
        sim = replace(sim, samples_per_setting=args.samples_per_setting)
    samples, _ = generate_table2_dataset(sim)
    write_container(samples, _require(args.out, "simulate"))
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_inject_noise(args, cfg):
    from .io import read_container, write_container
    from .signal import inject_noise

    samples = read_container(_exists(args.input))
    noisy = inject_noise(samples, args.snr_db, _seed(args, 0))
    write_container(noisy, _require(args.out, "inject-noise"))
    print(f"wrote {len(noisy)} samples at {args.snr_db} dB to {args.out}")


def cmd_train(args, cfg):
    from .denoiser import DenoiserModel, save_checkpoint
    from .diffusion import make_schedule, train
    from .io import read_container

    out = _require(args.out, "train")
    data = read_container(_exists(args.data))
    sch_cfg = cfg.schedule if args.T is None else replace(cfg.schedule, T=args.T)
    schedule = make_schedule(sch_cfg.T, sch_cfg.beta_start, sch_cfg.beta_end, sch_cfg.kind)
    mcfg = replace(cfg.model, input_len=data.sample_length, T_max=max(cfg.model.T_max, schedule.T))
    tcfg = cfg.train
    for name in ("epochs", "lr", "batch_size", "uncon"):
        if getattr(args, name) is not None:
            tcfg = replace(tcfg, **{name: getattr(args, name)})
    seed = _seed(args, tcfg.seed)
    tcfg = replace(tcfg, seed=seed)
    model = DenoiserModel(mcfg, seed=seed)
    result = train(model, data, schedule, tcfg, progress_every=10 if args.verbose else 0)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, schedule.params(), {"train": tcfg.__dict__})
    if args.loss_csv:
        result.write_csv(args.loss_csv)
    losses = result.epoch_losses
    print(f"trained {len(result.steps)} steps; loss {losses[0]:.4f} -> {losses[-1]:.4f}" if losses else "no steps run")


def _guidance(args, cfg):
    g = cfg.guidance
    if getattr(args, "w", None) is not None:
        g = replace(g, w=args.w)
    if getattr(args, "t_star_frac", None) is not None:
        g = replace(g, t_star_frac=args.t_star_frac)
    return replace(g, seed=_seed(args, g.seed))


def cmd_generate(args, cfg):
    from .denoiser import load_checkpoint
    from .diffusion import NoiseSchedule, generate_healthy_counterpart
    from .io import read_container, write_container

    ck = load_checkpoint(_exists(args.model))
    samples = read_container(_exists(args.input))
    out = generate_healthy_counterpart(ck.model, samples, NoiseSchedule.from_params(ck.schedule_params),
                                       _guidance(args, cfg))
    write_container(out, _require(args.out, "generate"))
    print(f"wrote {len(out)} counterparts to {args.out}")


def _anomaly_rows(samples, counterparts):
    from .anomaly import _align
    from .signal import Label

    counterparts = _align(samples, counterparts)
    idx = samples.where(Label.ANOMALY)
    if len(idx) == 0 or len(idx) == len(samples):
        return samples, counterparts
    return samples.subset(idx), counterparts.subset(idx)


def cmd_anomaly_map(args, cfg):
    from .anomaly import build_anomaly_map, match_fault_type
    from .bearing import REXNORD_ZA2115
    from .io import read_container

    an, cp = _anomaly_rows(read_container(_exists(args.anomalies)), read_container(_exists(args.counterparts)))
    floor = args.exclusion_floor_hz if args.exclusion_floor_hz is not None else cfg.eval.exclusion_floor_hz
    band = args.band if args.band is not None else cfg.eval.band_halfwidth
    amap = build_anomaly_map(an, cp, floor, band)
    geometry = REXNORD_ZA2115 if args.geometry == "rexnord" else cfg.sim.geometry
    tol = args.tolerance_bins if args.tolerance_bins is not None else cfg.eval.tolerance_bins
    match = match_fault_type(amap, geometry, tol)
    out = _require(args.out, "anomaly-map")
    out.parent.mkdir(parents=True, exist_ok=True)
    amap.save(out, match)
    print(f"pulse bin {amap.pulse_index} ({amap.frequency_hz:.2f} Hz), matched {match.matched_type}")


def cmd_hi(args, cfg):
    from .anomaly import AnomalyMap, hi_series
    from .io import read_container

    hi = hi_series(read_container(_exists(args.run)), read_container(_exists(args.counterparts)),
                   AnomalyMap.load(_exists(args.map)))
    out = _require(args.out, "hi")
    out.parent.mkdir(parents=True, exist_ok=True)
    hi.save_csv(out)
    print(f"wrote HI for {len(hi)} measured samples to {out}")


def _detection(args, cfg, hi):
    from .evaluation import detect

    M = args.baseline_window if args.baseline_window is not None else cfg.detect.baseline_window
    if M is None:
        raise ConfigError("--baseline-window (or detect.baseline_window in the config) is required")
    k = args.k if args.k is not None else cfg.detect.k
    c = args.consecutive if args.consecutive is not None else cfg.detect.consecutive_required
    return detect(hi, M, k, c)


def cmd_detect(args, cfg):
    from .anomaly import HiSeries

    res = _detection(args, cfg, HiSeries.load_csv(_exists(args.hi)))
    _write_json(_require(args.out, "detect"), res.to_dict())
    print(f"first detection index: {res.first_detection_index}")


def cmd_evaluate(args, cfg):
    from .anomaly import HiSeries
    from .evaluation import MetricReport, auprc, auroc, cosine, pearson

    hi = HiSeries.load_csv(_exists(args.hi))
    metrics = {"auroc": None, "auprc": None, "cosine": None, "pearson": None}
    params: dict = {}
    if args.truth:
        from .io import read_container

        truth = read_container(_exists(args.truth))
        depth = {}
        for sid, d in zip(truth.source_ids, truth.info):
            if "depth_um3" not in d:
                raise ConfigError(f"truth container record {sid!r} has no depth_um3")
            depth[sid] = d["depth_um3"]
        missing = [s for s in hi.measured_sample_ids if s not in depth]
        if missing:
            raise ConfigError(f"no ground truth for measured sample {missing[0]!r}")
        dv = np.array([depth[s] for s in hi.measured_sample_ids])
        metrics["cosine"], metrics["pearson"] = cosine(hi.values, dv), pearson(hi.values, dv)
        labels = (dv > dv.min()).astype(int)  # any defect deeper than the healthy setting
        source = "truth: depth above healthy setting"
    else:
        boundary = args.label_boundary if args.label_boundary is not None else cfg.detect.label_boundary
        if boundary is None:
            raise ConfigError("--label-boundary is required when no --truth container is given")
        labels = (np.arange(len(hi)) >= boundary).astype(int)
        params["label_boundary"] = boundary
        source = f"label boundary at index {boundary}"
    if 0 < labels.sum() < len(labels):
        metrics["auroc"], metrics["auprc"] = auroc(hi.values, labels), auprc(hi.values, labels)
    report = MetricReport(labels_source=source, **metrics)
    out = report.to_dict()
    if args.baseline_window is not None or cfg.detect.baseline_window is not None:
        det = _detection(args, cfg, hi)
        out.update(first_detection_index=det.first_detection_index, threshold_upper=det.threshold_upper,
                   threshold_lower=det.threshold_lower)
        params.update(baseline_window=det.baseline_window, k=det.k, consecutive_required=det.consecutive_required)
    else:
        out.update(first_detection_index=None, threshold_upper=None, threshold_lower=None)
    out["params"] = params
    _write_json(_require(args.out, "evaluate"), out)
    print(json.dumps({k: out[k] for k in ("auroc", "auprc", "cosine", "pearson", "first_detection_index")}))


def cmd_sweep_snr(args, cfg):
    from .anomaly import AnomalyMap
    from .bearing import GroundTruth
    from .denoiser import load_checkpoint
    from .diffusion import NoiseSchedule
    from .evaluation import snr_sweep, write_sweep_csv
    from .io import read_container

    ck = load_checkpoint(_exists(args.model))
    data = read_container(_exists(args.data))
    amap = AnomalyMap.load(_exists(args.map))
    snrs = args.snr_list if args.snr_list else list(cfg.eval.snr_list)
    seeds = args.seeds if args.seeds else list(cfg.eval.seeds)
    out = _require(args.out, "sweep-snr")

    def progress(row):
        print(f"snr {row.snr_db:g} dB seed {row.seed}: cosine {row.cosine:.3f} pearson {row.pearson:.3f}", flush=True)

    rows = snr_sweep(ck.model, NoiseSchedule.from_params(ck.schedule_params), data, GroundTruth.from_samples(data),
                     amap, _guidance(args, cfg), snrs, seeds, noise_seed_base=1000 + _seed(args, 0),
                     progress=progress)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out)


def cmd_ims_import(args, cfg):
    from .io import ims_import, write_container
    from .signal import require_power_of_two

    require_power_of_two(args.segment_len)
    s = ims_import(args.dir, args.dataset, args.bearing, args.segment_len, args.healthy_first, args.anomaly_last,
                   args.limit)
    write_container(s, _require(args.out, "ims-import"))
    print(f"wrote {len(set(s.source_ids))} measured samples ({len(s)} segments) to {args.out}")


COMMANDS = {
    "simulate": cmd_simulate,
    "inject-noise": cmd_inject_noise,
    "train": cmd_train,
    "generate": cmd_generate,
    "anomaly-map": cmd_anomaly_map,
    "hi": cmd_hi,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "sweep-snr": cmd_sweep_snr,
    "ims-import": cmd_ims_import,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        limit = contextlib.nullcontext()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=args.threads)
        with limit:
            COMMANDS[args.command](args, cfg)
    except AmgError as exc:
        print(f"amgdiff {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"amgdiff {args.command}: error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
