"""``pcenhance`` command line.

Every subcommand accepts ``--config FILE``; see :mod:`pcenhance.harness.config`.
CSV outputs:

* ``eval``: ``d1,d2,y,u,v,yuv``
* ``bd``: ``metric,bd_rate_percent,bd_quality_db``
* ``pipeline`` / ``enhance``: one row per frame, see ``RECORD_FIELDS``
* ``recolor --correlation-csv``: ``delta_geo,delta_att``
* ``degrade``: ``frame,n_points,bits,bpip``
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

from .. import metrics
from ..color import frame_to_rgb, frame_to_yuv
from ..dae import DaeConfig, dae_forward, load_dae, save_dae, train_dae
from ..dge import DgeConfig, dge_forward, load_dge, save_dge, train_dge
from ..errors import PcEnhanceError
from ..ply import read_ply, write_ply
from ..recolor import correlation_analysis, da_knn_recolor
from ..runtime import ENV_VAR
from ..training import SCHEDULES, TrainConfig
from .codec import MODES, PRESETS, DegradationConfig, degrade
from .config import apply_section, read_config
from .pipeline import (RECORD_FIELDS, PipelineConfig, dae_training_samples,
                       dge_training_samples, run_pipeline)
from .synthetic import KINDS, SequenceDataset, make_synthetic_sequence

log = logging.getLogger("pcenhance")

EVAL_HEADER = ("d1", "d2", "y", "u", "v", "yuv")
BD_METRICS = {"d1": "d1_enhanced", "y": "y_psnr", "yuv": "yuv_psnr"}


# ---------------------------------------------------------------- helpers

def _sequence(args) -> SequenceDataset:
    """Sequence from ``--seq DIR`` (sorted *.ply) or a synthetic generator."""
    if getattr(args, "seq", None):
        paths = sorted(glob.glob(os.path.join(args.seq, "*.ply")))
        if not paths:
            raise SystemExit(f"no .ply files in {args.seq}")
        return SequenceDataset(paths, args.bit_depth, window=args.window, name=os.path.basename(args.seq))
    return make_synthetic_sequence(args.kind, args.frames, args.bit_depth, args.synthetic_seed)


def _training_sequences(args) -> list:
    if args.seq_dirs:
        out = []
        for d in args.seq_dirs:
            paths = sorted(glob.glob(os.path.join(d, "*.ply")))
            if not paths:
                raise SystemExit(f"no .ply files in {d}")
            out.append(SequenceDataset(paths, args.bit_depth, window=args.window, name=d))
        return out
    return [make_synthetic_sequence(args.kind, args.frames, args.bit_depth, args.synthetic_seed + k)
            for k in range(args.synthetic_count)]


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, seed=args.seed, schedule=args.schedule)


def _degradation(args) -> DegradationConfig:
    if getattr(args, "preset", None):
        base = PRESETS[args.preset]
        return DegradationConfig(base.geometry_downscale, base.attribute_qstep, args.mode, args.codec_cmd)
    return DegradationConfig(args.downscale, args.qstep, args.mode, args.codec_cmd)


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _echo_config(csv_path, run):
    if csv_path:
        with open(csv_path + ".config.json", "w") as fh:
            json.dump({"config": run.config, "checkpoints": run.checkpoints}, fh, indent=2, default=str)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    seq = make_synthetic_sequence(args.kind, args.frames, args.bit_depth, args.seed, args.out_dir,
                                  drift=args.drift)
    for p in seq.paths:
        print(p)


def cmd_degrade(args):
    cfg = _degradation(args)
    rows = []
    for i, path in enumerate(args.input):
        frame = read_ply(path, args.bit_depth, i)
        decoded, bits = degrade(frame, cfg)
        out = os.path.join(args.out_dir, os.path.basename(path))
        os.makedirs(args.out_dir, exist_ok=True)
        write_ply(out, decoded)
        rows.append([path, len(frame), bits, metrics.bpip(bits / 8.0, len(frame))])
    _write_rows(args.csv, ("frame", "n_points", "bits", "bpip"), rows)


def cmd_train_dge(args):
    seqs = _training_sequences(args)
    samples = [s for seq in seqs for s in dge_training_samples(seq, args.downscale)]
    cfg = DgeConfig.toy(seed=args.seed) if args.toy else DgeConfig(seed=args.seed)
    model, history = train_dge(samples, cfg, _train_config(args))
    save_dge(args.out, model, {"history": history})
    print(f"trained on {len(samples)} samples, final loss {history[-1]:.6f} -> {args.out}")


def cmd_train_dae(args):
    seqs = _training_sequences(args)
    dge = load_dge(args.dge) if args.dge else None
    samples = [s for seq in seqs
               for s in dae_training_samples(seq, dge, args.downscale, args.qstep, args.q)]
    cfg = DaeConfig.toy(seed=args.seed) if args.toy else DaeConfig(seed=args.seed)
    model, history = train_dae(samples, cfg, _train_config(args))
    save_dae(args.out, model, {"history": history})
    print(f"trained on {len(samples)} samples, final loss {history[-1]:.6f} -> {args.out}")


def _pipeline_config(args, keep_frames=False) -> PipelineConfig:
    return PipelineConfig(_degradation(args), args.q, use_dge=not args.no_dge, use_dae=not args.no_dae,
                          prev_source=args.prev_source, keep_frames=keep_frames)


def cmd_pipeline(args):
    seq = _sequence(args)
    run = run_pipeline(seq, args.dge, args.dae, _pipeline_config(args))
    _write_rows(args.csv, RECORD_FIELDS, [r.row() for r in run.records])
    _echo_config(args.csv, run)


def cmd_enhance(args):
    seq = _sequence(args)
    run = run_pipeline(seq, args.dge, args.dae, _pipeline_config(args, keep_frames=True))
    os.makedirs(args.out_dir, exist_ok=True)
    for f in run.frames:
        write_ply(os.path.join(args.out_dir, f"frame_{f.frame_index:04d}.ply"), frame_to_rgb(f))
    _write_rows(args.csv, RECORD_FIELDS, [r.row() for r in run.records])
    _echo_config(args.csv, run)


def cmd_eval(args):
    ref = read_ply(args.ref, args.bitdepth)
    test = read_ply(args.test, args.bitdepth)
    d1 = metrics.d1_psnr(ref, test, args.bitdepth).symmetric
    d2 = metrics.d2_psnr(ref, test, args.bitdepth).symmetric
    y = u = v = yuv = float("nan")
    if args.attrs:
        a = metrics.yuv_psnr(ref, test)
        y, u, v, yuv = a.y, a.u, a.v, a.combined
    _write_rows(args.out, EVAL_HEADER, [[d1, d2, y, u, v, yuv]])


def _rd_curve(path, column) -> metrics.RdCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "bpip" not in rows[0] or column not in rows[0]:
        raise SystemExit(f"{path} needs 'bpip' and '{column}' columns")
    pts = sorted((float(r["bpip"]), float(r[column])) for r in rows)
    return metrics.RdCurve(pts)


def cmd_bd(args):
    column = args.metric if args.column is None else args.column
    anchor, test = _rd_curve(args.anchor, column), _rd_curve(args.test, column)
    _write_rows(args.out, ("metric", "bd_rate_percent", "bd_quality_db"),
                [[args.metric, metrics.bd_rate(anchor, test), metrics.bd_quality(anchor, test)]])


def cmd_recolor(args):
    geom = read_ply(args.geom, args.bit_depth)
    source = read_ply(args.source, args.bit_depth)
    out = da_knn_recolor(geom.with_attrs(None), source, args.q)
    write_ply(args.out, out)
    if args.correlation_csv:
        compared = out if args.compare is None else read_ply(args.compare, args.bit_depth)
        res = correlation_analysis(source, compared)
        res.write_csv(args.correlation_csv)
        print(f"slope {res.slope:.6g} pearson {res.pearson_r:.6g}")


def cmd_dge_enhance(args):
    model = load_dge(args.ckpt)
    prev = read_ply(args.prev, args.bit_depth)
    curr = read_ply(args.curr, args.bit_depth, 1)
    counts = None
    if args.stride > 2:
        if not args.counts:
            raise SystemExit("--stride above 2 needs --counts (one per finer stride, coarse to fine)")
        strides = [args.stride >> (k + 1) for k in range(len(args.counts))]
        counts = dict(zip(strides, args.counts))
        counts[1] = args.n_points
    out = dge_forward(model, prev, curr, args.n_points, args.stride, counts)
    write_ply(args.out, out)


def cmd_dae_enhance(args):
    model = load_dae(args.ckpt)
    prev = frame_to_yuv(read_ply(args.prev, args.bit_depth))
    curr = frame_to_yuv(read_ply(args.curr, args.bit_depth, 1))
    write_ply(args.out, frame_to_rgb(dae_forward(model, curr, prev)))


# ---------------------------------------------------------------- parser

def _add_sequence_args(p):
    p.add_argument("--seq", help="directory of frame PLYs in temporal (lexical) order")
    p.add_argument("--kind", choices=KINDS, default="moving-cube", help="synthetic kind when --seq is absent")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, default=6)
    p.add_argument("--window", type=int, default=32)


def _add_codec_args(p, qstep=16.0, downscale=2):
    p.add_argument("--downscale", type=int, default=downscale, help="geometry downscale factor")
    p.add_argument("--qstep", type=float, default=qstep, help="attribute quantization step (8-bit units)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="overrides --downscale/--qstep")
    p.add_argument("--mode", choices=MODES, default="stand-in")
    p.add_argument("--codec-cmd", help="external codec template with {input} and {output}")


def _add_train_args(p, lr, batch_size):
    p.add_argument("--seq-dirs", nargs="+", help="training sequences as PLY directories")
    p.add_argument("--kind", choices=KINDS, default="moving-cube")
    p.add_argument("--synthetic-count", type=int, default=4)
    p.add_argument("--synthetic-seed", type=int, default=100)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--bit-depth", type=int, default=6)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=batch_size, help="samples per optimiser step")
    p.add_argument("--schedule", choices=SCHEDULES, default="constant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", dest="toy", action="store_false",
                   help="full-width network instead of toy widths")
    p.add_argument("--out", required=True, help="checkpoint path")


def _add_pipeline_args(p):
    _add_sequence_args(p)
    _add_codec_args(p)
    p.add_argument("--dge", help="DGE checkpoint")
    p.add_argument("--dae", help="DAE checkpoint")
    p.add_argument("--no-dge", action="store_true", help="recolor onto the decoded geometry")
    p.add_argument("--no-dae", action="store_true")
    p.add_argument("--q", type=int, default=8, help="recoloring neighbour count")
    p.add_argument("--prev-source", choices=("decoded", "enhanced"), default="decoded")
    p.add_argument("--csv", help="per-frame CSV (stdout when absent)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a section per subcommand")
    common.add_argument("--deterministic", choices=("on", "off"),
                        help=f"force deterministic mode on or off (sets {ENV_VAR})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcenhance", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def add(sub_, name, func, section=None, **kw):
        p = sub_.add_parser(name, parents=[common], **kw)
        p.set_defaults(func=func, section=section or name)
        registry[section or name] = registry.get(section or name, []) + [p]
        return p

    p = add(sub, "synth", cmd_synth, help="write a synthetic sequence as PLY files")
    p.add_argument("--kind", choices=KINDS, default="moving-cube")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--bit-depth", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drift", type=float, default=4.0, help="per-frame brightness change")
    p.add_argument("--out-dir", required=True)

    p = add(sub, "degrade", cmd_degrade, help="run frames through the codec stand-in")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bit-depth", type=int, default=10)
    p.add_argument("--csv")
    _add_codec_args(p, qstep=1.0, downscale=1)

    p = add(sub, "train-dge", cmd_train_dge, help="train the geometry network")
    _add_train_args(p, lr=0.004, batch_size=1)
    p.add_argument("--downscale", type=int, default=2)

    p = add(sub, "train-dae", cmd_train_dae, help="train the attribute network")
    _add_train_args(p, lr=1e-3, batch_size=3)
    p.add_argument("--downscale", type=int, default=2)
    p.add_argument("--qstep", type=float, default=16.0)
    p.add_argument("--q", type=int, default=8)
    p.add_argument("--dge", help="DGE checkpoint producing the training geometry")

    p = add(sub, "enhance", cmd_enhance, help="enhance a sequence and write the frames")
    _add_pipeline_args(p)
    p.add_argument("--out-dir", required=True)

    p = add(sub, "pipeline", cmd_pipeline, help="full degrade/enhance/measure loop")
    _add_pipeline_args(p)

    p = add(sub, "eval", cmd_eval, help="geometry and attribute PSNR of one frame pair")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--bitdepth", type=int, default=10)
    p.add_argument("--attrs", action="store_true")
    p.add_argument("--out")

    p = add(sub, "bd", cmd_bd, help="Bjontegaard deltas between two R-D CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", choices=sorted(BD_METRICS), default="d1")
    p.add_argument("--column", help="quality column name (default: the metric name)")
    p.add_argument("--out")

    p = add(sub, "recolor", cmd_recolor, help="nearest-neighbour recoloring")
    p.add_argument("--geom", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--q", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--bit-depth", type=int, default=10)
    p.add_argument("--correlation-csv", help="write delta_geo,delta_att pairs")
    p.add_argument("--compare", help="colored frame to correlate against the source (default: the output)")

    dge_p = sub.add_parser("dge", help="geometry network tools")
    dge_sub = dge_p.add_subparsers(dest="dge_command", required=True)
    p = add(dge_sub, "enhance", cmd_dge_enhance, section="dge-enhance")
    p.add_argument("--prev", required=True)
    p.add_argument("--curr", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n-points", type=int, required=True)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--counts", type=int, nargs="+", help="voxel counts at intermediate strides")
    p.add_argument("--bit-depth", type=int, default=10)
    p.add_argument("--out", required=True)
    p = add(dge_sub, "train", cmd_train_dge, section="train-dge")
    _add_train_args(p, lr=0.004, batch_size=1)
    p.add_argument("--downscale", type=int, default=2)

    dae_p = sub.add_parser("dae", help="attribute network tools")
    dae_sub = dae_p.add_subparsers(dest="dae_command", required=True)
    p = add(dae_sub, "enhance", cmd_dae_enhance, section="dae-enhance")
    p.add_argument("--prev", required=True)
    p.add_argument("--curr", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bit-depth", type=int, default=10)
    p.add_argument("--out", required=True)
    p = add(dae_sub, "train", cmd_train_dae, section="train-dae")
    _add_train_args(p, lr=1e-3, batch_size=3)
    p.add_argument("--downscale", type=int, default=2)
    p.add_argument("--qstep", type=float, default=16.0)
    p.add_argument("--q", type=int, default=8)
    p.add_argument("--dge", help="DGE checkpoint producing the training geometry")

    parser._registry = registry
    return parser


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    cfg_path = _config_path(argv)
    if cfg_path:
        cfg = read_config(cfg_path)
        for name in cfg.sections():
            if name not in parser._registry:
                parser.error(f"config section [{name}] matches no subcommand")
            for sp in parser._registry[name]:
                try:
                    apply_section(sp, cfg[name])
                except ValueError as exc:
                    parser.error(str(exc))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.deterministic:
        os.environ[ENV_VAR] = "1" if args.deterministic == "on" else "0"
    try:
        args.func(args)
    except (PcEnhanceError, OSError) as exc:
        print(f"pcenhance: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
