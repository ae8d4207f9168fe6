"""Command-line entry point: ``inif {phantom,compress,decompress,inspect,bench}``.

Exit status is 0 on success, 1 for usage errors, 2 for data errors and 3
when training diverges. Errors print one ``[module.operation] message`` line
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import optim
from .codec import decode_volume
from .errors import DataError, DivergenceError, InifError
from .fileformat import (
    ChunkedFile,
    InifFile,
    decode,
    decode_chunked,
    decode_mask,
    decode_mask_chunked,
    is_manifest,
    load_inif,
)
from .guidance import SoftSegConfig, quality_report
from .pipeline import CompressionJob, GuidanceSpec, PriorSpec, compress
from .rate import normalize_with, rate_control_encode
from .siren import param_count
from .volume import (
    DTYPE_NAMES,
    PHANTOM_KINDS,
    NormalizationParams,
    RoiSpec,
    Volume,
    generate_phantom,
    load_ndv,
    save_ndv,
)

_MODULE = "cli"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

BENCH_METHODS = ("inif", "inif+prior", "codec-only")
BENCH_RATIOS = (128, 256, 512)
CSV_HEADER = ("method", "ratio_target", "ratio_achieved", "psnr_db", "ssim", "iou", "train_s", "decode_s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this CLI reserves 2 for data errors
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    if not dims or any(d < 1 for d in dims) or len(dims) > 5:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return dims


def _ratios(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from None


def parse_roi(text: str | None):
    """``"t0:t1,c0:c1,z0:z1,y0:y1,x0:x1"`` with ``-`` meaning the whole axis."""
    if text is None:
        return (None,) * 5
    fields = text.split(",")
    if len(fields) != 5:
        raise DataError(f"bad roi syntax {text!r}: need 5 comma-separated ranges", "parse_roi", _MODULE)
    out = []
    for f in fields:
        f = f.strip()
        if f == "-":
            out.append(None)
            continue
        lo, sep, hi = f.partition(":")
        try:
            if not sep:
                z = int(lo)
                out.append((z, z + 1))
            else:
                out.append((int(lo), int(hi)))
        except ValueError:
            raise DataError(f"bad roi syntax {text!r}: range {f!r}", "parse_roi", _MODULE) from None
    return tuple(out)


def parse_stride(text: str | None):
    if text is None:
        return (1,) * 5
    try:
        strides = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise DataError(f"bad stride syntax {text!r}", "parse_stride", _MODULE) from None
    if len(strides) != 5 or any(s < 1 for s in strides):
        raise DataError(f"bad stride syntax {text!r}: need 5 positive integers", "parse_stride", _MODULE)
    return strides


def _echo(args, keys) -> str:
    return " ".join(f"{k}={getattr(args, k)}" for k in keys)


# ---------------------------------------------------------------- phantom


def cmd_phantom(args, out) -> int:
    v = generate_phantom(args.kind, args.shape, seed=args.seed, dtype=args.dtype)
    save_ndv(v, args.output)
    print(f"wrote {args.output} shape={v.shape} dtype={v.dtype.name} bytes={v.nbytes}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- compress

_COMPRESS_ECHO = (
    "ratio",
    "steps",
    "optimizer",
    "seed",
    "guidance",
    "seg_weight",
    "perc_weight",
    "prior",
    "prior_split",
    "chunk_mem_bytes",
    "batch",
)


def job_from_args(args) -> CompressionJob:
    volume = load_ndv(args.input)
    guidance = ()
    if args.guidance == "seg":
        guidance = (GuidanceSpec("seg", args.seg_weight),)
    elif args.guidance == "perceptual":
        ref = load_ndv(args.reference) if args.reference else volume
        guidance = (GuidanceSpec("perceptual", args.perc_weight, reference=ref),)
    prior = PriorSpec(split=args.prior_split) if args.prior == "codec" else None
    return CompressionJob(
        volume,
        args.ratio,
        steps=args.steps,
        optimizer=args.optimizer,
        guidance=guidance,
        prior=prior,
        batch_size=args.batch,
        seed=args.seed,
        chunk_mem_bytes=args.chunk_mem_bytes,
        learned_weights=args.learned_weights,
        comment=_echo(args, _COMPRESS_ECHO),
    )


def cmd_compress(args, out) -> int:
    job = job_from_args(args)
    result = compress(job, stem=Path(args.output).stem)
    written = result.file.save(args.output)
    logs = result.log if isinstance(result.log, list) else [result.log]
    if any(lg.provenance == "fallback" for lg in logs):
        print("note: learned optimizer running on seeded fallback weights (no weight bundle found)", file=out)
    if isinstance(written, list):
        print(f"wrote manifest {args.output} and {len(written) - 1} parts", file=out)
    print(f"stored_bytes={result.stored_bytes} raw_bytes={result.raw_bytes} ratio={result.ratio:.4f}", file=out)
    for k, lg in enumerate(logs):
        tag = f"part{k:03d} " if len(logs) > 1 else ""
        if lg.total:
            print(f"{tag}final_loss={lg.total[-1]:.6g}", file=out)
        if lg.report is not None:
            print(tag + " ".join(lg.report.lines()), file=out)
    return EXIT_OK


# ---------------------------------------------------------------- decompress


def load_any(path):
    return ChunkedFile.load(path) if is_manifest(path) else load_inif(path)


def cmd_decompress(args, out) -> int:
    f = load_any(args.input)
    if args.mask:
        if args.roi or args.stride:
            raise DataError("--mask cannot be combined with --roi/--stride", "decompress", _MODULE)
        mask = load_ndv(args.mask)
        values, index = decode_mask_chunked(f, mask) if isinstance(f, ChunkedFile) else decode_mask(f, mask)
        if len(values) == 0:
            raise DataError("mask selects no voxels", "decompress", _MODULE)
        save_ndv(Volume(values.reshape(1, 1, 1, 1, -1)), args.output)
        idx_path = Path(str(args.output) + ".idx")
        np.savetxt(idx_path, index, fmt="%d", delimiter=",", header="t,c,z,y,x", comments="")
        print(f"wrote {args.output} values={len(values)} index={idx_path}", file=out)
        return EXIT_OK
    roi = RoiSpec.box(parse_roi(args.roi), parse_stride(args.stride))
    v = decode_chunked(f, roi) if isinstance(f, ChunkedFile) else decode(f, roi)
    save_ndv(v, args.output)
    print(f"wrote {args.output} shape={v.shape} dtype={v.dtype.name}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- inspect


def _describe(f: InifFile, out, indent=""):
    h = f.header
    a = h.arch
    print(f"{indent}version={h.version} dtype={h.dtype.name} shape={','.join(map(str, h.shape))}", file=out)
    print(f"{indent}y_min={list(h.y_min)} y_max={list(h.y_max)}", file=out)
    print(f"{indent}depth={a.depth} hidden={a.hidden} in_dim={a.in_dim} out_dim={a.out_dim}", file=out)
    print(f"{indent}omega0={list(a.omega0)}", file=out)
    print(f"{indent}optimizer={h.optimizer} steps={h.steps} seed={h.seed}", file=out)
    print(f"{indent}param_count={param_count(a)}", file=out)
    if h.has_prior:
        bs = f.bitstream
        print(
            f"{indent}prior=codec bytes={len(h.prior)} block={bs.config.block} qp={bs.config.qp} "
            f"residual_range={list(h.residual_range)}",
            file=out,
        )
    else:
        print(f"{indent}prior=none", file=out)
    print(f"{indent}comment={h.comment}", file=out)


def cmd_inspect(args, out) -> int:
    f = load_any(args.input)
    if isinstance(f, ChunkedFile):
        m = f.manifest
        print(f"manifest raw_bytes={m.raw_bytes} ratio_target={m.ratio:g} parts={len(m.entries)}", file=out)
        for e, p in zip(m.entries, f.parts):
            print(f"part={e.part} z0={e.z0} z1={e.z1} bytes={p.nbytes}", file=out)
            _describe(p, out, indent="  ")
        print(f"stored_bytes={f.nbytes} ratio={m.raw_bytes / f.nbytes:.4f}", file=out)
        return EXIT_OK
    _describe(f, out)
    raw = int(np.prod(f.header.shape)) * f.header.dtype.itemsize
    print(f"stored_bytes={f.nbytes} raw_bytes={raw} ratio={raw / f.nbytes:.4f}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- bench


@dataclass
class BenchRow:
    method: str
    ratio_target: float
    ratio_achieved: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    iou: float | None = None
    train_s: float | None = None
    decode_s: float | None = None
    failure: str | None = None

    def cells(self, times: bool = True) -> list[str]:
        head = [self.method, f"{self.ratio_target:g}"]
        if self.failure is not None:
            return head + ["failed"] * 6
        psnr = "inf" if math.isinf(self.psnr_db) else f"{self.psnr_db:.4f}"
        iou = "" if self.iou is None else f"{self.iou:.6f}"
        t = [f"{self.train_s:.3f}", f"{self.decode_s:.3f}"] if times else ["", ""]
        return head + [f"{self.ratio_achieved:.4f}", psnr, f"{self.ssim:.6f}", iou] + t


def _score(volume: Volume, decoded: Volume):
    params = NormalizationParams.of(volume)
    rep = quality_report(
        normalize_with(decoded.data, params), normalize_with(volume.data, params), seg=SoftSegConfig()
    )
    return rep.psnr, rep.ssim, rep.iou


def bench_row(method: str, volume: Volume, ratio: float, steps: int, seed: int, batch=None) -> BenchRow:
    raw = volume.nbytes
    t0 = time.perf_counter()
    if method == "codec-only":
        rc = rate_control_encode(volume, math.floor(raw / ratio))
        stored = rc.stream.nbytes
        t1 = time.perf_counter()
        decoded = decode_volume(rc.stream)
    else:
        prior = PriorSpec() if method == "inif+prior" else None
        job = CompressionJob(volume, ratio, steps=steps, prior=prior, seed=seed, batch_size=batch)
        result = compress(job)
        stored = result.stored_bytes
        t1 = time.perf_counter()
        decoded = decode(result.file)
    t2 = time.perf_counter()
    psnr, ssim, iou = _score(volume, decoded)
    return BenchRow(method, ratio, raw / stored, psnr, ssim, iou, t1 - t0, t2 - t1)


def run_bench(volume: Volume, ratios, steps: int, seed: int, methods=BENCH_METHODS, batch=None):
    rows = []
    for ratio in ratios:
        for method in methods:
            try:
                rows.append(bench_row(method, volume, ratio, steps, seed, batch))
            except InifError as exc:
                rows.append(BenchRow(method, ratio, failure=exc.diagnostic()))
    return rows


def bench_csv(rows, times: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.cells(times))
    return buf.getvalue()


def bench_table(rows, times: bool = True) -> str:
    cells = [list(CSV_HEADER)] + [r.cells(times) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(CSV_HEADER))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines += [f"{r.method} @ {r.ratio_target:g}: {r.failure}" for r in rows if r.failure]
    return "\n".join(lines) + "\n"


def cmd_bench(args, out) -> int:
    if args.input:
        volume = load_ndv(args.input)
    else:
        volume = generate_phantom(args.kind, args.shape, seed=args.seed, dtype=args.dtype)
    rows = run_bench(volume, args.ratios, args.steps, args.seed, args.methods, args.batch)
    text = bench_csv(rows, not args.no_times)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    out.write(bench_table(rows, not args.no_times))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inif", description="Compress volumes into coordinate-network files and decode them.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="write a synthetic NDV volume")
    ph.add_argument("--kind", choices=PHANTOM_KINDS, default="gaussian_blobs")
    ph.add_argument("--shape", type=_shape, default=(1, 1, 16, 64, 64))
    ph.add_argument("--dtype", choices=tuple(DTYPE_NAMES), default="u16")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--output", required=True)
    ph.set_defaults(func=cmd_phantom)

    c = sub.add_parser("compress", help="fit a network to an NDV volume")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--ratio", type=float, required=True)
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--optimizer", choices=(optim.ADAM, optim.LEARNED), default=optim.ADAM)
    c.add_argument("--learned-weights", default=None, help="weight bundle for the learned optimizer")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--guidance", choices=("none", "seg", "perceptual"), default="none")
    c.add_argument("--seg-weight", type=float, default=1.0)
    c.add_argument("--perc-weight", type=float, default=0.1)
    c.add_argument("--reference", default=None, help="clean NDV reference for perceptual guidance")
    c.add_argument("--prior", choices=("none", "codec"), default="none")
    c.add_argument("--prior-split", type=float, default=0.9)
    c.add_argument("--chunk-mem-bytes", type=int, default=None)
    c.add_argument("--batch", type=int, default=None)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a file, a box ROI or a mask")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--roi", default=None, help='"t0:t1,c0:c1,z0:z1,y0:y1,x0:x1", "-" for a whole axis')
    d.add_argument("--stride", default=None, help='"1,1,1,4,4"')
    d.add_argument("--mask", default=None, help="NDV mask of the stored shape")
    d.set_defaults(func=cmd_decompress)

    i = sub.add_parser("inspect", help="print header fields")
    i.add_argument("--input", required=True)
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="compare inif, inif+prior and codec-only")
    b.add_argument("--input", default=None)
    b.add_argument("--kind", choices=PHANTOM_KINDS, default="gaussian_blobs")
    b.add_argument("--shape", type=_shape, default=(1, 1, 32, 128, 128))
    b.add_argument("--dtype", choices=tuple(DTYPE_NAMES), default="u16")
    b.add_argument("--ratios", type=_ratios, default=BENCH_RATIOS)
    b.add_argument("--methods", type=lambda s: tuple(s.split(",")), default=BENCH_METHODS)
    b.add_argument("--steps", type=int, default=300)
    b.add_argument("--batch", type=int, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv", default=None)
    b.add_argument("--no-times", action="store_true", help="leave time columns empty for reproducible CSVs")
    b.set_defaults(func=cmd_bench)
    return p


def _attach_values(argv):
    # ROI values may start with the "-" shorthand, which argparse would read as a flag
    argv = list(sys.argv[1:] if argv is None else argv)
    out, k = [], 0
    while k < len(argv):
        if argv[k] in ("--roi", "--stride") and k + 1 < len(argv):
            out.append(f"{argv[k]}={argv[k + 1]}")
            k += 2
        else:
            out.append(argv[k])
            k += 1
    return out


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        args = parser.parse_args(_attach_values(argv))
        if args.command == "bench" and any(m not in BENCH_METHODS for m in args.methods):
            parser.error(f"unknown bench method in {args.methods}; choose from {BENCH_METHODS}")
        return args.func(args, out)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(exc.diagnostic(), file=err)
        return EXIT_DIVERGED
    except InifError as exc:
        print(exc.diagnostic(), file=err)
        return EXIT_DATA
    except OSError as exc:
        print(f"[{_MODULE}.io] {exc}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
