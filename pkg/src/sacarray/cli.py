"""Command-line entry point: pack, compile, simulate, compare, synth.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 comparison
mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ir, oracle, scheduler, sim, tensorio, zoo
from .fixedpoint import AccumulatorOverflow
from .packer import MalformedCellError, pack_model_bytes
from .sim.array import PayloadMismatch

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("sacarray")

VALIDATION_ERRORS = (
    ir.ManifestError,
    ir.FoldRangeError,
    MalformedCellError,
    scheduler.EncodingError,
    tensorio.TensorFormatError,
    PayloadMismatch,
    AccumulatorOverflow,
    ValueError,
    OverflowError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_bytes()


def _emit(report: dict, args, human_lines=None):
    if args.human and human_lines is not None:
        text = "\n".join(human_lines) + "\n"
    else:
        text = json.dumps(report, indent=2) + "\n"
    report_path = getattr(args, "report", None)
    if report_path:
        Path(report_path).write_text(text)
    else:
        sys.stdout.write(text)


def _table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join("{:>%d}" % w for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*(str(x) for x in r)) for r in rows]
    return lines


def _layer_names(manifest):
    return [f"layers[{i}]" for i in range(len(manifest.layers))] + ["fc"]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_pack(args) -> int:
    manifest = ir.load_manifest(_read(args.manifest))
    packed = scheduler.pack_manifest(manifest)
    Path(args.out).write_bytes(pack_model_bytes(packed))
    layers = []
    for name, spec, p in zip(_layer_names(manifest), manifest.all_layers(), packed):
        layers.append(
            {
                "layer": name,
                "rows": p.rows,
                "cols": p.cols,
                "group_size": p.group_size,
                "nonzero_in": spec.nonzeros,
                "kept": spec.nonzeros - p.dropped,
                "dropped": p.dropped,
            }
        )
    dropped = sum(p.dropped for p in packed)
    report = {"out": str(args.out), "dropped_total": dropped, "layers": layers}
    rows = [[l["layer"], l["rows"], l["cols"], l["group_size"], l["kept"], l["dropped"]] for l in layers]
    _emit(report, args, _table(["layer", "rows", "cols", "g", "kept", "dropped"], rows))
    if dropped:
        log.warning("column combining dropped %d nonzero weight(s)", dropped)
        return EXIT_INVALID
    return EXIT_OK


def cmd_compile(args) -> int:
    manifest = ir.load_manifest(_read(args.manifest))
    compiled = scheduler.compile_model(manifest, args.array)
    Path(args.out).write_bytes(compiled.to_bytes())
    layers = []
    for name, plan, (h, w) in zip(_layer_names(manifest), compiled.plans, manifest.layer_input_dims()):
        layers.append(
            {
                "layer": name,
                "vertical_tiles": len(plan.vertical),
                "horizontal_tiles": len(plan.horizontal),
                "instructions": 2 * plan.count,
                "input": [h, w],
            }
        )
    report = {
        "out": str(args.out),
        "array": str(args.array),
        "instructions": len(compiled.instructions),
        "dropped_total": sum(compiled.dropped),
        "layers": layers,
    }
    rows = [[l["layer"], l["vertical_tiles"], l["horizontal_tiles"], l["instructions"]] for l in layers]
    lines = _table(["layer", "v-tiles", "h-tiles", "instr"], rows)
    lines.append(f"total instructions: {report['instructions']}")
    _emit(report, args, lines)
    return EXIT_OK


def _report_lines(d: dict):
    keys = ["prediction", "cycles", "cell_cycles_active", "cell_cycles_total", "energy_proxy", "latency_ms"]
    return [f"{k:>20}: {d[k]}" for k in keys] + [f"{'logits':>20}: {d['logits']}"]


def _simulate_one(instrs, tensor_path, args):
    image = tensorio.tensor_from_bytes(_read(tensor_path))
    rep = sim.run_program(
        instrs,
        image,
        args.array,
        clock_mhz=args.clock_mhz,
        fidelity=args.fidelity,
        zero_skip=not args.no_zero_skip,
    )
    return rep.to_dict()


def cmd_simulate(args) -> int:
    instrs = scheduler.read_stream(_read(args.stream))
    if args.batch:
        src = Path(args.batch)
        if not src.is_dir():
            raise UsageError(f"no such directory: {args.batch}")
        if not args.out:
            raise UsageError("--batch needs --out DIR")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = sorted(src.glob("*.bin"))

        def work(path):
            try:
                return path, _simulate_one(instrs, path, args), None
            except VALIDATION_ERRORS as exc:
                return path, None, str(exc)

        status = EXIT_OK
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            for path, rep, err in pool.map(work, files):
                target = out_dir / f"{path.stem}.json"
                doc = rep if err is None else {"error": err}
                target.write_text(json.dumps(doc, indent=2) + "\n")
                if err is not None:
                    log.error("%s: %s", path.name, err)
                    status = EXIT_INVALID
        summary = {"images": len(files), "out": str(out_dir)}
        sys.stdout.write(json.dumps(summary) + "\n")
        return status
    if not args.tensor:
        raise UsageError("simulate needs a TENSOR file or --batch DIR")
    d = _simulate_one(instrs, args.tensor, args)
    args.report = args.out
    _emit(d, args, _report_lines(d))
    return EXIT_OK


def _first_mismatch(sim_trace, ref_trace, names):
    for li, (a, b) in enumerate(zip(sim_trace, ref_trace)):
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if a.shape != b.shape:
            return {"layer": names[li], "reason": f"shape {a.shape} vs {b.shape}"}
        diff = np.argwhere(a != b)
        if len(diff):
            where = [int(v) for v in diff[0]]
            loc = {"layer": names[li], "channel": where[0]}
            if a.ndim == 3:
                loc.update(y=where[1], x=where[2])
            else:
                loc["position"] = where[1]
            loc.update(sim=int(a[tuple(diff[0])]), reference=int(b[tuple(diff[0])]))
            return loc
    return None


def cmd_compare(args) -> int:
    manifest = ir.load_manifest(_read(args.manifest))
    image = tensorio.tensor_from_bytes(_read(args.tensor))
    if tuple(image.shape) != manifest.input_shape:
        raise ValueError(f"tensor shape {image.shape} does not match manifest {manifest.input_shape}")
    if args.stream:
        instrs = scheduler.read_stream(_read(args.stream))
    else:
        instrs = scheduler.compile_model(manifest, args.array).instructions
    data = ir.reshape_input(image, manifest.reshape_factor)
    rep = sim.run_program(
        instrs,
        data,
        args.array,
        clock_mhz=manifest.clock_mhz,
        fidelity=args.fidelity,
        zero_skip=not args.no_zero_skip,
        trace=True,
    )
    ref_logits, ref_trace = oracle.ref_forward(manifest, image, trace=True)
    logits = np.asarray(rep.logits, dtype=np.int64)
    max_diff = int(np.max(np.abs(logits - ref_logits))) if len(logits) == len(ref_logits) else None
    mismatch = _first_mismatch(rep.trace, ref_trace, _layer_names(manifest))
    identical = mismatch is None and max_diff == 0
    report = {
        "status": "identical" if identical else "mismatch",
        "max_abs_diff": max_diff,
        "first_mismatch": mismatch,
        "reference_logits": [int(v) for v in ref_logits],
        "sim": rep.to_dict(),
    }
    lines = [f"status: {report['status']}", f"max_abs_diff: {max_diff}"]
    if mismatch:
        lines.append("first mismatch: " + ", ".join(f"{k}={v}" for k, v in mismatch.items()))
    lines.append(f"active/total: {rep.cell_cycles_active}/{rep.cell_cycles_total}")
    args.report = args.out
    _emit(report, args, lines)
    return EXIT_OK if identical else EXIT_MISMATCH


def _parse_layers(text):
    layers = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 3:
            raise UsageError(f"layer spec {item!r} must look like F:S:G")
        layers.append(tuple(int(p) for p in parts))
    return layers


def _parse_shape(text):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"shape {text!r} must look like CxHxW")
    return tuple(int(p) for p in parts)


def cmd_synth(args) -> int:
    if args.topology:
        manifest = zoo.TOPOLOGIES[args.topology](args.seed)
    else:
        manifest = oracle.gen_synthetic(
            args.seed,
            layers=_parse_layers(args.layers),
            input_shape=_parse_shape(args.input),
            reshape_factor=args.reshape,
            classes=args.classes,
            fc_g=args.fc_g,
            dense=args.dense,
            clock_mhz=args.clock_mhz,
        )
    Path(args.out).write_bytes(ir.dump_manifest(manifest))
    report = {
        "out": str(args.out),
        "seed": args.seed,
        "layers": manifest.depth,
        "nonzero_weights": sum(l.nonzeros for l in manifest.all_layers()),
    }
    if args.image:
        img = oracle.random_image(args.seed + 1, manifest.input_shape, args.zero_fraction)
        tensorio.write_tensor(args.image, img)
        report["image"] = str(args.image)
    _emit(report, args, [f"{k}: {v}" for k, v in report.items()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _array_arg(text):
    try:
        return scheduler.ArrayConfig.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sacarray", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, array=True):
        p.add_argument("--human", action="store_true", help="print tables instead of JSON")
        if array:
            p.add_argument("--array", type=_array_arg, default=scheduler.ArrayConfig(), metavar="RxC")

    p = sub.add_parser("pack", help="column-combine a manifest into packed cell bytes")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    common(p, array=False)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("compile", help="emit the instruction stream for an array size")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", help="run an instruction stream on a tensor")
    p.add_argument("stream")
    p.add_argument("tensor", nargs="?")
    p.add_argument("--batch", metavar="DIR", help="simulate every *.bin tensor in DIR")
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--clock-mhz", type=_positive_float, default=170.0)
    p.add_argument("--fidelity", choices=("bit", "word"), default="word")
    p.add_argument("--no-zero-skip", action="store_true")
    p.add_argument("--out", help="report file (directory with --batch)")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="check the simulator against the reference model")
    p.add_argument("manifest")
    p.add_argument("tensor")
    p.add_argument("--stream", help="simulate this stream instead of compiling the manifest")
    p.add_argument("--fidelity", choices=("bit", "word"), default="word")
    p.add_argument("--no-zero-skip", action="store_true")
    p.add_argument("--out", help="report file")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="generate a synthetic sparse power-of-two model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--topology", choices=sorted(zoo.TOPOLOGIES))
    p.add_argument("--layers", default="16:1:2,16:1:2", help="comma-separated F:S:G")
    p.add_argument("--input", default="3x8x8", help="CxHxW")
    p.add_argument("--reshape", type=int, choices=ir.RESHAPE_FACTORS, default=2)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--fc-g", type=int, choices=ir.GROUP_SIZES, default=1)
    p.add_argument("--dense", action="store_true", help="fill every weight (not column-combinable)")
    p.add_argument("--clock-mhz", type=_positive_float, default=170.0)
    p.add_argument("--image", help="also write a random input tensor here")
    p.add_argument("--zero-fraction", type=float, default=0.0)
    common(p, array=False)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
