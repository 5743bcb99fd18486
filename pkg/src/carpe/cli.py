"""Command-line entry point: ``carpe {train,eval,bench,predict,inspect}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Iterable, TextIO

from . import tensor as tc
from .dataio import (SCENES, AnnotationError, StreamBuffer, load_split, parse_lines,
                     stream_push)
from .evalbench import (benchmark, dump_json, evaluate, host_description, linear_predictor,
                        write_metrics_csv)
from .model import (CarpeModel, TrainConfig, WeightFormatError, count_flops, count_params,
                    forward, layer_macs, load_weights, read_manifest, save_weights, train)

log = logging.getLogger("carpe")


class CliError(Exception):
    pass


def _load_model(path) -> CarpeModel:
    if path is None:
        raise CliError("--weights is required")
    try:
        return load_weights(path)
    except OSError as exc:
        raise CliError(f"cannot read weights {path}: {exc.strerror}") from None


def _all_test_samples(root, beta, T):
    samples = []
    for scene in SCENES:
        if (Path(root) / scene / "test").is_dir():
            samples += load_split(root, scene, beta, T)[1]
    return samples


def cmd_train(args) -> int:
    train_samples, _ = load_split(args.data, args.leave_out)
    log.info("training on %d frames (held out: %s)", len(train_samples), args.leave_out)
    config = TrainConfig(epochs=args.epochs, frame_batch=args.batch, lr=args.lr,
                         clip=args.clip, seed=args.seed, precision=args.precision)
    report = train(train_samples, config)
    model = report.model
    report_dict = report.to_dict()
    save_weights(model, args.out)
    report_dict.update(leave_out=args.leave_out, train_frames=len(train_samples),
                       weights=str(args.out))
    json_path = args.json or f"{args.out}.json"
    dump_json(report_dict, json_path)
    final = report_dict["epoch_losses"][-1] if report_dict["epoch_losses"] else float("nan")
    print(f"wrote {args.out} ({count_params(model)} parameters); final loss {final:.5f}; report {json_path}")
    return 0


def cmd_eval(args) -> int:
    if args.baseline is None and args.weights is None:
        raise CliError("eval needs --weights or --baseline linear")
    if args.baseline is not None:
        predictor = linear_predictor(12)
        beta, T = 8, 12
    else:
        predictor = _load_model(args.weights)
        with tc.precision(args.precision):
            predictor.astype(tc.get_dtype())
        beta, T = predictor.hyper.beta, predictor.hyper.T
    _, test = load_split(args.data, args.leave_out, beta, T)
    report = evaluate(predictor, test)
    for scene, m in sorted(report.per_scene.items()):
        print(f"{scene}: ade {m.ade:.2f} fde {m.fde:.2f} ({m.peds} peds, {m.windows} windows)")
    if args.out:
        write_metrics_csv(report, args.out)
    if args.json:
        dump_json(report.to_dict(), args.json)
    return 0


def cmd_bench(args) -> int:
    model = _load_model(args.weights)
    if args.data is None:
        raise CliError("bench needs --data for a realistic pedestrian distribution")
    beta, T = model.hyper.beta, model.hyper.T
    if args.leave_out:
        samples = load_split(args.data, args.leave_out, beta, T)[1]
    else:
        samples = _all_test_samples(args.data, beta, T)
    if not samples:
        raise CliError(f"no test windows found under {args.data}")
    with tc.precision(args.precision):
        model.astype(tc.get_dtype())
    report = benchmark(model, samples, warmup=args.warmup, runs=args.runs, device=host_description())
    s = report.summary()
    print(f"host: {s['device']}")
    print(f"runs {s['runs']}  mean {s['mean_ms']:.3f} ms  median {s['median_ms']:.3f} ms  "
          f"p99 {s['p99_ms']:.3f} ms  fps {s['fps']:.1f}  P mean {s['peds_mean']:.1f} "
          f"(min {s['peds_min']}, max {s['peds_max']})")
    if args.out:
        report.write_csv(args.out)
    if args.json:
        dump_json(s, args.json)
    return 0


def _frames(lines: Iterable[str], err: TextIO):
    """Group annotation lines into (frame_id, detections); a blank line ends a frame."""
    current, dets = None, []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            if current is not None:
                yield current, dets
                current, dets = None, []
            continue
        try:
            recs = parse_lines([line], source=f"line {lineno}")
        except AnnotationError as exc:
            print(f"warning: skipping malformed {exc}", file=err)
            continue
        if not recs:
            continue
        r = recs[0]
        if current is not None and r.frame_id != current:
            yield current, dets
            dets = []
        current = r.frame_id
        dets.append((r.ped_id, r.x, r.y))
    if current is not None:
        yield current, dets


def fmt(v) -> str:
    return repr(float(v))


def run_predict(model: CarpeModel, lines: Iterable[str], out: TextIO, err: TextIO,
                frame_step: int | None = None) -> None:
    buffer = StreamBuffer(obs_len=model.hyper.beta, frame_step=frame_step)
    for frame_id, dets in _frames(lines, err):
        if buffer.last_frame is not None and frame_id <= buffer.last_frame:
            print(f"warning: dropping out-of-order frame {frame_id} (after {buffer.last_frame})", file=err)
            continue
        seen, unique = set(), []
        for d in dets:
            if d[0] in seen:
                print(f"warning: frame {frame_id}: duplicate pedestrian {d[0]} ignored", file=err)
                continue
            seen.add(d[0])
            unique.append(d)
        for sample in stream_push(buffer, frame_id, unique):
            pred = forward(sample, model)
            for ped, traj in zip(sample.ped_ids, pred):
                out.write(f"{frame_id} {ped} " + " ".join(fmt(v) for v in traj.ravel()) + "\n")
        out.flush()


def cmd_predict(args) -> int:
    model = _load_model(args.weights)
    with tc.precision(args.precision):
        model.astype(tc.get_dtype())
    if args.input and args.input != "-":
        with open(args.input) as f:
            run_predict(model, f, sys.stdout, sys.stderr, args.frame_step)
    else:
        run_predict(model, sys.stdin, sys.stdout, sys.stderr, args.frame_step)
    return 0


def cmd_inspect(args) -> int:
    if args.weights is None:
        raise CliError("--weights is required")
    raw = Path(args.weights).read_bytes()
    fields, offset = read_manifest(raw)
    model = load_weights(args.weights)
    print("manifest:")
    print(raw[12:offset].decode().rstrip("\n"))
    print(f"parameters: {count_params(model)}")
    for p in (1, 10):
        macs = sum(layer_macs(model, p).values())
        print(f"P={p}: {macs} MACs = {count_flops(model, p) / 1e6:.4f} MFLOPs (1 MAC = 2 FLOPs)")
    print(f"{'layer':<12}{'shape':<22}{'params':>8}")
    for name, t in model.named_parameters():
        print(f"{name:<12}{'x'.join(map(str, t.shape)):<22}{t.data.size:>8}")
    if args.json:
        dump_json({"manifest": fields, "parameters": count_params(model),
                   "macs_per_frame_P1": sum(layer_macs(model, 1).values()),
                   "flops_per_frame_P1": count_flops(model, 1),
                   "layer_macs_P1": layer_macs(model, 1)}, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carpe", description="Real-time pedestrian trajectory prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--precision", choices=["f32", "f64"], default="f32")
        p.add_argument("--json", help="write a JSON summary to this path")
        p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("train", help="train on four scenes, holding one out")
    common(p)
    p.add_argument("--data", required=True, help="dataset root with <scene>/{train,val,test}")
    p.add_argument("--leave-out", required=True, choices=SCENES)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=64, help="frames per optimizer step")
    p.add_argument("--clip", type=float, default=5.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ADE/FDE on a held-out scene")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--leave-out", required=True, choices=SCENES)
    p.add_argument("--weights")
    p.add_argument("--baseline", choices=["linear"])
    p.add_argument("--out", help="per-scene CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-frame latency benchmark")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data")
    p.add_argument("--leave-out", choices=SCENES)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--out", help="per-iteration latency CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("predict", help="streaming prediction from detections")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", help="detection file (default: standard input)")
    p.add_argument("--frame-step", type=int, help="raw frame ids per step; gaps reset all tracks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="print model summary")
    common(p)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (CliError, WeightFormatError, AnnotationError, FileNotFoundError,
            ValueError, FloatingPointError, OSError) as exc:
        print(f"carpe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
