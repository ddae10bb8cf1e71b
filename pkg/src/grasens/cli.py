"""Command-line surface: generate | segment | train | eval | infer | inspect-filters.

Exit codes: 0 ok, 2 usage/configuration, 3 data/parse, 4 numeric divergence.
Every failure prints a single-line diagnostic of the form
``error[<kind>]: <message>`` to stderr.

GRASENS_THREADS caps the numeric library thread pools (default 1 so runs are
deterministic); it must take effect before numpy is imported, hence the env
setup at module import time.
"""

import argparse
import json
import os
import sys

_threads = os.environ.get("GRASENS_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import numpy as np

from . import antialias, fractal, gabor, network, report
from .csi import (CsiGeometry, SegmentSpec, generate_synthetic, read_manifest,
                  read_trace, segment, write_manifest, write_trace)
from .errors import ConfigurationError, DataError, GrasensError, UsageError

ABLATION_TOKENS = {
    "gabor": "use_gabor",
    "antialias": "use_antialias",
    "temporal-att": "use_temporal_att",
    "frequency-att": "use_frequency_att",
}

TRAIN_DEFAULTS = {
    "lam": 2,
    "width": 8,
    "phi": 16,
    "upsilon": 16,
    "epochs": 10,
    "lr": 0.001,
    "momentum": 0.9,
    "batch_size": 16,
    "seed": 0,
    "ablate": [],
    "blur_mode": "fixed-binomial",
    "task_blur": True,
    "gabor_frozen": False,
}


def _parse_geometry(text):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"geometry must look like NTxNRxNS, got {text!r}")
    try:
        n_tx, n_rx, n_sub = (int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"geometry components must be integers: {text!r}") from exc
    return CsiGeometry(n_tx=n_tx, n_rx=n_rx, n_sub=n_sub)


def _parse_ablate(text):
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    for t in tokens:
        if t not in ABLATION_TOKENS:
            raise UsageError(
                f"unknown ablation token {t!r}; valid tokens: "
                + ", ".join(sorted(ABLATION_TOKENS)))
    return tokens


def cmd_generate(args):
    geometry = _parse_geometry(args.geometry)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for cls in range(args.classes):
        for i in range(args.traces_per_class):
            trace = generate_synthetic(geometry, cls, args.duration,
                                       seed=args.seed + i, n_classes=args.classes)
            name = f"class{cls}_trace{i:04d}.gcsi"
            write_trace(trace, os.path.join(args.out, name))
            split = "val" if i % 5 == 4 else "train"
            entries.append({"path": name, "label": cls, "split": split})
    write_manifest(entries, os.path.join(args.out, "manifest.jsonl"))
    print(f"wrote {len(entries)} traces + manifest.jsonl to {args.out}")
    return 0


def cmd_segment(args):
    spec = SegmentSpec(phi=args.phi, upsilon=args.upsilon)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for path in args.traces:
        trace = read_trace(path)
        segs = segment(trace, spec)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{stem}_segments.npz")
        np.savez(out_path, *[s.data for s in segs])
        rows.append((path, len(segs), out_path))
    with open(os.path.join(args.out, "segments.csv"), "w") as fh:
        fh.write("trace,segments,output\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")
    for path, n, out_path in rows:
        print(f"{path}: {n} segments -> {out_path}")
    return 0


def _resolve_train_config(args):
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg) - {"manifest"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in ("lam", "width", "phi", "upsilon", "epochs", "lr", "momentum",
                "batch_size", "seed", "blur_mode"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if args.ablate is not None:
        cfg["ablate"] = _parse_ablate(args.ablate)
    if args.no_task_blur:
        cfg["task_blur"] = False
    if args.gabor_frozen:
        cfg["gabor_frozen"] = True
    return cfg


def _build_model(cfg, classes, in_channels, input_hw):
    toggles = {flag: True for flag in ABLATION_TOKENS.values()}
    for token in cfg["ablate"]:
        toggles[ABLATION_TOKENS[token]] = False
    block = network.BlockConfig(
        width=cfg["width"],
        blur=antialias.BlurSpec(mode=cfg["blur_mode"]),
        **toggles)
    model_cfg = network.ModelConfig(classes=classes, lam=cfg["lam"], seed=cfg["seed"])
    model = network.GraSensModel(model_cfg, block, in_channels=in_channels,
                                 input_hw=input_hw, task_blur=cfg["task_blur"])
    if cfg["gabor_frozen"]:
        for b in model.blocks:
            if b.gabor_layer is not None:
                for p in b.gabor_layer.parameters().values():
                    p.requires_grad = False
    return model


def cmd_train(args):
    cfg = _resolve_train_config(args)
    spec = SegmentSpec(phi=cfg["phi"], upsilon=cfg["upsilon"])
    splits = network.load_dataset(args.manifest, spec)
    if "train" not in splits:
        raise DataError("manifest has no train split")
    sample = splits["train"][0][0]
    labels = sorted({label for split in splits.values() for _, label in split})
    classes = max(labels) + 1
    model = _build_model(cfg, classes, sample.shape[0], sample.shape[1:])

    os.makedirs(args.out, exist_ok=True)
    resolved = dict(cfg)
    resolved["manifest"] = os.path.abspath(args.manifest)
    resolved["classes"] = classes
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)

    train_cfg = network.TrainConfig(lr=cfg["lr"], momentum=cfg["momentum"],
                                    epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                                    seed=cfg["seed"])
    ckpt = os.path.join(args.out, "checkpoint.grck")
    rows = network.train(
        splits, model, train_cfg,
        metrics_path=os.path.join(args.out, "metrics.csv"),
        checkpoint_path=ckpt,
        log_fn=lambda r: print(
            f"epoch {r['epoch']:3d} {r['split']:5s} loss {r['loss']:.4f} "
            f"acc {r['accuracy']:.3f}"))
    report.plot_training_curves(rows, os.path.join(args.out, "training_curves.png"))

    best_model, _, _ = network.load_checkpoint(ckpt)
    eval_split = splits.get("val") or splits["train"]
    result = network.evaluate(best_model, eval_split)
    _write_confusion_csv(result["confusion"], os.path.join(args.out, "confusion.csv"))
    report.plot_confusion(result["confusion"], os.path.join(args.out, "confusion.png"))
    print(f"best checkpoint: {ckpt} (accuracy {result['accuracy']:.3f})")
    return 0


def _write_confusion_csv(confusion, path):
    n = confusion.shape[0]
    with open(path, "w") as fh:
        fh.write("truth\\pred," + ",".join(str(c) for c in range(n)) + "\n")
        for i in range(n):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in confusion[i]) + "\n")


def _fmt_precision(value):
    return "n/a" if value is None else f"{value:.4f}"


def cmd_eval(args):
    model, _, header = network.load_checkpoint(args.checkpoint)
    spec = SegmentSpec(phi=model.input_hw[1], upsilon=args.upsilon or model.input_hw[1])
    splits = network.load_dataset(args.manifest, spec)
    if args.split not in splits:
        raise DataError(f"manifest has no {args.split!r} split")
    samples = splits[args.split]
    got = samples[0][0].shape
    want = (model.in_channels,) + model.input_hw
    if got != want:
        raise ConfigurationError(
            f"geometry mismatch: checkpoint expects input {want}, data yields {got}")
    result = network.evaluate(model, samples)
    print(f"accuracy {result['accuracy']:.4f}")
    for cls, prec in result["precision"].items():
        print(f"precision[{cls}] {_fmt_precision(prec)}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"eval_{args.split}.csv")
    with open(csv_path, "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"accuracy,{result['accuracy']:.6f}\n")
        for cls, prec in result["precision"].items():
            fh.write(f"precision_{cls},{_fmt_precision(prec)}\n")
    _write_confusion_csv(result["confusion"], os.path.join(out_dir, f"confusion_{args.split}.csv"))
    report.plot_confusion(result["confusion"], os.path.join(out_dir, f"confusion_{args.split}.png"))
    return 0


def cmd_infer(args):
    model, _, _ = network.load_checkpoint(args.checkpoint)
    phi = args.phi or model.input_hw[1]
    spec = SegmentSpec(phi=phi, upsilon=args.upsilon or phi)
    trace = read_trace(args.trace)
    votes = []
    for seg in segment(trace, spec):
        pred = model.predict(seg.data)
        votes.append(pred)
        print(f"segment {seg.source_trace}: class {pred}")
    majority = int(np.bincount(votes).argmax())
    print(f"majority vote: class {majority}")
    return 0


def cmd_inspect_filters(args):
    model, _, _ = network.load_checkpoint(args.checkpoint)
    if not 0 <= args.block < len(model.blocks):
        raise UsageError(f"block {args.block} out of range (model has {len(model.blocks)})")
    layer = model.blocks[args.block].gabor_layer
    if layer is None:
        raise UsageError(f"block {args.block} was trained with the Gabor layer ablated")
    os.makedirs(args.out, exist_ok=True)
    kernels = gabor.synthesize_kernels(layer).data  # (C_out, C_in, k, k)
    with open(os.path.join(args.out, "params.csv"), "w") as fh:
        fh.write("filter,in_channel,omega,theta,psi,sigma\n")
        for f in range(layer.c_out):
            for c in range(layer.c_in):
                fh.write(f"{f},{c},{layer.omega.data[f, c]:.12g},"
                         f"{layer.theta.data[f, c]:.12g},{layer.psi.data[f, c]:.12g},"
                         f"{layer.sigma.data[f, c]:.12g}\n")
    for f in range(layer.c_out):
        np.savetxt(os.path.join(args.out, f"kernel_{f:02d}.csv"),
                   kernels[f, 0], delimiter=",", fmt="%.12g")
    report.plot_filter_montage(kernels[:, 0], os.path.join(args.out, "filters.png"))
    print(f"wrote params.csv, {layer.c_out} kernel CSVs and filters.png to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="grasens",
                                     description="WiFi CSI action-recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a synthetic GCSI dataset + manifest")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--traces-per-class", type=int, default=10)
    p.add_argument("--geometry", default="1x1x12", help="NTxNRxNS")
    p.add_argument("--duration", type=int, default=64, help="packets per trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="slice traces into window tensors")
    p.add_argument("traces", nargs="+")
    p.add_argument("--phi", type=int, required=True)
    p.add_argument("--upsilon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--lambda", dest="lam", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--phi", type=int)
    p.add_argument("--upsilon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", help="comma list of: " + ", ".join(sorted(ABLATION_TOKENS)))
    p.add_argument("--blur-mode", dest="blur_mode",
                   choices=["fixed-binomial", "predicted"])
    p.add_argument("--no-task-blur", action="store_true")
    p.add_argument("--gabor-frozen", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--upsilon", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify the segments of one trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--phi", type=int)
    p.add_argument("--upsilon", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect-filters", help="dump Gabor kernels and parameters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_filters)

    return parser


_KIND = {2: "usage", 3: "data", 4: "numeric"}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except GrasensError as exc:
        kind = _KIND.get(exc.exit_code, "internal")
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
