"""``fmen`` command line: build, train, fuse, infer, plan, count, psd, psnr, bench.

Exit status is 0 on success, 1 when an input violates a contract (bad file,
shape mismatch, invalid config) and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .blocks import FmenConfig, build_fmen, he_init
from .errors import ConfigError, FmenError
from .graph import BufferPolicy, Graph, count_ops, forward, param_count
from .imaging import (bicubic_upscale_baseline, load_png, psnr_y, save_png, ssim_y, to_uint8)

THREADS_ENV = "FMEN_THREADS"
DTYPES = {"f32": np.float32, "f64": np.float64}


# helpers -------------------------------------------------------------------


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(rows: dict | list, fmt: str) -> str:
    """Render a flat dict (or a list of flat dicts) as CSV or JSON."""
    if fmt == "json":
        return json.dumps(rows, indent=1) + "\n"
    if isinstance(rows, dict):
        rows = [rows]
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]
    return "\n".join(lines) + "\n"


def _config(args) -> FmenConfig:
    cfg = FmenConfig.from_file(args.config) if args.config else FmenConfig()
    if getattr(args, "scale", None):
        cfg = FmenConfig(**{**cfg.to_dict(), "scale": args.scale})
    return cfg


def _lr_hw(args):
    return tuple(args.input_size) if getattr(args, "input_size", None) else (64, 64)


def _load_graph(args, need_params: bool) -> Graph:
    """Resolve ``--weights`` / ``--graph`` / ``--config`` into a graph of the requested dtype."""
    from .weights import read_weights

    dtype = DTYPES[args.dtype]
    if getattr(args, "weights", None):
        g = read_weights(args.weights)
    elif getattr(args, "graph", None):
        g = Graph.from_json(Path(args.graph).read_text())
        if need_params:
            raise ConfigError("a graph document carries no parameters; pass --weights or --config")
    else:
        g = build_fmen(_config(args), lr_hw=_lr_hw(args))
        if need_params:
            g = he_init(g, args.seed)
    if getattr(args, "input_size", None):
        n, c = g.shapes[g.inputs[0]][:2]
        g.shapes.update(g.infer_shapes((n, c, *args.input_size)))
    return g.astype(dtype)


def _deployed(g: Graph, args) -> Graph:
    """The network as it runs after fusion, unless ``--train-form`` asks for the graph as given."""
    if args.train_form or g.meta.get("form") != "train":
        return g
    if all(n.id in g.params for n in g.nodes if n.kind in ("conv", "bn")):
        from .reparam import fuse_network
        return fuse_network(g)
    cfg = g.meta.get("config")
    if cfg is None:
        raise ConfigError("cannot derive the deploy form of a parameterless graph without a config; "
                          "pass --train-form")
    n, c, h, w = g.shapes[g.inputs[0]]
    return build_fmen(FmenConfig.from_dict(cfg).with_form("deploy"), lr_hw=(h, w), dtype=g.dtype)


def _image_to_nchw(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return (img.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]


def _nchw_to_image(x: np.ndarray) -> np.ndarray:
    return to_uint8(np.asarray(x, np.float64)[0].transpose(1, 2, 0) * 255.0)


# subcommands ---------------------------------------------------------------


def cmd_build(args):
    from .weights import write_weights

    g = he_init(build_fmen(_config(args).with_form("train"), lr_hw=_lr_hw(args)), args.seed)
    size = write_weights(args.output, g)
    if args.graph_out:
        Path(args.graph_out).write_text(g.dumps())
    print(f"wrote {args.output} ({size} bytes, {param_count(g)} parameters)", file=sys.stderr)


def cmd_train(args):
    from .train import TrainConfig, train
    from .weights import read_weights, write_weights

    images = sorted(Path(args.images).glob("*.png"))
    if not images:
        raise ConfigError(f"no PNG files in {args.images}")
    hr = [load_png(p) for p in images]
    if args.init:
        g = read_weights(args.init)
    else:
        g = he_init(build_fmen(_config(args).with_form("train"), lr_hw=(args.patch, args.patch)), args.seed)
    if g.meta.get("form") == "deploy":
        raise ConfigError("training needs a train-form model")
    scale = g.meta["config"]["scale"]
    cfg = TrainConfig(lr0=args.lr0, halve_every=args.halve_every, total_iters=args.iters, batch=args.batch,
                      patch=args.patch, augment=not args.no_augment, seed=args.seed)
    log = None
    if args.log_every:
        def log(it, loss):
            if it % args.log_every == 0:
                print(f"{it},{loss:.6g}", file=sys.stderr)
    g, losses = train(g.astype(DTYPES[args.dtype]), cfg, hr_images=hr, scale=scale, callback=log)
    write_weights(args.output, g)
    summary = {"iters": len(losses), "first_loss": losses[0] if losses else None,
               "last_loss": losses[-1] if losses else None}
    sys.stdout.write(_dump(summary, args.format))


def cmd_fuse(args):
    from .reparam import check_equivalence, fuse_network
    from .weights import read_weights, write_weights

    g = read_weights(args.weights)
    d = fuse_network(g)
    write_weights(args.output, d)
    if args.check:
        # fuse again in f64 so the check measures the rewrite, not f32 storage
        gg = g.astype(np.float64)
        dd = fuse_network(gg)
        rep = check_equivalence(gg, dd, n_trials=args.check, tol=args.tol)
        print(rep, file=sys.stderr)
        if not rep.passed:
            return 1
    return 0


def cmd_infer(args):
    g = _load_graph(args, need_params=True)
    img = load_png(args.input)
    y = forward(g, _image_to_nchw(img).astype(g.dtype))
    save_png(args.output, _nchw_to_image(y))


def cmd_plan(args):
    from .memory import FEATURES_ONLY_NOTE, plan_memory, report_csv

    g = _deployed(_load_graph(args, need_params=False), args)
    policy = BufferPolicy(inplace_activations=not args.no_inplace_activations,
                          inplace_elementwise=args.inplace_elementwise)
    rep = plan_memory(g, policy=policy, bytes_per_scalar=args.bytes_per_scalar)
    if args.format == "json":
        doc = {
            "note": FEATURES_ONLY_NOTE,
            "peak_elements": rep.peak_elements, "peak_bytes": rep.peak_bytes,
            "peak_node": rep.peak_node_id, "m_net": rep.m_net, "m_net_bytes": rep.m_net_bytes,
            "nodes": [{"node_id": n.node_id, "kind": n.kind, "m_input": n.m_input,
                       "m_output": n.m_output, "m_kept": n.m_kept, "total": n.total} for n in rep.per_node],
        }
        _emit(json.dumps(doc, indent=1) + "\n", args.output)
    else:
        _emit(report_csv(rep), args.output)
    print(f"note: {FEATURES_ONLY_NOTE}", file=sys.stderr)


def cmd_count(args):
    g = _deployed(_load_graph(args, need_params=False), args)
    row = count_ops(g).as_dict()
    if all(n.id in g.params for n in g.nodes if n.kind in ("conv", "bn")):
        row["params"] = param_count(g)
    sys.stdout.write(_dump(row, args.format))


def cmd_psd(args):
    from .freq import densities_csv, hfab_taps, psd_probe

    g = _load_graph(args, need_params=True)
    x = _image_to_nchw(load_png(args.input)).astype(g.dtype)
    taps = args.tap or hfab_taps(g)
    if not taps:
        raise ConfigError("no taps given and the model has no attention blocks")
    dens = psd_probe(g, x, taps, normalize=not args.raw)
    if args.format == "json":
        _emit(json.dumps({t: d.bins.tolist() for t, d in dens.items()}, indent=1) + "\n", args.output)
    else:
        _emit(densities_csv(dens), args.output)


def cmd_psnr(args):
    rows = []
    if args.bicubic:
        folder = Path(args.bicubic)
        files = sorted(folder.glob("*.png"))
        if not files:
            raise ConfigError(f"no PNG files in {folder}")
        shave = args.scale if args.shave is None else args.shave
        for p in files:
            sr, hr = bicubic_upscale_baseline(load_png(p), args.scale)
            rows.append({"image": p.name, "psnr_y": psnr_y(sr, hr, shave, args.round_y),
                         "ssim_y": ssim_y(sr, hr, shave, args.round_y)})
        rows.append({"image": "MEAN", "psnr_y": float(np.mean([r["psnr_y"] for r in rows])),
                     "ssim_y": float(np.mean([r["ssim_y"] for r in rows]))})
    else:
        if not (args.sr and args.hr):
            raise ConfigError("psnr needs SR and HR images, or --bicubic DIR")
        sr, hr = load_png(args.sr), load_png(args.hr)
        shave = args.shave or 0
        rows.append({"image": Path(args.sr).name, "psnr_y": psnr_y(sr, hr, shave, args.round_y),
                     "ssim_y": ssim_y(sr, hr, shave, args.round_y)})
    sys.stdout.write(_dump(rows if len(rows) > 1 else rows[0], args.format))


def cmd_bench(args):
    from .bench import bench
    from .reparam import fuse_network

    g = _load_graph(args, need_params=True)
    shape = g.shapes[g.inputs[0]]
    rows = []
    graphs = [("model", g)]
    if args.compare_fused:
        graphs.append(("fused", fuse_network(g)))
    for name, gg in graphs:
        t = bench(gg, shape, args.warmup, args.runs, args.seed, n_threads=args.threads)
        rows.append({"graph": name, **t.as_dict()})
    sys.stdout.write(_dump(rows if len(rows) > 1 else rows[0], args.format))


# parser --------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32", help="scalar type (default f32)")
    p.add_argument("--seed", type=int, default=0)
    env = os.environ.get(THREADS_ENV)
    p.add_argument("--threads", type=int, default=int(env) if env else 1,
                   help=f"BLAS threads (default 1, or ${THREADS_ENV})")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def _model_args(p, weights=True):
    if weights:
        p.add_argument("-w", "--weights", help="weight file")
    p.add_argument("--graph", help="graph JSON document")
    p.add_argument("--config", help="FMEN config (.json or .toml)")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), help="override the config scale")
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"), help="LR input size")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="fmen", description="FMEN super-resolution toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("build", parents=[common], help="He-initialised train-form weights from a config")
    p.add_argument("--config")
    p.add_argument("--scale", type=int, choices=(2, 3, 4))
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--graph-out", help="also write the graph JSON document")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("train", parents=[common], help="toy training on a folder of HR PNGs")
    p.add_argument("--config")
    p.add_argument("--scale", type=int, choices=(2, 3, 4))
    p.add_argument("--images", required=True, help="directory of HR PNG files")
    p.add_argument("--init", help="start from this weight file instead of He init")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--patch", type=int, default=64, help="HR patch size")
    p.add_argument("--lr0", type=float, default=5e-4)
    p.add_argument("--halve-every", type=int, default=500)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=int, default=0, help="print iteration,loss to stderr")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", parents=[common], help="train-form weights -> deploy-form weights")
    p.add_argument("weights")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--check", type=int, default=0, metavar="N", help="verify on N random inputs (f64)")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("infer", parents=[common], help="LR PNG -> SR PNG")
    _model_args(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("plan", parents=[common], help="static peak-memory report")
    _model_args(p)
    p.add_argument("--train-form", action="store_true", help="report the unfused train-form graph")
    p.add_argument("--bytes-per-scalar", type=int, choices=(4, 8), default=4)
    p.add_argument("--no-inplace-activations", action="store_true")
    p.add_argument("--inplace-elementwise", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("count", parents=[common], help="operator and parameter counts")
    _model_args(p)
    p.add_argument("--train-form", action="store_true", help="report the unfused train-form graph")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("psd", parents=[common], help="radial power spectra of tapped features")
    _model_args(p)
    p.add_argument("-i", "--input", required=True, help="LR PNG")
    p.add_argument("--tap", action="append", help="tensor id (repeatable; default every attention block)")
    p.add_argument("--raw", action="store_true", help="skip normalisation")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_psd)

    p = sub.add_parser("psnr", parents=[common], help="Y-channel PSNR/SSIM")
    p.add_argument("sr", nargs="?")
    p.add_argument("hr", nargs="?")
    p.add_argument("--bicubic", metavar="DIR", help="bicubic baseline over a folder of HR PNGs")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    p.add_argument("--shave", type=int, help="border crop (default: scale for --bicubic, else 0)")
    p.add_argument("--round-y", action="store_true")
    p.set_defaults(fn=cmd_psnr)

    p = sub.add_parser("bench", parents=[common], help="wall-clock timing")
    _model_args(p)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--compare-fused", action="store_true", help="also time the fused deploy form")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.fn(args)
    except (FmenError, ValueError, OSError, KeyError) as err:
        print(f"fmen {args.command}: error: {err}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
