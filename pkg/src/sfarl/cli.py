"""Command-line surface: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Every command is deterministic given its seed; `--threads 1` (the default)
additionally guarantees bit-reproducible outputs. `SFARL_THREADS` serves as
the fallback when `--threads` is not given.

Noise levels on the command line are quoted in 8-bit units (a `--sigma` of
25 means 25/255 on unit-range pixels); the library works on [0, 1].
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import default_options, load_dataset, synth_dataset
from .degrade import blur_op, identity_op
from .gradcheck import run_certification, summarize
from .imageio import load_image, load_kernel_txt, save_image
from .influence import make_geometry
from .losses import DEFAULT_SSIM, psnr, ssim
from .model import (
    DEFAULT_STAGES,
    ModelFormatError,
    ModelGeometry,
    load_model,
    run_inference,
    save_model,
)
from .training import TrainConfig, evaluate_model, init_model, train_greedy, train_joint

IMAGE_SUFFIXES = (".png", ".pgm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads() -> int:
    env = os.environ.get("SFARL_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"SFARL_THREADS must be an integer, got {env!r}")
    return 1


def _build_parser() -> _Parser:
    p = _Parser(prog="sfarl", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"sfarl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a degraded/clean training dataset")
    sp.add_argument("--task", required=True, choices=("deconv", "multideg", "rain", "denoise"))
    sp.add_argument("--clean", required=True, help="directory of clean images (png/pgm)")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=0, help="use at most this many clean images")
    sp.add_argument("--sigma", type=float, default=None,
                    help="noise std in 8-bit units (default per task)")
    sp.add_argument("--severity", type=float, default=None,
                    help="kernel perturbation severity in [0,1] (deconv)")
    sp.add_argument("--kernel", default=None,
                    help="kernel text file or directory of them (deconv/multideg)")
    sp.add_argument("--kernel-size", type=int, default=None,
                    help="size of generated motion kernels when none are supplied")
    sp.add_argument("--variants", type=int, default=None, help="rainy variants per image")
    sp.add_argument("--gain", type=float, default=None, help="saturation gain (multideg)")
    sp.add_argument("--quality", type=int, default=None, help="jpeg quality (multideg)")

    tp = sub.add_parser("train", help="greedy stage-wise training plus joint fine-tuning")
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--model", required=True, help="output model file")
    tp.add_argument("--task", default=None, help="defaults to the manifest's task")
    tp.add_argument("--loss", choices=("mse", "neg_ssim"), default="mse")
    tp.add_argument("--stages", type=int, default=None, help="stage count (default per task)")
    tp.add_argument("--epochs-greedy", type=int, default=10)
    tp.add_argument("--epochs-joint", type=int, default=50)
    tp.add_argument("--batch", type=int, default=8)
    tp.add_argument("--patch", type=int, default=64)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--threads", type=int, default=None)
    tp.add_argument("--filter-size", type=int, default=7)
    tp.add_argument("--rbf-count", type=int, default=63)
    tp.add_argument("--rbf-radius", type=float, default=1.0)
    tp.add_argument("--val-fraction", type=float, default=0.0,
                    help="held-out fraction logged per epoch")
    tp.add_argument("--log", default=None, help="training log (jsonl); default <model>.log.jsonl")
    tp.add_argument("--resume", default=None, help="checkpoint file to resume from")

    ip = sub.add_parser("infer", help="restore images with a trained model")
    ip.add_argument("--model", required=True)
    ip.add_argument("--input", required=True, help="degraded image file or directory")
    ip.add_argument("--output", required=True, help="output file or directory")
    ip.add_argument("--kernel", default=None,
                    help="kernel text file (required for blur-task models)")
    ip.add_argument("--emit-intermediates", action="store_true",
                    help="also write every stage's estimate")
    ip.add_argument("--threads", type=int, default=None)

    ep = sub.add_parser("eval", help="PSNR/SSIM of restored images against ground truth")
    ep.add_argument("--restored", required=True, help="file or directory")
    ep.add_argument("--truth", required=True, help="file or directory")
    ep.add_argument("--out", default=None, help="metrics file (jsonl)")

    gp = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    gp.add_argument("--seeds", type=int, default=10, help="number of seeded instances")
    gp.add_argument("--tol", type=float, default=1e-4)
    gp.add_argument("--perturb-block", default=None, help=argparse.SUPPRESS)
    return p


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no png/pgm images in {directory}")
    return files


def _to_gray(arr: np.ndarray) -> np.ndarray:
    return arr.mean(axis=2) if arr.ndim == 3 else arr


def cmd_synth(args) -> int:
    files = _list_images(args.clean)
    if args.count:
        files = files[: args.count]
    clean = [(f.name, _to_gray(load_image(f))) for f in files]
    options = default_options(args.task)
    if args.sigma is not None:
        options["sigma"] = args.sigma / 255.0
    if args.severity is not None:
        options["severity"] = args.severity
    if args.variants is not None:
        options["variants"] = args.variants
    if args.gain is not None:
        options["gain"] = args.gain
    if args.quality is not None:
        options["quality"] = args.quality
    if args.kernel_size is not None:
        options["kernel_size"] = args.kernel_size
    kernels = None
    if args.kernel:
        kpath = Path(args.kernel)
        if kpath.is_dir():
            kernels = [load_kernel_txt(f) for f in sorted(kpath.glob("*.txt"))]
            if not kernels:
                raise DataError(f"no kernel .txt files in {kpath}")
        elif kpath.is_file():
            kernels = [load_kernel_txt(kpath)]
        else:
            raise DataError(f"kernel path not found: {kpath}")
    manifest = synth_dataset(args.task, clean, args.out, args.seed,
                             options=options, kernels=kernels)
    header, records = _read_manifest_checked(manifest)
    print(f"wrote {header['count']} samples to {manifest}")
    return 0


def _read_manifest_checked(path):
    from .datasets import read_manifest
    try:
        return read_manifest(path)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad manifest {path}: {exc}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_samples(manifest_path):
    try:
        return load_dataset(manifest_path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {manifest_path}: {exc}")


def _geometry_from_args(args) -> ModelGeometry:
    k = args.filter_size
    return ModelGeometry(
        filter_size=k, n_fid=k * k, n_reg=k * k - 1,
        fid_rbf=make_geometry(args.rbf_count, args.rbf_radius),
        reg_rbf=make_geometry(args.rbf_count, args.rbf_radius),
    )


def _geometry_matches(model, geom: ModelGeometry) -> bool:
    g = model.geometry
    return (g.filter_size == geom.filter_size and g.n_fid == geom.n_fid
            and g.n_reg == geom.n_reg
            and g.fid_rbf.count == geom.fid_rbf.count
            and np.allclose(g.fid_rbf.means, geom.fid_rbf.means)
            and np.allclose(g.fid_rbf.gamma, geom.fid_rbf.gamma))


MODEL_TASK_FOR = {"deconv": "deconv", "multideg": "deconv",
                  "rain": "rain", "denoise": "denoise"}


def cmd_train(args) -> int:
    header, samples = _load_samples(args.manifest)
    task = args.task or header.get("task")
    task = MODEL_TASK_FOR.get(task)
    if task is None:
        raise DataError(f"unknown or missing task {header.get('task')!r}")
    n_stages = args.stages or DEFAULT_STAGES[task]
    threads = args.threads if args.threads is not None else _default_threads()
    cfg = TrainConfig(loss=args.loss, epochs_greedy=args.epochs_greedy,
                      epochs_joint=args.epochs_joint, batch_size=args.batch,
                      patch_size=args.patch, learning_rate=args.lr,
                      seed=args.seed, threads=threads)

    val = []
    if args.val_fraction > 0:
        n_val = max(1, int(round(args.val_fraction * len(samples))))
        order = np.random.default_rng(np.random.SeedSequence([args.seed, 99])).permutation(len(samples))
        val = [samples[i] for i in order[:n_val]]
        samples = [samples[i] for i in order[n_val:]]
    if not samples:
        raise DataError("no training samples left after the validation split")

    geom = _geometry_from_args(args)
    start_stage = 0
    if args.resume:
        try:
            model = load_model(args.resume)
        except (OSError, ModelFormatError) as exc:
            raise DataError(f"cannot resume from {args.resume}: {exc}")
        sidecar = Path(str(args.resume) + ".meta.json")
        if not sidecar.exists():
            raise DataError(f"missing checkpoint sidecar {sidecar}")
        meta = json.loads(sidecar.read_text())
        if not _geometry_matches(model, geom) or model.n_stages != n_stages:
            raise DataError("checkpoint geometry conflicts with the requested configuration")
        if meta.get("phase") == "greedy":
            start_stage = int(meta["completed_stage"]) + 1
        else:
            raise DataError("can only resume from a greedy stage checkpoint")
    else:
        model = init_model(geom, task, n_stages=n_stages)

    model_path = Path(args.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else Path(str(model_path) + ".log.jsonl")
    log_fh = open(log_path, "w")
    log_fh.write(json.dumps({
        "tool_version": __version__, "task": task, "loss": cfg.loss,
        "stages": n_stages, "epochs_greedy": cfg.epochs_greedy,
        "epochs_joint": cfg.epochs_joint, "batch": cfg.batch_size,
        "patch": cfg.patch_size, "lr": cfg.learning_rate, "seed": cfg.seed,
        "threads": cfg.threads, "filter_size": geom.filter_size,
        "rbf_count": geom.fid_rbf.count, "samples": len(samples),
        "validation": len(val),
    }, sort_keys=True) + "\n")

    def log_fn(record):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()
        loss_txt = f"{record['loss']:.6g}"
        stage = f" stage {record['stage']}" if "stage" in record else ""
        extra = ""
        if "val_psnr" in record:
            extra = f"  val psnr {record['val_psnr']:.2f} ssim {record['val_ssim']:.4f}"
        print(f"[{record['phase']}{stage}] epoch {record['epoch']}: loss {loss_txt}{extra}")

    def eval_fn(m):
        p, s = evaluate_model(m, val)
        return {"val_psnr": p, "val_ssim": s}

    def checkpoint_fn(m, meta):
        if meta["phase"] == "greedy":
            ck = Path(str(model_path) + f".greedy-stage{meta['completed_stage']}.ckpt")
        else:
            ck = Path(str(model_path) + f".joint-ep{meta['completed_epochs']}.ckpt")
        save_model(m, ck)
        Path(str(ck) + ".meta.json").write_text(json.dumps(
            {**meta, "seed": cfg.seed, "loss": cfg.loss, "task": task}, sort_keys=True))

    hooks = {"log_fn": log_fn, "checkpoint_fn": checkpoint_fn,
             "eval_fn": eval_fn if val else None}
    t0 = time.monotonic()
    model = train_greedy(samples, model, cfg, start_stage=start_stage, **hooks)
    model = train_joint(samples, model, cfg, **hooks)
    save_model(model, model_path)
    log_fh.write(json.dumps({"done": True, "seconds": time.monotonic() - t0},
                            sort_keys=True) + "\n")
    log_fh.close()
    print(f"model written to {model_path} ({time.monotonic() - t0:.1f}s)")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _restore_one(model, op, image, emit: bool):
    if image.ndim == 3:
        outs = [_restore_one(model, op, image[:, :, c], emit) for c in range(image.shape[2])]
        final = np.stack([o[0] for o in outs], axis=2)
        inter = None
        if emit:
            inter = [np.stack([o[1][t] for o in outs], axis=2)
                     for t in range(model.n_stages)]
        return final, inter
    xs, _ = run_inference(model, image, op, record=False)
    return xs[-1], (xs if emit else None)


def cmd_infer(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, ModelFormatError) as exc:
        raise DataError(f"cannot load model {args.model}: {exc}")
    if model.task in ("deconv",):
        if not args.kernel:
            raise UsageError("--kernel is required for deconvolution models")
        op = blur_op(load_kernel_txt(args.kernel))
    else:
        op = identity_op()

    in_path = Path(args.input)
    out_path = Path(args.output)
    if in_path.is_dir():
        files = _list_images(in_path)
        out_path.mkdir(parents=True, exist_ok=True)
        pairs = [(f, out_path / f.name) for f in files]
    elif in_path.is_file():
        if out_path.suffix.lower() not in IMAGE_SUFFIXES:
            out_path.mkdir(parents=True, exist_ok=True)
            pairs = [(in_path, out_path / in_path.name)]
        else:
            out_path.parent.mkdir(parents=True, exist_ok=True)
            pairs = [(in_path, out_path)]
    else:
        raise DataError(f"input not found: {in_path}")

    for src, dst in pairs:
        image = load_image(src)
        final, inter = _restore_one(model, op, image, args.emit_intermediates)
        save_image(dst, final, bits=16 if image.ndim == 2 else 8)
        if inter is not None:
            for t, x in enumerate(inter):
                stage_path = dst.with_name(f"{dst.stem}.stage{t + 1}{dst.suffix}")
                save_image(stage_path, x, bits=16 if image.ndim == 2 else 8)
        print(f"restored {src} -> {dst}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _pair_images(restored, truth):
    r, t = Path(restored), Path(truth)
    if r.is_file() and t.is_file():
        return [(r, t)]
    if r.is_dir() and t.is_dir():
        r_files = {f.name: f for f in _list_images(r)}
        t_files = {f.name: f for f in _list_images(t)}
        if set(r_files) != set(t_files):
            odd = set(r_files) ^ set(t_files)
            raise DataError(f"unpaired files: {sorted(odd)[:5]}")
        return [(r_files[n], t_files[n]) for n in sorted(r_files)]
    raise DataError("restored and truth must both be files or both be directories")


def _channel_mean_metrics(a: np.ndarray, b: np.ndarray):
    if a.ndim == 3:
        ps = [psnr(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]
        ss = [ssim(a[:, :, c], b[:, :, c], DEFAULT_SSIM) for c in range(a.shape[2])]
        return float(np.mean(ps)), float(np.mean(ss))
    return psnr(a, b), ssim(a, b, DEFAULT_SSIM)


def cmd_eval(args) -> int:
    pairs = _pair_images(args.restored, args.truth)
    rows = []
    for r_path, t_path in pairs:
        a, b = load_image(r_path), load_image(t_path)
        if a.shape != b.shape:
            raise DataError(f"shape mismatch for {r_path.name}: {a.shape} vs {b.shape}")
        p, s = _channel_mean_metrics(a, b)
        rows.append({"name": r_path.name, "psnr": p, "ssim": s})
        print(f"{r_path.name}: psnr {p:.4f}  ssim {s:.6f}")
    mean_p = float(np.mean([r["psnr"] for r in rows]))
    mean_s = float(np.mean([r["ssim"] for r in rows]))
    print(f"mean: psnr {mean_p:.4f}  ssim {mean_s:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(json.dumps({"tool_version": __version__, "count": len(rows),
                                 "mean_psnr": mean_p, "mean_ssim": mean_s},
                                sort_keys=True) + "\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    records, ok = run_certification(seeds=range(args.seeds), tol=args.tol,
                                    perturb_block=args.perturb_block)
    worst = summarize(records)
    for block in sorted(worst):
        failed = [r for r in records if r["block"] == block and not r["ok"]]
        status = "PASS" if not failed else "FAIL"
        print(f"{status} {block}: max relative error {worst[block]:.3e} "
              f"({len(failed)} failing instances)")
    print(f"{'PASS' if ok else 'FAIL'}: {len(records)} gradient checks at tol {args.tol:g}")
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
                   "eval": cmd_eval, "gradcheck": cmd_gradcheck}[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
