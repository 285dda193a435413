"""Dataset synthesis orchestration and the line-delimited manifest format.

A dataset directory holds a ``manifest.jsonl`` plus ``images/`` (16-bit PNG)
and, for blur tasks, ``kernels/`` (plain-text grids). The manifest's first
line is a header record carrying the task, seed and generator configuration;
each following line describes one sample with enough parameters to
resynthesize it bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import (
    TrainingSample,
    blur_op,
    identity_op,
    make_motion_kernel,
    synth_deconv_pair,
    synth_denoise_pair,
    synth_multi_degrade,
    synth_rain_pair,
)
from .imageio import load_image, load_kernel_txt, save_image, save_kernel_txt

MANIFEST_NAME = "manifest.jsonl"
TASKS = ("deconv", "multideg", "rain", "denoise")


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _synth_one(task: str, image: np.ndarray, index: int, seed: int,
               options: dict, kernels: list | None) -> TrainingSample:
    sample_seed = _derived_seed(seed, index)
    if task == "denoise":
        return synth_denoise_pair(image, options["sigma"], sample_seed)
    if task == "deconv":
        k = kernels[index % len(kernels)]
        return synth_deconv_pair(image, k, options["severity"], options["sigma"],
                                 sample_seed)
    if task == "multideg":
        k = kernels[index % len(kernels)]
        return synth_multi_degrade(image, k, options["sigma"], options["gain"],
                                   options["quality"], sample_seed)
    if task == "rain":
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, 7]))
        angle = float(rng.uniform(*options["angle_range"]))
        density = float(rng.uniform(*options["density_range"]))
        length = int(rng.integers(options["length_range"][0],
                                  options["length_range"][1] + 1))
        return synth_rain_pair(image, angle, density, length, sample_seed,
                               mode=options["mode"])
    raise ValueError(f"unknown task {task!r}")


def synth_dataset(task: str, clean_images: list, out_dir, seed: int,
                  options: dict | None = None, kernels: list | None = None) -> Path:
    """Generate TrainingSamples for each (name, image) pair and write a dataset.

    For the rain task every clean image yields ``options['variants']`` rainy
    versions. Returns the manifest path.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    opts = default_options(task)
    if options:
        opts.update(options)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    if task in ("deconv", "multideg"):
        if not kernels:
            kernels = [make_motion_kernel(opts["kernel_size"], _derived_seed(seed, 10_000 + j))
                       for j in range(opts["n_kernels"])]
        (out_dir / "kernels").mkdir(exist_ok=True)

    records = []
    index = 0
    for name, image in clean_images:
        repeats = opts["variants"] if task == "rain" else 1
        for v in range(repeats):
            sample = _synth_one(task, image, index, seed, opts, kernels)
            stem = f"{index:05d}_{Path(name).stem}"
            deg_rel = f"images/{stem}_y.png"
            gt_rel = f"images/{stem}_gt.png"
            save_image(out_dir / deg_rel, sample.degraded, bits=16)
            save_image(out_dir / gt_rel, sample.ground_truth, bits=16)
            op_desc = {"kind": sample.op.kind}
            if sample.op.kind == "blur":
                k_rel = f"kernels/{stem}_k.txt"
                save_kernel_txt(out_dir / k_rel, sample.op.kernel)
                op_desc["kernel"] = k_rel
            records.append({"id": stem, "degraded": deg_rel, "ground_truth": gt_rel,
                            "op": op_desc, "params": sample.meta})
            index += 1

    header = {"manifest_version": 1, "tool_version": __version__, "task": task,
              "seed": int(seed), "options": _jsonable(opts), "count": len(records)}
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def default_options(task: str) -> dict:
    if task == "denoise":
        return {"sigma": 25.0 / 255.0}
    if task == "deconv":
        return {"severity": 0.5, "sigma": 0.25 / 255.0, "kernel_size": 19, "n_kernels": 8}
    if task == "multideg":
        return {"sigma": 2.0 / 255.0, "gain": 1.2, "quality": 70,
                "kernel_size": 15, "n_kernels": 4}
    if task == "rain":
        return {"variants": 7, "angle_range": (60.0, 90.0),
                "density_range": (0.015, 0.035), "length_range": (7, 13),
                "mode": "screen"}
    raise ValueError(f"unknown task {task!r}")


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def read_manifest(path) -> tuple[dict, list]:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if header.get("manifest_version") != 1:
        raise ValueError("unsupported manifest version")
    return header, [json.loads(ln) for ln in lines[1:]]


def load_dataset(manifest_path) -> tuple[dict, list]:
    """Read a manifest and load every sample's images and operator."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    header, records = read_manifest(manifest_path)
    samples = []
    for rec in records:
        op_desc = rec["op"]
        if op_desc["kind"] == "identity":
            op = identity_op()
        else:
            op = blur_op(load_kernel_txt(base / op_desc["kernel"]))
        samples.append(TrainingSample(
            degraded=load_image(base / rec["degraded"]),
            ground_truth=load_image(base / rec["ground_truth"]),
            op=op,
            meta=rec["params"],
        ))
    return header, samples
