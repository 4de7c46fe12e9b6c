"""Command-line driver: ``iqt phantom|simulate|patchify|train|infer|evaluate|compare``.

Every command reads the run configuration, works inside one output
directory, and writes JSON documents that validate against the schemas
shipped in ``iqt/schemas``. Layout of the output directory::

    cohort/       high-field phantoms, masks, manifest.json
    lowfield/     simulated low-field volumes, provenance.json
    patches/      train/ and val/ patch libraries
    model/        checkpoint (manifest.json + f32 blobs), history.json
    predictions/  <method>/subject_XXX.iqtv
    metrics.json, compare.json, pgm/
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import config as C
from .errors import ConfigError, DataError, IQTError
from .metrics import mssim, psnr, wilcoxon_signed_rank
from .nn import ParamStore
from .patches import PatchLibrary, extract_pairs, kept_origins, load_library, save_library, subsample
from .phantom import generate_cohort
from .simulator import SnrSample, downsample_z, simulate, simulation_kernel
from .spline import upsample_z_bspline
from .unet import NetworkSpec, build_network, infer_volume, train
from .volume import TissueMasks, Volume3D, load_volume, save_volume

log = logging.getLogger("iqt")

LOCK_NAME = ".iqt.lock"


# --- small I/O helpers -------------------------------------------------------------


def write_json(path: Path, doc: dict, schema: str) -> None:
    C.validate_json(doc, schema, error=DataError)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing {what}: {path} (run the earlier stage first)") from None


def check_written(path: Path, schema: str) -> None:
    C.validate_json(read_json(path, "manifest"), schema, error=DataError)


def write_pgm(path: Path, image: np.ndarray, vmax: float) -> None:
    """8-bit binary PGM; rows follow the first array axis."""
    scale = 255.0 / vmax if vmax > 0 else 0.0
    pix = np.clip(np.rint(np.asarray(image, dtype=np.float64) * scale), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive lock file so two commands never write the same directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out} is locked by another iqt command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def thread_limit():
    value = os.environ.get("IQT_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"IQT_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _save(vol: Volume3D, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(vol, path)


def _subject_name(sid: int) -> str:
    return f"subject_{sid:03d}"


def _load_cohort(out: Path) -> dict:
    return read_json(out / "cohort" / "manifest.json", "cohort manifest")


def _load_subject(out: Path, rec: dict):
    hi = load_volume(out / "cohort" / rec["high"])
    masks = load_volume(out / "cohort" / rec["masks"])
    if not isinstance(masks, TissueMasks):
        raise DataError(f"{rec['masks']} does not hold tissue masks")
    return hi, masks


def _snr_mode(cfg: dict, mode: str):
    if mode == "fixed":
        return SnrSample(*(float(v) for v in cfg["sim"]["fixed_snr"]))
    return C.snr_prior(cfg)


# --- commands ----------------------------------------------------------------------


def cmd_phantom(cfg: dict, out: Path) -> None:
    p = cfg["phantom"]
    labels = C.split_labels(p["n_subjects"], p["split"])
    seed = C.stage_seed(cfg["seed"], "phantom")
    cohort = generate_cohort(p["n_subjects"], C.phantom_config(cfg), seed)
    scale = max(float(v.data.max()) for v, _ in cohort)
    if not scale > 0:
        raise DataError("phantom cohort is empty (maximum intensity is zero)")
    subjects = []
    for sid, ((vol, masks), label) in enumerate(zip(cohort, labels)):
        name = _subject_name(sid)
        _save(vol.with_data(vol.data / scale), out / "cohort" / f"{name}_high.iqtv")
        _save(masks, out / "cohort" / f"{name}_masks.iqtv")
        subjects.append({"id": sid, "split": label, "high": f"{name}_high.iqtv", "masks": f"{name}_masks.iqtv"})
    tr, va, ev = C.split_counts(p["n_subjects"], p["split"])
    write_json(out / "cohort" / "manifest.json", {
        "seed": seed,
        "dims": list(p["dims"]),
        "split_proportions": list(p["split"]),
        "split_counts": {"train": tr, "val": va, "eval": ev},
        "normalization": {"method": "cohort_max", "scale": scale},
        "subjects": subjects,
    }, "cohort.schema.json")
    log.info("phantom: %d subjects (%d/%d/%d) -> %s", len(subjects), tr, va, ev, out / "cohort")


def cmd_simulate(cfg: dict, out: Path) -> None:
    cohort = _load_cohort(out)
    s = cfg["sim"]
    simcfg = C.sim_config(cfg)
    seed = C.stage_seed(cfg["seed"], "simulate")
    records = []
    for rec in cohort["subjects"]:
        hi, masks = _load_subject(out, rec)
        is_eval = rec["split"] == "eval"
        mode_name = s["eval_mode"] if is_eval else s["mode"]
        n_real = 1 if is_eval else s["n_aug"]
        mode = _snr_mode(cfg, mode_name)
        rng = np.random.default_rng([seed, rec["id"]])
        reals = []
        for j in range(n_real):
            res = simulate(hi, masks, simcfg, mode, rng)
            fname = f"{_subject_name(rec['id'])}_aug_{j:02d}_low.iqtv"
            _save(res.noisy, out / "lowfield" / fname)
            reals.append({
                "aug": j,
                "file": fname,
                "snr_low": [res.snr_low.snr_wm, res.snr_low.snr_gm],
                "snr_high": [float(v) for v in res.snr_high],
            })
        records.append({"id": rec["id"], "split": rec["split"], "mode": mode_name, "realizations": reals})
    write_json(out / "lowfield" / "provenance.json", {
        "seed": seed,
        "k": s["k"],
        "sigma_x": s["sigma_x"],
        "sigma_y": s["sigma_y"],
        "n_aug": s["n_aug"],
        "subjects": records,
    }, "provenance.schema.json")
    log.info("simulate: %d subjects -> %s", len(records), out / "lowfield")


def _subject_library(out: Path, cfg: dict, rec: dict, prov: dict) -> PatchLibrary:
    spec = C.patch_spec(cfg)
    hi, _ = _load_subject(out, rec)
    # background is judged on the noiseless decimated volume so every realisation keeps the same origins
    ref = downsample_z(hi, spec.k, simulation_kernel(C.sim_config(cfg), hi.sz))
    origins = kept_origins(ref, spec)
    lib = PatchLibrary(spec, [], M=len(origins), N=len(prov["realizations"]))
    for r in prov["realizations"]:
        lo = load_volume(out / "lowfield" / r["file"])
        part = extract_pairs(lo, hi, spec, subject_id=rec["id"], augmentation_id=r["aug"], origins=origins)
        lib.pairs.extend(part.pairs)
    return lib


def cmd_patchify(cfg: dict, out: Path) -> None:
    cohort = _load_cohort(out)
    prov = {r["id"]: r for r in read_json(out / "lowfield" / "provenance.json", "simulation provenance")["subjects"]}
    spec = C.patch_spec(cfg)
    seed = C.stage_seed(cfg["seed"], "patchify")
    rng = np.random.default_rng(seed)
    for split in ("train", "val"):
        lib = PatchLibrary(spec, [], 0, cfg["sim"]["n_aug"])
        for rec in cohort["subjects"]:
            if rec["split"] != split:
                continue
            if rec["id"] not in prov:
                raise DataError(f"subject {rec['id']} has no simulated low-field volume")
            part = _subject_library(out, cfg, rec, prov[rec["id"]])
            lib = PatchLibrary(spec, lib.pairs + part.pairs, lib.M + part.M, part.N)
        if split == "train" and cfg["patches"]["subsample"] < 1:
            lib = subsample(lib, cfg["patches"]["subsample"], rng)
        if len(lib) == 0:
            raise DataError(f"{split} patch library is empty (all patches rejected as background?)")
        save_library(lib, out / "patches" / split, seeds={"patchify": seed})
        check_written(out / "patches" / split / "manifest.json", "library.schema.json")
        log.info("patchify: %s library %d pairs (M=%d, N=%d)", split, len(lib), lib.M, lib.N)


def cmd_train(cfg: dict, out: Path) -> None:
    tr = load_library(out / "patches" / "train")
    va = load_library(out / "patches" / "val")
    spec = C.network_spec(cfg)
    if tr.spec != C.patch_spec(cfg):
        raise ConfigError("patch library was built with a different patch configuration")
    seed = C.stage_seed(cfg["seed"], "train")
    net = build_network(spec)
    store, history = train(net, tr, va, C.train_config(cfg, seed),
                           log=lambda r: log.info("train: epoch %(epoch)d train %(train_loss).5f val %(val_loss).5f", r))
    store.save(out / "model", graph_spec=net.spec)
    check_written(out / "model" / "manifest.json", "checkpoint.schema.json")
    history.update({"seed": seed, "n_train": len(tr), "n_val": len(va)})
    write_json(out / "model" / "history.json", history, "history.schema.json")


def _load_model(out: Path):
    store, graph_spec = ParamStore.load(out / "model")
    net = build_network(NetworkSpec(**graph_spec))
    store.check_against(net)
    return net, store


def cmd_infer(cfg: dict, out: Path) -> None:
    cohort = _load_cohort(out)
    prov = {r["id"]: r for r in read_json(out / "lowfield" / "provenance.json", "simulation provenance")["subjects"]}
    k = cfg["sim"]["k"]
    spec = C.patch_spec(cfg)
    model = _load_model(out) if "network" in cfg["eval"]["methods"] else None
    for rec in cohort["subjects"]:
        if rec["split"] != "eval":
            continue
        lo = load_volume(out / "lowfield" / prov[rec["id"]]["realizations"][0]["file"])
        for method in cfg["eval"]["methods"]:
            if method == "spline":
                pred = upsample_z_bspline(lo, k)
            else:
                pred = infer_volume(model[0], model[1], lo, spec, cfg["train"]["batch_size"])
            _save(pred, out / "predictions" / method / f"{_subject_name(rec['id'])}.iqtv")
        log.info("infer: subject %d (%s)", rec["id"], ", ".join(cfg["eval"]["methods"]))


def _json_number(x: float):
    return "inf" if math.isinf(x) else x


def cmd_evaluate(cfg: dict, out: Path) -> None:
    cohort = _load_cohort(out)
    e = cfg["eval"]
    params = C.ssim_params(cfg)
    peak = None if e["peak"] == "reference_max" else float(e["peak"])
    methods = {}
    for method in e["methods"]:
        rows = []
        for rec in cohort["subjects"]:
            if rec["split"] != "eval":
                continue
            gt, _ = _load_subject(out, rec)
            path = out / "predictions" / method / f"{_subject_name(rec['id'])}.iqtv"
            if not path.exists():
                raise DataError(f"missing prediction {path} (run infer first)")
            pred = load_volume(path)
            rows.append({"id": rec["id"], "psnr": _json_number(psnr(gt, pred, peak)), "mssim": mssim(gt, pred, params)})
            if e["export_pgm"]:
                _export_slices(out / "pgm", f"{method}_{_subject_name(rec['id'])}", pred, float(gt.data.max()))
                _export_slices(out / "pgm", f"truth_{_subject_name(rec['id'])}", gt, float(gt.data.max()))
        ps = [math.inf if r["psnr"] == "inf" else r["psnr"] for r in rows]
        methods[method] = {
            "subjects": rows,
            "mean_psnr": _json_number(float(np.mean(ps))),
            "mean_mssim": float(np.mean([r["mssim"] for r in rows])),
        }
        log.info("evaluate: %s mean PSNR %s, MSSIM %.4f", method, methods[method]["mean_psnr"], methods[method]["mean_mssim"])
    write_json(out / "metrics.json", {"peak": e["peak"], "methods": methods}, "metrics.schema.json")


def _export_slices(directory: Path, stem: str, vol: Volume3D, vmax: float) -> None:
    d = vol.data
    write_pgm(directory / f"{stem}_axial.pgm", d[:, :, d.shape[2] // 2].T, vmax)
    write_pgm(directory / f"{stem}_coronal.pgm", d[:, d.shape[1] // 2, :].T, vmax)
    write_pgm(directory / f"{stem}_sagittal.pgm", d[d.shape[0] // 2, :, :].T, vmax)


def _metric_values(rows: List[dict], metric: str) -> Dict[int, float]:
    return {r["id"]: (math.inf if r[metric] == "inf" else float(r[metric])) for r in rows}


def cmd_compare(cfg: dict, out: Path) -> None:
    metrics = read_json(out / "metrics.json", "metrics")
    a_name, b_name = cfg["eval"]["compare"]
    for m in (a_name, b_name):
        if m not in metrics["methods"]:
            raise DataError(f"method {m!r} has no metrics (evaluate it first)")
    tests = {}
    for metric in ("psnr", "mssim"):
        a = _metric_values(metrics["methods"][a_name]["subjects"], metric)
        b = _metric_values(metrics["methods"][b_name]["subjects"], metric)
        ids = sorted(set(a) & set(b))
        # equal pairs (including two identical-volume sentinels) are zero differences
        xa = [0.0 if a[i] == b[i] else a[i] for i in ids]
        xb = [0.0 if a[i] == b[i] else b[i] for i in ids]
        res = wilcoxon_signed_rank(xa, xb)
        tests[metric] = {
            "statistic": res.statistic, "p_value": res.p_value, "n": res.n,
            "w_plus": res.w_plus, "w_minus": res.w_minus, "exact": res.exact,
        }
        log.info("compare: %s %s vs %s: W=%g p=%.4g (n=%d)", metric, a_name, b_name, res.statistic, res.p_value, res.n)
    write_json(out / "compare.json", {"methods": [a_name, b_name], "tests": tests}, "compare.schema.json")


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "patchify": cmd_patchify,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iqt", description="Low-field to high-field MRI quality transfer on phantoms.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration (JSON)")
    parser.add_argument("--out", help="output directory (default: paths.work_dir from the config)")
    parser.add_argument("--seed", type=int, help="global seed, overrides the config")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = C.load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg["seed"] = args.seed
        out = Path(args.out or cfg["paths"]["work_dir"])
        with thread_limit(), output_lock(out):
            COMMANDS[args.command](cfg, out)
    except IQTError as exc:
        print(f"iqt {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"iqt {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
