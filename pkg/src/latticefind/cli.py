"""Command-line front end: estimate-lattice, detect, simulate, sweep, evaluate.

Exit codes: 0 success, 1 usage error, 2 estimation failure, 3 I/O or file
format error.  Diagnostics go to stderr; machine output goes only to the
declared files (or stdout when no --out is given).  Every run that writes
a primary output file also writes a manifest recording the resolved
configuration, the package version, and sha256 digests of inputs and
outputs.  Manifests record only value-determining configuration, never
runtime knobs like --threads or output locations, so reruns of the same
semantic job produce byte-identical artifact trees.

A JSON config file (flat key-value, keys matching long flag names) can
seed any subcommand's defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import io as _stdio
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from . import __version__
from .errors import EstimationFailure, FileFormatError
from .evaluation import DEFAULT_MATCH_TOL, basis_bias, match_atoms
from .imaging import AtomMap, Image, build_design
from .io import (
    read_atoms_csv,
    read_image,
    read_json,
    schema_tag,
    sha256_file,
    validate_payload,
    write_atoms_csv,
    write_bytes_atomic,
    write_image_csv,
    write_image_png,
    write_json_atomic,
    write_text_atomic,
)
from .lattice import LatticeBasis, enumerate_groups
from .simgen import (
    NOISE_GRID,
    VACANCY_COUNTS,
    VACANCY_MODES,
    SimDesign,
    derive_seed,
    make_ground_truth,
)
from .solver import SolverConfig, gomp_thresholding
from .spectral import (
    DEFAULT_MAX_PEAKS,
    DEFAULT_SCALES,
    MAD_MULTIPLIER,
    detect_peaks_doh,
    double_fourier,
    estimate_basis,
    estimate_tau,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "LATTICEFIND_THREADS"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ESTIMATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; the contract is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_ints(text: str, flag: str, count: int | None = None) -> tuple:
    try:
        vals = tuple(int(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ValueError(f"{flag}: expected comma-separated integers, got {text!r}") from exc
    if count is not None and len(vals) != count:
        raise ValueError(f"{flag}: expected {count} integers, got {len(vals)}")
    return vals


def _parse_floats(text: str, flag: str) -> tuple:
    try:
        return tuple(float(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ValueError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc


def _parse_basis(text: str) -> LatticeBasis:
    p1, p2, q1, q2 = _parse_ints(text, "--basis", 4)
    return LatticeBasis((p1, p2), (q1, q2))


def _crop_margin(image: Image, margin: int) -> Image:
    if margin < 0:
        raise ValueError(f"--margin must be >= 0, got {margin}")
    if margin == 0:
        return image
    if 2 * margin >= min(image.rows, image.cols):
        raise ValueError(
            f"--margin {margin} leaves no pixels of a {image.rows}x{image.cols} frame"
        )
    return Image(image.pixels[margin:-margin, margin:-margin])


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _file_entry(path: Path, rel_to: Path) -> dict:
    return {"path": path.relative_to(rel_to).as_posix(), "sha256": sha256_file(path)}


def _output_entry(path: Path, manifest_dir: Path) -> dict:
    # outputs are recorded relative to the manifest so artifact trees stay
    # relocatable; inputs keep the caller's spelling
    rel = Path(os.path.relpath(Path(path), manifest_dir)).as_posix()
    return {"path": rel, "sha256": sha256_file(path)}


def _input_entry(path: Path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def _write_manifest(
    path: Path,
    command: str,
    config: dict,
    inputs: list,
    outputs: list,
    extra: dict | None = None,
) -> None:
    payload = {
        "schema": schema_tag("manifest"),
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs, key=lambda e: e["path"]),
    }
    if extra is not None:
        payload["extra"] = extra
    validate_payload(payload, "manifest")
    write_json_atomic(path, payload)


def _emit_json(payload: dict, out: Path | None) -> None:
    if out is None:
        print(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))
    else:
        write_json_atomic(out, payload)


def _resolve_threads(value: int | None) -> int:
    if value is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"threads must be >= 1, got {value}")
    return value


def _map_tasks(fn, tasks: list, threads: int) -> list:
    """Run independent tasks, preserving input order regardless of workers."""
    if threads == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- estimate


def _spectral_stage(image: Image, args) -> tuple:
    """Run spectrum -> peaks -> basis -> tau with the CLI's spectral knobs."""
    scales = _parse_floats(args.scales, "--scales") if args.scales else DEFAULT_SCALES
    spectrum = double_fourier(image)
    peaks = detect_peaks_doh(
        spectrum, scales=scales, max_peaks=args.max_peaks, mad_mult=args.mad_mult
    )
    basis = estimate_basis(peaks)
    tau = estimate_tau(spectrum, peaks)
    return spectrum, peaks, basis, tau


def _spectral_config(args) -> dict:
    return {
        "scales": list(_parse_floats(args.scales, "--scales") if args.scales else DEFAULT_SCALES),
        "max_peaks": args.max_peaks,
        "mad_mult": args.mad_mult,
        "margin": args.margin,
    }


def cmd_estimate_lattice(args) -> int:
    image_path = Path(args.image)
    frame = _crop_margin(read_image(image_path), args.margin)
    spectrum, peaks, basis, tau = _spectral_stage(frame, args)

    payload = {
        "schema": schema_tag("lattice"),
        "p": list(basis.p),
        "q": list(basis.q),
        "tau": tau,
        "peaks": [
            {
                "x": pk.location[0],
                "y": pk.location[1],
                "scale": pk.scale,
                "strength": pk.strength,
            }
            for pk in peaks
        ],
    }
    validate_payload(payload, "lattice")
    out = Path(args.out) if args.out else None
    _emit_json(payload, out)

    outputs = []
    if out is not None:
        outputs.append(out)
    if args.spectrum_csv:
        spec_path = Path(args.spectrum_csv)
        write_image_csv(spec_path, Image(spectrum.magnitudes))
        outputs.append(spec_path)
    if args.catalog:
        catalog = enumerate_groups(basis, frame.rows, frame.cols)
        groups = []
        for g in catalog.groups:
            entry = {"offset": list(g.offset), "size": int(g.size)}
            if args.full:
                entry["members"] = [[int(m), int(n)] for m, n in g.members]
            groups.append(entry)
        cat_payload = {
            "schema": schema_tag("catalog"),
            "basis": {"p": list(basis.p), "q": list(basis.q)},
            "rows": frame.rows,
            "cols": frame.cols,
            "n_groups": catalog.n_groups,
            "max_group_size": catalog.max_group_size,
            "groups": groups,
        }
        validate_payload(cat_payload, "catalog")
        cat_path = Path(args.catalog)
        write_json_atomic(cat_path, cat_payload)
        outputs.append(cat_path)

    if out is not None:
        manifest = _manifest_path(out)
        _write_manifest(
            manifest,
            "estimate-lattice",
            _spectral_config(args),
            [_input_entry(image_path)],
            [_output_entry(p, manifest.parent) for p in outputs],
        )
    return EXIT_OK


# ------------------------------------------------------------------ detect


def _draw_overlay(path: Path, frame: Image, detected: list, crosses: list) -> None:
    arr = frame.pixels
    vmin, vmax = float(arr.min()), float(arr.max())
    unit = (arr - vmin) / (vmax - vmin) if vmax > vmin else np.zeros_like(arr)
    base = np.round(unit * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(np.stack([base] * 3, axis=-1), mode="RGB")
    draw = ImageDraw.Draw(pil)
    r = 3
    for m, n in detected:
        x, y = n - 1, m - 1
        draw.ellipse([x - r, y - r, x + r, y + r], outline=(255, 214, 0))
    for m, n in crosses:
        x, y = n - 1, m - 1
        draw.line([x - r, y - r, x + r, y + r], fill=(255, 64, 64))
        draw.line([x - r, y + r, x + r, y - r], fill=(255, 64, 64))
    buf = _stdio.BytesIO()
    pil.save(buf, format="PNG")
    write_bytes_atomic(path, buf.getvalue())


def cmd_detect(args) -> int:
    image_path = Path(args.image)
    original = read_image(image_path)
    frame = _crop_margin(original, args.margin)

    basis = _parse_basis(args.basis) if args.basis else None
    tau = args.tau
    if tau is not None and not (math.isfinite(tau) and tau > 0):
        raise ValueError(f"--tau must be positive, got {tau}")
    if basis is None or tau is None:
        _, _, basis_est, tau_est = _spectral_stage(frame, args)
        basis = basis or basis_est
        tau = tau if tau is not None else tau_est

    catalog = enumerate_groups(basis, frame.rows, frame.cols)
    design = build_design(tau * tau, frame.rows, frame.cols)
    config = SolverConfig(
        c=args.c,
        q_mult=args.q_mult,
        max_iters=args.max_iters,
        ridge=args.ridge,
        normalize_marginal=not args.no_normalize_marginal,
        min_gain=args.min_gain,
    )
    result = gomp_thresholding(frame, design, catalog, config)

    # Atom sites are reported in the original frame's coordinates.
    atoms = [
        {"m": m + args.margin, "n": n + args.margin, "alpha": alpha}
        for (m, n), alpha in result.atoms.items_sorted()
    ]
    payload = {
        "schema": schema_tag("result"),
        "atoms": atoms,
        "basis": {"p": list(basis.p), "q": list(basis.q)},
        "tau": float(tau),
        "sigma_hat": result.sigma_hat,
        "iterations": result.trace.iterations,
        "termination": result.trace.termination,
    }
    validate_payload(payload, "result")
    out = Path(args.out) if args.out else None
    _emit_json(payload, out)

    outputs = []
    if out is not None:
        outputs.append(out)
    if args.trace:
        trace_payload = {
            "schema": schema_tag("trace"),
            "termination": result.trace.termination,
            "iterations": result.trace.iterations,
            "records": [
                {
                    "iteration": rec.iteration,
                    "group": rec.group,
                    "offset": list(rec.offset),
                    "gain": rec.gain,
                    "loss_before": rec.loss_before,
                    "loss_after": rec.loss_after,
                    "cost_before": rec.cost_before,
                    "cost_after": rec.cost_after,
                    "nnz_marginal": rec.nnz_marginal,
                    "sigma_hat": rec.sigma_hat,
                    "delta_k": rec.delta_k,
                    "j_star": rec.j_star,
                    "rho": rec.rho,
                    "nnz_kept": rec.nnz_kept,
                    "threshold_fallback": rec.threshold_fallback,
                    "del_curve": list(rec.del_curve),
                }
                for rec in result.trace.records
            ],
        }
        validate_payload(trace_payload, "trace")
        trace_path = Path(args.trace)
        write_json_atomic(trace_path, trace_payload)
        outputs.append(trace_path)

    inputs = [_input_entry(image_path)]
    if args.overlay:
        detected = [(a["m"], a["n"]) for a in atoms]
        crosses = []
        if args.truth:
            truth_path = Path(args.truth)
            truth = read_atoms_csv(truth_path, original.rows, original.cols)
            shifted = AtomMap(
                original.rows,
                original.cols,
                {(a["m"], a["n"]): a["alpha"] for a in atoms},
            )
            crosses = list(match_atoms(truth, shifted, args.tol).false_positives)
            inputs.append(_input_entry(truth_path))
        overlay_path = Path(args.overlay)
        _draw_overlay(overlay_path, original, detected, crosses)
        outputs.append(overlay_path)

    if out is not None:
        solver_config = {
            "c": args.c,
            "q_mult": args.q_mult,
            "max_iters": args.max_iters,
            "ridge": args.ridge,
            "normalize_marginal": not args.no_normalize_marginal,
            "min_gain": args.min_gain,
            "tau": args.tau,
            "basis": args.basis,
            "tol": args.tol,
        }
        manifest = _manifest_path(out)
        _write_manifest(
            manifest,
            "detect",
            {**_spectral_config(args), **solver_config},
            inputs,
            [_output_entry(p, manifest.parent) for p in outputs],
        )
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _design_payload(design: SimDesign) -> dict:
    return {
        "rows": design.rows,
        "cols": design.cols,
        "p": list(design.basis.p),
        "q": list(design.basis.q),
        "origin": list(design.origin),
        "extent": list(design.extent),
        "tau": design.tau,
        "vacancy_count": design.vacancy_count,
        "vacancy_mode": design.vacancy_mode,
        "noise_var": design.noise_var,
    }


def _write_replicate(
    rep_dir: Path,
    design: SimDesign,
    rep_seed: int,
    seed_trail: dict,
    png: bool,
) -> Path:
    """Write one replicate's artifacts; returns the replicate manifest path."""
    truth = make_ground_truth(replace(design, seed=rep_seed))
    image_csv = rep_dir / "image.csv"
    truth_csv = rep_dir / "truth.csv"
    write_image_csv(image_csv, truth.noisy)
    write_atoms_csv(truth_csv, truth.atoms)
    outputs = [image_csv, truth_csv]
    extra = {
        "n_atoms": truth.atoms.nnz,
        "signal_variance": truth.signal_variance,
        "vacancies": [[m, n] for m, n in truth.vacancies],
    }
    if png:
        png_path = rep_dir / "image.png"
        vmin, vmax = write_image_png(png_path, truth.noisy, bit_depth=16, rescale=True)
        outputs.append(png_path)
        extra["png_scale"] = [vmin, vmax]

    manifest = rep_dir / "manifest.json"
    _write_manifest(
        manifest,
        "simulate",
        {**_design_payload(design), "seed": rep_seed, **seed_trail},
        [],
        [_file_entry(p, rep_dir) for p in outputs],
        extra=extra,
    )
    return manifest


def _simulate_design(args) -> SimDesign:
    return SimDesign(
        rows=args.rows,
        cols=args.cols,
        basis=_parse_basis(args.basis) if args.basis else LatticeBasis((6, 0), (0, 6)),
        origin=tuple(_parse_ints(args.origin, "--origin", 2)),
        extent=tuple(_parse_ints(args.extent, "--extent", 2)),
        tau=args.tau,
        vacancy_count=args.vacancies,
        vacancy_mode=args.mode,
        noise_var=args.noise_var,
        seed=args.seed,
    )


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise ValueError(f"--reps must be >= 1, got {args.reps}")
    design = _simulate_design(args)
    out_dir = Path(args.out_dir)
    threads = _resolve_threads(args.threads)
    tasks = [
        (
            out_dir / f"rep{r:02d}",
            design,
            derive_seed(args.seed, r),
            {"master_seed": args.seed, "rep_index": r},
        )
        for r in range(args.reps)
    ]
    manifests = _map_tasks(
        lambda t: _write_replicate(t[0], t[1], t[2], t[3], args.png), tasks, threads
    )
    _write_manifest(
        out_dir / "manifest.json",
        "simulate",
        {**_design_payload(design), "master_seed": args.seed, "reps": args.reps, "png": args.png},
        [],
        [_file_entry(p, out_dir) for p in manifests],
    )
    return EXIT_OK


# ------------------------------------------------------------------- sweep


def cmd_sweep(args) -> int:
    if args.reps < 1:
        raise ValueError(f"--reps must be >= 1, got {args.reps}")
    counts = _parse_ints(args.counts, "--counts") if args.counts else VACANCY_COUNTS
    modes = tuple(m.strip() for m in args.modes.split(",")) if args.modes else VACANCY_MODES
    noise_grid = _parse_floats(args.noise_grid, "--noise-grid") if args.noise_grid else NOISE_GRID
    for mode in modes:
        if mode not in VACANCY_MODES:
            raise ValueError(f"--modes: unknown vacancy mode {mode!r}")
    threads = _resolve_threads(args.threads)
    out_dir = Path(args.out_dir)

    # Cell order is fixed (count-major, then mode, then noise level) so the
    # derived per-replicate seeds do not depend on flag spelling.
    cells = [
        (count, mode, var) for count in counts for mode in modes for var in noise_grid
    ]
    tasks = []
    for ci, (count, mode, var) in enumerate(cells):
        cell_dir = out_dir / f"c{count}_{mode}_v{var:.2f}"
        design = SimDesign(
            vacancy_count=count, vacancy_mode=mode, noise_var=var, seed=args.seed
        )
        for r in range(args.reps):
            tasks.append(
                (
                    cell_dir / f"rep{r:02d}",
                    design,
                    derive_seed(args.seed, ci, r),
                    {"master_seed": args.seed, "cell_index": ci, "rep_index": r},
                )
            )

    manifests = _map_tasks(
        lambda t: _write_replicate(t[0], t[1], t[2], t[3], args.png), tasks, threads
    )
    _write_manifest(
        out_dir / "manifest.json",
        "sweep",
        {
            "master_seed": args.seed,
            "reps": args.reps,
            "counts": list(counts),
            "modes": list(modes),
            "noise_grid": list(noise_grid),
            "png": args.png,
        },
        [],
        [_file_entry(p, out_dir) for p in manifests],
    )
    logger.info("sweep wrote %d replicates in %d cells", len(tasks), len(cells))
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def _truth_dims(manifest: dict | None, truth_sites: list, result: dict) -> tuple[int, int]:
    if manifest is not None:
        cfg = manifest.get("config", {})
        if "rows" in cfg and "cols" in cfg:
            return int(cfg["rows"]), int(cfg["cols"])
    best_m = max([m for m, _ in truth_sites] + [a["m"] for a in result["atoms"]] + [1])
    best_n = max([n for _, n in truth_sites] + [a["n"] for a in result["atoms"]] + [1])
    return best_m, best_n


def _read_truth_csv_sites(path: Path) -> list:
    # Light pre-parse just to size the AtomMap; full parsing happens after.
    sites = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) == 3:
                try:
                    sites.append((int(parts[0]), int(parts[1])))
                except ValueError:
                    continue
    return sites


def _score_pair(pair_id: str, result_path: Path, truth_path: Path, tol: float) -> dict:
    try:
        result = read_json(result_path)
        validate_payload(result, "result")
    except Exception as exc:  # corrupt artifacts become failed rows, not crashes
        logger.warning("%s: unreadable result: %s", pair_id, exc)
        return {
            "id": pair_id,
            "failed": True,
            "fp": 0,
            "fn": 0,
            "matched": 0,
            "n_detected": 0,
            "n_truth": 0,
            "bias": None,
        }
    manifest = None
    manifest_path = truth_path.parent / "manifest.json"
    if manifest_path.is_file():
        try:
            manifest = read_json(manifest_path)
        except (OSError, json.JSONDecodeError):
            manifest = None

    sites = _read_truth_csv_sites(truth_path)
    rows, cols = _truth_dims(manifest, sites, result)
    truth = read_atoms_csv(truth_path, rows, cols)
    detected = AtomMap(rows, cols, {(a["m"], a["n"]): a["alpha"] for a in result["atoms"]})
    match = match_atoms(truth, detected, tol)

    bias = None
    if manifest is not None:
        cfg = manifest.get("config", {})
        if "p" in cfg and "q" in cfg:
            est = LatticeBasis(tuple(result["basis"]["p"]), tuple(result["basis"]["q"]))
            true_basis = LatticeBasis(tuple(cfg["p"]), tuple(cfg["q"]))
            bias = basis_bias(est, true_basis)
    return {
        "id": pair_id,
        "failed": False,
        "fp": match.fp,
        "fn": match.fn,
        "matched": len(match.pairs),
        "n_detected": detected.nnz,
        "n_truth": truth.nnz,
        "bias": bias,
    }


def cmd_evaluate(args) -> int:
    if bool(args.root) == bool(args.result):
        raise ValueError("evaluate needs exactly one of --root or --result/--truth")
    pairs = []
    if args.result:
        if not args.truth:
            raise ValueError("--result requires --truth")
        pairs.append((Path(args.result).stem, Path(args.result), Path(args.truth)))
    else:
        root = Path(args.root)
        for result_path in sorted(root.rglob("result.json")):
            truth_path = result_path.parent / "truth.csv"
            if truth_path.is_file():
                pair_id = result_path.parent.relative_to(root).as_posix()
                pairs.append((pair_id, result_path, truth_path))
        if not pairs:
            raise FileFormatError(f"{root}: no result.json + truth.csv pairs found")

    rows = [_score_pair(pid, rp, tp, args.tol) for pid, rp, tp in pairs]
    ok = [r for r in rows if not r["failed"]]
    biased = [r["bias"] for r in ok if r["bias"] is not None]

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    payload = {
        "schema": schema_tag("report"),
        "tol": args.tol,
        "n_rows": len(rows),
        "n_failures": sum(1 for r in rows if r["failed"]),
        "mean_fp": mean([r["fp"] for r in ok]),
        "mean_fn": mean([r["fn"] for r in ok]),
        "mean_total_error": mean([r["fp"] + r["fn"] for r in ok]),
        "frac_exact": (
            sum(1 for r in ok if r["fp"] + r["fn"] == 0) / len(ok) if ok else None
        ),
        "mean_bias": mean(biased),
        "frac_bias_zero": (
            sum(1 for b in biased if b == 0.0) / len(biased) if biased else None
        ),
        "rows": rows,
    }
    validate_payload(payload, "report")
    out = Path(args.out) if args.out else None
    _emit_json(payload, out)

    outputs = []
    if out is not None:
        outputs.append(out)
    if args.csv:
        lines = ["id,failed,fp,fn,matched,n_detected,n_truth,bias"]
        for r in rows:
            bias = "" if r["bias"] is None else f"{r['bias']:.17g}"
            lines.append(
                f"{r['id']},{int(r['failed'])},{r['fp']},{r['fn']},"
                f"{r['matched']},{r['n_detected']},{r['n_truth']},{bias}"
            )
        csv_path = Path(args.csv)
        write_text_atomic(csv_path, "\n".join(lines) + "\n")
        outputs.append(csv_path)

    if out is not None:
        _write_manifest(
            _manifest_path(out),
            "evaluate",
            {"tol": args.tol},
            [_input_entry(rp) for _, rp, _ in pairs] + [_input_entry(tp) for _, _, tp in pairs],
            [_input_entry(p) for p in outputs],
        )
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE", help="JSON config file with flag defaults")
    sub.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help=f"worker threads (default: ${THREADS_ENV} or 1); results are invariant to it",
    )
    sub.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug (stderr)"
    )


def _add_spectral_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--scales", metavar="S1,S2,...", help="blob detection scale grid (px)")
    sub.add_argument("--max-peaks", type=int, default=DEFAULT_MAX_PEAKS, metavar="N")
    sub.add_argument(
        "--mad-mult",
        type=float,
        default=MAD_MULTIPLIER,
        metavar="X",
        help="peak threshold is median + X*MAD of the response stack",
    )
    sub.add_argument(
        "--margin",
        type=int,
        default=0,
        metavar="PX",
        help="ignore a border of this many pixels during analysis",
    )


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="latticefind", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    by_name = {}

    est = subparsers.add_parser(
        "estimate-lattice", help="estimate lattice basis and spot width from an image"
    )
    est.add_argument("--image", required=True, metavar="PATH", help="input frame (.png or .csv)")
    est.add_argument("--out", metavar="PATH", help="lattice JSON (stdout when omitted)")
    est.add_argument("--spectrum-csv", metavar="PATH", help="dump the spectrum magnitudes")
    est.add_argument("--catalog", metavar="PATH", help="export the group catalog JSON")
    est.add_argument(
        "--full", action="store_true", help="include group members in the catalog export"
    )
    _add_spectral_flags(est)
    _add_common(est)
    est.set_defaults(func=cmd_estimate_lattice)
    by_name["estimate-lattice"] = est

    det = subparsers.add_parser("detect", help="detect atoms and vacancies in an image")
    det.add_argument("--image", required=True, metavar="PATH")
    det.add_argument("--tau", type=float, default=None, metavar="X", help="spot width (estimated when omitted)")
    det.add_argument(
        "--basis",
        metavar="P1,P2,Q1,Q2",
        help="lattice basis vectors (estimated when omitted)",
    )
    det.add_argument("--c", type=float, default=None, metavar="X", help="description-cost budget")
    det.add_argument("--q-mult", type=float, default=1.0, metavar="X", help="threshold multiplier q")
    det.add_argument("--max-iters", type=int, default=None, metavar="N")
    det.add_argument("--min-gain", type=float, default=0.0, metavar="X")
    det.add_argument("--ridge", type=float, default=0.0, metavar="X")
    det.add_argument(
        "--no-normalize-marginal",
        action="store_true",
        help="use raw inner products as marginal coefficients",
    )
    det.add_argument("--out", metavar="PATH", help="result JSON (stdout when omitted)")
    det.add_argument("--trace", metavar="PATH", help="write the solver iteration trace")
    det.add_argument("--overlay", metavar="PATH", help="write a PNG with detections circled")
    det.add_argument(
        "--truth", metavar="PATH", help="truth atoms CSV; overlay marks false positives as crosses"
    )
    det.add_argument("--tol", type=float, default=DEFAULT_MATCH_TOL, metavar="PX")
    _add_spectral_flags(det)
    _add_common(det)
    det.set_defaults(func=cmd_detect)
    by_name["detect"] = det

    sim = subparsers.add_parser("simulate", help="generate benchmark replicates of one design")
    sim.add_argument("--out-dir", required=True, metavar="DIR")
    sim.add_argument("--reps", type=int, default=1, metavar="N")
    sim.add_argument("--seed", type=int, default=0, metavar="N")
    sim.add_argument("--rows", type=int, default=75)
    sim.add_argument("--cols", type=int, default=75)
    sim.add_argument("--basis", metavar="P1,P2,Q1,Q2", help="default 6,0,0,6")
    sim.add_argument("--origin", default="5,5", metavar="M,N")
    sim.add_argument("--extent", default="11,11", metavar="A,B")
    sim.add_argument("--tau", type=float, default=2.45)
    sim.add_argument("--vacancies", type=int, default=5, metavar="N")
    sim.add_argument("--mode", default="uniform", choices=VACANCY_MODES)
    sim.add_argument("--noise-var", type=float, default=0.05, metavar="X")
    sim.add_argument("--png", action="store_true", help="also write 16-bit PNG frames")
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)
    by_name["simulate"] = sim

    swp = subparsers.add_parser("sweep", help="generate the full benchmark design grid")
    swp.add_argument("--out-dir", required=True, metavar="DIR")
    swp.add_argument("--seed", type=int, default=0, metavar="N")
    swp.add_argument("--reps", type=int, default=5, metavar="N")
    swp.add_argument("--counts", metavar="N1,N2,...", help=f"default {','.join(map(str, VACANCY_COUNTS))}")
    swp.add_argument("--modes", metavar="M1,M2,...", help=f"default {','.join(VACANCY_MODES)}")
    swp.add_argument("--noise-grid", metavar="V1,V2,...", help="default the 11-level grid")
    swp.add_argument("--png", action="store_true", help="also write 16-bit PNG frames")
    _add_common(swp)
    swp.set_defaults(func=cmd_sweep)
    by_name["sweep"] = swp

    ev = subparsers.add_parser("evaluate", help="score detection results against ground truth")
    ev.add_argument("--result", metavar="PATH", help="one result JSON (requires --truth)")
    ev.add_argument("--truth", metavar="PATH", help="truth atoms CSV for --result")
    ev.add_argument(
        "--root", metavar="DIR", help="scan for result.json + truth.csv pairs under a tree"
    )
    ev.add_argument("--tol", type=float, default=DEFAULT_MATCH_TOL, metavar="PX")
    ev.add_argument("--out", metavar="PATH", help="report JSON (stdout when omitted)")
    ev.add_argument("--csv", metavar="PATH", help="flat per-replicate CSV")
    _add_common(ev)
    ev.set_defaults(func=cmd_evaluate)
    by_name["evaluate"] = ev

    return parser, by_name


def _apply_config_file(argv: list, by_name: dict) -> None:
    """Seed subparser defaults from --config FILE before the real parse."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    if command not in by_name:
        return  # argparse will report the usage error
    try:
        data = read_json(Path(path))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON config: {exc}") from exc
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: config must be a flat JSON object")
    sub = by_name[command]
    dests = {action.dest for action in sub._actions}
    mapped = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("help", "config", "func") or dest not in dests:
            raise ValueError(f"config file key {key!r} is not a flag of {command!r}")
        mapped[dest] = value
    sub.set_defaults(**mapped)


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, by_name = build_parser()
    try:
        _apply_config_file(argv, by_name)
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s")
        return args.func(args)
    except EstimationFailure as exc:
        print(f"latticefind: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    # FileFormatError subclasses ValueError, so it must be tested first.
    except (FileFormatError, OSError) as exc:
        print(f"latticefind: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"latticefind: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
