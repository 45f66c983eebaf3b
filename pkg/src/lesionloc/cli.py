"""Batch command-line front end.

Subcommands: parse-report, sectors, correct, eval, simulate. Machine-readable
results (JSON) go to standard output; progress and notes go to standard
error. Exit codes: 0 success, 1 usage, 2 data error, 3 no case succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema

from . import label_correction, metrics, report_parser, sector_map, synthgen
from .label_correction import CorrectionMethod
from .lesion_ops import ensemble_mean, mask_components, threshold_components
from .volume import Volume3D, VolumeKind, atomic_write_bytes, load_volume, save_volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ALL_FAILED = 3

DEFAULT_SETTINGS = {
    "connectivity": 26,
    "match": "overlap",
    "assignment": "greedy",
    "base_at": "+z",
    "midline_fraction": 0.25,
    "threshold": 0.5,
    "froc_thresholds": None,  # None -> metrics.default_thresholds()
    "min_component_mm3": 0.0,
    "retain_negative_cases": True,
    "min_pirads": 3,
    "region_within_mask": False,
    "sensitivity_target": 0.60,
}

SETTINGS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "connectivity": {"enum": [6, 26]},
        "match": {"enum": ["overlap", "centroid"]},
        "assignment": {"enum": ["greedy", "exhaustive"]},
        "base_at": {"enum": ["+z", "-z"]},
        "midline_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "froc_thresholds": {
            "type": ["array", "null"],
            "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "minItems": 1,
        },
        "min_component_mm3": {"type": "number", "minimum": 0},
        "retain_negative_cases": {"type": "boolean"},
        "min_pirads": {"type": "integer", "minimum": 1, "maximum": 5},
        "region_within_mask": {"type": "boolean"},
        "sensitivity_target": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["cases"],
    "additionalProperties": False,
    "properties": {
        "cases": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "prostate_mask", "probability_maps", "report"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "prostate_mask": {"type": "string"},
                    "probability_maps": {
                        "type": "array",
                        "items": {"type": "string"},
                        "minItems": 1,
                    },
                    "report": {"type": "string"},
                    "gt_mask": {"type": "string"},
                },
            },
        },
        "settings": SETTINGS_SCHEMA,
    },
}


class DataError(Exception):
    """Bad input data; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _note(msg: str) -> None:
    sys.stderr.write(msg + "\n")


def _fail(exc: Exception, code: int = EXIT_DATA) -> int:
    _emit({"error": {"type": type(exc).__name__, "message": str(exc)}})
    return code


def _load_json(path: Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e


def _load_manifest(path: Path) -> dict:
    manifest = _load_json(path)
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DataError(f"manifest invalid: {e.message}") from e
    ids = [c["id"] for c in manifest["cases"]]
    if len(set(ids)) != len(ids):
        raise DataError("manifest case ids are not unique")
    return manifest


def _effective_settings(manifest: dict, args) -> dict:
    """defaults < manifest settings < --config file < explicit flags."""
    cfg = dict(DEFAULT_SETTINGS)
    cfg.update(manifest.get("settings", {}))
    if getattr(args, "config", None):
        file_cfg = _load_json(Path(args.config))
        try:
            jsonschema.validate(file_cfg, SETTINGS_SCHEMA)
        except jsonschema.ValidationError as e:
            raise DataError(f"config invalid: {e.message}") from e
        cfg.update(file_cfg)
    for flag, key in (
        ("connectivity", "connectivity"),
        ("match", "match"),
        ("base_at", "base_at"),
        ("threshold", "threshold"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    try:
        jsonschema.validate(cfg, SETTINGS_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DataError(f"settings invalid: {e.message}") from e
    return cfg


# ---------------------------------------------------------------------------
# parse-report / sectors
# ---------------------------------------------------------------------------


def cmd_parse_report(args) -> int:
    path = Path(args.report)
    try:
        text = path.read_text()
    except OSError as e:
        return _fail(DataError(f"cannot read {path}: {e}"))
    try:
        report = report_parser.parse_report(text)
    except ValueError as e:
        return _fail(e)
    sys.stdout.write(report_parser.report_to_json(report))
    for lineno, reason in report.warnings:
        _note(f"{path.name}:{lineno}: {reason}")
    return EXIT_OK


def cmd_sectors(args) -> int:
    try:
        mask = load_volume(args.mask, kind=VolumeKind.BINARY_MASK)
        grid = sector_map.build_sector_grid(
            mask, base_at_positive_z=(args.base_at or "+z") == "+z"
        )
    except Exception as e:
        return _fail(e)
    sys.stdout.write(grid.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# correct
# ---------------------------------------------------------------------------


def _run_case_correction(
    entry: dict, root: str, out_dir: str, method: str, cfg: dict
) -> dict:
    """Correct one case and write its outputs; returns the case record.

    Module-level so process pools can pickle it.
    """
    root_p = Path(root)
    out_p = Path(out_dir)
    case_id = entry["id"]
    mask = load_volume(root_p / entry["prostate_mask"], kind=VolumeKind.BINARY_MASK)
    maps = [
        load_volume(root_p / p, kind=VolumeKind.PROBABILITY_MAP)
        for p in entry["probability_maps"]
    ]
    prob = ensemble_mean(maps)
    if prob.dims != mask.dims:
        raise DataError(
            f"{case_id}: probability map dims {prob.dims} != mask dims {mask.dims}"
        )
    report = report_parser.parse_report((root_p / entry["report"]).read_text())
    significant = report_parser.significant_lesions(report, min_pirads=cfg["min_pirads"])
    grid = sector_map.build_sector_grid(
        mask, base_at_positive_z=cfg["base_at"] == "+z"
    )
    comps = threshold_components(
        prob,
        cfg["threshold"],
        connectivity=cfg["connectivity"],
        min_volume_mm3=cfg["min_component_mm3"],
    )
    if method == "location":
        result = label_correction.correct_by_location(
            comps,
            significant,
            grid,
            match_mode=cfg["match"],
            assignment=cfg["assignment"],
            midline_fraction=cfg["midline_fraction"],
            within_mask=(mask.data > 0) if cfg["region_within_mask"] else None,
        )
    elif method == "count":
        result = label_correction.correct_by_count(comps, len(significant))
    else:
        result = label_correction.no_correction(comps)

    negative_skipped = (
        not significant
        and method == "location"
        and not cfg["retain_negative_cases"]
    )
    record = {
        "id": case_id,
        "status": "ok",
        "excluded": result.excluded,
        "negative_skipped": negative_skipped,
        "n_kept": len(result.kept),
        "n_removed": len(result.removed),
        "n_report_lesions": len(significant),
        "pseudo_label": None,
        "correction": f"{case_id}_correction.json",
    }
    if not result.excluded and not negative_skipped:
        label = label_correction.make_pseudo_label(result, prob.dims, prob.spacing)
        label_path = out_p / f"{case_id}_pseudo_label.nii.gz"
        save_volume(label, label_path)
        record["pseudo_label"] = label_path.name
    doc = label_correction.result_to_json_dict(result)
    doc["case_id"] = case_id
    doc["negative_skipped"] = negative_skipped
    doc["report_warnings"] = [[ln, reason] for ln, reason in report.warnings]
    atomic_write_bytes(
        out_p / record["correction"],
        (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode(),
    )
    return record


def cmd_correct(args) -> int:
    try:
        manifest_path = Path(args.manifest)
        manifest = _load_manifest(manifest_path)
        cfg = _effective_settings(manifest, args)
    except DataError as e:
        return _fail(e)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = manifest_path.parent
    entries = manifest["cases"]
    records = []
    t0 = time.monotonic()
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(
                    _run_case_correction, e, str(root), str(out_dir), args.method, cfg
                )
                for e in entries
            ]
            for entry, fut in zip(entries, futures):
                exc = fut.exception()
                if exc is None:
                    records.append(fut.result())
                else:
                    records.append(
                        {"id": entry["id"], "status": "failed", "error": str(exc)}
                    )
    else:
        for entry in entries:
            try:
                records.append(
                    _run_case_correction(
                        entry, str(root), str(out_dir), args.method, cfg
                    )
                )
            except Exception as e:
                records.append({"id": entry["id"], "status": "failed", "error": str(e)})
    ok = [r for r in records if r["status"] == "ok"]
    failed = [r for r in records if r["status"] != "ok"]
    # no timestamps in the summary: reruns must be byte-identical
    summary = {
        "method": args.method,
        "settings": cfg,
        "n_cases": len(records),
        "n_succeeded": len(ok),
        "n_failed": len(failed),
        "n_excluded": sum(1 for r in ok if r["excluded"]),
        "n_negative_skipped": sum(1 for r in ok if r.get("negative_skipped")),
        "cases": records,
    }
    atomic_write_bytes(
        out_dir / "summary.json",
        (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode(),
    )
    _note(f"corrected {len(ok)}/{len(records)} cases in {time.monotonic() - t0:.1f}s")
    for r in failed:
        _note(f"case {r['id']} failed: {r['error']}")
    _emit(summary)
    return EXIT_OK if ok else EXIT_ALL_FAILED


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _rebuild_correction(doc: dict, gt: Volume3D, prob: Volume3D, corr_cfg: dict, pred_dir: Path):
    """Reconstruct a written correction result's kept components.

    Retained cases read the emitted pseudo-label mask (distinct threshold
    components are never adjacent, so labeling the mask recovers them
    exactly). Excluded cases have no mask on disk; their kept components are
    rebuilt from the probability map using the recorded match ordinals, so
    the all-case sensitivity can still credit their hits.

    Returns (result, label or None), or None for skipped negative cases.
    """
    if doc.get("negative_skipped"):
        return None
    method = CorrectionMethod(doc["method"])
    if doc["excluded"]:
        comps = threshold_components(
            prob,
            corr_cfg["threshold"],
            connectivity=corr_cfg["connectivity"],
            min_volume_mm3=corr_cfg["min_component_mm3"],
        )
        if method is CorrectionMethod.COUNT_BASED:
            ordinals = list(range(len(doc["kept"])))
            matches = ()
        else:
            matches = tuple(
                (m["report_lesion"], m["component"]) for m in doc["matches"]
            )
            ordinals = [ci for _, ci in matches]
        result = label_correction.CorrectionResult(
            kept=tuple(comps[ci] for ci in ordinals),
            removed=tuple(c for i, c in enumerate(comps) if i not in set(ordinals)),
            matches=matches,
            unmatched_report_lesions=tuple(doc["unmatched_report_lesions"]),
            excluded=True,
            method=method,
        )
        return result, None
    label_path = pred_dir / f"{doc['case_id']}_pseudo_label.nii.gz"
    label = load_volume(label_path, kind=VolumeKind.BINARY_MASK)
    if label.dims != gt.dims:
        raise DataError(
            f"{doc['case_id']}: pseudo label dims {label.dims} != gt dims {gt.dims}"
        )
    result = label_correction.CorrectionResult(
        kept=tuple(mask_components(label)),
        removed=(),
        matches=(),
        unmatched_report_lesions=(),
        excluded=False,
        method=method,
    )
    return result, label


def cmd_eval(args) -> int:
    try:
        manifest_path = Path(args.manifest)
        manifest = _load_manifest(manifest_path)
        cfg = _effective_settings(manifest, args)
        for entry in manifest["cases"]:
            if "gt_mask" not in entry:
                raise DataError(f"case {entry['id']} has no gt_mask; eval needs GT")
    except DataError as e:
        return _fail(e)
    root = manifest_path.parent
    pred_dir = Path(args.pred)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    thresholds = cfg["froc_thresholds"] or metrics.default_thresholds()

    # the settings the predictions were generated with, for faithful rebuilds
    corr_cfg = dict(cfg)
    pred_summary = pred_dir / "summary.json"
    if pred_summary.exists():
        corr_cfg.update(_load_json(pred_summary).get("settings", {}))

    froc_cases = []
    quality_cases = []
    dsc_rows = []
    try:
        for entry in manifest["cases"]:
            case_id = entry["id"]
            gt = load_volume(root / entry["gt_mask"], kind=VolumeKind.BINARY_MASK)
            maps = [
                load_volume(root / p, kind=VolumeKind.PROBABILITY_MAP)
                for p in entry["probability_maps"]
            ]
            prob = ensemble_mean(maps)
            froc_cases.append((gt, prob))
            doc_path = pred_dir / f"{case_id}_correction.json"
            if not doc_path.exists():
                dsc_rows.append((case_id, "missing"))
                _note(f"case {case_id}: no correction result under {pred_dir}")
                continue
            doc = _load_json(doc_path)
            rebuilt = _rebuild_correction(doc, gt, prob, corr_cfg, pred_dir)
            if rebuilt is None:
                dsc_rows.append((case_id, "negative_skipped"))
                continue
            result, label = rebuilt
            dsc_rows.append(
                (case_id, f"{metrics.dsc(gt, label):.6f}" if label else "excluded")
            )
            quality_cases.append((mask_components(gt), result))

        curve = metrics.froc(
            froc_cases,
            thresholds,
            criterion=metrics.ANY_OVERLAP,
            connectivity=cfg["connectivity"],
            min_volume_mm3=cfg["min_component_mm3"],
        )
        strict_rows = metrics.detection_sweep(
            froc_cases,
            thresholds,
            criterion=metrics.iou_above(0.1),
            connectivity=cfg["connectivity"],
            min_volume_mm3=cfg["min_component_mm3"],
        )
    except Exception as e:
        return _fail(e)

    metrics.save_froc_csv(curve, out_dir / "froc.csv")
    atomic_write_bytes(
        out_dir / "froc.json",
        (json.dumps(metrics.froc_to_json(curve), indent=2, sort_keys=True) + "\n").encode(),
    )
    metrics.save_froc_svg({"teacher": curve}, out_dir / "froc.svg")
    with open(out_dir / "froc_strict.csv", "w", newline="") as f:
        f.write("threshold,sensitivity,fp_per_case\n")
        for t, s, fp in strict_rows:
            f.write(f"{t:.6g},{s:.6g},{fp:.6g}\n")
    with open(out_dir / "dsc.csv", "w", newline="") as f:
        f.write("case_id,dsc\n")
        for case_id, value in dsc_rows:
            f.write(f"{case_id},{value}\n")

    target = cfg["sensitivity_target"]
    # strict sensitivity picks the operating threshold; both criteria report
    # their FP/case at that point
    eligible = [t for t, s, _ in strict_rows if s >= target]
    if not eligible:
        top = max(s for _, s, _ in strict_rows)
        return _fail(
            DataError(
                f"sensitivity target {target} unreachable; "
                f"strict sweep peaks at {top:.4f}"
            )
        )
    op_t = max(eligible)
    strict_at = next(row for row in strict_rows if row[0] == op_t)
    any_at = next(p for p in curve.points if p[0] == op_t)

    quality = None
    if quality_cases:
        try:
            quality = metrics.pseudo_label_quality(quality_cases)
        except ValueError as e:
            _note(f"pseudo-label quality unavailable: {e}")
    dsc_values = [float(v) for _, v in dsc_rows if _is_float(v)]
    out = {
        "n_cases": len(manifest["cases"]),
        "operating_point": {
            "sensitivity_target": target,
            "threshold": op_t,
            "sensitivity_strict": strict_at[1],
            "fp_per_case_strict": strict_at[2],
            "sensitivity_any_overlap": any_at[1],
            "fp_per_case_any_overlap": any_at[2],
        },
        "mean_dsc": sum(dsc_values) / len(dsc_values) if dsc_values else None,
        "pseudo_label_quality": quality,
        "outputs": [
            "froc.csv", "froc.json", "froc.svg", "froc_strict.csv", "dsc.csv",
            "quality.json",
        ],
    }
    atomic_write_bytes(
        out_dir / "quality.json",
        (json.dumps(out, indent=2, sort_keys=True) + "\n").encode(),
    )
    _emit(out)
    return EXIT_OK


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_one(params: synthgen.SynthParams, index: int, out_dir: str) -> dict:
    case = synthgen.gen_case(params, index)
    return synthgen.write_case(case, out_dir)


def cmd_simulate(args) -> int:
    try:
        if args.params:
            params = synthgen.params_from_json(_load_json(Path(args.params)))
        else:
            params = synthgen.SynthParams()
        if args.seed is not None:
            params = synthgen.params_from_json(
                {**params.to_json_dict(), "seed": args.seed}
            )
    except (DataError, ValueError) as e:
        return _fail(e)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    try:
        if args.jobs and args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                entries = list(
                    pool.map(
                        _simulate_one,
                        [params] * args.n_cases,
                        range(args.n_cases),
                        [str(out_dir)] * args.n_cases,
                    )
                )
        else:
            entries = [
                _simulate_one(params, i, str(out_dir)) for i in range(args.n_cases)
            ]
    except synthgen.PlacementError as e:
        return _fail(e)
    manifest = {
        "cases": entries,
        "settings": {"base_at": "+z" if params.base_at_positive_z else "-z"},
    }
    atomic_write_bytes(
        out_dir / "manifest.json",
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode(),
    )
    _note(f"wrote {len(entries)} cases in {time.monotonic() - t0:.1f}s")
    _emit(
        {
            "n_cases": len(entries),
            "manifest": str(out_dir / "manifest.json"),
            "seed": params.seed,
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="lesionloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse-report", help="extract lesion statements from a report")
    p.add_argument("report", help="report text file")
    p.set_defaults(func=cmd_parse_report)

    p = sub.add_parser("sectors", help="print the sector grid of a prostate mask")
    p.add_argument("mask", help="prostate mask NIFTI")
    p.add_argument("--base-at", choices=["+z", "-z"], default=None)
    p.set_defaults(func=cmd_sectors)

    p = sub.add_parser("correct", help="generate corrected pseudo labels for a cohort")
    p.add_argument("manifest", help="cohort manifest JSON")
    p.add_argument("--method", choices=["location", "count", "none"], default="location")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--connectivity", type=int, choices=[6, 26], default=None)
    p.add_argument("--match", choices=["overlap", "centroid"], default=None)
    p.add_argument("--base-at", dest="base_at", choices=["+z", "-z"], default=None)
    p.add_argument("--config", help="settings JSON overriding manifest settings")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("manifest", help="cohort manifest JSON with gt_mask entries")
    p.add_argument("--pred", required=True, help="directory written by correct")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--connectivity", type=int, choices=[6, 26], default=None)
    p.add_argument("--match", choices=["overlap", "centroid"], default=None)
    p.add_argument("--base-at", dest="base_at", choices=["+z", "-z"], default=None)
    p.add_argument("--config", help="settings JSON overriding manifest settings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="write a synthetic cohort")
    p.add_argument("--params", help="generator parameter JSON")
    p.add_argument("-n", "--n-cases", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "n_cases", None) is not None and args.n_cases < 1:
        parser.error("-n must be >= 1")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        parser.error("--jobs must be >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
