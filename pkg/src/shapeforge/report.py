"""MetricsReport assembly, schema validation, CSV export and report comparison."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import jsonschema

from .errors import SchemaMismatch

MID_LEVELS = (0.2, 0.4, 0.6)

_number = {"type": "number"}
_fraction = {"type": "number", "minimum": 0, "maximum": 1}
_nullable_fraction = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["run_id", "mode", "seed", "clean_acc", "conflict", "shape_factor", "miou", "robustness"],
    "properties": {
        "run_id": {"type": "string"},
        "mode": {"enum": ["baseline", "eleas"]},
        "seed": {"type": "integer"},
        "clean_acc": _fraction,
        "conflict": {
            "type": "object",
            "required": ["shape_bias", "coverage", "per_class"],
            "properties": {
                "shape_bias": _nullable_fraction,
                "coverage": _fraction,
                "shape_correct": {"type": "integer", "minimum": 0},
                "texture_correct": {"type": "integer", "minimum": 0},
                "neither": {"type": "integer", "minimum": 0},
                "per_class": {"type": "array", "items": {"type": "object"}},
            },
        },
        "shape_factor": {
            "type": "object",
            "required": ["shape_fraction", "texture_fraction", "assignments"],
            "properties": {
                "shape_fraction": _fraction,
                "texture_fraction": _fraction,
                "residual_fraction": _fraction,
                "assignments": {"type": "array", "items": {"enum": ["shape", "texture", "residual"]}},
            },
        },
        "miou": _fraction,
        "robustness": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "levels", "acc"],
                "properties": {
                    "kind": {"type": "string"},
                    "levels": {"type": "array", "items": _fraction},
                    "acc": {"type": "array", "items": _fraction},
                },
            },
        },
    },
}


def _field_name(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    if error.validator == "required":
        missing = [k for k in error.validator_value if k not in error.instance]
        name = missing[0] if missing else "?"
        return f"{path}.{name}" if path else name
    return path or "<root>"


def validate_report(report: dict, source: str = "report") -> dict:
    """Raise :class:`SchemaMismatch` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(METRICS_SCHEMA)
    errors = sorted(validator.iter_errors(report), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        field = _field_name(err)
        if err.validator == "required":
            raise SchemaMismatch(f"{source}: missing field '{field}'")
        raise SchemaMismatch(f"{source}: field '{field}' is invalid ({err.message})")
    for curve in report["robustness"]:
        if len(curve["levels"]) != len(curve["acc"]):
            raise SchemaMismatch(f"{source}: field 'robustness.{curve['kind']}' has mismatched levels and acc")
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def load_report(path: str | Path) -> dict:
    path = Path(path)
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from exc
    return validate_report(report, str(path))


def curves_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "level", "acc"])
    for curve in report["robustness"]:
        for level, acc in zip(curve["levels"], curve["acc"]):
            writer.writerow([curve["kind"], repr(float(level)), repr(float(acc))])
    return buf.getvalue()


def curve_auc(curve: dict) -> float:
    """Mean accuracy over the curve's levels."""
    return sum(curve["acc"]) / len(curve["acc"])


def mid_severity(curve: dict, levels=MID_LEVELS) -> float | None:
    picked = [a for lv, a in zip(curve["levels"], curve["acc"]) if any(abs(lv - m) < 1e-9 for m in levels)]
    return sum(picked) / len(picked) if picked else None


def _delta(a, b):
    return None if a is None or b is None else b - a


def compare_reports(a: dict, b: dict) -> dict:
    """Side-by-side values and deltas (``b - a``)."""
    validate_report(a, "report a")
    validate_report(b, "report b")
    rows = []

    def add(name, va, vb):
        rows.append({"metric": name, "a": va, "b": vb, "delta": _delta(va, vb)})

    add("clean_acc", a["clean_acc"], b["clean_acc"])
    add("shape_bias", a["conflict"]["shape_bias"], b["conflict"]["shape_bias"])
    add("coverage", a["conflict"]["coverage"], b["conflict"]["coverage"])
    add("shape_fraction", a["shape_factor"]["shape_fraction"], b["shape_factor"]["shape_fraction"])
    add("texture_fraction", a["shape_factor"]["texture_fraction"], b["shape_factor"]["texture_fraction"])
    add("miou", a["miou"], b["miou"])
    curves_b = {c["kind"]: c for c in b["robustness"]}
    for curve in a["robustness"]:
        other = curves_b.get(curve["kind"])
        if other is None:
            raise SchemaMismatch(f"report b: missing field 'robustness.{curve['kind']}'")
        add(f"auc:{curve['kind']}", curve_auc(curve), curve_auc(other))
        add(f"mid:{curve['kind']}", mid_severity(curve), mid_severity(other))
    return {
        "a": {"run_id": a["run_id"], "mode": a["mode"], "seed": a["seed"]},
        "b": {"run_id": b["run_id"], "mode": b["mode"], "seed": b["seed"]},
        "rows": rows,
    }


def format_comparison(cmp: dict) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    def fmt_delta(v):
        return "n/a" if v is None else f"{v:+.4f}"

    a, b = cmp["a"], cmp["b"]
    head_a = f"{a['mode']}@{a['run_id']}"
    head_b = f"{b['mode']}@{b['run_id']}"
    width = max(len(r["metric"]) for r in cmp["rows"]) + 2
    lines = [f"{'metric':<{width}}{head_a:>24}{head_b:>24}{'delta':>12}"]
    for r in cmp["rows"]:
        lines.append(f"{r['metric']:<{width}}{fmt(r['a']):>24}{fmt(r['b']):>24}{fmt_delta(r['delta']):>12}")
    return "\n".join(lines) + "\n"
