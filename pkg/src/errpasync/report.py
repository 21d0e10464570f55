"""Tabular summaries of per-participant results."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

GROUPS = ("control", "sci")
COLUMNS = ("participant", "group", "tau", "tpr", "tnr", "edr", "far",
           "chance_tpr", "chance_tnr", "p_tpr", "p_tnr", "p_product")
CURVE_COLUMNS = ("tau", "tpr", "tnr", "tpr_smooth", "tnr_smooth")

# Published group means from human EEG. Shown for context only; synthetic
# runs are not expected to reproduce them.
REFERENCE_ROWS = (
    {"source": "published, generic classifier online", "group": "sci", "tpr": 0.469, "tnr": 0.719},
    {"source": "published, generic classifier online", "group": "control", "tpr": 0.564,
     "tnr": 0.779},
    {"source": "published, personalised classifier CV", "group": "sci", "tpr": 0.550,
     "tnr": 0.779},
    {"source": "published, personalised classifier CV", "group": "control", "tpr": 0.715,
     "tnr": 0.861},
)
REFERENCE_LABEL = "REFERENCE ONLY: human-EEG group means, not reproducible by this simulator"


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    x = float(x)
    return "n/a" if math.isnan(x) else f"{x:.6g}"


def participant_row(result: dict) -> dict:
    """Flatten one result dictionary (see ``ParticipantResult.to_dict``)."""
    chance = result.get("chance") or {}
    pv = result.get("p_values") or {}
    return {
        "participant": result["participant"],
        "group": result.get("group", ""),
        "tau": result.get("tau"),
        "tpr": result["tpr"],
        "tnr": result["tnr"],
        "edr": result["edr"],
        "far": result.get("far"),
        "chance_tpr": chance.get("tpr"),
        "chance_tnr": chance.get("tnr"),
        "p_tpr": pv.get("tpr"),
        "p_tnr": pv.get("tnr"),
        "p_product": pv.get("product"),
    }


def _nanmean(values) -> float:
    vals = np.array([np.nan if v is None else float(v) for v in values], dtype=float)
    if vals.size == 0 or np.all(np.isnan(vals)):
        return float("nan")
    return float(np.nanmean(vals))


def group_rows(rows) -> list:
    """One mean row per group, always for both groups."""
    out = []
    for g in GROUPS:
        members = [r for r in rows if r["group"] == g]
        mean = {"participant": f"mean:{g}", "group": g}
        for col in COLUMNS[2:]:
            if col.startswith("p_"):
                mean[col] = None
            else:
                mean[col] = _nanmean([m[col] for m in members])
        out.append(mean)
    return out


def build_report(results) -> dict:
    rows = [participant_row(r) for r in results]
    if not rows:
        raise ValueError("report needs at least one result")
    return {
        "participants": rows,
        "groups": group_rows(rows),
        "reference": {"label": REFERENCE_LABEL, "rows": list(REFERENCE_ROWS)},
    }


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in report["participants"] + report["groups"]:
        w.writerow([row["participant"], row["group"]] + [_fmt(row[c]) for c in COLUMNS[2:]])
    return buf.getvalue()


def reference_csv() -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "source", "group", "tpr", "tnr"])
    for r in REFERENCE_ROWS:
        w.writerow([REFERENCE_LABEL, r["source"], r["group"], r["tpr"], r["tnr"]])
    return buf.getvalue()


def _cell(x) -> str:
    if x is None or math.isnan(float(x)):
        return "n/a"
    return f"{float(x):.3f}"


def report_text(report: dict) -> str:
    head = ("participant", "group", "tau", "TPR", "TNR", "EDR", "FAR", "chTPR", "chTNR",
            "p(TPRxTNR)")
    lines = [f"{head[0]:<14}{head[1]:<9}" + "".join(f"{h:>8}" for h in head[2:9])
             + f"{head[9]:>12}"]
    for r in report["participants"] + report["groups"]:
        cells = [_cell(r[c]) for c in ("tau", "tpr", "tnr", "edr", "far", "chance_tpr",
                                       "chance_tnr")]
        lines.append(f"{r['participant']:<14}{r['group']:<9}"
                     + "".join(f"{c:>8}" for c in cells) + f"{_cell(r['p_product']):>12}")
    lines.append("")
    lines.append(REFERENCE_LABEL)
    for r in REFERENCE_ROWS:
        lines.append(f"  {r['source']:<40}{r['group']:<9}TPR {r['tpr']:.1%}  TNR {r['tnr']:.1%}")
    return "\n".join(lines) + "\n"


def curves_csv(grid, tpr, tnr, tpr_smooth, tnr_smooth) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in zip(grid, tpr, tnr, tpr_smooth, tnr_smooth):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_report(report: dict, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n")
    (d / "report.csv").write_text(report_csv(report))
    (d / "reference.csv").write_text(reference_csv())
    (d / "report.txt").write_text(report_text(report))
    return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj
