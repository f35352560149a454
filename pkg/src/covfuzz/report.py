"""Rendering of experiment results into CSV and Markdown tables.

Four tables: the baseline accumulated-NC table, the per-cell score table
with relative changes, the with/without-coverage mean comparison, and the
per-robustness-type means. Formatting is fixed so reruns of an identical
experiment produce identical bytes.
"""

from __future__ import annotations

import io
import csv

REL_COLUMNS = (("map_clean", "rel mAP_clean %"), ("map_nm", "rel mAP_nm %"),
               ("map_adv", "rel mAP_adv %"), ("mpc", "rel mPC %"),
               ("rpc", "rel rPC %"))
SCORE_COLUMNS = (("map_clean", "mAP_clean"), ("map_nm", "mAP_nm"),
                 ("map_adv", "mAP_adv"), ("mpc", "mPC"), ("rpc", "rPC"))


def _fmt(value, signed: bool = False) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:+.2f}" if signed else f"{value:.4f}"
    return str(value)


def _csv_table(headers, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def _md_table(headers, rows) -> str:
    lines = ["| " + " | ".join(str(h) for h in headers) + " |",
             "|" + "|".join(" --- " for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def baseline_nc_rows(nc_table: dict) -> tuple[list, list]:
    thresholds = sorted({t for row in nc_table.values() for t in row}, key=float)
    headers = ["dataset"] + [f"NC t={t}" for t in thresholds]
    rows = [[name] + [f"{nc_table[name].get(t, 0.0):.2f}" for t in thresholds]
            for name in sorted(nc_table)]
    return headers, rows


def cell_rows(cells: list[dict]) -> tuple[list, list]:
    headers = (["cell", "metric", "alpha_map", "bugs"]
               + [label for _, label in SCORE_COLUMNS]
               + [label for _, label in REL_COLUMNS])
    rows = []
    for cell in cells:
        scores, rel = cell["scores"], cell["rel"]
        row = [cell["cell"], cell["metric_label"], f"{cell['alpha_map']:.2f}",
               cell["bugs"]]
        row += [_fmt(scores.get(key)) for key, _ in SCORE_COLUMNS]
        row += [_fmt(rel.get(key), signed=True) for key, _ in REL_COLUMNS]
        rows.append(row)
    return headers, rows


def coverage_comparison_rows(summary: dict) -> tuple[list, list]:
    headers = ["mode", "group"] + [label for _, label in REL_COLUMNS]
    rows = []
    for mode in sorted(summary):
        for group in ("cov", "no_cov"):
            means = summary[mode].get(group, {})
            rows.append([mode, group]
                        + [_fmt(means.get(key), signed=True)
                           for key, _ in REL_COLUMNS])
    return headers, rows


def robustness_means_rows(summary: dict) -> tuple[list, list]:
    kind_labels = (("map_nm", "naturally mutated data"),
                   ("mpc", "corrupted data"), ("map_adv", "adversarial data"))
    headers = ["robustness against"] + sorted(summary)
    rows = []
    for key, label in kind_labels:
        row = [label]
        for mode in sorted(summary):
            row.append(_fmt(summary[mode].get(key), signed=True))
        rows.append(row)
    return headers, rows


def render_report(results: dict) -> dict[str, str]:
    """Returns {filename: content} for the report directory."""
    out: dict[str, str] = {}
    md_parts: list[str] = ["# Coverage-guided testing report\n"]

    baseline = results.get("baseline", {})
    scores = baseline.get("scores", {})
    headers = ["model"] + [label for _, label in SCORE_COLUMNS]
    base_row = [["baseline"] + [_fmt(scores.get(k)) for k, _ in SCORE_COLUMNS]]
    out["baseline_scores.csv"] = _csv_table(headers, base_row)
    md_parts += ["## Baseline scores\n", _md_table(headers, base_row)]

    if baseline.get("nc_table"):
        headers, rows = baseline_nc_rows(baseline["nc_table"])
        out["baseline_nc.csv"] = _csv_table(headers, rows)
        md_parts += ["## Baseline accumulated neuron coverage (%)\n",
                     _md_table(headers, rows)]

    headers, rows = cell_rows(results.get("cells", []))
    out["cells.csv"] = _csv_table(headers, rows)
    md_parts += ["## Retrained models, scores and relative change vs baseline\n",
                 _md_table(headers, rows)]

    summaries = results.get("summaries", {})
    if "coverage_vs_none" in summaries:
        headers, rows = coverage_comparison_rows(summaries["coverage_vs_none"])
        out["coverage_comparison.csv"] = _csv_table(headers, rows)
        md_parts += ["## Mean relative change, with vs. without coverage\n",
                     _md_table(headers, rows)]
    if "robustness_means" in summaries:
        headers, rows = robustness_means_rows(summaries["robustness_means"])
        out["robustness_means.csv"] = _csv_table(headers, rows)
        md_parts += ["## Mean relative improvement per robustness type\n",
                     _md_table(headers, rows)]

    out["report.md"] = "\n".join(md_parts)
    return out
