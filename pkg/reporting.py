import json
import logging
import math
import os
from typing import Dict, Iterable, List, Sequence

from evaluator import COUNT_BIN_NAMES
from geometry import SIZE_BIN_LABELS, SIZE_BIN_NAMES

SUMMARY_FILE = "summary.json"
RECORDS_FILE = "records.jsonl"
TEXT_FILE = "report.txt"


def _cell(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.4f}"
    return str(value)


def format_table(title: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Fixed-width text table; every column is as wide as its widest cell."""
    body = [[_cell(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in body)) if body else len(str(h)) for i, h in enumerate(header)]
    lines = [title, "  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body)
    return "\n".join(lines)


def _bin_rows(values: Dict[str, float], names: Sequence[str], labels: Dict[str, str] = None) -> List[list]:
    labels = labels or {}
    return [[labels.get(n, n), values[n]] for n in names if n in values]


class Reporter:
    """
    Renders evaluation and comparison results as text tables and writes them
    to an output directory. Written files carry no timestamps, so two runs
    with the same inputs produce identical bytes.
    """
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.logger = logging.getLogger(self.__class__.__name__)

    def render_eval(self, report: Dict, title: str = "evaluation") -> str:
        sections = [f"{title}: frame mAP@0.5 = {report['map']:.4f} "
                    f"({report['num_detections']} detections, {report['num_ground_truth']} ground-truth actors)"]
        per_class = sorted(report["per_class"].items(), key=lambda kv: int(kv[0]))
        sections.append(format_table("per-class AP", ["class", "gt", "AP"],
                                     [[c, report["gt_counts"].get(c, 0), ap] for c, ap in per_class]))
        if "size_bins" in report:
            sections.append(format_table("by box size", ["bin", "mAP"],
                                         _bin_rows(report["size_bins"], SIZE_BIN_NAMES, SIZE_BIN_LABELS)))
        if "count_bins" in report:
            sections.append(format_table("by actors per frame", ["bin", "mAP"],
                                         _bin_rows(report["count_bins"], COUNT_BIN_NAMES)))
        return "\n\n".join(sections)

    def render_compare(self, report: Dict) -> str:
        roi, crop, delta = report["paths"]["roipool"], report["paths"]["cropresize"], report["delta"]
        sections = [format_table("overall", ["path", "mAP"],
                                 [["RoIPool", roi["map"]], ["Crop+Resize", crop["map"]], ["delta", delta["overall"]]])]
        for table, names, labels, title in (("size_bins", SIZE_BIN_NAMES, SIZE_BIN_LABELS, "by box size"),
                                            ("count_bins", COUNT_BIN_NAMES, {}, "by actors per frame")):
            rows = [[labels.get(n, n), roi[table].get(n, "-"), crop[table].get(n, "-"), delta[table].get(n, "-")]
                    for n in names if n in roi[table] or n in crop[table]]
            sections.append(format_table(title, ["bin", "RoIPool", "Crop+Resize", "delta"], rows))
        cmp = report["per_class_comparison"]
        sections.append(format_table("per-class changes", ["list", "classes"], [
            ["largest absolute gain", " ".join(map(str, cmp["largest_absolute"])) or "-"],
            ["largest relative gain", " ".join(map(str, cmp["largest_relative"])) or "-"],
            ["decreased", " ".join(map(str, cmp["decreased"])) or "-"],
        ]))
        if "scales" in report:
            sections.append(format_table("expansion scale (Crop+Resize)", ["scale", "mAP"],
                                         sorted(report["scales"].items(), key=lambda kv: float(kv[0]))))
        if "crop_sizes" in report:
            sections.append(format_table("crop size (Crop+Resize)", ["size", "mAP"],
                                         sorted(report["crop_sizes"].items(), key=lambda kv: int(kv[0]))))
        return "\n\n".join(sections)

    def write(self, summary: Dict, text: str, records: Iterable[Dict] = ()) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, SUMMARY_FILE), "w", encoding="utf-8") as f:
            json.dump(summary, f, sort_keys=True, indent=2)
            f.write("\n")
        with open(os.path.join(self.out_dir, RECORDS_FILE), "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        with open(os.path.join(self.out_dir, TEXT_FILE), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        self.logger.info("Report written to %s", self.out_dir)


def eval_records(report: Dict, **tags) -> List[Dict]:
    """Flatten an evaluation into one record per (table, key)."""
    records = [dict(tags, table="overall", key="all", value=report["map"])]
    for c, ap in sorted(report["per_class"].items(), key=lambda kv: int(kv[0])):
        records.append(dict(tags, table="per_class", key=c, value=ap))
    for table in ("size_bins", "count_bins"):
        for name, value in report.get(table, {}).items():
            records.append(dict(tags, table=table, key=name, value=value))
    return records


def compare_records(report: Dict) -> List[Dict]:
    records = []
    for path in ("roipool", "cropresize"):
        records.extend(eval_records(report["paths"][path], path=path))
    for key, value in sorted(report.get("scales", {}).items()):
        records.append({"path": "cropresize", "table": "scale", "key": key, "value": value})
    for key, value in sorted(report.get("crop_sizes", {}).items()):
        records.append({"path": "cropresize", "table": "crop_size", "key": key, "value": value})
    return records
