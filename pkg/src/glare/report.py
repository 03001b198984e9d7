"""Plain-text tables, CSV and JSON Lines writers for metrics and ablations."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict

from .errors import GlareIOError
from .train import AblationReport, Metrics


def format_table(headers: list[str], rows: list[list]) -> str:
    """Aligned columns; the first column is left-aligned, the rest right-aligned."""
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(r):
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]]) + "\n"


def _cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100.0 * x:.2f}"


def metrics_table(m: Metrics) -> str:
    """Per-class accuracy (recall) and precision, then the overall row."""
    support = m.support
    names = m.class_names or [str(c) for c in range(len(support))]
    rows = [[names[c], _pct(m.per_class_accuracy[c]), _pct(m.per_class_precision[c]), support[c]]
            for c in range(len(support))]
    rows.append(["overall", _pct(m.accuracy), "", sum(support)])
    table = format_table(["class", "accuracy %", "precision %", "support"], rows)
    return table + f"mean loss {m.mean_loss:.6f}, median batch time {m.batch_ms:.2f} ms\n"


_SETTING_HEADER = {"regions": "regions k", "features": "features", "quotient": "variant"}


def ablation_table(report: AblationReport) -> str:
    extra_keys = []
    for r in report.rows:
        for k in r.extra:
            if k not in extra_keys and k not in ("k_regions", "feature_mode"):
                extra_keys.append(k)
    headers = [_SETTING_HEADER.get(report.kind, "setting"), "accuracy %", "batch ms", "runs"] + extra_keys
    rows = []
    for r in report.rows:
        acc = f"{100 * r.mean_accuracy:.2f} ± {100 * r.std_accuracy:.2f}"
        rows.append([r.setting, acc, f"{r.mean_batch_ms:.2f}", len(r.accuracies)]
                    + [r.extra.get(k) for k in extra_keys])
    return format_table(headers, rows)


def confusion_csv(m: Metrics) -> str:
    """Rows are true classes, columns predicted classes."""
    names = m.class_names or [str(c) for c in range(len(m.confusion))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + names)
    for name, row in zip(names, m.confusion):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def ablation_rows(report: AblationReport) -> list[dict]:
    return [dict(asdict(r), kind=report.kind) for r in report.rows]


def jsonl_dumps(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise GlareIOError(f"cannot write {path}: {exc}") from exc


def read_jsonl(path: str) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise GlareIOError(f"cannot read {path}: {exc}") from exc
