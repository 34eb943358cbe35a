"""Per-image fusion-weight entropy, its relation to scene diversity, and histogram/SVG emitters."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .decoder import DecoderParams, FusionMode, forward
from .features import SceneDataset


@dataclass(frozen=True)
class WeightRecord:
    image_id: str
    weights: tuple[float, ...]
    entropy: float
    class_count: int


def entropy_of(weights) -> float:
    """Shannon entropy in nats, 0 ln 0 = 0."""
    return -math.fsum(w * math.log(w) for w in weights if w > 0)


def collect_records(
    params: DecoderParams, mode: FusionMode, dataset: SceneDataset, batch_size: int = 8
) -> list[WeightRecord]:
    names = sorted(dataset.ids)
    records = []
    for start in range(0, len(names), batch_size):
        chunk = names[start : start + batch_size]
        stack, labels = dataset.batch(chunk)
        _, weights = forward(stack, params, mode)
        for name, row, lab in zip(chunk, weights.data, labels):
            w = tuple(float(x) for x in row)
            records.append(WeightRecord(name, w, entropy_of(w), int(np.unique(lab).size)))
    return records


def entropy_vs_diversity(records: list[WeightRecord]) -> list[tuple[int, float, int]]:
    """Rows ``(class_count, mean entropy, population)`` sorted by class count."""
    if not records:
        raise ValueError("no records")
    groups: dict[int, list[float]] = {}
    for r in records:
        groups.setdefault(r.class_count, []).append(r.entropy)
    return [(k, math.fsum(v) / len(v), len(v)) for k, v in sorted(groups.items())]


def entropy_histogram(records: list[WeightRecord], bins: int = 20, m: int | None = None):
    """Equal-width counts over [0, ln m]; the last bin is closed on the right.

    Returns ``(edges, counts)``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if m is None:
        if not records:
            raise ValueError("m is required for an empty record list")
        m = len(records[0].weights)
    hi = math.log(m)
    edges = [hi * i / bins for i in range(bins + 1)]
    counts = [0] * bins
    for r in records:
        if hi == 0:
            k = 0
        else:
            k = min(int(r.entropy / hi * bins), bins - 1)
        counts[max(k, 0)] += 1
    return edges, counts


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def records_csv(records: list[WeightRecord]) -> str:
    m = len(records[0].weights) if records else 0
    header = ["id", *[f"w{i + 1}" for i in range(m)], "entropy", "class_count"]
    rows = [[r.image_id, *map(repr, r.weights), repr(r.entropy), r.class_count] for r in records]
    return _csv_text(header, rows)


def diversity_csv(table) -> str:
    return _csv_text(["class_count", "mean_entropy", "count"], [[k, repr(h), n] for k, h, n in table])


def histogram_csv(edges, counts) -> str:
    return _csv_text(["bin_lo", "bin_hi", "count"], [[repr(edges[i]), repr(edges[i + 1]), c] for i, c in enumerate(counts)])


def _bar_svg(values, labels, title: str, xlabel: str, ylabel: str, ymax: float | None = None) -> str:
    width, height = 480, 320
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ymax = ymax if ymax is not None else (max(values) if values and max(values) > 0 else 1.0)
    n = max(len(values), 1)
    bw = pw / n
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i, v in enumerate(values):
        h = 0.0 if ymax == 0 else ph * v / ymax
        x = left + i * bw
        out.append(f'<rect x="{x + 1:.2f}" y="{top + ph - h:.2f}" width="{max(bw - 2, 0.5):.2f}" height="{h:.2f}" fill="#4a7ab5"/>')
    step = max(1, len(labels) // 10)
    for i in range(0, len(labels), step):
        x = left + (i + 0.5) * bw
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{labels[i]}</text>')
    out.append(f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{ymax:.3g}</text>')
    out.append(f'<text x="{left - 6}" y="{top + ph}" text-anchor="end" font-family="sans-serif" font-size="10">0</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{ylabel}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_svg(edges, counts) -> str:
    labels = [f"{(edges[i] + edges[i + 1]) / 2:.2f}" for i in range(len(counts))]
    return _bar_svg(counts, labels, "Weight entropy distribution", "weight entropy (nats)", "images")


def weights_svg(record: WeightRecord, layer_ids) -> str:
    labels = [f"L{lid}" for lid in layer_ids]
    title = f"{record.image_id}: entropy {record.entropy:.4f}, {record.class_count} classes"
    return _bar_svg(list(record.weights), labels, title, "layer", "fusion weight", ymax=1.0)


def write_artifacts(out_dir, records: list[WeightRecord], layer_ids, bins: int = 20) -> list[str]:
    """records.csv, diversity.csv, histogram.csv, histogram.svg and weights_<id>.svg."""
    os.makedirs(out_dir, exist_ok=True)
    edges, counts = entropy_histogram(records, bins, m=len(layer_ids))
    files = {
        "records.csv": records_csv(records),
        "diversity.csv": diversity_csv(entropy_vs_diversity(records)),
        "histogram.csv": histogram_csv(edges, counts),
        "histogram.svg": histogram_svg(edges, counts),
    }
    for r in records:
        files[f"weights_{r.image_id}.svg"] = weights_svg(r, layer_ids)
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w", newline="\n") as fh:
            fh.write(text)
    return sorted(files)
