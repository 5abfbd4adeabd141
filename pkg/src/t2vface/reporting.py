"""Aggregation of evaluation metrics into tables, CMC curve data, and
qualitative image grids.

Rank tables average accuracies across splits and render percentages at one
decimal place; the underlying metrics JSON keeps full precision.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

METHOD_ORDER = ("plain", "patch", "pix2pix", "tvgan")


@dataclass
class ResultsTable:
    methods: list
    ks: list
    cells: dict  # method -> list of mean accuracies (fractions), one per k
    n_splits: int

    def percent(self, method, k_index):
        return 100.0 * self.cells[method][k_index]


def load_metrics(paths):
    records = []
    for path in paths:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if isinstance(payload, list):
            records.extend(payload)
        else:
            records.append(payload)
    for rec in records:
        for key in ("method", "protocol", "ks", "accuracies", "cmc"):
            if key not in rec:
                raise ValueError(f"metrics record missing key {key!r}")
    return records


def _ordered_methods(records):
    present = {rec["method"] for rec in records}
    ordered = [m for m in METHOD_ORDER if m in present]
    ordered += sorted(present - set(METHOD_ORDER))
    return ordered


def _common_protocol_and_ks(records):
    protocols = {rec["protocol"] for rec in records}
    if len(protocols) != 1:
        raise ValueError(f"metrics mix protocols: {sorted(protocols)}")
    ks_sets = {tuple(rec["ks"]) for rec in records}
    if len(ks_sets) != 1:
        raise ValueError("metrics disagree on rank levels")
    return protocols.pop(), list(ks_sets.pop())


def aggregate_rank_table(records):
    """Mean accuracy per method and rank level across splits."""
    protocol, ks = _common_protocol_and_ks(records)
    methods = _ordered_methods(records)
    cells = {}
    n_splits = None
    for method in methods:
        rows = [rec for rec in records if rec["method"] == method]
        splits = {rec["split"] for rec in rows}
        if len(splits) != len(rows):
            raise ValueError(f"duplicate split records for method {method}")
        if n_splits is None:
            n_splits = len(rows)
        acc = np.array([[a for _, a in rec["accuracies"]] for rec in rows], dtype=np.float64)
        cells[method] = acc.mean(axis=0).tolist()
    return ResultsTable(methods=methods, ks=ks, cells=cells, n_splits=n_splits or 0)


def render_table_csv(table):
    lines = ["method," + ",".join(f"rank{k}" for k in table.ks)]
    for method in table.methods:
        row = ",".join(f"{table.percent(method, i):.1f}" for i in range(len(table.ks)))
        lines.append(f"{method},{row}")
    return "\n".join(lines) + "\n"


def render_table_markdown(table):
    header = "| method | " + " | ".join(f"rank {k}" for k in table.ks) + " |"
    rule = "|" + "---|" * (len(table.ks) + 1)
    lines = [header, rule]
    for method in table.methods:
        cells = " | ".join(f"{table.percent(method, i):.1f}" for i in range(len(table.ks)))
        lines.append(f"| {method} | {cells} |")
    return "\n".join(lines) + "\n"


def aggregate_cmc(records):
    """Element-wise mean CMC per method; all records must share gallery size."""
    _ = _common_protocol_and_ks(records)
    lengths = {len(rec["cmc"]) for rec in records}
    if len(lengths) != 1:
        raise ValueError("CMC curves have inconsistent lengths across records")
    out = {}
    for method in _ordered_methods(records):
        rows = [rec["cmc"] for rec in records if rec["method"] == method]
        out[method] = np.asarray(rows, dtype=np.float64).mean(axis=0)
    return out


def render_cmc_csv(cmc_by_method):
    methods = list(cmc_by_method)
    length = len(next(iter(cmc_by_method.values())))
    lines = ["rank," + ",".join(methods)]
    for i in range(length):
        vals = ",".join(repr(float(cmc_by_method[m][i])) for m in methods)
        lines.append(f"{i + 1},{vals}")
    return "\n".join(lines) + "\n"


def compose_image_grid(columns, names, out_path, pad=4, label_height=14):
    """Tile images into a labeled grid: one column per (label, directory),
    one row per filename. Mirrors the qualitative layout thermal input /
    method outputs / ground truth."""
    if not columns or not names:
        raise ValueError("grid needs at least one column and one row")
    tiles = []
    for _, directory in columns:
        col = []
        for name in names:
            path = os.path.join(directory, name)
            with Image.open(path) as im:
                col.append(im.convert("RGB").copy())
        tiles.append(col)
    w, h = tiles[0][0].size
    grid_w = len(columns) * (w + pad) + pad
    grid_h = label_height + len(names) * (h + pad) + pad
    canvas = Image.new("RGB", (grid_w, grid_h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for c, (label, _) in enumerate(columns):
        draw.text((pad + c * (w + pad), 2), label, fill=(0, 0, 0))
        for r in range(len(names)):
            canvas.paste(tiles[c][r], (pad + c * (w + pad), label_height + pad + r * (h + pad)))
    canvas.save(out_path)
    return out_path
