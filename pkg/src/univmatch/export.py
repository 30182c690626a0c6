"""Exports of learned geometry (ASCII PLY) and predicted matchings (JSON)."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .matching import all_pairwise

MATCHINGS_FORMAT = "univmatch-matchings"
MATCHINGS_VERSION = 1


def write_ply(path, points: np.ndarray) -> None:
    """Write ``n x 3`` points as an ASCII PLY vertex list."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected n x 3 points, got {pts.shape}")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [" ".join(repr(float(c)) for c in row) for row in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    try:
        end = lines.index("end_header")
    except ValueError:
        raise ValueError(f"{path}: missing end_header") from None
    count = None
    for line in lines[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
    if count is None:
        raise ValueError(f"{path}: no vertex element")
    body = lines[end + 1 : end + 1 + count]
    if len(body) != count:
        raise ValueError(f"{path}: declares {count} vertices, found {len(body)}")
    return np.array([[float(x) for x in line.split()] for line in body]).reshape(count, 3)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(name))


def export_geometry(
    universe: Mapping[str, np.ndarray],
    offsets: Mapping[str, tuple[str, np.ndarray]] | None,
    directory,
) -> dict:
    """Write static and per-instance deformed point clouds plus ``geometry.json``.

    ``universe`` maps category name to its 3 x d points; ``offsets`` maps
    instance id to ``(category name, 3 x d offsets S)``. Returns the summary
    that is also written to disk.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"categories": {}, "instances": {}}
    for cat, U in universe.items():
        fname = f"universe_{_safe(cat)}.ply"
        write_ply(out / fname, np.asarray(U).T)
        summary["categories"][cat] = {"file": fname, "points": int(np.asarray(U).shape[1])}
    for inst_id, (cat, S) in (offsets or {}).items():
        S = np.asarray(S)
        fname = f"deformed_{_safe(cat)}_{_safe(inst_id)}.ply"
        write_ply(out / fname, (np.asarray(universe[cat]) + S).T)
        summary["instances"][inst_id] = {
            "category": cat,
            "file": fname,
            "offset_norm": float(np.linalg.norm(S)),
            "max_point_offset": float(np.max(np.linalg.norm(S, axis=0))) if S.size else 0.0,
        }
    (out / "geometry.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def export_matchings(
    records: Sequence[tuple[str, str, np.ndarray]], path, pairwise: bool = False
) -> None:
    """Write ``(instance id, category, X)`` hard matchings as JSON.

    With ``pairwise`` the composed instance-to-instance matchings of every
    category are included as lists of matched keypoint index pairs.
    """
    doc: dict = {"format": MATCHINGS_FORMAT, "version": MATCHINGS_VERSION, "records": []}
    for inst_id, cat, X in records:
        X = np.asarray(X)
        doc["records"].append(
            {
                "id": inst_id,
                "category": cat,
                "d": int(X.shape[1]),
                "assignment": [int(k) for k in X.argmax(axis=1)],
            }
        )
    if pairwise:
        doc["pairwise"] = []
        by_cat: dict[str, dict] = {}
        for inst_id, cat, X in records:
            by_cat.setdefault(cat, {})[inst_id] = np.asarray(X)
        for cat, multi in by_cat.items():
            for (a, b), Xab in all_pairwise(multi).items():
                pairs = np.argwhere(Xab > 0).tolist()
                doc["pairwise"].append({"category": cat, "a": a, "b": b, "pairs": pairs})
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_matchings(path) -> tuple[list[tuple[str, str, np.ndarray]], dict | None]:
    """Inverse of :func:`export_matchings`: records and (if present) pairwise matrices."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MATCHINGS_FORMAT or doc.get("version") != MATCHINGS_VERSION:
        raise ValueError(f"{path}: not a version {MATCHINGS_VERSION} matchings file")
    records, sizes = [], {}
    for rec in doc["records"]:
        assign = rec["assignment"]
        X = np.zeros((len(assign), rec["d"]))
        X[np.arange(len(assign)), assign] = 1.0
        records.append((rec["id"], rec["category"], X))
        sizes[rec["id"]] = len(assign)
    pairwise = None
    if "pairwise" in doc:
        pairwise = {}
        for entry in doc["pairwise"]:
            a, b = entry["a"], entry["b"]
            M = np.zeros((sizes[a], sizes[b]))
            for i, j in entry["pairs"]:
                M[i, j] = 1.0
            pairwise[(a, b)] = M
    return records, pairwise
