"""Keypoint dataset schema, loader/saver and the synthetic generator.

A dataset file is UTF-8 JSON Lines. The first line is a header, every
further non-blank line is one keypoint instance::

    {"format": "univmatch-keypoints", "version": 1,
     "categories": [{"name": "car", "d": 10}]}
    {"id": "car-0001", "category": "car", "split": "train",
     "keypoints": [[312.5, 140.0], [298.1, 201.7], ...], "labels": [3, 0, ...]}

``labels`` (ground-truth universe indices) may be omitted or ``null`` for
unlabelled data. Visibility is implied: occluded keypoints are simply
absent. See ``docs/dataset_format.md`` for the field list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    ProjectedPoints,
    UniversePoints,
    normalize_keypoints,
    project,
    sample_weak_perspective_camera,
)

FORMAT_NAME = "univmatch-keypoints"
FORMAT_VERSION = 1
SPLITS = ("train", "test")


class DatasetError(ValueError):
    """Malformed or invariant-violating dataset input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Category:
    name: str
    d: int


@dataclass
class KeypointInstance:
    id: str
    category: str
    keypoints: np.ndarray  # m x 2, pixels
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)

    @property
    def m(self) -> int:
        return len(self.keypoints)


@dataclass
class DatasetManifest:
    categories: list[Category]
    instances: list[KeypointInstance] = field(default_factory=list)

    def category_index(self) -> dict[str, int]:
        return {c.name: i for i, c in enumerate(self.categories)}

    def category_sizes(self) -> dict[str, int]:
        return {c.name: c.d for c in self.categories}

    def split(self, name: str) -> list[KeypointInstance]:
        return [inst for inst in self.instances if inst.split == name]

    def validate(self) -> None:
        _validate_categories([{"name": c.name, "d": c.d} for c in self.categories], None)
        sizes = self.category_sizes()
        seen: set[str] = set()
        for inst in self.instances:
            _validate_instance(inst, sizes, None)
            if inst.id in seen:
                raise DatasetError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)


def _validate_categories(cats, line) -> None:
    if not isinstance(cats, list) or not cats:
        raise DatasetError("header needs a non-empty 'categories' list", line)
    names = set()
    for c in cats:
        if not isinstance(c, dict) or set(c) != {"name", "d"}:
            raise DatasetError(f"category entries need exactly 'name' and 'd': {c!r}", line)
        if not isinstance(c["name"], str) or not c["name"]:
            raise DatasetError(f"category name must be a non-empty string: {c!r}", line)
        if not isinstance(c["d"], int) or isinstance(c["d"], bool) or c["d"] < 4:
            raise DatasetError(f"category {c['name']!r} needs integer d >= 4", line)
        if c["name"] in names:
            raise DatasetError(f"duplicate category {c['name']!r}", line)
        names.add(c["name"])


def _validate_instance(inst: KeypointInstance, sizes: dict[str, int], line) -> None:
    if inst.category not in sizes:
        raise DatasetError(f"instance {inst.id!r} has unknown category {inst.category!r}", line)
    if inst.split not in SPLITS:
        raise DatasetError(f"instance {inst.id!r} has unknown split {inst.split!r}", line)
    if inst.m < 1:
        raise DatasetError(f"instance {inst.id!r} has no keypoints", line)
    if not np.all(np.isfinite(inst.keypoints)):
        raise DatasetError(f"instance {inst.id!r} has non-finite keypoints", line)
    if inst.labels is not None:
        d = sizes[inst.category]
        if len(inst.labels) != inst.m:
            raise DatasetError(
                f"instance {inst.id!r}: {inst.m} keypoints but {len(inst.labels)} labels", line
            )
        if len(set(inst.labels.tolist())) != len(inst.labels):
            raise DatasetError(f"instance {inst.id!r} has duplicate universe labels", line)
        if inst.labels.min() < 0 or inst.labels.max() >= d:
            raise DatasetError(f"instance {inst.id!r} has labels outside [0, {d})", line)


_INSTANCE_KEYS = {"id", "category", "split", "keypoints", "labels"}


def _parse_instance(obj, line: int) -> KeypointInstance:
    if not isinstance(obj, dict):
        raise DatasetError("instance record must be an object", line)
    unknown = set(obj) - _INSTANCE_KEYS
    if unknown:
        raise DatasetError(f"unknown instance fields {sorted(unknown)}", line)
    for key in ("id", "category", "keypoints"):
        if key not in obj:
            raise DatasetError(f"instance record missing {key!r}", line)
    if not isinstance(obj["id"], str):
        raise DatasetError("instance id must be a string", line)
    kps = obj["keypoints"]
    if not isinstance(kps, list) or not all(
        isinstance(p, list)
        and len(p) == 2
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in p)
        for p in kps
    ):
        raise DatasetError(f"instance {obj['id']!r}: keypoints must be [[x, y], ...]", line)
    labels = obj.get("labels")
    if labels is not None and not (
        isinstance(labels, list)
        and all(isinstance(x, int) and not isinstance(x, bool) for x in labels)
    ):
        raise DatasetError(f"instance {obj['id']!r}: labels must be a list of integers", line)
    return KeypointInstance(
        id=obj["id"],
        category=obj["category"],
        keypoints=np.array(kps, dtype=np.float64).reshape(-1, 2),
        labels=None if labels is None else np.array(labels, dtype=np.intp),
        split=obj.get("split", "train"),
    )


def load_dataset(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    header = None
    instances: list[KeypointInstance] = []
    seen: dict[str, int] = {}
    sizes: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON ({exc.msg}, column {exc.colno})", lineno) from None
        if header is None:
            if not isinstance(obj, dict) or obj.get("format") != FORMAT_NAME:
                raise DatasetError(f"first record must be a {FORMAT_NAME!r} header", lineno)
            if obj.get("version") != FORMAT_VERSION:
                raise DatasetError(f"unsupported format version {obj.get('version')!r}", lineno)
            unknown = set(obj) - {"format", "version", "categories"}
            if unknown:
                raise DatasetError(f"unknown header fields {sorted(unknown)}", lineno)
            _validate_categories(obj.get("categories"), lineno)
            header = obj
            sizes = {c["name"]: c["d"] for c in obj["categories"]}
            continue
        inst = _parse_instance(obj, lineno)
        _validate_instance(inst, sizes, lineno)
        if inst.id in seen:
            raise DatasetError(
                f"duplicate instance id {inst.id!r} (first seen on line {seen[inst.id]})", lineno
            )
        seen[inst.id] = lineno
        instances.append(inst)
    if header is None:
        raise DatasetError("empty dataset file: missing header")
    cats = [Category(c["name"], c["d"]) for c in header["categories"]]
    return DatasetManifest(cats, instances)


def _instance_record(inst: KeypointInstance) -> dict:
    rec = {
        "id": inst.id,
        "category": inst.category,
        "split": inst.split,
        "keypoints": inst.keypoints.tolist(),
    }
    if inst.labels is not None:
        rec["labels"] = inst.labels.tolist()
    return rec


def save_dataset(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "categories": [{"name": c.name, "d": c.d} for c in manifest.categories],
    }
    lines = [json.dumps(header)]
    lines += [json.dumps(_instance_record(inst)) for inst in manifest.instances]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- synthetic data ---------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Generator settings.

    ``noise`` is the keypoint noise standard deviation in normalised units
    (fractions of the instance's bounding-box half extent); it is converted
    to pixels per instance.
    """

    categories: int = 1
    points: int | list[int] = 10
    instances: int = 200
    test_instances: int = 0
    amplitude: float = 0.1
    noise: float = 0.0
    occlusion: float = 0.0
    seed: int = 0
    pixel_scale: float = 100.0
    pixel_offset: float = 256.0
    min_visible: int = 4

    def sizes(self) -> list[int]:
        if isinstance(self.points, int):
            return [self.points] * self.categories
        if len(self.points) != self.categories:
            raise ValueError("need one universe size per category")
        return list(self.points)

    def validate(self) -> None:
        if self.categories < 1:
            raise ValueError("need at least one category")
        if self.instances < 1:
            raise ValueError("need at least one instance per category")
        if self.test_instances < 0:
            raise ValueError("test_instances must be >= 0")
        if not 0.0 <= self.occlusion < 1.0:
            raise ValueError("occlusion probability must lie in [0, 1)")
        if self.amplitude < 0 or self.noise < 0:
            raise ValueError("amplitude and noise must be non-negative")
        for d in self.sizes():
            if d < 4:
                raise ValueError(f"universe size {d} < 4")
            if d * (1.0 - self.occlusion) < 4:
                raise ValueError(
                    f"d={d} with occlusion {self.occlusion} leaves fewer than 4 visible points"
                )


@dataclass
class SyntheticResult:
    manifest: DatasetManifest
    base_shapes: dict[str, np.ndarray]  # category -> d x 3
    instance_shapes: dict[str, np.ndarray]  # instance id -> d x 3 (deformed, world frame)


def _monomials(x: np.ndarray) -> np.ndarray:
    """Degree-1 and degree-2 monomials of d x 3 points -> d x 9."""
    a, b, c = x.T
    return np.stack([a, b, c, a * a, b * b, c * c, a * b, b * c, a * c], axis=1)


def polynomial_deformation(
    shape: np.ndarray, amplitude: float, rng: np.random.Generator
) -> np.ndarray:
    """Smooth displacement of ``shape`` by a random quadratic field.

    The field is rescaled so the RMS per-point displacement equals
    ``amplitude``.
    """
    coeffs = rng.standard_normal((9, 3))
    if amplitude == 0:
        return shape.copy()
    disp = _monomials(shape) @ coeffs
    rms = float(np.sqrt(np.mean(np.sum(disp * disp, axis=1))))
    return shape + amplitude * disp / max(rms, 1e-12)


def generate_synthetic(config: SyntheticConfig) -> SyntheticResult:
    config.validate()
    rng = np.random.default_rng(config.seed)
    cats = [Category(f"cat{c}", d) for c, d in enumerate(config.sizes())]
    base_shapes: dict[str, np.ndarray] = {}
    instance_shapes: dict[str, np.ndarray] = {}
    instances: list[KeypointInstance] = []
    for cat in cats:
        base = rng.uniform(-0.5, 0.5, size=(cat.d, 3))
        base_shapes[cat.name] = base
        total = config.instances + config.test_instances
        for n in range(total):
            split = "train" if n < config.instances else "test"
            inst_id = f"{cat.name}-{n:05d}"
            shape = polynomial_deformation(base, config.amplitude, rng)
            cam = sample_weak_perspective_camera(rng)
            v = project(UniversePoints(shape, 0), cam).v  # 2 x d
            while True:
                visible = rng.random(cat.d) >= config.occlusion
                if visible.sum() >= min(config.min_visible, cat.d):
                    break
            labels = rng.permutation(np.flatnonzero(visible))
            pts = v[:, labels]
            _, tf = normalize_keypoints(ProjectedPoints(pts))
            pix = config.pixel_offset + config.pixel_scale * pts
            if config.noise > 0:
                pix = pix + rng.normal(
                    0.0, config.noise * tf.scale * config.pixel_scale, size=pix.shape
                )
            instance_shapes[inst_id] = shape
            instances.append(KeypointInstance(inst_id, cat.name, pix.T, labels, split))
    return SyntheticResult(DatasetManifest(cats, instances), base_shapes, instance_shapes)
