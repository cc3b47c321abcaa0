"""Scene import/export, scene selection and report writers.

Native scene files are JSON::

    {"schema_version": 1,
     "scenes": [{"scene_id": "...", "width": W, "height": H,
                 "objects": [{"bbox": [x1, y1, x2, y2], "category": "...",
                              "area": 42, "mask": [[offset, length], ...]}],
                 "merged_gt_mask": [[offset, length], ...]}]}

Masks are uncompressed row-major runs in the scene frame. COCO input needs
``images`` (id, width, height), ``annotations`` (image_id, category_id, bbox
as xywh) and ``categories`` (id, name).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import EpisodeRecord, Scene, SceneObject
from .geometry import BBox, BitMask, GeometryError

SCHEMA_VERSION = 1
SMALL_AREA = 100
DENSE_COUNT = 15
SELECTION_RULES = ("small", "dense", "all")

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed, inconsistent or unsupported input data."""


@dataclass(frozen=True)
class DatasetManifest:
    source: str
    rule: str = "all"
    cap: int | None = None
    seed: int = 0
    category_map: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.rule not in SELECTION_RULES:
            raise DataError(f"selection rule must be one of {SELECTION_RULES}")
        if self.cap is not None and self.cap < 1:
            raise DataError("cap must be >= 1")


def _require(d: dict, keys: Iterable[str], where: str) -> None:
    missing = [k for k in keys if k not in d]
    if missing:
        raise DataError(f"{where}: missing field(s) {missing}")


def import_coco(path) -> list[Scene]:
    """COCO-style detection JSON to scenes (boxes only; polygons become their bbox)."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: top level must be an object")
    _require(data, ("images", "annotations", "categories"), str(path))
    cats = {}
    for c in data["categories"]:
        _require(c, ("id", "name"), "category")
        cats[c["id"]] = str(c["name"])
    images = {}
    for im in data["images"]:
        _require(im, ("id", "width", "height"), "image")
        images[im["id"]] = im
    objs: dict = defaultdict(list)
    for i, a in enumerate(data["annotations"]):
        _require(a, ("image_id", "category_id"), f"annotation {i}")
        if a["image_id"] not in images:
            raise DataError(f"annotation {i}: unknown image_id {a['image_id']}")
        if a["category_id"] not in cats:
            raise DataError(f"annotation {i}: unknown category_id {a['category_id']}")
        im = images[a["image_id"]]
        box = a.get("bbox")
        if box is None:
            seg = a.get("segmentation")
            if not isinstance(seg, list) or not seg or not all(isinstance(p, list) and p for p in seg):
                raise DataError(f"annotation {i}: no bbox and no polygon segmentation")
            xs = [v for p in seg for v in p[0::2]]
            ys = [v for p in seg for v in p[1::2]]
            box = [min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)]
        if not isinstance(box, list) or len(box) != 4:
            raise DataError(f"annotation {i}: bbox must be [x, y, w, h]")
        x, y, w, h = (int(round(float(v))) for v in box)
        if w <= 0 or h <= 0:
            warnings.warn(f"annotation {i}: dropped non-positive box {box}", stacklevel=2)
            continue
        try:
            b = BBox.from_xywh(x, y, w, h)
            if not b.in_frame(int(im["width"]), int(im["height"])):
                raise GeometryError(f"{b.as_list()} outside {im['width']}x{im['height']}")
        except GeometryError as exc:
            raise DataError(f"annotation {i}: {exc}") from None
        objs[a["image_id"]].append(SceneObject(b, cats[a["category_id"]]))
    scenes = []
    for iid, im in images.items():
        sid = str(im.get("file_name", iid))
        scenes.append(Scene(int(im["width"]), int(im["height"]), tuple(objs[iid]), None, sid))
    return scenes


def _passes(scene: Scene, rule: str) -> bool:
    if rule == "small":
        return any(o.area < SMALL_AREA for o in scene.objects)
    if rule == "dense":
        return len(scene.objects) > DENSE_COUNT
    return True


def select_scenes(scenes: Sequence[Scene], rule: str = "all", cap: int | None = None, seed: int = 0) -> list[Scene]:
    """Filter by rule, then keep at most ``cap`` scenes per category.

    A scene counts toward every category it contains. Scenes are visited in a
    seeded shuffle; the result is returned sorted by ``scene_id``.
    """
    if rule not in SELECTION_RULES:
        raise DataError(f"selection rule must be one of {SELECTION_RULES}")
    if cap is not None and cap < 1:
        raise DataError("cap must be >= 1")
    kept = [s for s in sorted(scenes, key=lambda s: s.scene_id) if _passes(s, rule)]
    if cap is not None:
        order = np.random.default_rng(seed).permutation(len(kept))
        used: dict[str, int] = defaultdict(int)
        chosen = []
        for i in order.tolist():
            s = kept[i]
            cs = {o.category for o in s.objects}
            if all(used[c] < cap for c in cs):
                for c in cs:
                    used[c] += 1
                chosen.append(s)
        kept = sorted(chosen, key=lambda s: s.scene_id)
    return kept


def scene_to_dict(s: Scene) -> dict:
    objs = []
    for o in s.objects:
        d = {"bbox": o.bbox.as_list(), "category": o.category, "area": o.area}
        if o.mask is not None:
            d["mask"] = o.mask.to_runs()
        objs.append(d)
    out = {"scene_id": s.scene_id, "width": s.width, "height": s.height, "objects": objs}
    if s.merged_gt_mask is not None:
        out["merged_gt_mask"] = s.merged_gt_mask.to_runs()
    return out


def scene_from_dict(d: dict) -> Scene:
    try:
        w, h = int(d["width"]), int(d["height"])
        objs = []
        for o in d["objects"]:
            mask = BitMask.from_runs(w, h, o["mask"]) if "mask" in o else None
            objs.append(SceneObject(BBox(*o["bbox"]), str(o["category"]), o.get("area"), mask))
        merged = BitMask.from_runs(w, h, d["merged_gt_mask"]) if "merged_gt_mask" in d else None
        return Scene(w, h, tuple(objs), merged, str(d["scene_id"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"scene record malformed: {exc!r}") from None
    except GeometryError as exc:
        raise DataError(f"scene {d.get('scene_id')!r}: {exc}") from None


def dumps_scenes(scenes: Sequence[Scene]) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "scenes": [scene_to_dict(s) for s in scenes]}
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_scenes(path, scenes: Sequence[Scene]) -> None:
    Path(path).write_text(dumps_scenes(scenes), encoding="utf-8")


def loads_scenes(text: str) -> list[Scene]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"scene file is not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "schema_version" not in doc or "scenes" not in doc:
        raise DataError("scene file needs 'schema_version' and 'scenes'")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise DataError(f"unsupported schema_version {doc['schema_version']!r} (expected {SCHEMA_VERSION})")
    return [scene_from_dict(d) for d in doc["scenes"]]


def load_scenes(path) -> list[Scene]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read scene file: {exc}") from None
    return loads_scenes(text)


def save_episodes(path, records: Iterable[EpisodeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.as_dict(), separators=(",", ":")) + "\n")


def to_csv(rows: Sequence[dict], header: str = "") -> str:
    """CSV text; ``header`` lines (already ``#``-prefixed) go first. Floats use repr."""
    buf = io.StringIO()
    buf.write(header)
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
