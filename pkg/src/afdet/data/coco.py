"""COCO-format annotation reading and writing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(Exception):
    """Base class for annotation problems."""


class AnnotationFileMissing(DatasetError):
    pass


class MalformedAnnotations(DatasetError):
    pass


class UnknownImageError(DatasetError):
    def __init__(self, annotation_id, image_id):
        super().__init__(f"annotation {annotation_id} references unknown image {image_id}")
        self.annotation_id, self.image_id = annotation_id, image_id


class BoxOutOfBoundsError(DatasetError):
    def __init__(self, annotation_id, box, size):
        super().__init__(f"annotation {annotation_id}: box {box} lies outside the {size[1]}x{size[0]} image")
        self.annotation_id = annotation_id


class DuplicateImageError(DatasetError):
    def __init__(self, image_id):
        super().__init__(f"image id {image_id} appears more than once")
        self.image_id = image_id


@dataclass
class ImageRecord:
    image_id: int
    path: str
    height: int
    width: int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    crowd_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    crowd_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            (self.image_id, self.path, self.height, self.width) == (other.image_id, other.path, other.height, other.width)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.crowd_boxes, other.crowd_boxes)
            and np.array_equal(self.crowd_classes, other.crowd_classes)
        )


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    category_map: dict[int, int]  # dataset category id -> contiguous class index
    category_names: dict[int, str] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.category_map)

    @property
    def image_sizes(self) -> dict[int, tuple[int, int]]:
        return {r.image_id: (r.height, r.width) for r in self.records}

    def class_to_category(self) -> dict[int, int]:
        return {v: k for k, v in self.category_map.items()}


def xywh_to_xyxy(b) -> list[float]:
    x, y, w, h = (float(v) for v in b)
    return [x, y, x + w, y + h]


def load_coco_subset(annotation_file, image_dir=None, tolerance: float = 1e-6) -> DatasetIndex:
    """Read a COCO-format annotation file into a :class:`DatasetIndex`.

    Records are ordered by image id. Crowd annotations are kept apart in
    ``crowd_boxes`` for evaluation-time ignoring.
    """
    path = Path(annotation_file)
    if not path.is_file():
        raise AnnotationFileMissing(f"annotation file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedAnnotations(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict) or not all(k in data for k in ("images", "annotations", "categories")):
        raise MalformedAnnotations(f"{path}: expected 'images', 'annotations' and 'categories' keys")

    try:
        cats = sorted(data["categories"], key=lambda c: int(c["id"]))
        category_map = {int(c["id"]): i for i, c in enumerate(cats)}
        names = {int(c["id"]): str(c.get("name", c["id"])) for c in cats}
        image_dir = Path(image_dir) if image_dir is not None else path.parent
        images: dict[int, dict] = {}
        for im in data["images"]:
            iid = int(im["id"])
            if iid in images:
                raise DuplicateImageError(iid)
            images[iid] = {
                "path": str(image_dir / im["file_name"]),
                "h": int(im["height"]),
                "w": int(im["width"]),
                "boxes": [],
                "classes": [],
                "crowd": [],
                "crowd_classes": [],
            }
        for ann in sorted(data["annotations"], key=lambda a: int(a["id"])):
            aid, iid = int(ann["id"]), int(ann["image_id"])
            if iid not in images:
                raise UnknownImageError(aid, iid)
            cid = int(ann["category_id"])
            if cid not in category_map:
                raise MalformedAnnotations(f"annotation {aid} has unknown category {cid}")
            im = images[iid]
            box = xywh_to_xyxy(ann["bbox"])
            t = tolerance
            if box[0] < -t or box[1] < -t or box[2] > im["w"] + t or box[3] > im["h"] + t or box[2] < box[0] or box[3] < box[1]:
                raise BoxOutOfBoundsError(aid, box, (im["h"], im["w"]))
            if ann.get("iscrowd", 0):
                im["crowd"].append(box)
                im["crowd_classes"].append(category_map[cid])
            else:
                im["boxes"].append(box)
                im["classes"].append(category_map[cid])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise MalformedAnnotations(f"{path}: {e!r}") from e

    records = [
        ImageRecord(
            image_id=iid,
            path=im["path"],
            height=im["h"],
            width=im["w"],
            boxes=np.array(im["boxes"], dtype=np.float64).reshape(-1, 4),
            classes=np.array(im["classes"], dtype=np.int64),
            crowd_boxes=np.array(im["crowd"], dtype=np.float64).reshape(-1, 4),
            crowd_classes=np.array(im["crowd_classes"], dtype=np.int64),
        )
        for iid, im in sorted(images.items())
    ]
    return DatasetIndex(records, category_map, names)


def to_coco_dict(index: DatasetIndex, image_root=None) -> dict:
    """Inverse of :func:`load_coco_subset` (annotation ids are renumbered from 1)."""
    cat_of = index.class_to_category()
    images, anns = [], []
    aid = 1
    for r in index.records:
        name = os.path.relpath(r.path, image_root) if image_root is not None else os.path.basename(r.path)
        images.append({"id": r.image_id, "file_name": name, "height": r.height, "width": r.width})
        for b, c in zip(r.boxes, r.classes):
            x0, y0, x1, y1 = (float(v) for v in b)
            anns.append(
                {"id": aid, "image_id": r.image_id, "category_id": cat_of[int(c)], "bbox": [x0, y0, x1 - x0, y1 - y0],
                 "area": (x1 - x0) * (y1 - y0), "iscrowd": 0}
            )
            aid += 1
        for b, c in zip(r.crowd_boxes, r.crowd_classes):
            x0, y0, x1, y1 = (float(v) for v in b)
            anns.append(
                {"id": aid, "image_id": r.image_id, "category_id": cat_of[int(c)],
                 "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0), "iscrowd": 1}
            )
            aid += 1
    categories = [
        {"id": cid, "name": index.category_names.get(cid, str(cid))} for cid in sorted(index.category_map)
    ]
    return {"images": images, "annotations": anns, "categories": categories}


def write_coco(index: DatasetIndex, path, image_root=None) -> None:
    from ..io import atomic_write_text

    atomic_write_text(path, json.dumps(to_coco_dict(index, image_root), indent=1))
