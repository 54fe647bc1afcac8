"""COCO-JSON and YOLO-txt annotation readers and writers.

Boxes are held internally in absolute pixels as top-left corner plus extent,
the COCO convention. YOLO files store normalized centre and extent per line.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import structlog
import yaml

from .errors import DatasetValidationError, ParseError
from .image_io import load_image
from .utils import read_json, write_json
from .validators import schema_errors

logger = structlog.get_logger()

PathLike = Union[str, Path]
YOLO_DESCRIPTOR = "data.yaml"
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float
    category_id: int

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")

    def clipped(self, width: int, height: int) -> Optional["BBox"]:
        """The part of the box inside a width x height image, or None when nothing is left."""
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x + self.w, float(width)), min(self.y + self.h, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1 - x0, y1 - y0, self.category_id)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id} has non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    bbox: BBox


@dataclass
class Dataset:
    images: List[ImageRecord] = field(default_factory=list)
    annotations: List[Annotation] = field(default_factory=list)
    categories: Dict[int, str] = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        duplicates = []
        for image in self.images:
            if image.id in seen:
                duplicates.append(image.id)
            seen.add(image.id)
        if duplicates:
            raise DatasetValidationError("duplicate image ids", sorted(set(duplicates)))

        missing_images = sorted({a.image_id for a in self.annotations if a.image_id not in seen})
        if missing_images:
            raise DatasetValidationError("annotations reference missing image ids", missing_images)
        missing_categories = sorted({
            a.bbox.category_id for a in self.annotations if a.bbox.category_id not in self.categories
        })
        if missing_categories:
            raise DatasetValidationError("annotations reference missing category ids", missing_categories)

    def image(self, image_id: int) -> ImageRecord:
        for image in self.images:
            if image.id == image_id:
                return image
        raise KeyError(image_id)

    def annotations_by_image(self) -> Dict[int, List[Annotation]]:
        grouped: Dict[int, List[Annotation]] = defaultdict(list)
        for annotation in sorted(self.annotations, key=lambda a: a.id):
            grouped[annotation.image_id].append(annotation)
        return grouped

    def sorted_images(self) -> List[ImageRecord]:
        return sorted(self.images, key=lambda image: image.id)


def parse_coco(json_path: PathLike) -> Dataset:
    json_path = Path(json_path)
    try:
        document = read_json(json_path)
    except ValueError as e:
        raise ParseError(f"invalid JSON: {e}", path=str(json_path)) from e

    errors = schema_errors(document, "coco-schema.json")
    if errors:
        raise ParseError(f"not a COCO annotation file: {'; '.join(errors)}", path=str(json_path))

    images = [ImageRecord(int(i["id"]), i["file_name"], int(i["width"]), int(i["height"])) for i in document["images"]]
    categories = {int(c["id"]): c["name"] for c in document["categories"]}

    annotations = []
    degenerate = []
    for entry in document["annotations"]:
        x, y, w, h = (float(v) for v in entry["bbox"])
        if not (w > 0 and h > 0):
            degenerate.append(entry["id"])
            continue
        annotations.append(Annotation(int(entry["id"]), int(entry["image_id"]),
                                      BBox(x, y, w, h, int(entry["category_id"]))))
    if degenerate:
        raise DatasetValidationError("annotations with non-positive box extent", degenerate)

    dataset = Dataset(images=images, annotations=annotations, categories=categories)
    dataset.validate()
    logger.info("COCO annotations loaded", path=str(json_path), images=len(images), annotations=len(annotations))
    return dataset


def coco_document(dataset: Dataset) -> Dict[str, list]:
    return {
        "images": [
            {"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height}
            for i in dataset.sorted_images()
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.bbox.category_id,
                "bbox": a.bbox.as_list(),
                "area": a.bbox.w * a.bbox.h,
                "iscrowd": 0,
            }
            for a in sorted(dataset.annotations, key=lambda a: a.id)
        ],
        "categories": [{"id": cid, "name": name} for cid, name in sorted(dataset.categories.items())],
    }


def write_coco(dataset: Dataset, path: PathLike) -> None:
    dataset.validate()
    write_json(coco_document(dataset), Path(path))
    logger.info("COCO annotations written", path=str(path), annotations=len(dataset.annotations))


def _label_path(labels_dir: Path, image: ImageRecord) -> Path:
    return labels_dir / f"{Path(image.file_name).stem}.txt"


def _read_descriptor(labels_dir: Path) -> Tuple[List[int], Dict[int, str]]:
    descriptor = labels_dir / YOLO_DESCRIPTOR
    if not descriptor.exists():
        return [], {}
    with open(descriptor, "r", encoding="utf-8") as f:
        document = yaml.safe_load(f) or {}
    names = list(document.get("names") or [])
    ids = [int(i) for i in document.get("category_ids") or range(len(names))]
    if len(ids) != len(names):
        raise ParseError(f"{len(names)} names but {len(ids)} category ids", path=str(descriptor))
    return ids, dict(zip(ids, names))


def _parse_label_line(line: str, number: int, path: Path) -> Tuple[int, float, float, float, float]:
    fields = line.split()
    if len(fields) != 5:
        raise ParseError(f"expected 'class cx cy w h', got {len(fields)} fields", path=str(path), line=number)
    try:
        cls = int(fields[0])
        cx, cy, w, h = (float(v) for v in fields[1:])
    except ValueError as e:
        raise ParseError(f"malformed number: {e}", path=str(path), line=number) from e
    if cls < 0:
        raise ParseError(f"negative class index {cls}", path=str(path), line=number)
    for name, value in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= value <= 1.0:
            raise ParseError(f"{name}={value} lies outside [0, 1]", path=str(path), line=number)
    if w == 0.0 or h == 0.0:
        raise ParseError("box has zero extent", path=str(path), line=number)
    return cls, cx, cy, w, h


def parse_yolo(labels_dir: PathLike, images: Sequence[ImageRecord]) -> Dataset:
    """Reads one label file per image; class indices map through data.yaml when present."""
    labels_dir = Path(labels_dir)
    class_ids, categories = _read_descriptor(labels_dir)

    annotations = []
    used_classes = set()
    next_id = 1
    for image in sorted(images, key=lambda i: i.id):
        path = _label_path(labels_dir, image)
        if not path.exists():
            raise ParseError(f"missing label file for image {image.id}", path=str(path))
        with open(path, "r", encoding="utf-8") as f:
            for number, raw in enumerate(f, start=1):
                if not raw.strip():
                    continue
                cls, cx, cy, w, h = _parse_label_line(raw, number, path)
                if class_ids:
                    if cls >= len(class_ids):
                        raise ParseError(f"class index {cls} not declared in {YOLO_DESCRIPTOR}",
                                         path=str(path), line=number)
                    category_id = class_ids[cls]
                else:
                    category_id = cls
                    used_classes.add(cls)
                box = BBox((cx - w / 2) * image.width, (cy - h / 2) * image.height,
                           w * image.width, h * image.height, category_id)
                annotations.append(Annotation(next_id, image.id, box))
                next_id += 1

    if not class_ids:
        categories = {cls: str(cls) for cls in sorted(used_classes)}
    dataset = Dataset(images=list(images), annotations=annotations, categories=categories)
    dataset.validate()
    logger.info("YOLO labels loaded", labels_dir=str(labels_dir), images=len(images), annotations=len(annotations))
    return dataset


def write_yolo(dataset: Dataset, out_dir: PathLike) -> None:
    """Writes one label file per image plus data.yaml; boxes overflowing the image are clipped first."""
    dataset.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    class_ids = sorted(dataset.categories)
    class_index = {cid: index for index, cid in enumerate(class_ids)}
    grouped = dataset.annotations_by_image()

    for image in dataset.sorted_images():
        lines = []
        for annotation in grouped.get(image.id, []):
            box = annotation.bbox.clipped(image.width, image.height)
            if box is None:
                logger.warning("Box lies outside its image, not written", annotation_id=annotation.id,
                               image_id=image.id)
                continue
            if box != annotation.bbox:
                logger.warning("Box clipped to image bounds", annotation_id=annotation.id, image_id=image.id)
            cx = (box.x + box.w / 2) / image.width
            cy = (box.y + box.h / 2) / image.height
            lines.append(
                f"{class_index[box.category_id]} {cx:.12f} {cy:.12f} "
                f"{box.w / image.width:.12f} {box.h / image.height:.12f}\n"
            )
        with open(_label_path(out_dir, image), "w", encoding="utf-8") as f:
            f.writelines(lines)

    descriptor = {
        "nc": len(class_ids),
        "names": [dataset.categories[cid] for cid in class_ids],
        "category_ids": class_ids,
    }
    with open(out_dir / YOLO_DESCRIPTOR, "w", encoding="utf-8") as f:
        yaml.safe_dump(descriptor, f, sort_keys=False)
    logger.info("YOLO labels written", out_dir=str(out_dir), images=len(dataset.images))


def list_image_files(images_dir: PathLike) -> List[Path]:
    return sorted(p for p in Path(images_dir).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_images(images_dir: PathLike) -> List[ImageRecord]:
    """Image records for every image file in a directory, ids assigned from 1 in file-name order."""
    records = []
    for image_id, path in enumerate(list_image_files(images_dir), start=1):
        _, height, width = load_image(path).shape
        records.append(ImageRecord(image_id, path.name, width, height))
    return records
