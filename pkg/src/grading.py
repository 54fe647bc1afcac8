"""Snow coverage rate (SCR) per object and difficulty grading of whole datasets.

SCR is the fraction of snow pixels inside an object's box. An image's
aggregate SCR (maximum or mean over its objects) is bucketed by three
thresholds into one of four difficulty levels; a value equal to a threshold
falls into the higher level.
"""

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .dataset_io import Annotation, BBox, Dataset, ImageRecord
from .errors import ParseError, ShapeError, SnowfuseError
from .image_io import load_image
from .scr_net import ScrModel, infer_snow_map
from .tensor_core import Tensor
from .utils import read_json, resolve_jobs, write_json
from .validators import schema_errors

logger = structlog.get_logger()

PathLike = Union[str, Path]
REPORT_SCHEMA = "grading-report-schema.json"


class DifficultyLevel(IntEnum):
    EASY = 0
    NORMAL = 1
    DIFFICULT = 2
    PARTICULARLY_DIFFICULT = 3

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "DifficultyLevel":
        return cls[key.upper()]


class ImageAggregate(str, Enum):
    MAX = "max"
    MEAN = "mean"


@dataclass(frozen=True)
class GradingPolicy:
    thresholds: Tuple[float, float, float] = (0.25, 0.50, 0.75)
    image_aggregate: ImageAggregate = ImageAggregate.MAX

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "image_aggregate", ImageAggregate(self.image_aggregate))
        if len(self.thresholds) != 3:
            raise ValueError(f"exactly three thresholds are needed, got {self.thresholds}")
        t1, t2, t3 = self.thresholds
        if not 0.0 < t1 < t2 < t3 < 1.0:
            raise ValueError(f"thresholds must satisfy 0 < t1 < t2 < t3 < 1, got {self.thresholds}")

    def level(self, aggregate: float) -> DifficultyLevel:
        for level, threshold in zip(DifficultyLevel, self.thresholds):
            if aggregate < threshold:
                return level
        return DifficultyLevel.PARTICULARLY_DIFFICULT

    def to_dict(self) -> Dict[str, Any]:
        return {"thresholds": list(self.thresholds), "image_aggregate": self.image_aggregate.value}


def box_pixel_range(box: BBox, width: int, height: int) -> Optional[Tuple[int, int, int, int]]:
    """Pixel columns [x0, x1) and rows [y0, y1) touched by the box, clipped to the image."""
    x0 = max(0, math.floor(box.x))
    y0 = max(0, math.floor(box.y))
    x1 = min(width, math.ceil(box.x + box.w))
    y1 = min(height, math.ceil(box.y + box.h))
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, x1, y0, y1


def scr_for_bbox(binary_snow_map: np.ndarray, box: BBox) -> float:
    snow = np.asarray(binary_snow_map)
    if snow.ndim != 2:
        raise ShapeError(f"snow map must be H x W, got {snow.shape}")
    height, width = snow.shape
    pixels = box_pixel_range(box, width, height)
    if pixels is None:
        raise ValueError(f"box {box.as_list()} lies entirely outside the {width}x{height} image")
    x0, x1, y0, y1 = pixels
    region = snow[y0:y1, x0:x1]
    return float(np.count_nonzero(region) / region.size)


@dataclass(frozen=True)
class ImageGrade:
    level: DifficultyLevel
    aggregate: float
    flagged: bool = False


def grade_image(scrs: Sequence[float], policy: GradingPolicy) -> ImageGrade:
    if not scrs:
        return ImageGrade(DifficultyLevel.EASY, 0.0, flagged=True)
    if policy.image_aggregate is ImageAggregate.MAX:
        aggregate = float(max(scrs))
    else:
        aggregate = float(np.mean(scrs))
    return ImageGrade(policy.level(aggregate), aggregate)


@dataclass
class ObjectScr:
    annotation_id: int
    category_id: int
    scr: float


@dataclass
class ImageReport:
    id: int
    file_name: str
    scrs: List[ObjectScr]
    aggregate: float
    level: DifficultyLevel
    flagged: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "file_name": self.file_name,
            "scrs": [{"annotation_id": o.annotation_id, "category_id": o.category_id, "scr": o.scr}
                     for o in self.scrs],
            "aggregate": self.aggregate,
            "level": self.level.key,
            "flagged": self.flagged,
        }


@dataclass
class SkippedImage:
    id: int
    file_name: str
    reason: str


@dataclass
class GradingReport:
    policy: GradingPolicy
    per_image: List[ImageReport] = field(default_factory=list)
    skipped: List[SkippedImage] = field(default_factory=list)
    category_counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @property
    def histogram(self) -> Dict[str, int]:
        counts = Counter(record.level for record in self.per_image)
        return {level.key: counts.get(level, 0) for level in DifficultyLevel}

    def to_dict(self) -> Dict[str, Any]:
        category_counts = {level.key: dict(sorted(self.category_counts.get(level.key, {}).items()))
                           for level in DifficultyLevel}
        return {
            "policy": self.policy.to_dict(),
            "per_image": [record.to_dict() for record in self.per_image],
            "histogram": self.histogram,
            "skipped": [{"id": s.id, "file_name": s.file_name, "reason": s.reason} for s in self.skipped],
            "category_counts": category_counts,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "GradingReport":
        policy = GradingPolicy(tuple(document["policy"]["thresholds"]), document["policy"]["image_aggregate"])
        per_image = [
            ImageReport(
                id=entry["id"],
                file_name=entry["file_name"],
                scrs=[ObjectScr(o["annotation_id"], o["category_id"], o["scr"]) for o in entry["scrs"]],
                aggregate=entry["aggregate"],
                level=DifficultyLevel.from_key(entry["level"]),
                flagged=entry["flagged"],
            )
            for entry in document["per_image"]
        ]
        skipped = [SkippedImage(s["id"], s["file_name"], s["reason"]) for s in document["skipped"]]
        return cls(policy, per_image, skipped, {k: dict(v) for k, v in document["category_counts"].items()})


def _category_counts(records: Sequence[ImageReport], categories: Dict[int, str]) -> Dict[str, Dict[str, int]]:
    counts: Dict[str, Dict[str, int]] = {level.key: {} for level in DifficultyLevel}
    for record in records:
        bucket = counts[record.level.key]
        for obj in record.scrs:
            name = categories.get(obj.category_id, str(obj.category_id))
            bucket[name] = bucket.get(name, 0) + 1
    return counts


ImageLoader = Callable[[ImageRecord], Tensor]


def grade_dataset(dataset: Dataset, model: ScrModel, policy: Optional[GradingPolicy] = None,
                  images_dir: Optional[PathLike] = None, jobs: Optional[int] = None,
                  image_loader: Optional[ImageLoader] = None) -> GradingReport:
    """Grades every image of the dataset; unreadable images are recorded as skipped.

    Images are read through ``image_loader`` or, by default, from
    ``images_dir / file_name``.
    """
    policy = policy or GradingPolicy()
    dataset.validate()
    if image_loader is None:
        base = Path(images_dir) if images_dir is not None else Path(".")

        def image_loader(record: ImageRecord) -> Tensor:
            return load_image(base / record.file_name)

    grader_logger = logger.bind(component="grader")
    grouped = dataset.annotations_by_image()
    images = dataset.sorted_images()

    def grade_one(record: ImageRecord) -> Union[ImageReport, SkippedImage]:
        annotations: List[Annotation] = grouped.get(record.id, [])
        if not annotations:
            grade = grade_image([], policy)
            return ImageReport(record.id, record.file_name, [], grade.aggregate, grade.level, grade.flagged)
        try:
            image = image_loader(record)
            if image.shape[1:] != (record.height, record.width):
                raise ShapeError(f"image is {image.shape[2]}x{image.shape[1]}, annotations say "
                                 f"{record.width}x{record.height}")
            snow = infer_snow_map(model, image).binary_map
            scrs = [ObjectScr(a.id, a.bbox.category_id, scr_for_bbox(snow, a.bbox)) for a in annotations]
        except (OSError, ValueError, SnowfuseError) as e:
            grader_logger.warning("Image skipped", image_id=record.id, file_name=record.file_name, reason=str(e))
            return SkippedImage(record.id, record.file_name, str(e))
        grade = grade_image([o.scr for o in scrs], policy)
        return ImageReport(record.id, record.file_name, scrs, grade.aggregate, grade.level, grade.flagged)

    workers = resolve_jobs(jobs)
    grader_logger.info("Grading dataset", images=len(images), annotations=len(dataset.annotations), jobs=workers)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        outcomes = list(executor.map(grade_one, images))

    per_image = sorted((o for o in outcomes if isinstance(o, ImageReport)), key=lambda r: r.id)
    skipped = sorted((o for o in outcomes if isinstance(o, SkippedImage)), key=lambda s: s.id)
    report = GradingReport(policy, per_image, skipped, _category_counts(per_image, dataset.categories))
    grader_logger.info("Grading finished", histogram=report.histogram, skipped=len(skipped))
    return report


def write_grading_report(report: GradingReport, path: PathLike) -> None:
    write_json(report.to_dict(), Path(path))
    logger.info("Grading report written", path=str(path), images=len(report.per_image))


def read_grading_report(path: PathLike) -> GradingReport:
    document = read_json(Path(path))
    errors = schema_errors(document, REPORT_SCHEMA)
    if errors:
        raise ParseError(f"not a grading report: {'; '.join(errors)}", path=str(path))
    return GradingReport.from_dict(document)


DEFAULT_SPLIT = (1701, 189, 210)
SPLIT_NAMES = ("train", "val", "test")


def split_dataset(dataset: Dataset, fractions: Sequence[float] = DEFAULT_SPLIT, seed: int = 0) -> Dict[str, Dataset]:
    """Randomly allocates images (with their annotations) to train/val/test subsets.

    ``fractions`` are relative weights; train and val sizes are rounded down and
    test takes the remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ValueError(f"need three nonnegative split weights, got {list(fractions)}")
    total = float(sum(fractions))
    images = dataset.sorted_images()
    order = np.random.default_rng(seed).permutation(len(images))

    n_train = int(math.floor(len(images) * fractions[0] / total))
    n_val = int(math.floor(len(images) * fractions[1] / total))
    bounds = (0, n_train, n_train + n_val, len(images))

    grouped = dataset.annotations_by_image()
    subsets = {}
    for name, lo, hi in zip(SPLIT_NAMES, bounds, bounds[1:]):
        chosen = sorted((images[i] for i in order[lo:hi]), key=lambda image: image.id)
        annotations = [a for image in chosen for a in grouped.get(image.id, [])]
        subsets[name] = Dataset(images=chosen, annotations=annotations, categories=dict(dataset.categories))
    logger.info("Dataset split", **{name: len(subset.images) for name, subset in subsets.items()})
    return subsets
