import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.dataset_io import (
    Annotation,
    BBox,
    Dataset,
    ImageRecord,
    list_image_files,
    parse_coco,
    parse_yolo,
    scan_images,
    write_coco,
    write_yolo,
)
from src.errors import DatasetValidationError, ParseError
from src.image_io import save_image

FIXTURES = Path(__file__).parent.parent / "fixtures"
COCO_SAMPLE = FIXTURES / "coco_sample.json"


def _write_json(path, document):
    with open(path, "w") as f:
        json.dump(document, f)
    return path


def _sample_document():
    with open(COCO_SAMPLE, "r") as f:
        return json.load(f)


class TestBBox:

    def test_positive_extent_required(self):
        for w, h in [(0, 1), (1, 0), (-1, 2)]:
            with pytest.raises(ValueError):
                BBox(0, 0, w, h, 1)

    def test_clipping(self):
        box = BBox(6, 6, 8, 8, 1)

        assert box.clipped(10, 10) == BBox(6, 6, 4, 4, 1)
        assert box.clipped(20, 20) == box
        assert BBox(-2, 3, 4, 2, 1).clipped(10, 10) == BBox(0, 3, 2, 2, 1)
        assert BBox(12, 0, 3, 3, 1).clipped(10, 10) is None

    def test_image_record_size(self):
        with pytest.raises(ValueError):
            ImageRecord(1, "a.ppm", 0, 10)


class TestCoco:

    def test_parse_sample(self):
        dataset = parse_coco(COCO_SAMPLE)

        assert [image.id for image in dataset.images] == [1, 2]
        assert dataset.image(2) == ImageRecord(2, "street_002.ppm", 10, 10)
        assert dataset.categories == {1: "car", 2: "person"}
        assert dataset.annotations[0] == Annotation(1, 1, BBox(4.0, 4.0, 10.0, 10.0, 1))
        assert [len(v) for v in dataset.annotations_by_image().values()] == [2, 1]

    def test_round_trip(self, tmp_path):
        dataset = parse_coco(COCO_SAMPLE)
        path = tmp_path / "out" / "annotations.json"

        write_coco(dataset, path)
        reloaded = parse_coco(path)

        assert reloaded.images == dataset.images
        assert reloaded.annotations == dataset.annotations
        assert reloaded.categories == dataset.categories

    def test_written_document(self, tmp_path):
        path = tmp_path / "annotations.json"
        write_coco(parse_coco(COCO_SAMPLE), path)

        with open(path, "r") as f:
            document = json.load(f)
        assert list(document) == ["images", "annotations", "categories"]
        assert document["annotations"][2]["area"] == 64.0
        assert all(a["iscrowd"] == 0 for a in document["annotations"])

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ParseError, match="invalid JSON"):
            parse_coco(path)

    def test_schema_violations(self, tmp_path):
        mutations = [
            lambda d: d.pop("categories"),
            lambda d: d["images"][0].pop("file_name"),
            lambda d: d["annotations"][0].update(bbox=[1, 2, 3]),
            lambda d: d["images"][1].update(width=0),
        ]
        for index, mutate in enumerate(mutations):
            document = _sample_document()
            mutate(document)
            path = _write_json(tmp_path / f"case{index}.json", document)
            with pytest.raises(ParseError, match="not a COCO"):
                parse_coco(path)

    def test_referential_errors(self, tmp_path):
        cases = [
            (lambda d: d["annotations"][1].update(bbox=[0, 0, 0, 4]), [2]),
            (lambda d: d["annotations"][2].update(image_id=9), [9]),
            (lambda d: d["annotations"][0].update(category_id=7), [7]),
            (lambda d: d["images"][1].update(id=1), [1]),
        ]
        for index, (mutate, offenders) in enumerate(cases):
            document = _sample_document()
            mutate(document)
            path = _write_json(tmp_path / f"case{index}.json", document)
            with pytest.raises(DatasetValidationError) as info:
                parse_coco(path)
            assert info.value.offenders == offenders, f"case {index}"


class TestYolo:

    def setup_method(self):
        self.dataset = parse_coco(COCO_SAMPLE)

    def test_write_labels(self, tmp_path):
        write_yolo(self.dataset, tmp_path)

        lines = (tmp_path / "street_001.txt").read_text().splitlines()
        assert lines == [
            "0 0.450000000000 0.562500000000 0.500000000000 0.625000000000",
            "1 0.125000000000 0.125000000000 0.250000000000 0.250000000000",
        ]
        # the overflowing box on image 2 is clipped to (6, 6, 4, 4)
        assert (tmp_path / "street_002.txt").read_text() == (
            "0 0.800000000000 0.800000000000 0.400000000000 0.400000000000\n"
        )

    def test_write_descriptor(self, tmp_path):
        write_yolo(self.dataset, tmp_path)

        with open(tmp_path / "data.yaml", "r") as f:
            descriptor = yaml.safe_load(f)
        assert descriptor == {"nc": 2, "names": ["car", "person"], "category_ids": [1, 2]}

    def test_round_trip_through_yolo(self, tmp_path):
        write_yolo(self.dataset, tmp_path)

        reloaded = parse_yolo(tmp_path, self.dataset.images)

        assert reloaded.categories == self.dataset.categories
        expected = [a.bbox.clipped(10 if a.image_id == 2 else 20, 10 if a.image_id == 2 else 16)
                    for a in self.dataset.annotations]
        for got, want in zip(reloaded.annotations, expected):
            assert got.bbox.category_id == want.category_id
            np.testing.assert_allclose(got.bbox.as_list(), want.as_list(), atol=1e-9)

    def test_random_boxes_survive_conversion(self, tmp_path):
        rng = np.random.default_rng(4)
        dataset = Dataset(categories={0: "car", 5: "person"})
        for image_id in range(1, 101):
            width, height = (int(v) for v in rng.integers(16, 1024, size=2))
            dataset.images.append(ImageRecord(image_id, f"{image_id:03d}.ppm", width, height))
            for _ in range(100):
                x, y = rng.uniform(0, width - 1), rng.uniform(0, height - 1)
                w, h = rng.uniform(0.5, width - x), rng.uniform(0.5, height - y)
                box = BBox(x, y, min(w, width - x), min(h, height - y), int(rng.choice([0, 5])))
                dataset.annotations.append(Annotation(len(dataset.annotations) + 1, image_id, box))

        write_yolo(dataset, tmp_path)
        reloaded = parse_yolo(tmp_path, dataset.images)

        assert len(reloaded.annotations) == 10000
        for original, restored in zip(dataset.annotations, reloaded.annotations):
            assert restored.image_id == original.image_id
            assert restored.bbox.category_id == original.bbox.category_id
            assert np.abs(np.subtract(restored.bbox.as_list(), original.bbox.as_list())).max() <= 1e-6

    def test_box_outside_image_is_dropped(self, tmp_path):
        dataset = Dataset(
            images=[ImageRecord(1, "a.ppm", 10, 10)],
            annotations=[Annotation(1, 1, BBox(20, 20, 5, 5, 0))],
            categories={0: "car"},
        )
        write_yolo(dataset, tmp_path)
        assert (tmp_path / "a.txt").read_text() == ""

    def test_without_descriptor(self, tmp_path):
        (tmp_path / "a.txt").write_text("3 0.5 0.5 0.2 0.4\n\n", encoding="utf-8")

        dataset = parse_yolo(tmp_path, [ImageRecord(1, "a.ppm", 10, 20)])

        assert dataset.categories == {3: "3"}
        assert dataset.annotations[0].bbox.category_id == 3
        np.testing.assert_allclose(dataset.annotations[0].bbox.as_list(), [4.0, 6.0, 2.0, 8.0])

    def test_malformed_lines(self, tmp_path):
        cases = [
            ("0 0.5 0.5 0.2", "fields"),
            ("car 0.5 0.5 0.2 0.2", "malformed"),
            ("-1 0.5 0.5 0.2 0.2", "negative"),
            ("0 1.5 0.5 0.2 0.2", "outside"),
            ("0 0.5 0.5 0.0 0.2", "zero extent"),
        ]
        image = ImageRecord(1, "a.ppm", 10, 10)
        for text, message in cases:
            (tmp_path / "a.txt").write_text("0 0.5 0.5 0.1 0.1\n" + text + "\n", encoding="utf-8")
            with pytest.raises(ParseError, match=message) as info:
                parse_yolo(tmp_path, [image])
            assert info.value.line == 2, text

    def test_undeclared_class(self, tmp_path):
        (tmp_path / "data.yaml").write_text("names: [car]\n", encoding="utf-8")
        (tmp_path / "a.txt").write_text("1 0.5 0.5 0.2 0.2\n", encoding="utf-8")
        with pytest.raises(ParseError, match="not declared"):
            parse_yolo(tmp_path, [ImageRecord(1, "a.ppm", 10, 10)])

    def test_descriptor_length_mismatch(self, tmp_path):
        (tmp_path / "data.yaml").write_text("names: [car, person]\ncategory_ids: [1]\n", encoding="utf-8")
        with pytest.raises(ParseError):
            parse_yolo(tmp_path, [ImageRecord(1, "a.ppm", 10, 10)])

    def test_missing_label_file(self, tmp_path):
        with pytest.raises(ParseError, match="missing label file"):
            parse_yolo(tmp_path, [ImageRecord(1, "a.ppm", 10, 10)])


class TestImageScan:

    def test_ids_follow_file_names(self, tmp_path):
        save_image(np.zeros((3, 4, 6)), tmp_path / "b.ppm")
        save_image(np.zeros((2, 3)), tmp_path / "a.pgm")
        (tmp_path / "notes.txt").write_text("ignored", encoding="utf-8")

        records = scan_images(tmp_path)

        assert [p.name for p in list_image_files(tmp_path)] == ["a.pgm", "b.ppm"]
        assert records == [ImageRecord(1, "a.pgm", 3, 2), ImageRecord(2, "b.ppm", 6, 4)]
