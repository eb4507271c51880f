"""Data provisioning: synthetic multi-domain sets, the on-disk dataset format,
annotation-driven crop ingestion, and seeded batch iteration.

Dataset directory layout, shared by generated and ingested data:
    meta     text file: name, classes, dim, count (dotted-free `key = value`)
    samples  binary: magic "DGDS" | u32 version=1 | u64 count | u32 dim,
             then per sample: u16 class id + dim little-endian f32 features

Synthetic domains share class geometry but differ by a random affine map:
class means sit at delta times a unit direction; domain i applies
A_i = I + alpha·R_i (R_i entries ~ N(0, 1/d)) plus a shift of magnitude
alpha·delta.  At alpha = sigma = 0 every domain collapses to the same C points,
which pins the conventions in tests.
"""

from __future__ import annotations

import logging
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (AnnotationParseError, ConfigError, ContractError,
                     DataError, ShapeError)
from .losses import LabeledBatch

log = logging.getLogger(__name__)

MAGIC = b"DGDS"
VERSION = 1

DEFAULT_CLASS_NAMES = ("D00", "D10", "D20", "D40")

# raw annotation label → retained class; the last three collapse into D40
DEFAULT_CLASS_MAP = {
    "D00": "D00",
    "D10": "D10",
    "D20": "D20",
    "D40": "D40",
    "D43": "D40",
    "D44": "D40",
}


@dataclass(frozen=True)
class DomainDataset:
    """One source: feature rows, class ids, and the class-name table."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "features",
                           np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels",
                           np.asarray(self.labels, dtype=np.intp))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-d, got {self.features.shape}")
        n = self.features.shape[0]
        if n == 0:
            raise DataError(f"dataset {self.name!r} is empty")
        if self.labels.shape != (n,):
            raise ContractError(
                f"dataset {self.name!r}: {n} rows but labels {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ContractError(
                f"dataset {self.name!r}: class id outside [0, {len(self.class_names)})")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"dataset {self.name!r} contains non-finite features")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


@dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int
    num_classes: int = 4
    feature_dim: int = 16
    per_class: int = 200
    delta: float = 5.0
    alpha: float = 0.4
    sigma: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.num_domains < 2:
            raise ConfigError("synthetic spec needs num_domains >= 2")
        if self.num_classes < 2 or self.feature_dim < 1 or self.per_class < 1:
            raise ConfigError(
                f"non-positive synthetic spec field: C={self.num_classes}, "
                f"d={self.feature_dim}, per_class={self.per_class}")
        if self.delta <= 0 or self.alpha < 0 or self.sigma < 0:
            raise ConfigError(
                f"need delta > 0, alpha >= 0, sigma >= 0; got "
                f"{self.delta}/{self.alpha}/{self.sigma}")


def gen_synthetic(spec: SyntheticSpec) -> list[DomainDataset]:
    """Seeded multi-domain draw; labels are domain-invariant by construction."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c, d = spec.num_classes, spec.feature_dim

    if c > d:
        raise ConfigError(f"num_classes {c} exceeds feature_dim {d}")
    dirs = np.linalg.qr(rng.standard_normal((d, c)))[0].T
    means = spec.delta * dirs

    class_names = tuple(DEFAULT_CLASS_NAMES[:c]) if c <= 4 \
        else tuple(f"C{i:02d}" for i in range(c))

    out = []
    for i in range(spec.num_domains):
        transform = np.eye(d) + spec.alpha * rng.standard_normal((d, d)) / d ** 0.6
        shift = spec.alpha * spec.delta * rng.standard_normal(d)
        rows, labels = [], []
        for cls in range(c):
            base = means[cls] + spec.sigma * rng.standard_normal((spec.per_class, d))
            rows.append(base @ transform.T + shift)
            labels.append(np.full(spec.per_class, cls, dtype=np.intp))
        out.append(DomainDataset(name=f"dom{i}",
                                 features=np.vstack(rows),
                                 labels=np.concatenate(labels),
                                 class_names=class_names))
    return out


# -- on-disk format -------------------------------------------------------

def save_dataset(ds: DomainDataset, dir_path: str | Path) -> None:
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    meta = (f"name = {ds.name}\n"
            f"classes = {','.join(ds.class_names)}\n"
            f"dim = {ds.dim}\n"
            f"count = {len(ds)}\n")
    (path / "meta").write_text(meta, encoding="utf-8")

    record = np.dtype([("cls", "<u2"), ("feat", "<f4", (ds.dim,))])
    table = np.empty(len(ds), dtype=record)
    table["cls"] = ds.labels.astype("<u2")
    table["feat"] = ds.features.astype("<f4")
    header = MAGIC + struct.pack("<IQI", VERSION, len(ds), ds.dim)
    (path / "samples").write_bytes(header + table.tobytes())


def _parse_meta(path: Path) -> dict[str, str]:
    fields = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise DataError(f"malformed meta line in {path}: {raw!r}")
        fields[key.strip()] = val.strip()
    return fields


def load_dataset(dir_path: str | Path) -> DomainDataset:
    path = Path(dir_path)
    meta_path, samples_path = path / "meta", path / "samples"
    if not meta_path.is_file() or not samples_path.is_file():
        raise DataError(f"{path} is not a dataset directory (meta/samples missing)")
    meta = _parse_meta(meta_path)
    for key in ("name", "classes", "dim", "count"):
        if key not in meta:
            raise DataError(f"meta in {path} lacks {key!r}")

    raw = samples_path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"bad magic {raw[:4]!r} in {samples_path}")
    if len(raw) < 20:
        raise DataError(f"truncated header in {samples_path}")
    version, count, dim = struct.unpack_from("<IQI", raw, 4)
    if version != VERSION:
        raise DataError(f"unsupported dataset version {version} in {samples_path}")
    if count != int(meta["count"]) or dim != int(meta["dim"]):
        raise DataError(f"meta/samples disagreement in {path}")
    record = np.dtype([("cls", "<u2"), ("feat", "<f4", (dim,))])
    body = raw[20:]
    if len(body) != count * record.itemsize:
        raise DataError(f"truncated sample block in {samples_path}")
    table = np.frombuffer(body, dtype=record)
    return DomainDataset(name=meta["name"],
                         features=table["feat"].astype(np.float64),
                         labels=table["cls"].astype(np.intp),
                         class_names=tuple(meta["classes"].split(",")))


def load_datasets(paths: Sequence[str | Path]) -> list[DomainDataset]:
    out = [load_dataset(p) for p in paths]
    names = [ds.name for ds in out]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate source names: {names}")
    dims = {ds.dim for ds in out}
    if len(dims) > 1:
        raise DataError(f"sources disagree on feature dim: {sorted(dims)}")
    return out


# -- annotation-driven ingestion ------------------------------------------

_IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


def _find_image(images_dir: Path, xml_path: Path, filename: str | None) -> Path | None:
    if filename:
        direct = images_dir / filename
        if direct.is_file():
            return direct
    for suffix in _IMAGE_SUFFIXES:
        cand = images_dir / (xml_path.stem + suffix)
        if cand.is_file():
            return cand
    return None


def _boxes_of(xml_path: Path) -> list[tuple[str, int, int, int, int]]:
    try:
        root = ET.parse(xml_path).getroot()
    except ET.ParseError as exc:
        raise AnnotationParseError(f"cannot parse {xml_path}: {exc}")
    boxes = []
    for obj in root.iter("object"):
        raw = obj.findtext("name")
        bnd = obj.find("bndbox")
        if raw is None or bnd is None:
            raise AnnotationParseError(f"{xml_path}: object lacks name or bndbox")
        try:
            coords = [int(float(bnd.findtext(tag)))
                      for tag in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError):
            raise AnnotationParseError(f"{xml_path}: non-numeric bndbox")
        boxes.append((raw, *coords))
    return boxes


def ingest_crops(images_dir: str | Path, annotations_dir: str | Path,
                 min_area: int = 400, out_size: int = 64,
                 class_map: Mapping[str, str] | None = None,
                 name: str = "ingested") -> DomainDataset:
    """Crop annotated boxes into flat [0,1] RGB vectors of out_size².

    Boxes below `min_area` pixels (strict) and labels outside `class_map` are
    dropped; unreadable images are warned about and skipped; the sample order
    is (annotation file name, box index).
    """
    images_dir, annotations_dir = Path(images_dir), Path(annotations_dir)
    if not images_dir.is_dir() or not annotations_dir.is_dir():
        raise DataError(f"missing directory: {images_dir} or {annotations_dir}")
    class_map = dict(DEFAULT_CLASS_MAP if class_map is None else class_map)
    class_names = tuple(dict.fromkeys(class_map.values()))

    rows, labels = [], []
    for xml_path in sorted(annotations_dir.glob("*.xml")):
        boxes = _boxes_of(xml_path)
        root = ET.parse(xml_path).getroot()
        img_path = _find_image(images_dir, xml_path, root.findtext("filename"))
        if img_path is None:
            log.warning("no image for %s, skipping", xml_path.name)
            continue
        try:
            img = Image.open(img_path).convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("unreadable image %s (%s), skipping", img_path.name, exc)
            continue
        for raw, xmin, ymin, xmax, ymax in boxes:
            if raw not in class_map:
                continue
            if (xmax - xmin) * (ymax - ymin) < min_area:
                continue
            crop = img.crop((xmin, ymin, xmax, ymax))
            crop = crop.resize((out_size, out_size), Image.BILINEAR)
            rows.append(np.asarray(crop, dtype=np.float64).reshape(-1) / 255.0)
            labels.append(class_names.index(class_map[raw]))
    if not rows:
        raise DataError(f"no crops retained from {annotations_dir}")
    return DomainDataset(name=name, features=np.vstack(rows),
                         labels=np.asarray(labels, dtype=np.intp),
                         class_names=class_names)


# -- batching -------------------------------------------------------------

def _as_rng(rng: int | np.random.Generator) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def batch_iterator(datasets: Sequence[DomainDataset] | DomainDataset,
                   batch_size: int, rng: int | np.random.Generator,
                   interleave: bool = False,
                   domain_ids: Sequence[int] | None = None) -> list[LabeledBatch]:
    """One epoch of seeded batches covering every sample exactly once.

    `interleave` round-robins the sources sample by sample so batches mix
    domains; otherwise all sources are pooled into one global shuffle.  The
    final short batch is kept.
    """
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if not datasets:
        raise ContractError("batch_iterator needs at least one dataset")
    gen = _as_rng(rng)
    ids = list(range(len(datasets))) if domain_ids is None else list(domain_ids)
    if len(ids) != len(datasets):
        raise ContractError(f"{len(datasets)} datasets but {len(ids)} domain ids")

    perms = [gen.permutation(len(ds)) for ds in datasets]
    if interleave:
        stream: list[tuple[int, int]] = []
        cursors = [0] * len(datasets)
        remaining = sum(map(len, perms))
        while remaining:
            for k, perm in enumerate(perms):
                if cursors[k] < len(perm):
                    stream.append((k, perm[cursors[k]]))
                    cursors[k] += 1
                    remaining -= 1
    else:
        pooled = [(k, i) for k, perm in enumerate(perms) for i in perm]
        order = gen.permutation(len(pooled))
        stream = [pooled[j] for j in order]

    batches = []
    for start in range(0, len(stream), batch_size):
        chunk = stream[start:start + batch_size]
        inputs = np.vstack([datasets[k].features[i] for k, i in chunk])
        labels = np.array([datasets[k].labels[i] for k, i in chunk])
        domains = np.array([ids[k] for k, _ in chunk])
        batches.append(LabeledBatch(inputs=inputs, labels=labels, domains=domains))
    return batches
