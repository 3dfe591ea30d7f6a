"""POI ingestion, coordinate normalization, description templates, splits and synthetic cities."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

POI_COLUMNS = ("id", "lon", "lat", "name", "category_l1", "category_l2")


class PoiFormatError(ValueError):
    """Malformed POI, LUC or SDM input file. ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"{message}, line {line}")


@dataclass(frozen=True)
class PoiRecord:
    id: str
    lon: float
    lat: float
    name: str
    category_l1: str
    category_l2: str

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"coordinate out of range: ({self.lon}, {self.lat})")
        for attr in ("id", "name", "category_l1", "category_l2"):
            if not getattr(self, attr).strip():
                raise ValueError(f"empty {attr} for POI {self.id!r}")


class Variant(str, enum.Enum):
    NAME_AND_TYPE = "name_and_type"
    NAME_ONLY = "name_only"
    TYPE_ONLY = "type_only"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        key = value.strip().lower().replace("-", "_")
        aliases = {"nameandtype": "name_and_type", "nameonly": "name_only", "typeonly": "type_only"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown description variant {value!r}; "
                             f"expected one of {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class Description:
    poi_id: str
    text: str
    variant: Variant


def render_description(record: PoiRecord, variant: Variant | str = Variant.NAME_AND_TYPE) -> Description:
    variant = Variant.parse(variant)
    if variant is Variant.NAME_AND_TYPE:
        text = f"A place of {record.category_l2}, a type of {record.category_l1}, named {record.name}."
    elif variant is Variant.TYPE_ONLY:
        text = f"A place of {record.category_l2}, a type of {record.category_l1}."
    else:
        text = f"A place named {record.name}."
    return Description(poi_id=record.id, text=text, variant=variant)


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise PoiFormatError(f"non-numeric {column} {raw!r}", line) from None
    if not math.isfinite(value):
        raise PoiFormatError(f"non-finite {column} {raw!r}", line)
    return value


def _check_header(fieldnames: Sequence[str] | None, required: Iterable[str], path) -> None:
    present = [f.strip() for f in (fieldnames or [])]
    missing = [c for c in required if c not in present]
    if missing:
        raise PoiFormatError(f"{path}: missing column(s) {', '.join(missing)}", 1)


def load_poi_csv(path: str | Path) -> list[PoiRecord]:
    path = Path(path)
    records: list[PoiRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, POI_COLUMNS, path)
        for row in reader:
            line = reader.line_num
            row = {k.strip(): (v if v is not None else "") for k, v in row.items() if k is not None}
            lon = _parse_float(row["lon"], "lon", line)
            lat = _parse_float(row["lat"], "lat", line)
            if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
                raise PoiFormatError("coordinate out of range", line)
            pid = row["id"].strip()
            if pid in seen:
                raise PoiFormatError(f"duplicate id {pid!r}", line)
            try:
                rec = PoiRecord(pid, lon, lat, row["name"].strip(), row["category_l1"].strip(),
                                row["category_l2"].strip())
            except ValueError as exc:
                raise PoiFormatError(str(exc), line) from None
            seen.add(pid)
            records.append(rec)
    return records


def write_poi_csv(records: Iterable[PoiRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POI_COLUMNS)
        for r in records:
            w.writerow([r.id, repr(r.lon), repr(r.lat), r.name, r.category_l1, r.category_l2])


def records_lonlat(records: Sequence[PoiRecord]) -> np.ndarray:
    return np.array([[r.lon, r.lat] for r in records], dtype=np.float64).reshape(-1, 2)


class CoordNormalizer(TransformerMixin, BaseEstimator):
    """Affine map from a lon/lat bounding box onto ``[-1, 1]^2``.

    The box is the data extent grown by ``margin`` (a fraction of the width and
    height) on every side.
    """

    def __init__(self, margin: float = 0.01):
        self.margin = margin

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected lon/lat pairs, got {X.shape[1]} columns")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 points to fit a bounding box")
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = hi - lo
        if np.any(span == 0.0):
            raise ValueError("degenerate bounding box (zero width or height)")
        self.bbox_ = np.concatenate([lo - self.margin * span, hi + self.margin * span])
        return self

    @classmethod
    def from_bbox(cls, bbox: Sequence[float], margin: float = 0.01) -> "CoordNormalizer":
        """Rebuild a fitted normalizer from a stored, already expanded box."""
        norm = cls(margin=margin)
        bbox = np.asarray(bbox, dtype=np.float64)
        if bbox.shape != (4,) or bbox[2] <= bbox[0] or bbox[3] <= bbox[1]:
            raise ValueError(f"invalid bounding box {bbox.tolist()}")
        norm.bbox_ = bbox
        return norm

    @property
    def center_(self) -> np.ndarray:
        return 0.5 * (self.bbox_[:2] + self.bbox_[2:])

    @property
    def half_span_(self) -> np.ndarray:
        return 0.5 * (self.bbox_[2:] - self.bbox_[:2])

    def transform(self, X):
        check_is_fitted(self, "bbox_")
        X = check_array(X, dtype=np.float64)
        return (X - self.center_) / self.half_span_

    def inverse_transform(self, X):
        check_is_fitted(self, "bbox_")
        X = check_array(X, dtype=np.float64)
        return X * self.half_span_ + self.center_


def fit_normalizer(records: Sequence[PoiRecord], margin: float = 0.01) -> CoordNormalizer:
    return CoordNormalizer(margin=margin).fit(records_lonlat(records))


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train_ids": list(self.train_ids),
                           "val_ids": list(self.val_ids)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(tuple(d["train_ids"]), tuple(d["val_ids"]), int(d["seed"]))


def split_dataset(records: Sequence[PoiRecord], val_fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    """Seeded train/validation split; both sides keep the input order."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie strictly between 0 and 1, got {val_fraction}")
    n = len(records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    n_val = min(max(int(round(val_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = tuple(r.id for i, r in enumerate(records) if i not in val_idx)
    val = tuple(r.id for i, r in enumerate(records) if i in val_idx)
    return DatasetSplit(train, val, seed)


# --- synthetic cities -----------------------------------------------------


@dataclass
class ZoneSpec:
    name: str
    boxes: list[tuple[float, float, float, float]]
    categories: list[tuple[str, str]]
    names: list[str]
    sdm: list[float] | None = None
    weight: float = 1.0


@dataclass
class SynthSpec:
    """A city made of labelled zones, each a union of lon/lat boxes.

    With ``unique_names`` every POI name gets a serial-number token appended,
    which makes descriptions pairwise distinct.
    """

    zones: list[ZoneSpec]
    n_pois: int = 500
    n_luc_samples: int = 400
    n_sdm_regions: int = 200
    unique_names: bool = False
    name_tokens: int = 2
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if len(self.zones) < 2:
            raise ValueError("a synthetic city needs at least 2 zones")
        for z in self.zones:
            if not z.categories:
                raise ValueError(f"zone {z.name!r} has an empty category vocabulary")
            if not z.names:
                raise ValueError(f"zone {z.name!r} has an empty name vocabulary")
            if not z.boxes:
                raise ValueError(f"zone {z.name!r} has no boxes")
        ks = {len(z.sdm) for z in self.zones if z.sdm is not None}
        if len(ks) > 1:
            raise ValueError("all zones must share the same number of SDM classes")
        if ks and any(z.sdm is None for z in self.zones):
            raise ValueError("either every zone or no zone defines an SDM distribution")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        zones = [ZoneSpec(name=z["name"], boxes=[tuple(b) for b in z["boxes"]],
                          categories=[tuple(c) for c in z["categories"]], names=list(z["names"]),
                          sdm=list(z["sdm"]) if z.get("sdm") is not None else None,
                          weight=float(z.get("weight", 1.0)))
                 for z in d["zones"]]
        kw = {k: d[k] for k in ("n_pois", "n_luc_samples", "n_sdm_regions", "unique_names", "name_tokens")
              if k in d}
        if d.get("bbox") is not None:
            kw["bbox"] = tuple(d["bbox"])
        return cls(zones=zones, **kw)

    def to_dict(self) -> dict:
        return {
            "n_pois": self.n_pois, "n_luc_samples": self.n_luc_samples, "n_sdm_regions": self.n_sdm_regions,
            "unique_names": self.unique_names, "name_tokens": self.name_tokens,
            "bbox": list(self.bbox) if self.bbox else None,
            "zones": [{"name": z.name, "boxes": [list(b) for b in z.boxes],
                       "categories": [list(c) for c in z.categories], "names": z.names,
                       "sdm": z.sdm, "weight": z.weight} for z in self.zones],
        }

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LucSample:
    lon: float
    lat: float
    label: int


@dataclass(frozen=True)
class SdmRegion:
    region_id: str
    lon: float
    lat: float
    target: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64)
        if np.any(t < 0) or abs(float(t.sum()) - 1.0) > 1e-6:
            raise ValueError(f"region {self.region_id!r}: target is not a probability vector")


@dataclass
class SyntheticCity:
    records: list[PoiRecord]
    luc_samples: list[LucSample]
    sdm_regions: list[SdmRegion]
    zone_of_poi: list[int] = field(default_factory=list)


def _sample_in_zone(rng: np.random.Generator, zone: ZoneSpec, n: int) -> np.ndarray:
    boxes = np.asarray(zone.boxes, dtype=np.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    which = rng.choice(len(boxes), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    b = boxes[which]
    return np.column_stack([b[:, 0] + u[:, 0] * (b[:, 2] - b[:, 0]), b[:, 1] + u[:, 1] * (b[:, 3] - b[:, 1])])


def _split_counts(total: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder apportionment, so counts add up exactly
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts


def generate_synthetic_city(spec: SynthSpec, seed: int = 0) -> SyntheticCity:
    """Draw POIs, LUC samples and SDM regions zone by zone from one seeded stream."""
    rng = np.random.default_rng(seed)
    weights = np.array([z.weight for z in spec.zones], dtype=np.float64)
    records: list[PoiRecord] = []
    zone_of_poi: list[int] = []
    serial = 0
    for zi, (zone, count) in enumerate(zip(spec.zones, _split_counts(spec.n_pois, weights))):
        pts = _sample_in_zone(rng, zone, int(count))
        cats = rng.integers(len(zone.categories), size=int(count))
        for k in range(int(count)):
            words = [zone.names[j] for j in rng.integers(len(zone.names), size=spec.name_tokens)]
            if spec.unique_names:
                words.append(f"no{serial}")
            l1, l2 = zone.categories[int(cats[k])]
            records.append(PoiRecord(f"p{serial}", round(float(pts[k, 0]), 9), round(float(pts[k, 1]), 9),
                                     " ".join(words), l1, l2))
            zone_of_poi.append(zi)
            serial += 1

    luc: list[LucSample] = []
    for zi, (zone, count) in enumerate(zip(spec.zones, _split_counts(spec.n_luc_samples, np.ones(len(spec.zones))))):
        for x, y in _sample_in_zone(rng, zone, int(count)):
            luc.append(LucSample(round(float(x), 9), round(float(y), 9), zi))

    regions: list[SdmRegion] = []
    if spec.zones[0].sdm is not None:
        counts = _split_counts(spec.n_sdm_regions, np.ones(len(spec.zones)))
        for zi, (zone, count) in enumerate(zip(spec.zones, counts)):
            target = np.asarray(zone.sdm, dtype=np.float64)
            target = tuple((target / target.sum()).tolist())
            for x, y in _sample_in_zone(rng, zone, int(count)):
                regions.append(SdmRegion(f"r{len(regions)}", round(float(x), 9), round(float(y), 9), target))
    return SyntheticCity(records, luc, regions, zone_of_poi)


def quadrant_spec(n_pois: int = 500, *, shared_categories: bool = False, unique_names: bool = False,
                  n_luc_samples: int = 400, n_sdm_regions: int = 200, k_sdm: int = 5) -> SynthSpec:
    """Four-quadrant city on a 0.2 x 0.2 degree box near (0, 51.4).

    With ``shared_categories`` every zone draws from the same category list, so
    only POI names distinguish the zones.
    """
    x0, y0, w = -0.2, 51.4, 0.1
    boxes = [(x0, y0 + w, x0 + w, y0 + 2 * w), (x0 + w, y0 + w, x0 + 2 * w, y0 + 2 * w),
             (x0, y0, x0 + w, y0 + w), (x0 + w, y0, x0 + 2 * w, y0 + w)]
    return _zone_spec([[b] for b in boxes], n_pois, shared_categories, unique_names,
                      n_luc_samples, n_sdm_regions, k_sdm)


def checkerboard_spec(n_pois: int = 2000, *, cells: int = 4, shared_categories: bool = True,
                      unique_names: bool = False, n_luc_samples: int = 800, n_sdm_regions: int = 200,
                      k_sdm: int = 5) -> SynthSpec:
    """Four zones tiled as a ``cells x cells`` checkerboard of 2x2 super-blocks.

    Every zone owns several disconnected blocks, so raw position alone is a
    poor linear predictor of the zone.
    """
    x0, y0, w = -0.2, 51.4, 0.2 / cells
    owned: list[list] = [[] for _ in range(4)]
    for i in range(cells):
        for j in range(cells):
            owned[2 * (i % 2) + (j % 2)].append((x0 + i * w, y0 + j * w, x0 + (i + 1) * w, y0 + (j + 1) * w))
    return _zone_spec(owned, n_pois, shared_categories, unique_names, n_luc_samples, n_sdm_regions, k_sdm)


_ZONE_THEMES = [
    ("Parkland", [("Attractions", "Parks"), ("Sport", "Playing Fields"), ("Attractions", "Gardens")],
     ["meadow", "oak", "willow", "green", "common", "heath", "grove", "fern"]),
    ("Commercial", [("Retail", "Shops"), ("Eating", "Restaurants"), ("Retail", "Markets")],
     ["plaza", "trade", "exchange", "mall", "bazaar", "emporium", "arcade", "outlet"]),
    ("Industrial", [("Manufacturing", "Factories"), ("Transport", "Depots"), ("Manufacturing", "Warehouses")],
     ["steel", "forge", "dock", "works", "foundry", "freight", "mill", "yard"]),
    ("Residential", [("Accommodation", "Houses"), ("Education", "Schools"), ("Health", "Clinics")],
     ["cottage", "terrace", "mews", "villa", "lodge", "manor", "crescent", "close"]),
]


def _zone_spec(owned, n_pois, shared_categories, unique_names, n_luc, n_sdm, k_sdm) -> SynthSpec:
    shared = [c for _, cats, _ in _ZONE_THEMES for c in cats]
    rng = np.random.default_rng(12345)
    zones = []
    for zi, (label, cats, names) in enumerate(_ZONE_THEMES):
        sdm = None
        if k_sdm:
            raw = rng.dirichlet(np.ones(k_sdm))
            sdm = [float(v) for v in raw]
        zones.append(ZoneSpec(label, [tuple(b) for b in owned[zi]], shared if shared_categories else list(cats),
                              list(names), sdm))
    return SynthSpec(zones=zones, n_pois=n_pois, n_luc_samples=n_luc, n_sdm_regions=n_sdm,
                     unique_names=unique_names)


def load_luc_csv(path: str | Path) -> list[LucSample]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, ("lon", "lat", "label"), path)
        for row in reader:
            line = reader.line_num
            lon, lat = _parse_float(row["lon"], "lon", line), _parse_float(row["lat"], "lat", line)
            try:
                label = int(row["label"])
            except ValueError:
                raise PoiFormatError(f"non-integer label {row['label']!r}", line) from None
            if label < 0:
                raise PoiFormatError("negative label", line)
            out.append(LucSample(lon, lat, label))
    return out


def write_luc_csv(samples: Iterable[LucSample], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "label"])
        for s in samples:
            w.writerow([repr(s.lon), repr(s.lat), s.label])


def load_sdm_csv(path: str | Path) -> list[SdmRegion]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, ("region_id", "lon", "lat", "p_1"), path)
        pcols = [c for c in reader.fieldnames if c.startswith("p_")]
        pcols.sort(key=lambda c: int(c[2:]))
        if pcols != [f"p_{i + 1}" for i in range(len(pcols))] or len(pcols) < 2:
            raise PoiFormatError(f"{path}: probability columns must be p_1..p_K with K >= 2", 1)
        for row in reader:
            line = reader.line_num
            target = tuple(_parse_float(row[c], c, line) for c in pcols)
            try:
                out.append(SdmRegion(row["region_id"], _parse_float(row["lon"], "lon", line),
                                     _parse_float(row["lat"], "lat", line), target))
            except ValueError as exc:
                raise PoiFormatError(str(exc), line) from None
    return out


def write_sdm_csv(regions: Sequence[SdmRegion], path: str | Path) -> None:
    k = len(regions[0].target) if regions else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "lon", "lat"] + [f"p_{i + 1}" for i in range(k)])
        for r in regions:
            w.writerow([r.region_id, repr(r.lon), repr(r.lat)] + [repr(v) for v in r.target])
