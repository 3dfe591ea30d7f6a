"""Semantic location retrieval: score candidate locations against a projected text query."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .contrastive import Checkpoint, embed_text, encode_locations
from .text_embedding import EmbeddingStore, fallback_encode


class QueryError(LookupError):
    pass


@dataclass
class CandidateGrid:
    """Candidate locations (lon/lat rows), optionally laid out as a ``height x width`` raster.

    Raster cells are ordered row by row from the north-west corner.
    """

    coords: np.ndarray
    shape: tuple[int, int] | None = None
    bbox: tuple[float, float, float, float] | None = None
    _embeddings: np.ndarray | None = field(default=None, repr=False)
    _embedded_for: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.shape is not None and self.shape[0] * self.shape[1] != len(self.coords):
            raise ValueError("grid shape does not match the number of candidates")

    @classmethod
    def regular(cls, bbox: Sequence[float], width: int, height: int) -> "CandidateGrid":
        """Cell centres of a ``width x height`` raster over ``bbox = (lon0, lat0, lon1, lat1)``."""
        if width < 1 or height < 1:
            raise ValueError("grid spacing must be positive")
        lon0, lat0, lon1, lat1 = (float(v) for v in bbox)
        dx, dy = (lon1 - lon0) / width, (lat1 - lat0) / height
        xs = lon0 + dx * (np.arange(width) + 0.5)
        ys = lat1 - dy * (np.arange(height) + 0.5)
        gx, gy = np.meshgrid(xs, ys)
        return cls(np.column_stack([gx.ravel(), gy.ravel()]), (height, width), (lon0, lat0, lon1, lat1))

    @classmethod
    def for_checkpoint(cls, checkpoint: Checkpoint, width: int, height: int) -> "CandidateGrid":
        return cls.regular(checkpoint.bbox, width, height)

    def __len__(self) -> int:
        return len(self.coords)

    def cell_of(self, lonlat) -> np.ndarray:
        """Index of the candidate nearest to each lon/lat row."""
        pts = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
        if self.shape is not None and self.bbox is not None:
            h, w = self.shape
            lon0, lat0, lon1, lat1 = self.bbox
            col = np.clip(((pts[:, 0] - lon0) / (lon1 - lon0) * w).astype(int), 0, w - 1)
            row = np.clip(((lat1 - pts[:, 1]) / (lat1 - lat0) * h).astype(int), 0, h - 1)
            return row * w + col
        d = ((pts[:, None, :] - self.coords[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    def embeddings(self, checkpoint: Checkpoint) -> np.ndarray:
        key = checkpoint.config_hash + str(id(checkpoint.params))
        if self._embeddings is None or self._embedded_for != key:
            self._embeddings = encode_locations(checkpoint, self.coords)
            self._embedded_for = key
        return self._embeddings

    def set_embeddings(self, emb: np.ndarray) -> None:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape[0] != len(self.coords):
            raise ValueError("one embedding per candidate required")
        self._embeddings, self._embedded_for = emb, "external"


@dataclass
class RetrievalResult:
    query: str
    indices: np.ndarray
    coords: np.ndarray
    scores: np.ndarray
    field: np.ndarray | None = None

    def to_geojson(self) -> dict:
        feats = [{"type": "Feature", "geometry": {"type": "Point", "coordinates": [float(x), float(y)]},
                  "properties": {"similarity": float(s), "rank": r + 1, "candidate": int(i)}}
                 for r, (i, (x, y), s) in enumerate(zip(self.indices, self.coords, self.scores))]
        return {"type": "FeatureCollection", "properties": {"query": self.query}, "features": feats}


def embed_query(query, checkpoint: Checkpoint, store: EmbeddingStore | None = None, *,
                allow_fallback: bool = True, fallback_seed: int = 0) -> np.ndarray:
    """Raw query vector -> projected unit vector, along the same path as training text.

    ``query`` may be a raw vector, a key into ``store``, or free text (encoded
    with the hashing fallback when ``allow_fallback``).
    """
    if isinstance(query, str):
        if store is not None and query in store:
            raw = store[query]
        elif allow_fallback:
            raw = fallback_encode(query, checkpoint.text_dim, fallback_seed)
        else:
            raise QueryError(f"no precomputed embedding for query {query!r} and fallback is disabled")
    else:
        raw = np.asarray(query, dtype=np.float64).ravel()
    if raw.shape[0] < checkpoint.text_dim:
        raise QueryError(f"query vector has dim {raw.shape[0]}, checkpoint expects {checkpoint.text_dim}")
    return embed_text(checkpoint, raw[:checkpoint.text_dim])[0]


def _scores(query_vec: np.ndarray, emb: np.ndarray) -> np.ndarray:
    return np.clip(emb @ np.asarray(query_vec, dtype=np.float64), -1.0, 1.0)


def topk(query_vec, grid: CandidateGrid, k: int, checkpoint: Checkpoint | None = None,
         query: str = "") -> RetrievalResult:
    """Exact top-``k`` by cosine similarity; ties go to the lower candidate index."""
    if len(grid) == 0:
        raise ValueError("empty candidate grid")
    if not 1 <= k <= len(grid):
        raise ValueError(f"k={k} outside [1, {len(grid)}]")
    if grid._embeddings is None and checkpoint is None:
        raise ValueError("candidate embeddings missing: pass a checkpoint")
    emb = grid.embeddings(checkpoint) if checkpoint is not None else grid._embeddings
    scores = _scores(query_vec, emb)
    order = np.argsort(-scores, kind="stable")[:k]
    return RetrievalResult(query, order, grid.coords[order], scores[order])


@dataclass
class SimilarityField:
    query: str
    grid: CandidateGrid
    scores: np.ndarray

    @property
    def raster(self) -> np.ndarray:
        if self.grid.shape is None:
            raise ValueError("candidates are not a rectangular grid")
        return self.scores.reshape(self.grid.shape)

    def to_geojson(self, top: RetrievalResult | None = None) -> dict:
        ranks = {} if top is None else {int(i): r + 1 for r, i in enumerate(top.indices)}
        feats = []
        for i, ((x, y), s) in enumerate(zip(self.grid.coords, self.scores)):
            props = {"similarity": float(s)}
            if i in ranks:
                props["rank"] = ranks[i]
            feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": [float(x), float(y)]},
                          "properties": props})
        return {"type": "FeatureCollection", "properties": {"query": self.query}, "features": feats}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lon", "lat", "similarity"])
        for (x, y), s in zip(self.grid.coords, self.scores):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])
        return buf.getvalue()

    def to_svg(self, cell_px: int = 8, top: RetrievalResult | None = None) -> str:
        """Heatmap with a linear blue-to-red ramp over ``[min, max]`` score."""
        grid = self.raster
        h, w = grid.shape
        lo, hi = float(self.scores.min()), float(self.scores.max())
        span = hi - lo if hi > lo else 1.0
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell_px}" height="{h * cell_px}" '
                 f'viewBox="0 0 {w * cell_px} {h * cell_px}">',
                 f"<title>{_xml_escape(self.query)}</title>"]
        for r in range(h):
            for c in range(w):
                t = (grid[r, c] - lo) / span
                red, blue = int(round(255 * t)), int(round(255 * (1 - t)))
                parts.append(f'<rect x="{c * cell_px}" y="{r * cell_px}" width="{cell_px}" height="{cell_px}" '
                             f'fill="rgb({red},64,{blue})"/>')
        if top is not None:
            for i in top.indices:
                r, c = divmod(int(i), w)
                parts.append(f'<circle cx="{(c + 0.5) * cell_px}" cy="{(r + 0.5) * cell_px}" r="{cell_px / 3:.2f}" '
                             f'fill="yellow" stroke="black" stroke-width="0.5"/>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _xml_escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def similarity_field(query_vec, grid: CandidateGrid, checkpoint: Checkpoint | None = None,
                     query: str = "") -> SimilarityField:
    emb = grid.embeddings(checkpoint) if checkpoint is not None else grid._embeddings
    if emb is None:
        raise ValueError("candidate embeddings missing: pass a checkpoint")
    return SimilarityField(query, grid, _scores(query_vec, emb))


def write_exports(out_dir: str | Path, fld: SimilarityField, top: RetrievalResult, svg: bool = False,
                  stem: str = "retrieval") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}_topk.geojson", out / f"{stem}_field.geojson", out / f"{stem}_field.csv"]
    paths[0].write_text(json.dumps(top.to_geojson(), indent=1), encoding="utf-8")
    paths[1].write_text(json.dumps(fld.to_geojson(top)), encoding="utf-8")
    paths[2].write_text(fld.to_csv(), encoding="utf-8")
    if svg:
        p = out / f"{stem}_heatmap.svg"
        p.write_text(fld.to_svg(top=top), encoding="utf-8")
        paths.append(p)
    return paths
