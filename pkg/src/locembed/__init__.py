"""Location embeddings learned by contrasting coordinates with POI text embeddings."""

__version__ = "0.1.0"

from .contrastive import (Checkpoint, ContrastiveLocationEncoder, TrainConfig, encode_locations, infonce_loss,
                          train)
from .evaluation import EvalReport, ProbeClassifier, ProbeRegressor, distribution_metrics, macro_prf, run_luc, \
    run_sdm
from .poi_data import CoordNormalizer, PoiRecord, Variant, generate_synthetic_city, load_poi_csv, render_description
from .spatial import GridEncoder, GridEncodingConfig, grid_encode
from .text_embedding import EmbeddingStore, HashingTextEncoder, fallback_encode, load_embeddings, write_embeddings

__all__ = [
    "Checkpoint", "ContrastiveLocationEncoder", "CoordNormalizer", "EmbeddingStore", "EvalReport", "GridEncoder",
    "GridEncodingConfig", "HashingTextEncoder", "PoiRecord", "ProbeClassifier", "ProbeRegressor", "TrainConfig",
    "Variant", "distribution_metrics", "encode_locations", "fallback_encode", "generate_synthetic_city",
    "grid_encode", "infonce_loss", "load_embeddings", "load_poi_csv", "macro_prf", "render_description", "run_luc",
    "run_sdm", "train", "write_embeddings",
]
