import numpy as np
import pytest

from locembed.contrastive import TrainConfig
from locembed.poi_data import PoiRecord, generate_synthetic_city, quadrant_spec, render_description
from locembed.text_embedding import fallback_store

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def gallery():
    return PoiRecord("p1", -0.1281, 51.5089, "The National Gallery", "Attractions", "Museums")


@pytest.fixture
def tiny_config():
    return TrainConfig(batch_size=16, max_epochs=3, num_scales=4, hidden_dim=16, embedding_dim=8,
                       early_stop_patience=2, learning_rate=1e-3)


@pytest.fixture(scope="session")
def small_city():
    return generate_synthetic_city(quadrant_spec(200, n_luc_samples=120, n_sdm_regions=80), seed=3)


@pytest.fixture(scope="session")
def small_store(small_city):
    recs = small_city.records
    return fallback_store([r.id for r in recs], [render_description(r).text for r in recs], 64, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
