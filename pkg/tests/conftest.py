import numpy as np
import pytest

from vpg.core import DetectedObject, ImageSignature, as_embedding, category, BoundingBox
from vpg.feature_store import SceneEntry
from vpg.vision import SyntheticWorld


def unit(rng, dim=16):
    v = rng.standard_normal(dim)
    return as_embedding(v / np.linalg.norm(v))


def sig(i) -> ImageSignature:
    return ImageSignature.of(f"test:{i}")


def make_entry(i, n_objects=0, dim=16, seed=0, source="backfill", ingested_at=0):
    rng = np.random.default_rng([seed, i])
    objs = tuple(
        DetectedObject(BoundingBox(10.0 * j, 10.0, 20.0, 30.0), category("top"), 0.9, unit(rng, dim))
        for j in range(n_objects)
    )
    return SceneEntry(sig(i), unit(rng, dim), objs, ingested_at, source)


@pytest.fixture(scope="session")
def small_world():
    return SyntheticWorld(seed=11, dimension=32, products=60, scenes=300, noise_sigma=0.0)


@pytest.fixture(scope="session")
def noisy_world():
    return SyntheticWorld(seed=12, dimension=32, products=60, scenes=300, noise_sigma=0.1)


@pytest.fixture
def store(tmp_path):
    from vpg.feature_store import FeatureStore

    s = FeatureStore(tmp_path / "store")
    yield s
    s.close()


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` prints one PASS/FAIL line for criterion ``n`` and asserts it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
