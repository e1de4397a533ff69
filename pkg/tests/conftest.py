import hypothesis
import numpy as np
import pytest

from mvtex import RunConfig, build_scene
from mvtex.assets import cube_mesh, quad_mesh
from mvtex.geometry import normalize_mesh

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.load_profile("default")

TWO_TARGETS = "a red crate;a blue crate;a red crate;a blue crate"


def oracle_config(**kw) -> RunConfig:
    base = dict(predictor="oracle", codec="identity", latent_size=64, latent_channels=3, steps=10)
    base.update(kw)
    return RunConfig(**base)


def two_target_config(**kw) -> RunConfig:
    """Four cameras, alternating between two oracle targets that disagree on shared texels."""
    base = dict(prompts=TWO_TARGETS, oracle_spread=0.3)
    base.update(kw)
    return oracle_config(**base)


@pytest.fixture(scope="session")
def cube():
    return normalize_mesh(cube_mesh())


@pytest.fixture(scope="session")
def quad():
    return quad_mesh()


@pytest.fixture(scope="session")
def oracle_scene():
    return build_scene(oracle_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
