import numpy as np
import pytest

from skinsplat.model import ModelConfig, init_from_template
from skinsplat.template import BipedConfig, KinematicTemplate, build_synthetic_biped


def chain_template(samples=None, weights=None, sigma=0.1):
    """Two joints: root at the origin, child at (1, 0, 0)."""
    rest = np.tile(np.eye(4), (2, 1, 1))
    rest[1, :3, 3] = [1.0, 0.0, 0.0]
    if samples is None:
        samples = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
        weights = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.0, 1.0]])
    return KinematicTemplate(np.array([-1, 0]), rest, samples, weights, sigma)


@pytest.fixture(scope="session")
def biped():
    return build_synthetic_biped(BipedConfig(sample_density=600.0))


@pytest.fixture
def small_model(biped):
    return init_from_template(biped, ModelConfig(n_gaussians=60, n_latent=2, frames=3, grid_resolution=8, seed=1))


def random_pose(tpl, rng, scale=0.3):
    return rng.normal(scale=scale, size=(tpl.joint_count, 3)), rng.normal(scale=0.1, size=3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
