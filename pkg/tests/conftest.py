import jax
import pytest

jax.config.update("jax_enable_x64", True)

from fbpc_lab.data import make_synthetic  # noqa: E402
from fbpc_lab.models import ArchitectureSpec  # noqa: E402
from fbpc_lab.posteriors import generate_expert_trajectories  # noqa: E402

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def moons():
    return make_synthetic("two_moons", 200, 200, 0.2, seed=0)


@pytest.fixture(scope="session")
def small_mlp():
    return ArchitectureSpec("mlp", (2,), 2, (8,))


@pytest.fixture(scope="session")
def small_pool(moons, small_mlp):
    return generate_expert_trajectories(small_mlp, moons, n_traj=2, epochs=5, lr=0.05, seed=0, batch_size=32)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
