import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from recover_kit.kb import load_schema  # noqa: E402
from recover_kit.ruledsl import load_rules  # noqa: E402
from recover_kit.worldsim import load_task  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture(scope="session")
def rules():
    return load_rules()


@pytest.fixture
def fresh_kb(schema):
    return schema.copy_schema()


@pytest.fixture(scope="session")
def slice_task():
    return load_task(FIXTURES / "slice_scene.yaml")


@pytest.fixture(scope="session")
def matrix_report():
    from recover_kit.harness import load_suite, run_matrix

    return run_matrix(load_suite(), keep_records=True)


@pytest.fixture(scope="session")
def cost_report():
    from recover_kit.harness import run_cost

    return run_cost()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
