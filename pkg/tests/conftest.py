import pytest

from mdm import models

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(name, passed, detail)``."""
    log = request.config.stash[_VERDICTS]

    def record(name: str, passed: bool, detail: str = "") -> bool:
        log.append((name, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_VERDICTS, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in log:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def trained():
    """Tiny CNN trained on the default quadrant-blob set (seed 0, 200 samples, 30 epochs)."""
    data = models.synth_dataset(0, 200, 24)
    return models.train_tiny_cnn(models.build_tiny_cnn(0), data, epochs=30, lr=0.01, seed=0)


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def test_samples():
    return models.synth_dataset(1, 20, 24)


@pytest.fixture(scope="session")
def model_file(trained_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "tiny.mdmw"
    models.save_model(trained_model, path)
    return path
