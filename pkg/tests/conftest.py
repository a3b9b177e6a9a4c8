import json

import pytest

from lgdet.config import load_config


def tiny_config_dict(epochs: int = 1) -> dict:
    """A toy-shaped run config small enough for a few-second training run."""
    data = load_config().model_dump(mode="json")
    data["encoder"]["levels"] = [dict(num_seeds=n, radius=r, neighbors=4, channels=8)
                                 for n, r in ((64, 0.5), (32, 1.0), (16, 1.5), (8, 2.0))]
    data["encoder"]["decoder_channels"] = 8
    data["context"].update(compressed_channels=4, global_channels=8)
    data["head"].update(num_proposals=8, channels=8, cluster_neighbors=4, score_threshold=0.0)
    data["num_points"] = 256
    data["scenes"]["num_points"] = 256
    data.update(epochs=epochs, batch_size=2)
    return data


@pytest.fixture
def tiny_config():
    return load_config().model_validate(tiny_config_dict())


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict()))
    return path


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, [title, 0, 0])
    entry[1 if rep.passed else 2] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, bad = _criteria[number]
        status = "PASS" if bad == 0 and ok > 0 else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({ok} passed, {bad} failed)")
