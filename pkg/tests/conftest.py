"""Session fixtures shared by the slower integration and acceptance tests."""

import pytest

from lrnas.dataset import generate_dataset
from lrnas.netgraph import TrainSchedule, build_desk_model, pretrain

PRETRAIN_EPOCHS = 8


@pytest.fixture(scope="session")
def desk_data():
    return generate_dataset(0)


@pytest.fixture(scope="session")
def desk_model(desk_data):
    """The desk reference model pretrained for eight epochs with seed 0 (do not mutate)."""
    sched = TrainSchedule(epochs=PRETRAIN_EPOCHS, seed=0)
    return pretrain(build_desk_model(0), desk_data.train.images, desk_data.train.labels, sched)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, from the properties its test recorded."""
    rows = []
    for outcome, verdict in (("passed", "PASS"), ("failed", "FAIL"), ("xfailed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion_id" in props and rep.when in ("call", "setup"):
                note = " (known deviation)" if outcome == "xfailed" else ""
                rows.append((props["criterion_id"], verdict + note, props["criterion"], props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, title, detail in sorted(rows):
        terminalreporter.write_line(f"C{num:<2} {verdict}  {title}: {detail}")
