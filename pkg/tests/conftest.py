import pytest

from cdslab.config import parse_config_text


def toy_lines(regime="baseline", seed=0, out_dir="runs", epochs=2, train=64, test=32, classes=4, **extra):
    """A plain-cnn on 8x8 synthetic images: seconds per run, not minutes."""
    lines = {
        "train.regime": regime, "train.seed": seed, "train.epochs": epochs, "train.batch_size": 16,
        "train.lr": 0.05, "train.weight_decay": 0.0, "arch.family": "plain-cnn", "arch.K": 3,
        "arch.widths": "4,8,8", "arch.input_size": 8, "arch.num_classes": classes, "data.name": "synthetic",
        "data.image_size": 8, "data.num_classes": classes, "data.synthetic_train": train,
        "data.synthetic_test": test, "heads.embed_dim": 8, "heads.hidden_dim": 16, "aug.crop_pad": 1,
        "run.out_dir": out_dir,
    }
    lines.update({k.replace("__", "."): v for k, v in extra.items()})
    return "\n".join(f"{k} = {v}" for k, v in lines.items()) + "\n"


def toy_config(*args, overrides=(), **kw):
    return parse_config_text(toy_lines(*args, **kw), list(overrides))


@pytest.fixture
def toy():
    return toy_config


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, status, detail)`` for the end-of-run acceptance table."""
    def record(criterion, status, detail):
        _ACCEPTANCE[criterion] = (status, detail)
    return record


def pytest_runtest_logreport(report):
    # a criterion whose test crashed before recording still gets a FAIL line
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" and name.startswith("test_criterion_") and report.failed:
        criterion = int(name.split("_")[2])
        if criterion not in _ACCEPTANCE:
            _ACCEPTANCE[criterion] = ("FAIL", str(report.longrepr).strip().splitlines()[-1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:2d}: {status:4s} {detail}")
