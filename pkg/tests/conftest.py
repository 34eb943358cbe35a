import numpy as np
import pytest

from dwff.config import RunConfig
from dwff import pipeline


def small_config(root, **kw) -> RunConfig:
    base = dict(
        data_dir=str(root / "data"),
        out=str(root / "run"),
        data_n_scenes=8,
        data_h_p=8,
        data_w_p=8,
        train_epochs=2,
    )
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = small_config(root)
    pipeline.generate_dataset(cfg, cfg.data_dir)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    CRITERIA[number] = (title, bool(ok), detail)
    print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f": {detail}" if detail else ""))
