import os
from pathlib import Path

import pytest


@pytest.fixture(scope="session", autouse=True)
def weights_dir(tmp_path_factory):
    """One weights cache per session so the small backbone is pretrained once.

    An existing TLAL_WEIGHTS_DIR is respected; otherwise a session temp dir is used.
    """
    if not os.environ.get("TLAL_WEIGHTS_DIR"):
        os.environ["TLAL_WEIGHTS_DIR"] = str(tmp_path_factory.mktemp("weights"))
    os.environ.setdefault("TLAL_OFFLINE", "1")
    return Path(os.environ["TLAL_WEIGHTS_DIR"])


@pytest.fixture(scope="session")
def tiny_cohort():
    from tlal.data import generate_synthetic_cohort

    return generate_synthetic_cohort(8, 6, seed=3)


@pytest.fixture(scope="session")
def tiny_datasets(tiny_cohort):
    from tlal.data import build_dataset, split_cohort

    split = split_cohort([(p, s.grade) for p, s in tiny_cohort.items()], (8, 3, 3), seed=1)
    return build_dataset(split, tiny_cohort, "imbalanced", seed=2, image_size=48)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, weights_dir):
    """The bundled desk experiment (40 synthetic patients, 10 seeds), run once."""
    import time

    from tlal.experiment import packaged_config, run_pipeline, validate_config

    out = tmp_path_factory.mktemp("desk")
    # cold start: the timed run includes building the source-pretrained weights
    shared = os.environ["TLAL_WEIGHTS_DIR"]
    os.environ["TLAL_WEIGHTS_DIR"] = str(out / "weights")
    try:
        t0 = time.perf_counter()
        manifest = run_pipeline(validate_config(packaged_config("desk")), out / "run")
        elapsed = time.perf_counter() - t0
    finally:
        os.environ["TLAL_WEIGHTS_DIR"] = shared
    return manifest, elapsed


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
