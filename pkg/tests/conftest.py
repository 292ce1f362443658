import pytest

from rank_moe.pipeline import TrainConfig
from rank_moe.synthgen import GenConfig, generate


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        batch_size=32, lr=1e-3, dropout=0.2, max_steps=20, text_dim=32, jd_dim=48, id_dim=8,
        recruiter_vocab=64, query_vocab=256, talent_vocab=1024, job_vocab=64, log_every=10,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    """About 600 train / 200 test records."""
    train, test, world = generate(GenConfig(n_sessions=80, n_talents=400, n_jobs=20, n_recruiters=12, test_fraction=0.25, seed=3))
    return train, test, world


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Returns report(number, ok, detail); prints one PASS/FAIL line per criterion."""

    def report(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (ok, detail)
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
