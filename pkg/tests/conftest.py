import pytest

from cbcfilter.ingest import AcademicEvent, CatalogEntry, DegreeRegistration, YearMonth


def ym(text):
    return YearMonth.parse(text)


def ev(sid, major, subject, kind, date, result="NONE", grade=None):
    if kind == "EXAM" and result == "NONE":
        raise ValueError("exam needs a result")
    return AcademicEvent(sid, major, subject, kind, ym(date), result, grade)


def reg(sid, major, date):
    return DegreeRegistration(sid, major, ym(date))


def cat(code, major, level, group="MATH", name=None):
    return CatalogEntry(code, name or code, group, major, level)


@pytest.fixture(scope="session")
def calibrated_cohort():
    """The shipped calibrated configuration at full scale: ``(config, cohort, records)``."""
    from cbcfilter.synth import calibrated_config, generate_cohort, trajectory_config
    from cbcfilter.trajectory import build_dataset
    cfg = calibrated_config()
    cohort = generate_cohort(cfg)
    records, _ = build_dataset(*cohort.triple(), trajectory_config(cfg))
    return cfg, cohort, records


@pytest.fixture(scope="session")
def calibrated_records(calibrated_cohort):
    return calibrated_cohort[2]


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, name, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
