import numpy as np
import pytest

from remediate.data_model import (
    ObservationSource,
    ParcelRecord,
    PortionMaterial as M,
    ServiceLineObservation,
    make_dataset,
)


def parcel(pid, year=1930.0, value=20000.0, lat=43.0, lon=-83.7, precinct="A", record="lead", **extra):
    feats = {"year_built": year, "value": value, "lat": lat, "lon": lon, "precinct": precinct,
             "record_label": record, **extra}
    return ParcelRecord(pid, feats)


def observation(pid, pub="lead", priv="copper", source="hydrovac", epoch=0):
    return ServiceLineObservation(pid, M.parse(pub), M.parse(priv), ObservationSource.parse(source), epoch)


@pytest.fixture
def three_homes():
    return make_dataset([parcel("P1"), parcel("P2", year=1960.0, record="copper"),
                         parcel("P3", year=1990.0, precinct="B", record="copper")])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[str, str] = {}


def accept(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
