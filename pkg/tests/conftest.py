import copy

import pytest

from sigfuse.fusion import fuse_streams
from sigfuse.records import Fragment, FusedRecord, wrap_diameter
from sigfuse.traffic import GeneratorConfig, generate

IMSI = "001010123456789"

SS7_SAMPLE = {
    "imsi": IMSI,
    "timestamp": "2025-10-28T07:40:37Z",
    "application_context": "4.0.0.1.0.14.3",
    "cggt": "001234567890",
    "cggt_country": "zz",
    "cggt_mccmnc": "00101",
    "cggt_tadig": "TSTZZ",
    "cdgt": "001987654321",
    "cdgt_country": "zz",
    "cdgt_mccmnc": "00101",
    "cdgt_tadig": "TSTZZ",
    "operations": [
        {
            "application_context": "4.0.0.1.0.14.3",
            "opc": 1200,
            "dpc": 1300,
            "cggt": "001234567890",
            "cdgt": "001987654321",
        }
    ],
}

DIAMETER_SAMPLE = {
    "imsi": IMSI,
    "timestamp": "2025-10-28T07:40:12Z",
    "avps": {
        "User-Name": IMSI,
        "Session-Id": "mme01.epc.mnc001.mcc001.3gppnetwork.org;12345;67890",
        "Origin-Host": "mme01.epc.mnc001.mcc001.3gppnetwork.org",
        "Visited-PLMN-Id": {"mcc": "001", "mnc": "01", "mccmnc": "00101"},
        "Subscription-Data": {"APN-Configuration": [{"Service-Selection": "internet"}]},
    },
}

GTP_SAMPLE = {
    "imsi": IMSI,
    "timestamp": "2025-10-28T07:40:55Z",
    "operations": [
        {
            "teid": 0,
            "teid_cp": 314159265,
            "apn": "internet",
            "user_location_information": {"mcc": "001", "mnc": "01", "mccmnc": "00101", "lac": 1001, "ci": 2002},
            "end_user_addr": {"ipv4": "198.51.100.23"},
        }
    ],
}


@pytest.fixture
def ss7_sample():
    return copy.deepcopy(SS7_SAMPLE)


@pytest.fixture
def diameter_sample():
    return copy.deepcopy(DIAMETER_SAMPLE)


@pytest.fixture
def gtp_sample():
    return copy.deepcopy(GTP_SAMPLE)


@pytest.fixture
def sample_streams():
    return {
        "ss7": [Fragment("ss7", copy.deepcopy(SS7_SAMPLE))],
        "diameter": [Fragment("diameter", copy.deepcopy(DIAMETER_SAMPLE))],
        "gtp": [Fragment("gtp", copy.deepcopy(GTP_SAMPLE))],
    }


@pytest.fixture
def sample_record():
    return FusedRecord(
        "2025-10-28T07:40:00Z",
        IMSI,
        [copy.deepcopy(SS7_SAMPLE)],
        [wrap_diameter(copy.deepcopy(DIAMETER_SAMPLE))],
        [copy.deepcopy(GTP_SAMPLE)],
    )


def small_corpus(seed: int = 3, subscribers: int = 120, minutes: int = 15):
    records, _ = fuse_streams(generate(GeneratorConfig(subscribers, minutes, rng_seed=seed)))
    return records


@pytest.fixture(scope="session")
def corpus():
    return small_corpus()


def pytest_terminal_summary(terminalreporter):
    from acceptance_helpers import CRITERIA_LINES

    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
