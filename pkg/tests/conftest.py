import warnings

import pytest

warnings.filterwarnings("ignore", module="numba")

ADM_HEADER = "admission_id,patient_id,gender,age,admit_ts,discharge_ts,outcome,icd10_primary\n"
VIT_HEADER = "admission_id,ts,temperature,sbp,heart_rate,sats,resp_rate,consciousness,news\n"

T0 = "2020-01-01T00:00:00Z"


def ts(hours: float) -> str:
    from patient_subtypes.ingest import format_timestamp, parse_timestamp

    return format_timestamp(parse_timestamp(T0) + int(round(hours * 3600)))


def adm_row(aid, stay_hours=10.0, pid=None, gender="F", age=50, outcome="survived", icd="I251"):
    return f"{aid},{pid or 'P' + aid},{gender},{age},{ts(0)},{ts(stay_hours)},{outcome},{icd}\n"


def vit_row(aid, at_hours=1.0, temperature="36.8", sbp="120", hr="80", sats="97", rr="16",
            consciousness="alert", news="1"):
    return f"{aid},{ts(at_hours)},{temperature},{sbp},{hr},{sats},{rr},{consciousness},{news}\n"


@pytest.fixture
def csv_rows():
    return adm_row, vit_row
