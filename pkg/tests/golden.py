"""The messages behind tests/data/golden_vectors.txt."""

import numpy as np

from e2srs.wire import (
    E2SetupRequest,
    E2SetupResponse,
    ErrorCause,
    ErrorIndication,
    RanFunction,
    RicIndication,
    RuReport,
    SrsIndication,
    SubscriptionRequest,
    SubscriptionResponse,
    SubscriptionStatus,
)

GOLDEN = {
    "setup_request": E2SetupRequest(0x01020304, (RanFunction(148, "SRS Positioning", 1),)),
    "setup_response": E2SetupResponse((148,)),
    "setup_response_empty": E2SetupResponse(()),
    "subscription_request": SubscriptionRequest(1, 148, 1),
    "subscription_response_accepted": SubscriptionResponse(1, SubscriptionStatus.ACCEPTED),
    "subscription_response_bad_trigger": SubscriptionResponse(0xDEADBEEF, SubscriptionStatus.REJECTED_BAD_TRIGGER),
    "indication_zero_k1_m1_n4": RicIndication(0, 0, SrsIndication(0, 0, 0, 0, (
        RuReport(0, (0,), np.zeros((1, 4), dtype=np.complex64)),
    ))),
    "indication_k2_n2": RicIndication(7, 2**40 + 5, SrsIndication(42, 1023, 159, 1_700_000_000_000_000_000, (
        RuReport(1, (1, 2), np.array([[1 + 0j, -2 + 0.5j], [0.25j, -0.0]], dtype=np.complex64)),
        RuReport(2, (9,), np.array([[3.5 - 1j, 1e-3 + 0j]], dtype=np.complex64)),
    ))),
    "error_duplicate_agent": ErrorIndication(0, ErrorCause.DUPLICATE_AGENT_ID, "agent_id 1 already registered"),
    "error_unicode": ErrorIndication(5, ErrorCause.MALFORMED, "λ✓"),
}


def load_vectors(path):
    vectors = {}
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, hexdata = line.split(None, 1)
        vectors[name] = bytes.fromhex(hexdata.replace(" ", ""))
    return vectors
