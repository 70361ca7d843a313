import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from gmmas.errors import ValidationError
from gmmas.reporting import (
    AGGRESSIVE_ENHANCING_FRACTION,
    AnalysisReport,
    DISCLAIMER,
    render_report,
    render_template,
    report_from_mask,
)


def make_report(enhancing=100, necrosis=50, edema=150, shape=(16, 16, 16)):
    labels = np.zeros(shape, dtype=np.uint8)
    flat = labels.reshape(-1)
    flat[:necrosis] = 1
    flat[necrosis:necrosis + enhancing] = 2
    flat[necrosis + enhancing:necrosis + enhancing + edema] = 3
    return report_from_mask(
        "case01", labels,
        {"grade": [0.2, 0.8], "idh": [0.9, 0.1], "1p19q": [0.6, 0.4], "mgmt": [0.3, 0.7]},
    )


class TestAnalysisReport:
    def test_fraction_arithmetic(self):
        rep = make_report(enhancing=128, necrosis=64, edema=64, shape=(16, 16, 16))
        total = 16**3
        assert rep.volume_fractions["enhancing"] == 128 / total
        assert abs(rep.whole_tumor_fraction - 256 / total) < 1e-12

    def test_fractions_recount_from_mask(self):
        labels = np.zeros((8, 8, 8), dtype=np.uint8)
        labels[0:2] = 3
        labels[3, 0, 0] = 1
        rep = report_from_mask("x", labels, {"grade": [0.5, 0.5]})
        assert rep.subregion_voxels["edema"] == int((labels == 3).sum())
        assert rep.subregion_voxels["necrosis"] == 1

    def test_disclaimer_always_present(self):
        rep = make_report()
        assert rep.disclaimer == DISCLAIMER
        with pytest.raises(ValidationError):
            AnalysisReport(
                case_id="x", subregion_voxels={}, volume_fractions={},
                class_probs={}, disclaimer="",
            )

    def test_json_round_trip(self):
        rep = make_report()
        back = AnalysisReport.from_json(rep.to_json())
        assert back.case_id == rep.case_id
        assert back.volume_fractions == rep.volume_fractions


class TestTemplate:
    def test_deterministic_output(self):
        a = render_template(make_report())
        b = render_template(make_report())
        assert a == b

    def test_disclaimer_in_output(self):
        assert DISCLAIMER in render_template(make_report())

    def test_aggressive_advisory_included_for_high_enhancing(self):
        # enhancing share 0.7 of tumor > 0.5 threshold -> advisory sentence
        rep = make_report(enhancing=700, necrosis=150, edema=150)
        share = rep.volume_fractions["enhancing"] / rep.whole_tumor_fraction
        assert share > AGGRESSIVE_ENHANCING_FRACTION
        assert "aggressive" in render_template(rep)

    def test_advisory_absent_for_low_enhancing(self):
        rep = make_report(enhancing=100, necrosis=400, edema=500)
        assert "aggressive" not in render_template(rep)

    def test_class_calls_rendered(self):
        text = render_template(make_report())
        assert "histological grade: high-grade" in text
        assert "IDH genotype: wild type" in text


class _StubHandler(BaseHTTPRequestHandler):
    response_text = "generated narrative"
    received = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        _StubHandler.received.append(json.loads(self.rfile.read(length)))
        body = json.dumps({"text": self.response_text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_endpoint():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/generate"
    server.shutdown()


class TestEndpoint:
    def test_post_contract_and_text_embedding(self, stub_endpoint):
        _StubHandler.received.clear()
        text, warning = render_report(make_report(), stub_endpoint, timeout=5)
        assert warning is None
        assert "generated narrative" in text
        assert DISCLAIMER in text
        payload = _StubHandler.received[0]
        assert set(payload) == {"prompt", "fields"}
        assert payload["fields"]["case_id"] == "case01"

    def test_unreachable_endpoint_falls_back(self):
        text, warning = render_report(make_report(), "http://127.0.0.1:1/nope", timeout=0.5)
        assert warning is not None
        assert DISCLAIMER in text
        assert text == render_template(make_report())
