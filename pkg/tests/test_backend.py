"""Backend tests: scripted mock, remote client against a loopback stub,
prompt templates, and the dual-generation contract."""

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from gatemix.backend import (
    BackendError,
    BackendRequest,
    CapabilityError,
    DecodingConfig,
    GenerationTrace,
    MockBackend,
    RemoteBackend,
    RetryableTransportError,
    build_prompt,
    default_decoding,
    dual_generate,
    trace_from_dict,
    trace_to_dict,
)

GOLDEN = Path(__file__).parent / "golden"

QUESTION = "What color is the square?"


def _trace(text="A", mode="direct"):
    return GenerationTrace(
        text=text,
        token_logprobs=(math.log(0.5),),
        img_rep=(1.0, 0.0),
        txt_rep=(0.0, 1.0),
        prompt_mode=mode,
    )


class TestDecodingConfig:
    def test_mode_defaults(self):
        direct = default_decoding("direct")
        cot = default_decoding("cot")
        assert (direct.temperature, direct.top_p) == (1.0, 1.0)
        assert (cot.temperature, cot.top_p) == (0.4, 0.9)
        assert direct.max_tokens == cot.max_tokens == 1024

    def test_validation(self):
        with pytest.raises(ValueError):
            DecodingConfig(max_tokens=0)
        with pytest.raises(ValueError):
            DecodingConfig(temperature=-0.1)
        with pytest.raises(ValueError):
            DecodingConfig(top_p=0.0)
        with pytest.raises(ValueError):
            DecodingConfig(top_p=1.2)


class TestGenerationTrace:
    def test_positive_logprob_rejected(self):
        with pytest.raises(ValueError):
            GenerationTrace("x", (0.5,), (1.0,), (1.0,), "direct")

    def test_nonempty_text_needs_logprobs(self):
        with pytest.raises(ValueError):
            GenerationTrace("x", (), (1.0,), (1.0,), "direct")

    def test_dict_roundtrip(self):
        t = _trace("The answer is B.", "cot")
        assert trace_from_dict(trace_to_dict(t)) == t


class TestPrompts:
    def test_direct_matches_golden(self):
        assert build_prompt(QUESTION, "direct") == (GOLDEN / "prompt_direct.txt").read_text()

    def test_cot_matches_golden(self):
        assert build_prompt(QUESTION, "cot") == (GOLDEN / "prompt_cot.txt").read_text()

    def test_question_embedded_verbatim(self):
        for mode in ("direct", "cot"):
            assert QUESTION in build_prompt(QUESTION, mode)

    def test_prompts_differ_only_in_task_section(self):
        direct = build_prompt(QUESTION, "direct").splitlines()
        cot = build_prompt(QUESTION, "cot").splitlines()
        assert direct[:2] == cot[:2]  # shared preamble + question line
        assert direct[2:] != cot[2:]  # task section differs


class TestMockBackend:
    def test_scripted_key_returns_exact_trace(self):
        scripted = _trace("The answer is C.", "cot")
        mock = MockBackend(entries={("img1", QUESTION, "cot"): scripted})
        req = BackendRequest("img1", QUESTION, "cot", default_decoding("cot"))
        assert mock.generate(req) is scripted

    def test_unscripted_key_returns_default(self):
        default = {"text": "B", "token_logprobs": [-0.1], "img_rep": [1, 0], "txt_rep": [0, 1]}
        mock = MockBackend(default=default)
        req = BackendRequest("nope", "???", "direct", default_decoding("direct"))
        trace = mock.generate(req)
        assert trace.text == "B"
        assert trace.prompt_mode == "direct"

    def test_referentially_transparent_across_loads(self, tmp_path):
        script = {
            "default": {"text": "A", "token_logprobs": [-0.2], "img_rep": [1, 0], "txt_rep": [0, 1]},
            "entries": [
                {
                    "image_ref": "img9",
                    "question": QUESTION,
                    "prompt_mode": "direct",
                    "trace": {
                        "text": "The answer is D.",
                        "token_logprobs": [-0.3, -0.1],
                        "img_rep": [0.5, 0.5],
                        "txt_rep": [0.5, -0.5],
                    },
                }
            ],
        }
        path = tmp_path / "script.json"
        path.write_text(json.dumps(script))
        req = BackendRequest("img9", QUESTION, "direct", default_decoding("direct"))
        first = MockBackend.from_json(path).generate(req)
        second = MockBackend.from_json(path).generate(req)
        assert first == second

    def test_completion_rules(self):
        mock = MockBackend(
            completions=[{"contains": "### Given CoT:", "reply": "rewritten text"}],
            default_completion="Scoring: 0.5",
        )
        assert mock.complete_text("... ### Given CoT: ...") == "rewritten text"
        assert mock.complete_text("anything else") == "Scoring: 0.5"

    def test_completion_without_script_raises(self):
        with pytest.raises(CapabilityError):
            MockBackend().complete_text("prompt")


class _StubHandler(BaseHTTPRequestHandler):
    reply: dict = {}
    requests: list = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        type(self).requests.append(json.loads(self.rfile.read(length)))
        body = json.dumps(type(self).reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.requests = []
    yield f"http://127.0.0.1:{server.server_port}", _StubHandler
    server.shutdown()
    thread.join(timeout=5)


class TestRemoteBackend:
    def test_trace_fields_equal_stub_payload(self, stub_server):
        endpoint, handler = stub_server
        handler.reply = {
            "text": "The answer is B.",
            "logprobs": [-0.25, -0.5],
            "embeddings": {"prompt": [0.1, 0.9], "completion": [0.9, 0.1]},
        }
        backend = RemoteBackend(endpoint)
        req = BackendRequest("img1", QUESTION, "cot", default_decoding("cot"))
        trace = backend.generate(req)
        assert trace.text == "The answer is B."
        assert trace.token_logprobs == (-0.25, -0.5)
        assert trace.img_rep == (0.1, 0.9)
        assert trace.txt_rep == (0.9, 0.1)
        sent = handler.requests[-1]
        assert sent["want_logprobs"] is True and sent["want_embeddings"] is True
        assert sent["temperature"] == 0.4 and sent["top_p"] == 0.9
        assert sent["max_tokens"] == 1024
        assert QUESTION in sent["prompt"]

    def test_missing_logprobs_is_capability_error(self, stub_server):
        endpoint, handler = stub_server
        handler.reply = {"text": "B"}
        backend = RemoteBackend(endpoint)
        req = BackendRequest("img1", QUESTION, "direct", default_decoding("direct"))
        with pytest.raises(CapabilityError, match="logprobs"):
            backend.generate(req)

    def test_missing_embeddings_degrades_to_neutral(self, stub_server, caplog):
        endpoint, handler = stub_server
        handler.reply = {"text": "B", "logprobs": [-0.1]}
        backend = RemoteBackend(endpoint)
        req = BackendRequest("img1", QUESTION, "direct", default_decoding("direct"))
        with caplog.at_level("WARNING"):
            trace = backend.generate(req)
        assert trace.img_rep == (1.0, 0.0)
        assert trace.txt_rep == (0.0, 1.0)
        assert any("embeddings" in rec.message for rec in caplog.records)

    def test_transport_failure_carries_attempts(self):
        backend = RemoteBackend("http://127.0.0.1:1", retries=2, retry_wait=0.0, timeout=0.5)
        req = BackendRequest("img1", QUESTION, "direct", default_decoding("direct"))
        with pytest.raises(RetryableTransportError) as exc:
            backend.generate(req)
        assert exc.value.attempts == 2

    def test_complete_text(self, stub_server):
        endpoint, handler = stub_server
        handler.reply = {"text": "Scoring: 0.8"}
        assert RemoteBackend(endpoint).complete_text("score this") == "Scoring: 0.8"


class TestDualGenerate:
    def test_returns_both_branches_in_order(self):
        direct = _trace("A", "direct")
        cot = _trace("The answer is B.", "cot")
        mock = MockBackend(
            entries={
                ("img1", QUESTION, "direct"): direct,
                ("img1", QUESTION, "cot"): cot,
            }
        )
        got = dual_generate(mock, "img1", QUESTION)
        assert got == (direct, cot)

    def test_failing_branch_named(self, stub_server):
        endpoint, handler = stub_server
        handler.reply = {"text": "B"}  # no logprobs -> capability error on direct
        with pytest.raises(BackendError, match="direct branch failed"):
            dual_generate(RemoteBackend(endpoint), "img1", QUESTION)

    def test_decoding_differs_only_by_mode_defaults(self, stub_server):
        endpoint, handler = stub_server
        handler.reply = {
            "text": "B",
            "logprobs": [-0.1],
            "embeddings": {"prompt": [1, 0], "completion": [0, 1]},
        }
        dual_generate(RemoteBackend(endpoint), "img1", QUESTION, max_tokens=77)
        direct_req, cot_req = handler.requests[-2:]
        assert direct_req["max_tokens"] == cot_req["max_tokens"] == 77
        assert (direct_req["temperature"], direct_req["top_p"]) == (1.0, 1.0)
        assert (cot_req["temperature"], cot_req["top_p"]) == (0.4, 0.9)
        assert direct_req["image_ref"] == cot_req["image_ref"] == "img1"
