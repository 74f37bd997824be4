from __future__ import annotations

import hashlib
import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

DATA = Path(__file__).resolve().parent.parent / "src" / "mtharness" / "data"
CORPUS = sorted((DATA / "corpus").glob("*.mrs"))
SUITES = DATA / "suites"


class FakeChatServer:
    """OpenAI-style chat + embeddings endpoint on localhost.

    Answers are a digest of the last user message. ``script`` holds
    (status, body) tuples served before normal answers, for fault tests.
    """

    def __init__(self) -> None:
        self.requests: list[dict] = []
        self.script: list[tuple[int, object]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep pytest output clean
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                outer.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                if outer.script:
                    status, payload = outer.script.pop(0)
                    self._send(status, payload)
                    return
                if self.path.endswith("/embeddings"):
                    digest = hashlib.sha256(body["input"].encode()).digest()
                    vec = [b / 255 for b in digest[:8]]
                    self._send(200, {"data": [{"embedding": vec}]})
                    return
                text = body["messages"][-1]["content"]
                answer = "echo " + hashlib.sha256(text.encode()).hexdigest()[:10]
                self._send(200, {"choices": [{"message": {"role": "assistant", "content": answer}}]})

            def _send(self, status, payload):
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def chat_count(self) -> int:
        return sum(r["path"].endswith("/chat/completions") for r in self.requests)


@pytest.fixture
def chat_server():
    server = FakeChatServer()
    server.thread.start()
    yield server
    server.httpd.shutdown()
    server.httpd.server_close()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
