"""Local stand-in for a streaming large-model endpoint (newline-delimited JSON).

Used by the tests and handy for trying ``simulate --realtime`` without a
real model::

    python -m dualtrack.stub --port 8765 --token-delay-ms 40
"""

from __future__ import annotations

import argparse
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

DEFAULT_REPLY = "Sure. Here is a short answer from the stub model."


def split_deltas(text: str) -> list[str]:
    """Whitespace-preserving pieces whose concatenation is ``text`` (minus trailing space)."""
    return re.findall(r"\s*\S+", text)


class _Handler(BaseHTTPRequestHandler):
    server: StubLlmServer

    def log_message(self, *args) -> None:  # keep test output quiet
        pass

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self.send_error(400, "bad json")
            return
        srv = self.server
        srv.requests.append(body)
        if srv.stall_ms:
            time.sleep(srv.stall_ms / 1000)
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.end_headers()
        time.sleep(srv.first_token_ms / 1000)
        for lineno, tok in enumerate(split_deltas(srv.responder(str(body.get("prompt", "")))), 1):
            if lineno == srv.malformed_line:
                line = b"{not json\n"
            else:
                line = (json.dumps({"token": tok}) + "\n").encode()
            try:
                self.wfile.write(line)
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return
            time.sleep(srv.token_delay_ms / 1000)


class StubLlmServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(
        self,
        responder: Callable[[str], str] | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        first_token_ms: int = 0,
        token_delay_ms: int = 5,
        malformed_line: int | None = None,
        stall_ms: int = 0,
    ):
        super().__init__((host, port), _Handler)
        self.responder = responder or (lambda prompt: DEFAULT_REPLY)
        self.first_token_ms = first_token_ms
        self.token_delay_ms = token_delay_ms
        self.malformed_line = malformed_line
        self.stall_ms = stall_ms
        self.requests: list[dict] = []
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}/generate"

    def __enter__(self) -> StubLlmServer:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
        self.server_close()


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description="Serve a canned NDJSON token stream.")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--first-token-ms", type=int, default=300)
    ap.add_argument("--token-delay-ms", type=int, default=30)
    ap.add_argument("--reply", default=DEFAULT_REPLY)
    args = ap.parse_args(argv)
    srv = StubLlmServer(lambda _: args.reply, port=args.port, first_token_ms=args.first_token_ms,
                        token_delay_ms=args.token_delay_ms)
    print(f"serving on {srv.url}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
