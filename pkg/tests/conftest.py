import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

import toydata


class _ChatHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.requests.append(body)
        question = body["messages"][-1]["content"].rsplit("Question:", 1)[-1]
        out = json.dumps({"choices": [{"message": {"role": "assistant", "content": toydata.mock_answer(question)}}]})
        data = out.encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    """Local OpenAI-style endpoint answering with the deterministic mock; yields its URL."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()


def server_url(server) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}/v1/chat/completions"


@pytest.fixture
def toy_workspace(tmp_path):
    """KG dump, dataset and a config file for the toy setup; returns the config path."""
    data = toydata.write_kg(tmp_path / "kg")
    dataset = toydata.write_dataset(tmp_path / "dataset.csv")
    cfg = {
        "paths": {
            "work_dir": str(tmp_path / "work"),
            "kg_triples": str(data["kg_triples"]),
            "entity_labels": str(data["entity_labels"]),
            "relation_labels": str(data["relation_labels"]),
            "entity_descriptions": str(data["entity_descriptions"]),
            "relation_descriptions": str(data["relation_descriptions"]),
            "dataset": str(dataset),
        },
        "index": {"mode": "hnsw"},
        "llm": {"retries": 0, "backoff": 0},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return path


def set_endpoint(config_path, url):
    cfg = json.loads(config_path.read_text())
    cfg["llm"]["endpoint"] = url
    config_path.write_text(json.dumps(cfg, indent=2))


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the lines are echoed now and again in the terminal summary."""
    log = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        print(line)
        log.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
