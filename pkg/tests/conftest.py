"""Shared test fixtures: frame directories, task configs, HTTP stubs."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from PIL import Image

from promptvision.config import parse_task_config

REPO_ROOT = Path(__file__).resolve().parents[1]
CARMATE_YAML = REPO_ROOT / "cfg" / "carmate.yaml"


def make_frames_dir(root: Path, count: int, labels=None, name="frames") -> Path:
    """Write ``count`` tiny PNGs (frame_000.png ...) plus a labels.tsv."""
    frames = root / name
    frames.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        filename = f"frame_{i:03d}.png"
        Image.new("RGB", (16, 12), ((i * 11) % 256, (i * 29) % 256, (i * 53) % 256)).save(
            frames / filename
        )
        if labels:
            lines.append(f"{filename}\t{labels[i % len(labels)]}")
    if lines:
        (frames / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return frames


def mock_task_yaml(frames_dir: Path, log_path: Path) -> str:
    return f"""\
Task_name: driver phone usage
ROSGPT_Vision_Camera_Node:
  Image_Description_Method: mock
  Vision_prompt: "Describe the driver’s current level of focus on driving based on the visual cues, Answer with one short sentence."
  Choose_input: "frames"
  Input_video: "{frames_dir}"
  Output_video: "{log_path}"
GPT_Consultation_Node:
  llm_prompt: "Consider the following ontology: You must write your Reply with one short sentence. Behave as a carmate that surveys the driver and gives him advice and instruction to drive safely. You will be given human language prompts describing an image. Your task is to provide appropriate instructions to the driver based on the description."
  GPT_temperature: 0.2
"""


@pytest.fixture
def mock_cfg(tmp_path):
    frames = make_frames_dir(tmp_path, 20, labels=["attentive"] * 5 + ["phone"] * 5)
    return parse_task_config(mock_task_yaml(frames, tmp_path / "session.jsonl"))


@pytest.fixture
def carmate_cfg():
    return parse_task_config(CARMATE_YAML.read_text(encoding="utf-8"))


class StubHttp:
    """Tiny scriptable HTTP server: route -> fn(body_dict) -> (status, reply)."""

    def __init__(self):
        self.routes = {}
        self.requests: list[tuple[str, dict]] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw.decode("utf-8")) if raw else {}
                except ValueError:
                    body = {}
                stub.requests.append((self.path, body))
                handler = stub.routes.get(self.path)
                if handler is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                result = handler(body, self.headers)
                if result is None:  # handler hijacked the connection (e.g. hang)
                    return
                status, reply = result
                payload = json.dumps(reply).encode("utf-8")
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up (timeout tests); nothing to do

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def route(self, path):
        def register(fn):
            self.routes[path] = fn
            return fn

        return register

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_http():
    stub = StubHttp()
    yield stub
    stub.close()
