"""Acceptance suite: one test per criterion, each printing a PASS line.

Every criterion runs offline: scripted mock backend, scripted stub LLM,
loopback sockets only. Run with ``pytest tests/test_acceptance.py -v``
(add ``-s`` to see the per-criterion PASS lines as they happen).
"""

from __future__ import annotations

import json
import random
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from promptvision.bus import Bus, ensure_topics
from promptvision.camera import (
    SamplingPolicy,
    SyntheticSource,
    iter_session_log,
    run_camera_node,
)
from promptvision.cli import main
from promptvision.config import parse_task_config, serialize
from promptvision.consultation import default_stub_client, run_consultation_node
from promptvision.messages import (
    IMAGE_DESCRIPTION_TOPIC,
    TASK_TOPICS,
    ImageDescription,
)
from promptvision.promptlab import (
    AXIS_LLM,
    AXIS_VISUAL,
    default_cases,
    reference_rubric,
    render_table,
    run_matrix,
    score_records,
    summarize,
)
from promptvision.recording import audit_causality, read_recording
from promptvision.semantics import (
    BACKEND_MOCK,
    BackendSpec,
    BackendUnavailable,
    default_mock_script,
    open_backend,
)
from promptvision.wire import connect, serve

from conftest import CARMATE_YAML, make_frames_dir, mock_task_yaml
from test_config import CARMATE_LLM_PROMPT, CARMATE_VISION_PROMPT

GOLDEN = Path(__file__).parent / "golden" / "table_matrix.txt"


def ok(n: int, name: str) -> None:
    print(f"ACCEPTANCE {n} {name}: PASS")


def mock_backend():
    return open_backend(BackendSpec(id=BACKEND_MOCK, script=default_mock_script()))


def simple_mock_cfg():
    return parse_task_config(
        """\
Task_name: acceptance
ROSGPT_Vision_Camera_Node:
  Image_Description_Method: mock
  Vision_prompt: "p"
  Choose_input: "webcam"
GPT_Consultation_Node:
  llm_prompt: "q"
  GPT_temperature: 0.2
"""
    )


# -- 1. sampling oracle ---------------------------------------------------------------

def test_criterion_1_sampling_oracle():
    """Camera sampled-index set == brute force for f in 1..10, N in 0..50."""
    cfg = simple_mock_cfg()
    backend = mock_backend()
    start = time.perf_counter()
    for f in range(1, 11):
        policy = SamplingPolicy.every_frames(f)
        for n in range(0, 51):
            bus = Bus()
            ensure_topics(bus, TASK_TOPICS)
            sub = bus.subscribe(IMAGE_DESCRIPTION_TOPIC, queue_size=64)
            source = SyntheticSource(count=n, labels=["attentive"])
            run_camera_node(cfg, source, backend, bus, policy=policy, consult_wait=0.0)
            sampled = {
                ImageDescription.from_bytes(env.payload).frame_index
                for env in sub.drain()
            }
            brute_force = {i for i in range(n) if i % f == 0}
            assert sampled == brute_force, (f, n)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"sampling sweep took {elapsed:.2f}s"
    ok(1, "sampling oracle")


# -- 2. end-to-end determinism -----------------------------------------------------------

CARMATE_FIXTURE_LABELS = ["attentive"] * 5 + ["phone"] * 5


def carmate_mock_run(tmp_path: Path, name: str, extra_args=()) -> Path:
    frames = make_frames_dir(tmp_path, 20, labels=CARMATE_FIXTURE_LABELS, name=f"{name}-frames")
    log = tmp_path / f"{name}.jsonl"
    cfg = tmp_path / f"{name}.yaml"
    cfg.write_text(mock_task_yaml(frames, log), encoding="utf-8")
    code = main(["run", str(cfg), "--frame-interval", "5", "--quiet", *extra_args])
    assert code == 0
    return log


def test_criterion_2_end_to_end_determinism(tmp_path):
    """CarMate config + 20-frame fixture: 4/4, indices (0,5,10,15), byte-stable log."""
    start = time.perf_counter()
    logs = []
    for trial in range(3):
        log = carmate_mock_run(tmp_path, f"run{trial}")
        records = list(iter_session_log(log))
        assert [r["frame_index"] for r in records] == [0, 5, 10, 15]
        assert len(records) == 4
        assert all(r["description"] for r in records)
        assert all(r["consultation"] for r in records)
        logs.append(log.read_bytes())
    assert logs[0] == logs[1] == logs[2], "session log is not byte-stable"
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"three runs took {elapsed:.2f}s"
    ok(2, "end-to-end determinism")


# -- 3. config fidelity --------------------------------------------------------------------

def test_criterion_3_config_fidelity():
    cfg = parse_task_config(CARMATE_YAML.read_text(encoding="utf-8"))
    assert cfg.task_name == "driver phone usage"
    assert cfg.camera.image_description_method == "llava"
    assert cfg.camera.vision_prompt == CARMATE_VISION_PROMPT
    assert cfg.consultation.llm_prompt == CARMATE_LLM_PROMPT
    assert cfg.consultation.gpt_temperature == 0.2
    assert cfg.llava.llama_version == "13B"
    assert parse_task_config(serialize(cfg)) == cfg, "serialize->parse is not a fixpoint"
    ok(3, "config fidelity")


# -- 4. best-prompt table reproduction ---------------------------------------------------------

def test_criterion_4_table_reproduction():
    records = run_matrix(default_cases(), mock_backend(), default_stub_client())
    scored = score_records(records, reference_rubric())
    row1 = scored.matrix.row(1)
    assert (row1.best_visual, row1.best_llm) == ("ontological", "action_oriented")
    row4 = scored.matrix.row(4)
    assert (row4.best_visual, row4.best_llm) == ("focused_description", "consultative")
    tallies = summarize(scored.matrix)
    assert tallies[AXIS_VISUAL] == {
        "behavioral_description": 5, "focused_description": 3, "ontological": 2,
    }
    assert tallies[AXIS_LLM] == {
        "consultative": 7, "action_oriented": 3, "ontological": 0,
    }
    assert render_table(scored.matrix) == GOLDEN.read_text(encoding="utf-8")
    ok(4, "best-prompt table reproduction")


# -- 5. bus ordering ----------------------------------------------------------------------------

def test_criterion_5_bus_ordering():
    start = time.perf_counter()
    bus = Bus()
    bus.create_topic("t", 16)
    local_subs = [bus.subscribe("t", queue_size=128) for _ in range(2)]
    server = serve(bus, "127.0.0.1:0")
    try:
        remote = connect(server.address)
        remote_sub = remote.subscribe("t", queue_size=128)
        payloads = [f"payload-{i}".encode() for i in range(100)]
        for p in payloads:
            bus.publish("t", p)
        for sub in local_subs:
            got = [sub.get(timeout=2.0) for _ in range(100)]
            assert [e.seq for e in got] == list(range(100))
            assert [e.payload for e in got] == payloads
        got = [remote_sub.get(timeout=2.0) for _ in range(100)]
        assert all(e is not None for e in got), "remote subscriber timed out"
        assert [e.seq for e in got] == list(range(100))
        assert [e.payload for e in got] == payloads
        remote.close()
    finally:
        server.close()
    elapsed = time.perf_counter() - start
    assert elapsed < 2.0, f"bus ordering run took {elapsed:.2f}s"
    ok(5, "bus ordering")


# -- 6. causality audit ---------------------------------------------------------------------------

def test_criterion_6_causality_audit(tmp_path):
    # Part one: the criterion-2 style run, recorded.
    frames = make_frames_dir(tmp_path, 20, labels=CARMATE_FIXTURE_LABELS, name="audit-frames")
    log = tmp_path / "audit.jsonl"
    cfg = tmp_path / "audit.yaml"
    cfg.write_text(mock_task_yaml(frames, log), encoding="utf-8")
    rec_path = tmp_path / "audit.rec"
    assert main(["run", str(cfg), "--frame-interval", "5", "--quiet",
                 "--record", str(rec_path)]) == 0
    recording = read_recording(rec_path)
    assert len(recording.entries) > 0
    assert audit_causality(recording) == []

    # Part two: a 500-frame randomized fixture run through the node pair.
    rng = random.Random(2024)
    label_pool = ["attentive", "phone", "coffee-breakish"]
    labels = [rng.choice(label_pool) for _ in range(500)]
    import threading

    from promptvision.recording import SessionRecorder, config_digest

    cfg_obj = simple_mock_cfg()
    bus = Bus()
    ensure_topics(bus, TASK_TOPICS)
    recorder = SessionRecorder(bus, cfg_obj.task_name, config_digest("n/a"))
    result = {}

    def consume():
        result["report"] = run_consultation_node(cfg_obj, default_stub_client(), bus)

    thread = threading.Thread(target=consume, daemon=True)
    thread.start()
    report = run_camera_node(
        cfg_obj,
        SyntheticSource(count=500, labels=labels),
        mock_backend(),
        bus,
        policy=SamplingPolicy.every_frames(7),
        consult_wait=5.0,
    )
    thread.join(timeout=30.0)
    big = recorder.stop()
    assert report.descriptions_published == len(
        [i for i in range(500) if i % 7 == 0]
    )
    assert audit_causality(big) == []
    ok(6, "causality audit")


# -- 7. deployment equivalence -----------------------------------------------------------------------

def without_timestamps(log_path: Path) -> list[dict]:
    records = []
    for record in iter_session_log(log_path):
        record.pop("capture_time", None)
        records.append(record)
    return records


def test_criterion_7_deployment_equivalence(tmp_path):
    single_log = carmate_mock_run(tmp_path, "single")

    frames = make_frames_dir(tmp_path, 20, labels=CARMATE_FIXTURE_LABELS, name="split-frames")
    split_log = tmp_path / "split.jsonl"
    cfg = tmp_path / "split.yaml"
    cfg.write_text(mock_task_yaml(frames, split_log), encoding="utf-8")

    listener = subprocess.Popen(
        [sys.executable, "-m", "promptvision", "run", str(cfg),
         "--bus-listen", "127.0.0.1:0", "--quiet"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
    )
    try:
        address = None
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            line = listener.stdout.readline()
            match = re.search(r"bus listening on (\S+)", line or "")
            if match:
                address = match.group(1)
                break
        assert address, "listener never reported its address"
        code = main(["run", str(cfg), "--bus-connect", address,
                     "--frame-interval", "5", "--quiet"])
        assert code == 0
        assert listener.wait(timeout=15.0) == 0
    finally:
        if listener.poll() is None:
            listener.kill()
            listener.wait()

    single = without_timestamps(single_log)
    split = without_timestamps(split_log)
    assert single == split, "single- and two-process session logs differ"
    ok(7, "deployment equivalence")


# -- 8. fault tolerance ----------------------------------------------------------------------------

class EveryThirdFails:
    """Stub backend failing on every third describe call (calls 3, 6, 9, ...)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.spec = inner.spec

    def describe(self, frame, prompt):
        self.calls += 1
        if self.calls % 3 == 0:
            raise BackendUnavailable("scripted outage")
        return self.inner.describe(frame, prompt)


def test_criterion_8_fault_tolerance(tmp_path):
    import threading

    cfg = simple_mock_cfg()
    bus = Bus()
    ensure_topics(bus, TASK_TOPICS)
    desc_sub = bus.subscribe(IMAGE_DESCRIPTION_TOPIC, queue_size=64)
    result = {}

    def consume():
        result["report"] = run_consultation_node(cfg, default_stub_client(), bus)

    thread = threading.Thread(target=consume, daemon=True)
    thread.start()
    flaky = EveryThirdFails(mock_backend())
    report = run_camera_node(
        cfg,
        SyntheticSource(count=20, labels=["attentive"]),
        flaky,
        bus,
        policy=SamplingPolicy.every_frames(1),
        consult_wait=5.0,
    )
    thread.join(timeout=30.0)

    failed_indices = {2, 5, 8, 11, 14, 17}  # every third call, 0-based frames
    assert report.frames_read == 20
    assert report.frames_sampled == 20
    assert report.describe_errors == len(failed_indices) == 6
    assert report.descriptions_published == 14
    published = [
        ImageDescription.from_bytes(env.payload).frame_index
        for env in desc_sub.drain()
    ]
    assert published == [i for i in range(20) if i not in failed_indices]
    consult_report = result["report"]
    assert consult_report.consultations_published == 14
    assert consult_report.errors == 0
    ok(8, "fault tolerance")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
