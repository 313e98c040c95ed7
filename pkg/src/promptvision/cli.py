"""Operator command line: validate | run | replay | promptlab.

Exit codes are a stable contract: 0 success, 1 validation or domain error,
2 I/O or usage error.

`run` hosts both nodes in one process by default. With --bus-listen it
hosts the bus plus the consultation node and waits for a peer; with
--bus-connect it runs the camera node against a remote bus; together the
two flags split the pipeline across two processes exactly along the
node boundary.
"""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path

from . import bus as busmod
from . import camera as cameramod
from . import config as configmod
from . import consultation as consultmod
from . import promptlab as labmod
from . import recording as recmod
from . import semantics as semmod
from . import wire as wiremod

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptvision",
        description="YAML-driven camera->description->consultation pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a task file")
    p_validate.add_argument("config", help="path to the YAML task file")

    p_run = sub.add_parser("run", help="run a task")
    p_run.add_argument("config", help="path to the YAML task file")
    p_run.add_argument("--backend", help="override the description method (e.g. mock)")
    p_run.add_argument("--backend-url", help="vision backend endpoint override")
    p_run.add_argument("--llm-endpoint", help="LLM chat endpoint URL")
    p_run.add_argument("--llm-stub", help="path to a keyed stub script for offline runs")
    p_run.add_argument("--frame-interval", type=int, default=1, metavar="F",
                       help="sample every F-th frame (default 1)")
    p_run.add_argument("--sample-seconds", type=float, metavar="T",
                       help="sample on a T-second interval instead of a frame stride")
    p_run.add_argument("--frame-budget", type=int, metavar="N",
                       help="stop after reading N frames (bounds webcam-style sources)")
    p_run.add_argument("--fps", type=float, default=1.0,
                       help="nominal capture rate for finite sources (default 1)")
    p_run.add_argument("--record", metavar="PATH", help="write a session recording")
    p_run.add_argument("--session-log", metavar="PATH",
                       help="session log path (defaults to the Output_video field)")
    p_run.add_argument("--bus-listen", metavar="ADDR",
                       help="host the bus + consultation node on ADDR (host:port or unix:/path)")
    p_run.add_argument("--bus-connect", metavar="ADDR",
                       help="run the camera node against a remote bus at ADDR")
    p_run.add_argument("--consult-wait", type=float, default=5.0, metavar="SECS",
                       help="max wait for each frame's consultation (0 disables; default 5)")
    p_run.add_argument("--quiet", action="store_true",
                       help="suppress per-consultation console output")

    p_replay = sub.add_parser("replay", help="republish a recorded session")
    p_replay.add_argument("recording", help="path to a session recording")
    p_replay.add_argument("--bus-listen", metavar="ADDR",
                          help="serve the replay bus on ADDR for external subscribers")
    p_replay.add_argument("--wait-clients", type=int, default=0, metavar="N",
                          help="with --bus-listen, wait for N clients before replaying")
    p_replay.add_argument("--linger", type=float, default=1.0, metavar="SECS",
                          help="with --bus-listen, keep serving after replay")

    p_lab = sub.add_parser("promptlab", help="prompt-strategy evaluation")
    lab_sub = p_lab.add_subparsers(dest="lab_command", required=True)
    p_lab_run = lab_sub.add_parser("run", help="run the case x strategy matrix")
    p_lab_run.add_argument("--cases", metavar="PATH",
                           help="cases YAML (defaults to the built-in ten)")
    p_lab_run.add_argument("--rubric", metavar="PATH",
                           help="rubric TSV (defaults to the reference rubric)")
    p_lab_run.add_argument("--out", metavar="PATH", help="write the rendered table here")
    p_lab_run.add_argument("--records", metavar="PATH", help="write records JSONL here")
    p_lab_run.add_argument("--backend-url", help="vision backend endpoint (default: mock)")
    p_lab_run.add_argument("--llm-endpoint", help="LLM endpoint (default: built-in stub)")
    p_lab_run.add_argument("--llm-stub", help="keyed stub script path")
    p_lab_run.add_argument("--parallelism", type=int, default=1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "replay":
            return cmd_replay(args)
        if args.command == "promptlab":
            return cmd_promptlab(args)
    except wiremod.TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser.error("unknown command")
    return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


# -- validate ---------------------------------------------------------------

def cmd_validate(args) -> int:
    path = Path(args.config)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = configmod.parse_task_config(text)
    except configmod.TaskConfigError as exc:
        print(f"{type(exc).__name__}: {exc}")
        return EXIT_DOMAIN
    for key in cfg.unknown_keys:
        print(f"warning: unknown key {key}")
    violations = configmod.validate(cfg)
    for violation in violations:
        print(f"violation: {violation}")
    if violations:
        return EXIT_DOMAIN
    print(f"ok: {cfg.task_name}")
    return EXIT_OK


# -- run ----------------------------------------------------------------------

def _load_config(args):
    path = Path(args.config)
    text = path.read_text(encoding="utf-8")
    cfg = configmod.parse_task_config(text)
    if args.backend:
        cfg = configmod.with_method(cfg, args.backend)
    # Input-path presence is re-checked when the source is opened, and the
    # bus-listen side never opens one; everything else blocks the run.
    blocking = [v for v in configmod.validate(cfg) if "Input_video" not in v.path]
    if blocking:
        for violation in blocking:
            print(f"violation: {violation}", file=sys.stderr)
        raise configmod.ConfigError("task file fails validation")
    return cfg, text


def _sampling_policy(args) -> cameramod.SamplingPolicy:
    if args.sample_seconds:
        return cameramod.SamplingPolicy.every_seconds(args.sample_seconds)
    return cameramod.SamplingPolicy.every_frames(args.frame_interval)


def _llm_client(args):
    if args.llm_stub:
        return consultmod.load_stub_client(args.llm_stub)
    if args.llm_endpoint:
        return consultmod.HttpLlmClient(args.llm_endpoint)
    return consultmod.default_stub_client()


def _vision_backend(cfg, args):
    spec = semmod.build_backend(cfg, endpoint=args.backend_url)
    return semmod.open_backend(spec)


def _session_log_path(cfg, args):
    if args.session_log:
        return Path(args.session_log)
    if cfg.camera.output_video:
        return Path(cfg.camera.output_video)
    return Path("session_log.jsonl")


def cmd_run(args) -> int:
    if args.bus_listen and args.bus_connect:
        print("--bus-listen and --bus-connect are mutually exclusive", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg, text = _load_config(args)
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except configmod.TaskConfigError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except configmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    if args.bus_listen:
        return _run_listener(cfg, text, args)
    if args.bus_connect:
        return _run_camera_side(cfg, text, args)
    return _run_both(cfg, text, args, busmod.Bus())


def _recorder(bus, cfg, text, args):
    if not args.record:
        return None
    return recmod.SessionRecorder(bus, cfg.task_name, recmod.config_digest(text))


def _finish_recording(recorder, args) -> None:
    if recorder is None:
        return
    recording = recorder.stop()
    recmod.write_recording(recording, args.record)
    print(f"recording: {args.record} ({len(recording.entries)} entries)")


def _run_both(cfg, text, args, local_bus) -> int:
    """Single-process deployment: both nodes on the in-process bus."""
    busmod.ensure_topics(local_bus, cameramod.TASK_TOPICS)
    recorder = _recorder(local_bus, cfg, text, args)
    try:
        client = _llm_client(args)
        backend = _vision_backend(cfg, args)
        source = cameramod.open_frame_source(
            cfg.camera.choose_input, cfg.camera.input_video, fps=args.fps
        )
    except (configmod.ConfigError, cameramod.SourceError, OSError) as exc:
        print(f"cannot start: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    sinks = () if args.quiet else (consultmod.ConsoleSink(),)
    consult_report = {}

    def consume():
        consult_report["report"] = consultmod.run_consultation_node(
            cfg, client, local_bus, sinks=sinks
        )

    consumer = threading.Thread(target=consume, name="consultation-node", daemon=True)
    consumer.start()
    try:
        camera_report = cameramod.run_camera_node(
            cfg, source, backend, local_bus,
            policy=_sampling_policy(args),
            frame_budget=args.frame_budget,
            consult_wait=args.consult_wait,
        )
    except cameramod.SourceError as exc:
        print(f"source error: {exc}", file=sys.stderr)
        consumer.join(timeout=5.0)
        return EXIT_DOMAIN
    consumer.join(timeout=30.0)

    return _conclude(cfg, args, camera_report, consult_report.get("report"), recorder)


def _run_listener(cfg, text, args) -> int:
    """Two-process deployment, host side: bus server + consultation node."""
    local_bus = busmod.Bus()
    busmod.ensure_topics(local_bus, cameramod.TASK_TOPICS)
    try:
        server = wiremod.serve(local_bus, args.bus_listen)
    except wiremod.TransportError as exc:
        print(f"cannot listen: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"bus listening on {server.address}", flush=True)
    recorder = _recorder(local_bus, cfg, text, args)
    client = _llm_client(args)
    sinks = () if args.quiet else (consultmod.ConsoleSink(),)
    try:
        report = consultmod.run_consultation_node(cfg, client, local_bus, sinks=sinks)
    finally:
        server.close()
    print(f"consultation: {report.summary()}")
    _finish_recording(recorder, args)
    return EXIT_OK if report.errors == 0 else EXIT_DOMAIN


def _run_camera_side(cfg, text, args) -> int:
    """Two-process deployment, peer side: camera node over the wire."""
    remote = wiremod.connect(args.bus_connect, retry_for=5.0)
    try:
        recorder = _recorder(remote, cfg, text, args)
        try:
            backend = _vision_backend(cfg, args)
            source = cameramod.open_frame_source(
                cfg.camera.choose_input, cfg.camera.input_video, fps=args.fps
            )
        except (configmod.ConfigError, cameramod.SourceError, OSError) as exc:
            print(f"cannot start: {exc}", file=sys.stderr)
            return EXIT_DOMAIN
        camera_report = cameramod.run_camera_node(
            cfg, source, backend, remote,
            policy=_sampling_policy(args),
            frame_budget=args.frame_budget,
            consult_wait=args.consult_wait,
        )
        return _conclude(cfg, args, camera_report, None, recorder)
    finally:
        remote.close()


def _conclude(cfg, args, camera_report, consult_report, recorder) -> int:
    print(f"camera: {camera_report.summary()}")
    if consult_report is not None:
        print(f"consultation: {consult_report.summary()}")
    log_path = _session_log_path(cfg, args)
    try:
        cameramod.write_session_log(log_path, camera_report.entries)
        print(f"session log: {log_path}")
    except cameramod.LogError as exc:
        print(f"warning: {exc}", file=sys.stderr)
    _finish_recording(recorder, args)
    return EXIT_OK


# -- replay ---------------------------------------------------------------------

def cmd_replay(args) -> int:
    path = Path(args.recording)
    try:
        recording = recmod.read_recording(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except recmod.RecordingError as exc:
        print(f"corrupt recording: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    local_bus = busmod.Bus()
    server = None
    if args.bus_listen:
        server = wiremod.serve(local_bus, args.bus_listen)
        print(f"bus listening on {server.address}", flush=True)
        if args.wait_clients > 0:
            import time as _time

            while server.connection_count() < args.wait_clients:
                _time.sleep(0.05)
    stats = recmod.replay(recording, local_bus)
    print(
        f"replayed {stats.published} envelopes over {stats.topics} topics"
        + (f" ({stats.seq_mismatches} seq mismatches)" if stats.seq_mismatches else "")
    )
    if server is not None:
        import time as _time

        _time.sleep(args.linger)
        server.close()
    return EXIT_OK


# -- promptlab --------------------------------------------------------------------

def cmd_promptlab(args) -> int:
    if args.lab_command != "run":
        return EXIT_USAGE
    try:
        cases = labmod.load_cases(args.cases) if args.cases else labmod.default_cases()
        rubric = labmod.load_rubric(args.rubric) if args.rubric else labmod.reference_rubric()
    except (OSError, ValueError, labmod.RubricError) as exc:
        print(f"cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    if args.backend_url:
        spec = semmod.BackendSpec(id=semmod.BACKEND_LLAVA, endpoint=args.backend_url)
        backend = semmod.open_backend(spec)
    else:
        backend = semmod.open_backend(
            semmod.BackendSpec(id=semmod.BACKEND_MOCK, script=semmod.default_mock_script())
        )
    if args.llm_stub:
        client = consultmod.load_stub_client(args.llm_stub)
    elif args.llm_endpoint:
        client = consultmod.HttpLlmClient(args.llm_endpoint)
    else:
        client = consultmod.default_stub_client()

    records = labmod.run_matrix(
        cases, backend, client, parallelism=max(1, args.parallelism)
    )
    errors = sum(1 for r in records if r.error)
    try:
        scored = labmod.score_records(records, rubric)
    except labmod.RubricError as exc:
        print(f"rubric error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    table = labmod.render_table(scored.matrix)

    if args.records:
        labmod.write_records(scored.records, args.records)
        print(f"records: {args.records}")
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        print(f"table: {args.out}")
    else:
        print(table, end="")

    tallies = labmod.summarize(scored.matrix)
    print(f"records={len(records)} errors={errors}")
    for axis in (labmod.AXIS_VISUAL, labmod.AXIS_LLM):
        counts = " ".join(f"{kind}={n}" for kind, n in tallies[axis].items())
        print(f"best[{axis}]: {counts}")
    return EXIT_OK if errors == 0 else EXIT_DOMAIN
