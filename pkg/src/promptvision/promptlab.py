"""Prompt-strategy evaluation harness.

Ten driver-distraction scenario cases are run against a 3x3 grid of prompt
strategies (three visual phrasings x three feedback phrasings), producing 90
records per full run. A rubric file assigns per-axis scores; the best-kind
matrix derived from it renders as a fixed-width table that also parses back,
so any table of marks round-trips through encode -> score -> render.

Judgment stays external: the shipped reference rubric encodes the published
best-prompt selections as 1.0/0.0 scores, and a human can supply any other.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import yaml

from .camera import Frame, FrameFormat, synthetic_pixels, _probe_image
from .consultation import LlmError, SkipSignal, ask_llm, build_llm_request
from .messages import ImageDescription, prompt_digest
from .semantics import BackendError

log = logging.getLogger(__name__)

AXIS_VISUAL = "visual"
AXIS_LLM = "llm"

VISUAL_FOCUSED = "focused_description"
VISUAL_BEHAVIORAL = "behavioral_description"
VISUAL_ONTOLOGICAL = "ontological"
LLM_CONSULTATIVE = "consultative"
LLM_ACTION = "action_oriented"
LLM_ONTOLOGICAL = "ontological"

# Tie-break order is this listing order.
VISUAL_KINDS = (VISUAL_FOCUSED, VISUAL_BEHAVIORAL, VISUAL_ONTOLOGICAL)
LLM_KINDS = (LLM_CONSULTATIVE, LLM_ACTION, LLM_ONTOLOGICAL)

KIND_TITLES = {
    (AXIS_VISUAL, VISUAL_FOCUSED): "Focused Description",
    (AXIS_VISUAL, VISUAL_BEHAVIORAL): "Behavioral Description",
    (AXIS_VISUAL, VISUAL_ONTOLOGICAL): "Ontological",
    (AXIS_LLM, LLM_CONSULTATIVE): "Consultative",
    (AXIS_LLM, LLM_ACTION): "Action-Oriented",
    (AXIS_LLM, LLM_ONTOLOGICAL): "Ontological",
}


class RubricError(Exception):
    """Rubric does not cover every (case, axis, kind) triple of the run."""


class RenderError(Exception):
    """Matrix is empty or malformed and cannot be drawn."""


@dataclass(frozen=True)
class PromptStrategy:
    axis: str
    kind: str
    template: str

    def __post_init__(self):
        kinds = VISUAL_KINDS if self.axis == AXIS_VISUAL else LLM_KINDS
        if self.axis not in (AXIS_VISUAL, AXIS_LLM) or self.kind not in kinds:
            raise ValueError(f"inconsistent strategy {self.axis}/{self.kind}")


BUILTIN_STRATEGIES = (
    PromptStrategy(
        AXIS_VISUAL, VISUAL_FOCUSED,
        "Describe the driver's current level of focus on driving based on the visual cues.",
    ),
    PromptStrategy(
        AXIS_VISUAL, VISUAL_BEHAVIORAL,
        "Describe the driver's overall behavior, including any distractions or signs of fatigue.",
    ),
    PromptStrategy(
        AXIS_VISUAL, VISUAL_ONTOLOGICAL,
        "Identify and describe the ontological entities related to driving focus in the current scene.",
    ),
    PromptStrategy(
        AXIS_LLM, LLM_CONSULTATIVE,
        "Based on the visual description, provide a consultation to the driver about their "
        "current level of focus on driving.",
    ),
    PromptStrategy(
        AXIS_LLM, LLM_ACTION,
        "Suggest actions the driver should take to improve their focus on driving based on "
        "the visual description.",
    ),
    PromptStrategy(
        AXIS_LLM, LLM_ONTOLOGICAL,
        "Provide a consultation to the driver based on the identified ontological entities "
        "related to driving focus.",
    ),
)

CASE_LABELS = {
    1: "Drinking Coffee during driving",
    2: "Focus on the road during driving",
    3: "holding a cup during driving",
    4: "looking down during driving",
    5: "looking to passenger during driving",
    6: "using radio during driving",
    7: "using mobile during driving",
    8: "sleeping during driving",
    9: "smoking during driving",
    10: "speaking in mobile during driving",
}

# Published best-prompt selections, one mark per axis per case.
REFERENCE_BEST = {
    1: (VISUAL_ONTOLOGICAL, LLM_ACTION),
    2: (VISUAL_ONTOLOGICAL, LLM_CONSULTATIVE),
    3: (VISUAL_BEHAVIORAL, LLM_CONSULTATIVE),
    4: (VISUAL_FOCUSED, LLM_CONSULTATIVE),
    5: (VISUAL_FOCUSED, LLM_CONSULTATIVE),
    6: (VISUAL_BEHAVIORAL, LLM_ACTION),
    7: (VISUAL_BEHAVIORAL, LLM_CONSULTATIVE),
    8: (VISUAL_FOCUSED, LLM_CONSULTATIVE),
    9: (VISUAL_BEHAVIORAL, LLM_ACTION),
    10: (VISUAL_BEHAVIORAL, LLM_CONSULTATIVE),
}


@dataclass(frozen=True)
class ScenarioCase:
    case_id: int
    label: str
    frames: tuple[Frame, ...]


@dataclass(frozen=True)
class EvaluationRecord:
    case_id: int
    visual_kind: str
    llm_kind: str
    description: str = ""
    consultation: str = ""
    score: Optional[float] = None
    scorer: Optional[str] = None
    error: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "case_id": self.case_id,
                "visual_kind": self.visual_kind,
                "llm_kind": self.llm_kind,
                "description": self.description,
                "consultation": self.consultation,
                "score": self.score,
                "scorer": self.scorer,
                "error": self.error,
            },
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class MatrixRow:
    case_id: int
    best_visual: str
    best_llm: str
    visual_tie: bool = False
    llm_tie: bool = False


@dataclass(frozen=True)
class StrategyMatrix:
    rows: tuple[MatrixRow, ...]

    def row(self, case_id: int) -> MatrixRow:
        for row in self.rows:
            if row.case_id == case_id:
                return row
        raise KeyError(case_id)


@dataclass(frozen=True)
class ScoredRun:
    records: tuple[EvaluationRecord, ...]
    matrix: StrategyMatrix


# -- cases -----------------------------------------------------------------------

def synthetic_case_frame(case_id: int, label: str) -> Frame:
    width, height = 32, 24
    return Frame(
        index=case_id - 1,
        capture_time=float(case_id - 1),
        width=width,
        height=height,
        format=FrameFormat.RGB8,
        data=synthetic_pixels(case_id, width, height),
        source_id=f"case:{case_id:02d}",
        label=label,
    )


def default_cases() -> list[ScenarioCase]:
    """The ten shipped scenario cases, each backed by one labeled synthetic frame."""
    return [
        ScenarioCase(cid, label, (synthetic_case_frame(cid, label),))
        for cid, label in CASE_LABELS.items()
    ]


def load_cases(path) -> list[ScenarioCase]:
    """Cases file: a YAML list of {case_id, label, frames: [image paths]?}."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ValueError("cases file must be a YAML list")
    cases = []
    for item in doc:
        case_id = int(item["case_id"])
        label = str(item["label"])
        frame_paths = item.get("frames") or []
        frames = []
        for i, frame_path in enumerate(frame_paths):
            p = Path(frame_path)
            data = p.read_bytes()
            width, height, fmt = _probe_image(data, p.suffix.lower())
            frames.append(
                Frame(
                    index=i, capture_time=float(i), width=width, height=height,
                    format=fmt, data=data, source_id=p.name, label=label,
                )
            )
        if not frames:
            frames = [synthetic_case_frame(case_id, label)]
        cases.append(ScenarioCase(case_id, label, tuple(frames)))
    return cases


# -- running the matrix ------------------------------------------------------------

def strategies_by_axis(strategies: Sequence[PromptStrategy]):
    visual = [s for s in strategies if s.axis == AXIS_VISUAL]
    llm = [s for s in strategies if s.axis == AXIS_LLM]
    visual.sort(key=lambda s: VISUAL_KINDS.index(s.kind))
    llm.sort(key=lambda s: LLM_KINDS.index(s.kind))
    return visual, llm


def run_matrix(
    cases: Sequence[ScenarioCase],
    backend,
    llm_client,
    strategies: Sequence[PromptStrategy] = BUILTIN_STRATEGIES,
    temperature: float = 0.2,
    parallelism: int = 1,
) -> list[EvaluationRecord]:
    """Evaluate every (case, visual, llm) cell; failures become error records.

    Output order is always (case_id, visual kind, llm kind) regardless of
    execution order, so mock-backed runs are byte-stable.
    """
    visual, llm = strategies_by_axis(strategies)
    cells = [
        (case, v, l)
        for case in sorted(cases, key=lambda c: c.case_id)
        for v in visual
        for l in llm
    ]

    def evaluate(cell):
        case, v, l = cell
        frame = case.frames[0]
        try:
            response = backend.describe(frame, v.template)
            description = ImageDescription(
                task_name="promptlab",
                frame_index=frame.index,
                capture_time=frame.capture_time,
                text=response.text,
                backend_id=getattr(getattr(backend, "spec", None), "id", "backend"),
                vision_prompt_digest=prompt_digest(v.template),
            )
            request = build_llm_request(l.template, description, temperature)
            consultation = ask_llm(llm_client, request)
        except (BackendError, LlmError, SkipSignal, ValueError) as exc:
            log.warning("cell (%d, %s, %s) failed: %s", case.case_id, v.kind, l.kind, exc)
            return EvaluationRecord(
                case_id=case.case_id, visual_kind=v.kind, llm_kind=l.kind,
                error=str(exc),
            )
        return EvaluationRecord(
            case_id=case.case_id,
            visual_kind=v.kind,
            llm_kind=l.kind,
            description=response.text,
            consultation=consultation,
        )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(evaluate, cells))
    else:
        records = [evaluate(cell) for cell in cells]

    records.sort(
        key=lambda r: (
            r.case_id, VISUAL_KINDS.index(r.visual_kind), LLM_KINDS.index(r.llm_kind)
        )
    )
    return records


# -- scoring ----------------------------------------------------------------------

Rubric = Mapping[tuple[int, str, str], float]


def load_rubric(path) -> dict[tuple[int, str, str], float]:
    """Rubric TSV: ``case_id<TAB>axis<TAB>kind<TAB>score`` per line."""
    rubric: dict[tuple[int, str, str], float] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise RubricError(f"{path}:{lineno}: expected 4 tab-separated fields")
        case_id, axis, kind, score = parts
        rubric[(int(case_id), axis.strip(), kind.strip())] = float(score)
    return rubric


def save_rubric(rubric: Rubric, path) -> None:
    lines = [
        f"{case_id}\t{axis}\t{kind}\t{score}"
        for (case_id, axis, kind), score in sorted(rubric.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def marks_to_rubric(best: Mapping[int, tuple[str, str]]) -> dict[tuple[int, str, str], float]:
    """Encode a table of best marks as a 1.0/0.0 rubric."""
    rubric: dict[tuple[int, str, str], float] = {}
    for case_id, (best_visual, best_llm) in best.items():
        for kind in VISUAL_KINDS:
            rubric[(case_id, AXIS_VISUAL, kind)] = 1.0 if kind == best_visual else 0.0
        for kind in LLM_KINDS:
            rubric[(case_id, AXIS_LLM, kind)] = 1.0 if kind == best_llm else 0.0
    return rubric


def reference_rubric() -> dict[tuple[int, str, str], float]:
    return marks_to_rubric(REFERENCE_BEST)


def score_records(records: Sequence[EvaluationRecord], rubric: Rubric) -> ScoredRun:
    """Attach rubric scores and derive the best-kind matrix.

    A record's score is the mean of its two axis scores. Per axis and case,
    the best kind is the rubric argmax; exact ties resolve to the earliest
    kind in the fixed order and set the tie flag.
    """
    scored = []
    case_ids = sorted({r.case_id for r in records})
    for record in records:
        visual_key = (record.case_id, AXIS_VISUAL, record.visual_kind)
        llm_key = (record.case_id, AXIS_LLM, record.llm_kind)
        for key in (visual_key, llm_key):
            if key not in rubric:
                raise RubricError(f"rubric has no entry for {key}")
        score = (rubric[visual_key] + rubric[llm_key]) / 2.0
        scored.append(replace(record, score=score, scorer="rubric"))

    rows = []
    for case_id in case_ids:
        best_visual, visual_tie = _axis_best(rubric, case_id, AXIS_VISUAL, VISUAL_KINDS)
        best_llm, llm_tie = _axis_best(rubric, case_id, AXIS_LLM, LLM_KINDS)
        rows.append(
            MatrixRow(
                case_id=case_id,
                best_visual=best_visual,
                best_llm=best_llm,
                visual_tie=visual_tie,
                llm_tie=llm_tie,
            )
        )
    return ScoredRun(records=tuple(scored), matrix=StrategyMatrix(rows=tuple(rows)))


def _axis_best(rubric: Rubric, case_id: int, axis: str, kinds: Sequence[str]):
    scores = {}
    for kind in kinds:
        key = (case_id, axis, kind)
        if key not in rubric:
            raise RubricError(f"rubric has no entry for {key}")
        scores[kind] = rubric[key]
    top = max(scores.values())
    winners = [kind for kind in kinds if scores[kind] == top]
    return winners[0], len(winners) > 1


# -- rendering ----------------------------------------------------------------------

_VISUAL_TITLES = [KIND_TITLES[(AXIS_VISUAL, k)] for k in VISUAL_KINDS]
_LLM_TITLES = [KIND_TITLES[(AXIS_LLM, k)] for k in LLM_KINDS]
_CASE_WIDTH = 8
_COL_WIDTHS = [len(t) + 2 for t in _VISUAL_TITLES + _LLM_TITLES]


def render_table(matrix: StrategyMatrix) -> str:
    """Fixed-width best-prompt table; byte-stable for golden comparison."""
    if not matrix.rows:
        raise RenderError("matrix has no rows")
    for row in matrix.rows:
        if row.best_visual not in VISUAL_KINDS or row.best_llm not in LLM_KINDS:
            raise RenderError(f"malformed row for case {row.case_id}")

    header_kinds = _row_text(
        "Cases", [f" {t} " for t in _VISUAL_TITLES + _LLM_TITLES]
    )
    visual_span = sum(_COL_WIDTHS[:3]) + 2  # two interior separators
    llm_span = sum(_COL_WIDTHS[3:]) + 2
    header_groups = (
        f"{'':<{_CASE_WIDTH}}|"
        f"{' Visual Prompts':<{visual_span}}|"
        f"{' LLM Prompts':<{llm_span}}"
    ).rstrip()
    separator = "-" * _CASE_WIDTH + "+" + "+".join("-" * w for w in _COL_WIDTHS)

    lines = [header_groups, header_kinds, separator]
    for row in sorted(matrix.rows, key=lambda r: r.case_id):
        marks = []
        for kind in VISUAL_KINDS:
            marks.append(_mark(kind == row.best_visual, row.visual_tie))
        for kind in LLM_KINDS:
            marks.append(_mark(kind == row.best_llm, row.llm_tie))
        lines.append(_row_text(f"Case {row.case_id}", [f" {m} " for m in marks]))
    return "\n".join(lines) + "\n"


def _mark(selected: bool, tie: bool) -> str:
    if not selected:
        return ""
    return "X*" if tie else "X"


def _row_text(first: str, cells: list[str]) -> str:
    out = f"{first:<{_CASE_WIDTH}}"
    for width, cell in zip(_COL_WIDTHS, cells):
        out += "|" + f"{cell:<{width}}"
    return out.rstrip()


def parse_table(text: str) -> StrategyMatrix:
    """Inverse of render_table (marks and tie flags round-trip exactly)."""
    rows = []
    for line in text.splitlines():
        if not line.startswith("Case "):
            continue
        cells = [c.strip() for c in line.split("|")]
        if len(cells) != 7:
            raise RenderError(f"bad table row: {line!r}")
        case_id = int(cells[0][len("Case "):])
        visual_marks = cells[1:4]
        llm_marks = cells[4:7]
        best_visual, visual_tie = _unmark(visual_marks, VISUAL_KINDS, line)
        best_llm, llm_tie = _unmark(llm_marks, LLM_KINDS, line)
        rows.append(MatrixRow(case_id, best_visual, best_llm, visual_tie, llm_tie))
    if not rows:
        raise RenderError("no data rows found")
    return StrategyMatrix(rows=tuple(rows))


def _unmark(marks: list[str], kinds: Sequence[str], line: str):
    hits = [(kind, mark) for kind, mark in zip(kinds, marks) if mark]
    if len(hits) != 1:
        raise RenderError(f"expected exactly one mark per axis in {line!r}")
    kind, mark = hits[0]
    if mark not in ("X", "X*"):
        raise RenderError(f"unknown mark {mark!r} in {line!r}")
    return kind, mark == "X*"


# -- summarizing ----------------------------------------------------------------------

def summarize(matrix: StrategyMatrix) -> dict[str, dict[str, int]]:
    """Best-mark tallies per kind per axis."""
    visual = {kind: 0 for kind in VISUAL_KINDS}
    llm = {kind: 0 for kind in LLM_KINDS}
    for row in matrix.rows:
        visual[row.best_visual] += 1
        llm[row.best_llm] += 1
    return {AXIS_VISUAL: visual, AXIS_LLM: llm}


def write_records(records: Iterable[EvaluationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.to_json())
            handle.write("\n")
