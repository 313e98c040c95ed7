"""Task-file schema: parse, validate and re-emit the single YAML that
configures a whole pipeline run.

Key names are part of the external contract and must never drift:
Task_name, ROSGPT_Vision_Camera_Node (Image_Description_Method,
Vision_prompt, Choose_input, Input_video, Output_video),
GPT_Consultation_Node (llm_prompt, GPT_temperature), MiniGPT4_parameters
(configuration, temperature_miniGPT4), llava_parameters (temperature_llavA,
llama_version), SAM_parameters (weights_SAM).

Unknown keys are collected as warnings, never errors. Credentials are not
part of the schema; the LLM key comes from ROSGPT_API_KEY.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import yaml

KEY_TASK_NAME = "Task_name"
KEY_CAMERA_NODE = "ROSGPT_Vision_Camera_Node"
KEY_METHOD = "Image_Description_Method"
KEY_VISION_PROMPT = "Vision_prompt"
KEY_CHOOSE_INPUT = "Choose_input"
KEY_INPUT_VIDEO = "Input_video"
KEY_OUTPUT_VIDEO = "Output_video"
KEY_CONSULTATION_NODE = "GPT_Consultation_Node"
KEY_LLM_PROMPT = "llm_prompt"
KEY_GPT_TEMPERATURE = "GPT_temperature"
KEY_MINIGPT4_PARAMS = "MiniGPT4_parameters"
KEY_MINIGPT4_CONFIGURATION = "configuration"
KEY_MINIGPT4_TEMPERATURE = "temperature_miniGPT4"
KEY_LLAVA_PARAMS = "llava_parameters"
KEY_LLAVA_TEMPERATURE = "temperature_llavA"
KEY_LLAMA_VERSION = "llama_version"
KEY_SAM_PARAMS = "SAM_parameters"
KEY_SAM_WEIGHTS = "weights_SAM"

DESCRIPTION_METHODS = ("llava", "MiniGPT4", "SAM", "mock")
INPUT_KINDS = ("webcam", "video", "frames")
LLAMA_VERSIONS = ("7B", "13B")
TEMPERATURE_RANGE = (0.0, 2.0)


class TaskConfigError(Exception):
    """Base for schema errors; ``path`` is the dotted key location."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ConfigSyntaxError(TaskConfigError):
    def __init__(self, line: Optional[int], message: str):
        self.line = line
        where = f"line {line}" if line is not None else "?"
        super().__init__("", f"YAML syntax error at {where}: {message}")


class MissingFieldError(TaskConfigError):
    def __init__(self, path: str):
        super().__init__(path, "required field is missing")


class FieldTypeError(TaskConfigError):
    pass


class ConfigError(Exception):
    """A structurally valid config cannot be used as requested."""


@dataclass(frozen=True)
class MiniGPT4Params:
    configuration: str
    temperature: float


@dataclass(frozen=True)
class LlavaParams:
    temperature: float
    llama_version: str


@dataclass(frozen=True)
class SamParams:
    weights: str


@dataclass(frozen=True)
class CameraConfig:
    image_description_method: str
    vision_prompt: str
    choose_input: str
    input_video: Optional[str] = None
    output_video: Optional[str] = None


@dataclass(frozen=True)
class ConsultationConfig:
    llm_prompt: str
    gpt_temperature: float


@dataclass(frozen=True)
class TaskConfig:
    task_name: str
    camera: CameraConfig
    consultation: ConsultationConfig
    minigpt4: Optional[MiniGPT4Params] = None
    llava: Optional[LlavaParams] = None
    sam: Optional[SamParams] = None
    # Forward-compatibility diagnostics; not part of config identity.
    unknown_keys: tuple[str, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


# -- parsing -----------------------------------------------------------------

def parse_task_config(text: str) -> TaskConfig:
    """Parse a YAML task file into a TaskConfig.

    Raises ConfigSyntaxError / MissingFieldError / FieldTypeError; unknown
    keys are recorded on the result, not rejected.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigSyntaxError(line, str(getattr(exc, "problem", exc))) from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise FieldTypeError("", "task file must be a YAML mapping")

    unknown: list[str] = []

    task_name = _req_str(doc, KEY_TASK_NAME, KEY_TASK_NAME)

    camera_raw = _req_map(doc, KEY_CAMERA_NODE, KEY_CAMERA_NODE)
    camera = _parse_camera(camera_raw, unknown)

    consultation_raw = _req_map(doc, KEY_CONSULTATION_NODE, KEY_CONSULTATION_NODE)
    consultation = _parse_consultation(consultation_raw, unknown)

    minigpt4 = _parse_minigpt4(doc.get(KEY_MINIGPT4_PARAMS), unknown)
    llava = _parse_llava(doc.get(KEY_LLAVA_PARAMS), unknown)
    sam = _parse_sam(doc.get(KEY_SAM_PARAMS), unknown)

    known_top = {
        KEY_TASK_NAME, KEY_CAMERA_NODE, KEY_CONSULTATION_NODE,
        KEY_MINIGPT4_PARAMS, KEY_LLAVA_PARAMS, KEY_SAM_PARAMS,
    }
    unknown.extend(str(k) for k in doc if k not in known_top)

    return TaskConfig(
        task_name=task_name,
        camera=camera,
        consultation=consultation,
        minigpt4=minigpt4,
        llava=llava,
        sam=sam,
        unknown_keys=tuple(sorted(unknown)),
    )


def _parse_camera(raw: dict, unknown: list[str]) -> CameraConfig:
    base = KEY_CAMERA_NODE
    method = _req_str(raw, KEY_METHOD, f"{base}.{KEY_METHOD}")
    if method not in DESCRIPTION_METHODS:
        raise FieldTypeError(
            f"{base}.{KEY_METHOD}",
            f"{method!r} is not one of {list(DESCRIPTION_METHODS)}",
        )
    vision_prompt = _req_str(raw, KEY_VISION_PROMPT, f"{base}.{KEY_VISION_PROMPT}")
    choose_input = _req_str(raw, KEY_CHOOSE_INPUT, f"{base}.{KEY_CHOOSE_INPUT}")
    if choose_input not in INPUT_KINDS:
        raise FieldTypeError(
            f"{base}.{KEY_CHOOSE_INPUT}",
            f"{choose_input!r} is not one of {list(INPUT_KINDS)}",
        )
    input_video = _opt_str(raw, KEY_INPUT_VIDEO, f"{base}.{KEY_INPUT_VIDEO}")
    output_video = _opt_str(raw, KEY_OUTPUT_VIDEO, f"{base}.{KEY_OUTPUT_VIDEO}")
    known = {KEY_METHOD, KEY_VISION_PROMPT, KEY_CHOOSE_INPUT, KEY_INPUT_VIDEO, KEY_OUTPUT_VIDEO}
    unknown.extend(f"{base}.{k}" for k in raw if k not in known)
    return CameraConfig(
        image_description_method=method,
        vision_prompt=vision_prompt,
        choose_input=choose_input,
        input_video=input_video,
        output_video=output_video,
    )


def _parse_consultation(raw: dict, unknown: list[str]) -> ConsultationConfig:
    base = KEY_CONSULTATION_NODE
    llm_prompt = _req_str(raw, KEY_LLM_PROMPT, f"{base}.{KEY_LLM_PROMPT}")
    temperature = _req_real(raw, KEY_GPT_TEMPERATURE, f"{base}.{KEY_GPT_TEMPERATURE}")
    known = {KEY_LLM_PROMPT, KEY_GPT_TEMPERATURE}
    unknown.extend(f"{base}.{k}" for k in raw if k not in known)
    return ConsultationConfig(llm_prompt=llm_prompt, gpt_temperature=temperature)


def _parse_minigpt4(raw: Any, unknown: list[str]) -> Optional[MiniGPT4Params]:
    base = KEY_MINIGPT4_PARAMS
    if _block_absent(raw, base):
        return None
    configuration = _req_str(raw, KEY_MINIGPT4_CONFIGURATION, f"{base}.{KEY_MINIGPT4_CONFIGURATION}")
    temperature = _req_real(raw, KEY_MINIGPT4_TEMPERATURE, f"{base}.{KEY_MINIGPT4_TEMPERATURE}")
    known = {KEY_MINIGPT4_CONFIGURATION, KEY_MINIGPT4_TEMPERATURE}
    unknown.extend(f"{base}.{k}" for k in raw if k not in known)
    return MiniGPT4Params(configuration=configuration, temperature=temperature)


def _parse_llava(raw: Any, unknown: list[str]) -> Optional[LlavaParams]:
    base = KEY_LLAVA_PARAMS
    if _block_absent(raw, base):
        return None
    temperature = _req_real(raw, KEY_LLAVA_TEMPERATURE, f"{base}.{KEY_LLAVA_TEMPERATURE}")
    llama_version = _req_str(raw, KEY_LLAMA_VERSION, f"{base}.{KEY_LLAMA_VERSION}")
    if llama_version not in LLAMA_VERSIONS:
        raise FieldTypeError(
            f"{base}.{KEY_LLAMA_VERSION}",
            f"{llama_version!r} is not one of {list(LLAMA_VERSIONS)}",
        )
    known = {KEY_LLAVA_TEMPERATURE, KEY_LLAMA_VERSION}
    unknown.extend(f"{base}.{k}" for k in raw if k not in known)
    return LlavaParams(temperature=temperature, llama_version=llama_version)


def _parse_sam(raw: Any, unknown: list[str]) -> Optional[SamParams]:
    base = KEY_SAM_PARAMS
    if _block_absent(raw, base):
        return None
    weights = _req_str(raw, KEY_SAM_WEIGHTS, f"{base}.{KEY_SAM_WEIGHTS}")
    known = {KEY_SAM_WEIGHTS}
    unknown.extend(f"{base}.{k}" for k in raw if k not in known)
    return SamParams(weights=weights)


def _block_absent(raw: Any, path: str) -> bool:
    if raw is None:
        return True
    if not isinstance(raw, dict):
        raise FieldTypeError(path, "must be a mapping (or empty)")
    return not raw


def _req_map(doc: dict, key: str, path: str) -> dict:
    if key not in doc or doc[key] is None:
        raise MissingFieldError(path)
    value = doc[key]
    if not isinstance(value, dict):
        raise FieldTypeError(path, "must be a mapping")
    return value


def _req_str(doc: dict, key: str, path: str) -> str:
    if key not in doc or doc[key] is None:
        raise MissingFieldError(path)
    value = doc[key]
    if not isinstance(value, str):
        raise FieldTypeError(path, f"must be a string, got {type(value).__name__}")
    if not value:
        raise FieldTypeError(path, "must be a non-empty string")
    return value


def _opt_str(doc: dict, key: str, path: str) -> Optional[str]:
    if key not in doc or doc[key] is None:
        return None
    value = doc[key]
    if not isinstance(value, str):
        raise FieldTypeError(path, f"must be a string, got {type(value).__name__}")
    return value


def _req_real(doc: dict, key: str, path: str) -> float:
    if key not in doc or doc[key] is None:
        raise MissingFieldError(path)
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FieldTypeError(path, f"must be a number, got {type(value).__name__}")
    return float(value)


# -- validation --------------------------------------------------------------

_METHOD_BLOCKS = {
    "MiniGPT4": ("minigpt4", KEY_MINIGPT4_PARAMS),
    "llava": ("llava", KEY_LLAVA_PARAMS),
    "SAM": ("sam", KEY_SAM_PARAMS),
}


def validate(cfg: TaskConfig) -> list[Violation]:
    """Cross-field invariants; an empty list means the config is runnable."""
    violations: list[Violation] = []

    needed = _METHOD_BLOCKS.get(cfg.camera.image_description_method)
    if needed is not None:
        attr, key = needed
        if getattr(cfg, attr) is None:
            violations.append(
                Violation(
                    key,
                    f"method {cfg.camera.image_description_method!r} requires "
                    f"a populated {key} block",
                )
            )

    if cfg.camera.choose_input in ("video", "frames") and not cfg.camera.input_video:
        violations.append(
            Violation(
                f"{KEY_CAMERA_NODE}.{KEY_INPUT_VIDEO}",
                f"required when {KEY_CHOOSE_INPUT} is {cfg.camera.choose_input!r}",
            )
        )

    low, high = TEMPERATURE_RANGE
    if not (low <= cfg.consultation.gpt_temperature <= high):
        violations.append(
            Violation(
                f"{KEY_CONSULTATION_NODE}.{KEY_GPT_TEMPERATURE}",
                f"{cfg.consultation.gpt_temperature} outside [{low}, {high}]",
            )
        )

    return violations


# -- serialization -----------------------------------------------------------

def serialize(cfg: TaskConfig) -> str:
    """Emit YAML whose key names match the schema byte for byte.

    parse(serialize(cfg)) equals cfg (unknown keys are diagnostics and are
    not re-emitted).
    """
    doc: dict[str, Any] = {KEY_TASK_NAME: cfg.task_name}

    camera: dict[str, Any] = {
        KEY_METHOD: cfg.camera.image_description_method,
        KEY_VISION_PROMPT: cfg.camera.vision_prompt,
        KEY_CHOOSE_INPUT: cfg.camera.choose_input,
    }
    if cfg.camera.input_video is not None:
        camera[KEY_INPUT_VIDEO] = cfg.camera.input_video
    if cfg.camera.output_video is not None:
        camera[KEY_OUTPUT_VIDEO] = cfg.camera.output_video
    doc[KEY_CAMERA_NODE] = camera

    doc[KEY_CONSULTATION_NODE] = {
        KEY_LLM_PROMPT: cfg.consultation.llm_prompt,
        KEY_GPT_TEMPERATURE: cfg.consultation.gpt_temperature,
    }

    if cfg.minigpt4 is not None:
        doc[KEY_MINIGPT4_PARAMS] = {
            KEY_MINIGPT4_CONFIGURATION: cfg.minigpt4.configuration,
            KEY_MINIGPT4_TEMPERATURE: cfg.minigpt4.temperature,
        }
    if cfg.llava is not None:
        doc[KEY_LLAVA_PARAMS] = {
            KEY_LLAVA_TEMPERATURE: cfg.llava.temperature,
            KEY_LLAMA_VERSION: cfg.llava.llama_version,
        }
    if cfg.sam is not None:
        doc[KEY_SAM_PARAMS] = {KEY_SAM_WEIGHTS: cfg.sam.weights}

    return yaml.safe_dump(
        doc, sort_keys=False, allow_unicode=True, default_flow_style=False, width=100000
    )


def load_task_config(path) -> TaskConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_task_config(handle.read())


def with_method(cfg: TaskConfig, method: str) -> TaskConfig:
    """Copy of cfg with a different description method (CLI override)."""
    if method not in DESCRIPTION_METHODS:
        raise ConfigError(f"unknown description method {method!r}")
    return replace(cfg, camera=replace(cfg.camera, image_description_method=method))
