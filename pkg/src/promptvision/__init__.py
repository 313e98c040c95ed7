"""Prompt-driven vision pipeline.

A camera node samples frames and turns each sampled frame into a
natural-language description through a pluggable vision-language backend,
guided by a vision prompt. A consultation node turns each description into
task feedback through an LLM, guided by a second prompt. The two nodes talk
over a small latest-value pub/sub bus (in-process or across processes over a
loopback wire protocol), and a single YAML task file configures everything.
"""

__version__ = "0.1.0"

from .bus import Bus, DuplicateTopicError, MessageEnvelope, UnknownTopicError
from .config import TaskConfig, parse_task_config, serialize, validate
from .messages import (
    GPT_CONSULTATION_TOPIC,
    IMAGE_DESCRIPTION_TOPIC,
    Consultation,
    ImageDescription,
)

__all__ = [
    "__version__",
    "Bus",
    "MessageEnvelope",
    "DuplicateTopicError",
    "UnknownTopicError",
    "TaskConfig",
    "parse_task_config",
    "serialize",
    "validate",
    "ImageDescription",
    "Consultation",
    "IMAGE_DESCRIPTION_TOPIC",
    "GPT_CONSULTATION_TOPIC",
]
