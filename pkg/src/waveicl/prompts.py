"""Tiered multimodal prompt assembly and decision parsing.

Three prompt tiers: ``base`` (task text + query image + output constraints),
``reasoning`` (adds diagnostic criteria and a step-by-step protocol), and
``reasoning-examples`` (additionally interleaves labeled support images
before the query). The prompt texts are editable template files, not
hard-coded strings; they accept ``{class_names}`` and ``{num_examples}``
placeholders.

Model replies are parsed against a strict contract: the final line
``DECISION: <class name>``. A bounded keyword fallback handles models that
answer correctly but break the format; anything else is a ParseFailure
value (never an exception).
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources

from .render import WaveformImage
from .selection import SupportSet

DECISION_TOKEN = "DECISION"
_FALLBACK_WINDOW = 200

_DECISION_RE = re.compile(r"^\s*decision\s*:\s*(.+?)\s*$", re.IGNORECASE)


class PromptError(ValueError):
    """Raised for inconsistent prompt configuration."""


class Tier(str, enum.Enum):
    BASE = "base"
    REASONING = "reasoning"
    REASONING_EXAMPLES = "reasoning-examples"


@dataclass(frozen=True)
class ParseFailure:
    """Unparseable model reply; carried as a value, policy decided upstream."""

    raw_text: str

    def __bool__(self) -> bool:
        return False


def _load_template(name: str) -> str:
    return resources.files("waveicl").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")


def _normalize_name(name: str) -> str:
    return " ".join(name.split()).upper()


@dataclass(frozen=True)
class PromptConfig:
    tier: Tier
    class_names: tuple[str, ...]
    task_description: str
    diagnostic_criteria: str
    analysis_protocol: str
    output_constraints: str

    def __post_init__(self):
        object.__setattr__(self, "tier", Tier(self.tier))
        names = tuple(_normalize_name(n) for n in self.class_names)
        if len(set(names)) != len(names):
            raise PromptError(f"class names must be unique, got {names}")
        if any(DECISION_TOKEN == n for n in names):
            raise PromptError(f"class name collides with reserved token {DECISION_TOKEN!r}")
        if len(names) < 2:
            raise PromptError("need at least two class names")
        object.__setattr__(self, "class_names", names)

    @classmethod
    def default(cls, tier: Tier = Tier.REASONING_EXAMPLES,
                class_names: tuple[str, ...] = ("NON-SEIZURE", "SEIZURE"),
                template_dir=None) -> "PromptConfig":
        """Load the shipped template files (or same-named files in ``template_dir``)."""
        def text(name: str) -> str:
            if template_dir is not None:
                return (template_dir / f"{name}.txt").read_text(encoding="utf-8")
            return _load_template(name)

        return cls(
            tier=tier,
            class_names=class_names,
            task_description=text("task_description"),
            diagnostic_criteria=text("diagnostic_criteria"),
            analysis_protocol=text("analysis_protocol"),
            output_constraints=text("output_constraints"),
        )

    def label_for(self, name: str) -> int | None:
        name = _normalize_name(name)
        for i, candidate in enumerate(self.class_names):
            if candidate == name:
                return i
        return None

    def render_text(self, template: str, num_examples: int) -> str:
        return template.format(
            class_names=", ".join(self.class_names),
            num_examples=num_examples,
        )

    def to_dict(self) -> dict:
        return {
            "tier": self.tier.value,
            "class_names": list(self.class_names),
            "task_description": self.task_description,
            "diagnostic_criteria": self.diagnostic_criteria,
            "analysis_protocol": self.analysis_protocol,
            "output_constraints": self.output_constraints,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PromptConfig":
        return cls(
            tier=Tier(doc["tier"]),
            class_names=tuple(doc["class_names"]),
            task_description=doc["task_description"],
            diagnostic_criteria=doc["diagnostic_criteria"],
            analysis_protocol=doc["analysis_protocol"],
            output_constraints=doc["output_constraints"],
        )


@dataclass(frozen=True)
class TextPart:
    text: str
    kind: str  # task | criteria | protocol | example-label | query-label | constraints


@dataclass(frozen=True)
class ImagePart:
    png_bytes: bytes
    role: str  # "example:<class index>" or "query"
    subject_id: str
    trial_index: int


PromptPart = TextPart | ImagePart


@dataclass(frozen=True)
class PromptBundle:
    parts: tuple[PromptPart, ...]
    tier: Tier
    class_names: tuple[str, ...]
    test_subject: str
    test_trial_index: int
    support: SupportSet | None
    digest: str

    @property
    def image_count(self) -> int:
        return sum(1 for p in self.parts if isinstance(p, ImagePart))

    def to_dict(self) -> dict:
        parts = []
        for p in self.parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "kind": p.kind, "text": p.text})
            else:
                parts.append({
                    "type": "image",
                    "role": p.role,
                    "subject_id": p.subject_id,
                    "trial_index": p.trial_index,
                    "png_b64": base64.b64encode(p.png_bytes).decode("ascii"),
                })
        return {
            "tier": self.tier.value,
            "class_names": list(self.class_names),
            "test_subject": self.test_subject,
            "test_trial_index": self.test_trial_index,
            "digest": self.digest,
            "support": self.support.to_dict() if self.support is not None else None,
            "parts": parts,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PromptBundle":
        parts: list[PromptPart] = []
        for p in doc["parts"]:
            if p["type"] == "text":
                parts.append(TextPart(text=p["text"], kind=p["kind"]))
            else:
                parts.append(ImagePart(
                    png_bytes=base64.b64decode(p["png_b64"]),
                    role=p["role"],
                    subject_id=p["subject_id"],
                    trial_index=p["trial_index"],
                ))
        bundle = cls(
            parts=tuple(parts),
            tier=Tier(doc["tier"]),
            class_names=tuple(doc["class_names"]),
            test_subject=doc["test_subject"],
            test_trial_index=doc["test_trial_index"],
            support=None,
            digest=doc["digest"],
        )
        if bundle.digest != _digest_parts(bundle.parts):
            raise PromptError("bundle digest does not match its parts")
        return bundle


def _digest_parts(parts: tuple[PromptPart, ...]) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, TextPart):
            payload = p.text.encode("utf-8")
            h.update(b"T")
        else:
            payload = p.png_bytes
            h.update(b"I" + p.role.encode("utf-8") + b"\x00")
        h.update(len(payload).to_bytes(8, "little"))
        h.update(payload)
    return h.hexdigest()


def build_prompt(config: PromptConfig, support: SupportSet | None,
                 test_image: WaveformImage) -> PromptBundle:
    """Assemble the part sequence for one query.

    Part order: task description; (reasoning tiers) criteria then protocol;
    (examples tier) per support entry a label line immediately followed by
    its image; the "Test trial:" line and query image; output constraints.
    """
    needs_support = config.tier is Tier.REASONING_EXAMPLES
    if needs_support and support is None:
        raise PromptError(f"tier {config.tier.value!r} requires a support set")
    if not needs_support and support is not None:
        raise PromptError(f"tier {config.tier.value!r} does not take a support set")

    num_examples = len(support.entries) if support is not None else 0
    parts: list[PromptPart] = [
        TextPart(text=config.render_text(config.task_description, num_examples), kind="task")]
    if config.tier in (Tier.REASONING, Tier.REASONING_EXAMPLES):
        parts.append(TextPart(
            text=config.render_text(config.diagnostic_criteria, num_examples), kind="criteria"))
        parts.append(TextPart(
            text=config.render_text(config.analysis_protocol, num_examples), kind="protocol"))
    if needs_support:
        for entry in support.entries:
            if entry.image is None:
                raise PromptError(
                    f"support entry {entry.subject_id}/{entry.trial_index} carries no image")
            if entry.label >= len(config.class_names):
                raise PromptError(f"support label {entry.label} has no class name")
            parts.append(TextPart(
                text=f"Example — class: {config.class_names[entry.label]}",
                kind="example-label"))
            parts.append(ImagePart(
                png_bytes=entry.image.png_bytes,
                role=f"example:{entry.label}",
                subject_id=entry.subject_id,
                trial_index=entry.trial_index,
            ))
    parts.append(TextPart(text="Test trial:", kind="query-label"))
    parts.append(ImagePart(
        png_bytes=test_image.png_bytes,
        role="query",
        subject_id=test_image.subject_id,
        trial_index=test_image.trial_index,
    ))
    parts.append(TextPart(
        text=config.render_text(config.output_constraints, num_examples), kind="constraints"))

    bundle = PromptBundle(
        parts=tuple(parts),
        tier=config.tier,
        class_names=config.class_names,
        test_subject=test_image.subject_id,
        test_trial_index=test_image.trial_index,
        support=support,
        digest=_digest_parts(tuple(parts)),
    )
    expected_images = num_examples + 1
    if bundle.image_count != expected_images:
        raise PromptError(f"built {bundle.image_count} images, expected {expected_images}")
    return bundle


def parse_decision(response_text: str, class_names: tuple[str, ...]) -> int | ParseFailure:
    """Extract the decided class from a model reply.

    Primary: the last line matching ``DECISION: <name>`` (case-insensitive,
    trailing punctuation tolerated). Fallback: if exactly one class name
    occurs in the final 200 characters, return it. Otherwise a ParseFailure
    carrying the raw text.
    """
    names = [_normalize_name(n) for n in class_names]
    decided = None
    for line in response_text.splitlines():
        match = _DECISION_RE.match(line)
        if match:
            candidate = _normalize_name(match.group(1).strip(" .!?:;\"'`*"))
            for i, name in enumerate(names):
                if candidate == name:
                    decided = i
    if decided is not None:
        return decided

    tail = response_text[-_FALLBACK_WINDOW:].upper()
    # longest-first so NON-SEIZURE does not also count as SEIZURE
    found: set[int] = set()
    consumed = [False] * len(tail)
    for i, name in sorted(enumerate(names), key=lambda kv: -len(kv[1])):
        start = 0
        while True:
            pos = tail.find(name, start)
            if pos < 0:
                break
            if not any(consumed[pos:pos + len(name)]):
                found.add(i)
                for j in range(pos, pos + len(name)):
                    consumed[j] = True
            start = pos + 1
    if len(found) == 1:
        return found.pop()
    return ParseFailure(raw_text=response_text)
