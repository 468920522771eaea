"""Prompt construction and response parsing.

Templates are plain text files with a small front-matter header; rendering
injects key-term definitions, generic few-shot examples, the forbidden-phrase
block, and the output-format instructions into the system message. Responses
come back as labeled plain-text sections split on `## <section>` headers,
with at most one repair attempt per original call.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .llm import LlmClient, LlmRequest, LlmResponse, Message, Role
from .model import COMMISSION_DEFINITION, OMISSION_DEFINITION
from .quality import VAGUE_PHRASES

log = logging.getLogger(__name__)

# Terms an unguided model defines wrongly or too generically; definitions are
# injected into every prompt that declares them and are config-overridable
# for company-internal process language.
DEFAULT_KEY_TERMS: dict[str, str] = {
    "scenario": (
        "A description of the driving situation in which the function operates, "
        "covering the road, infrastructure, temporary manipulations, objects, "
        "environment, and digital information around the vehicle."
    ),
    "malfunctioning behaviour": (
        "A failure mode or unintended behaviour of the function at one of its "
        "outputs, described with a guide word applied to that output."
    ),
    "hazard": (
        "A potential source of physical harm caused by malfunctioning behaviour "
        "of the function."
    ),
    "hazardous event": (
        "The combination of a malfunctioning behaviour with an operational "
        "scenario, together with the consequence it produces."
    ),
    "severity": (
        "An estimate of the potential harm to persons in a hazardous event: S0 "
        "means no injuries, S1 light and moderate injuries, S2 severe and "
        "life-threatening injuries where survival is probable, S3 "
        "life-threatening injuries where survival is uncertain or fatal injuries."
    ),
    "safety goal": (
        "A top-level safety requirement, formulated with 'shall', that avoids or "
        "mitigates a hazardous event without prescribing a technological solution."
    ),
    "omission": OMISSION_DEFINITION,
    "commission": COMMISSION_DEFINITION,
}

REQUIRED_SECTIONS: tuple[str, ...] = ("background", "assumptions", "reasoning", "result")

# Minimum length of an item-definition substring that counts as few-shot
# leakage; shorter overlaps are common English.
LEAKAGE_WINDOW = 20


class RenderError(ValueError):
    def __init__(self, message: str, placeholder: str | None = None) -> None:
        super().__init__(message)
        self.placeholder = placeholder


class ParseError(ValueError):
    def __init__(self, missing: Sequence[str]) -> None:
        super().__init__(f"missing required sections: {', '.join(missing)}")
        self.missing = tuple(missing)


class RepairFailed(Exception):
    """The response stayed unparseable after the single repair attempt."""

    def __init__(self, step_id: str, row_key: str | None, reason: str) -> None:
        super().__init__(f"{step_id}/{row_key}: {reason}")
        self.step_id = step_id
        self.row_key = row_key
        self.reason = reason


class ResultShape(str, Enum):
    FREE_TEXT = "free_text"
    LABELED_FIELDS = "labeled_fields"
    ENUMERATED_LIST = "enumerated_list"


@dataclass(frozen=True)
class OutputSchema:
    required_sections: tuple[str, ...] = REQUIRED_SECTIONS
    result_shape: ResultShape = ResultShape.FREE_TEXT

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_sections", tuple(self.required_sections))
        missing = [s for s in REQUIRED_SECTIONS if s not in self.required_sections]
        if missing:
            raise ValueError(f"schema must include sections {missing}")
        if self.required_sections[-1] != "result":
            raise ValueError("result must be the last required section")


@dataclass(frozen=True)
class PromptTemplate:
    step_id: str
    temperature: float
    system_text: str
    user_text: str
    key_terms: tuple[str, ...] = ()
    few_shot_examples: tuple[tuple[str, str], ...] = ()
    forbidden_patterns: tuple[str, ...] = VAGUE_PHRASES
    output_schema: OutputSchema = field(default_factory=OutputSchema)
    optional_placeholders: frozenset[str] = frozenset()
    max_tokens: int = 1024


_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")
_SECTION_RE = re.compile(r"^##\s*([A-Za-z_][\w ]*?)\s*$", re.MULTILINE)
_BLOCK_MARKER_RE = re.compile(r"^---([a-z][a-z-]*)---$", re.MULTILINE)


def _substitute(text: str, context: Mapping[str, str], optional: frozenset[str]) -> str:
    def repl(match: re.Match[str]) -> str:
        name = match.group(1)
        if name in context:
            return str(context[name])
        if name in optional:
            return ""
        raise RenderError(f"unbound placeholder: {name}", placeholder=name)

    return _PLACEHOLDER_RE.sub(repl, text)


def _definition_block(key_terms: Sequence[str], definitions: Mapping[str, str]) -> str:
    if not key_terms:
        return ""
    lines = ["Definitions of key terms (use these meanings, not your own):"]
    for term in key_terms:
        if term not in definitions:
            raise RenderError(f"no definition available for key term: {term}")
        lines.append(f"- {term}: {definitions[term]}")
    return "\n".join(lines)


def _few_shot_block(examples: Sequence[tuple[str, str]]) -> str:
    if not examples:
        return ""
    parts = ["Worked example (generic; it is not about the function under analysis):"]
    for input_sketch, output_sketch in examples:
        parts.append(f"Example input:\n{input_sketch}")
        parts.append(f"Example output:\n{output_sketch}")
    return "\n\n".join(parts)


def _forbidden_block(patterns: Sequence[str]) -> str:
    if not patterns:
        return ""
    quoted = ", ".join(f'"{p}"' for p in patterns)
    return (
        "Forbidden phrases (they make requirements untestable, never use them): "
        + quoted
    )


def _format_block(schema: OutputSchema) -> str:
    headers = "\n".join(f"## {name}" for name in schema.required_sections)
    return (
        "Structure the whole answer as labeled plain-text sections, using exactly "
        "these headers on their own lines, in this order, with the result last:\n"
        f"{headers}\n"
        "Put background information in 'background', every assumption you make in "
        "'assumptions', your chain of reasoning in 'reasoning', and only the final "
        "answer in 'result'."
    )


def _leakage_windows(item_text: str) -> set[str]:
    collapsed = " ".join(item_text.split())
    if len(collapsed) < LEAKAGE_WINDOW:
        return set()
    return {
        collapsed[i : i + LEAKAGE_WINDOW]
        for i in range(len(collapsed) - LEAKAGE_WINDOW + 1)
    }


def check_few_shot_isolation(template: PromptTemplate, item_text: str) -> None:
    """Reject templates whose few-shot block copies from the item definition."""
    blob = " ".join(
        " ".join(part.split())
        for example in template.few_shot_examples
        for part in example
    )
    for window in _leakage_windows(item_text):
        if window in blob:
            raise RenderError(
                f"few-shot example leaks item definition text: {window!r}"
            )


def render(
    template: PromptTemplate,
    context: Mapping[str, str],
    *,
    definitions: Mapping[str, str] | None = None,
    item_text: str | None = None,
) -> list[Message]:
    """Build the message list for one step. Pure: same inputs, same output."""
    definitions = definitions or DEFAULT_KEY_TERMS
    if item_text is not None:
        check_few_shot_isolation(template, item_text)
    blocks = [
        _substitute(template.system_text, context, template.optional_placeholders),
        _definition_block(template.key_terms, definitions),
        _few_shot_block(template.few_shot_examples),
        _forbidden_block(template.forbidden_patterns),
        _format_block(template.output_schema),
    ]
    system = "\n\n".join(b for b in blocks if b)
    user = _substitute(template.user_text, context, template.optional_placeholders)
    return [Message(Role.SYSTEM, system), Message(Role.USER, user)]


def parse_structured(response: str, schema: OutputSchema) -> dict[str, str]:
    """Split a response on `## <section>` headers into the schema's sections.

    Prose outside any section is discarded; a duplicated header keeps its last
    occurrence (a warning is logged). Missing required sections raise
    ParseError with the full missing list.
    """
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(response))
    for i, match in enumerate(matches):
        name = match.group(1).strip().lower()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(response)
        body = response[match.end() : end].strip()
        if name in sections:
            log.warning("duplicate section header %r; keeping the last occurrence", name)
        sections[name] = body
    missing = [s for s in schema.required_sections if s not in sections]
    if missing:
        raise ParseError(missing)
    return {s: sections[s] for s in schema.required_sections}


def repair_request(original: LlmRequest, missing: Sequence[str]) -> LlmRequest:
    """One corrective re-issue naming the missing sections."""
    instruction = (
        "The previous answer was missing the required section(s): "
        + ", ".join(missing)
        + ". Resend the complete answer with every required section header "
        "(## background, ## assumptions, ## reasoning, ## result), result last."
    )
    row_key = f"{original.row_key}-repair" if original.row_key else "default-repair"
    return LlmRequest(
        step_id=original.step_id,
        messages=tuple(original.messages) + (Message(Role.USER, instruction),),
        temperature=original.temperature,
        max_tokens=original.max_tokens,
        row_key=row_key,
    )


def repair_once(
    client: LlmClient, original: LlmRequest, error: ParseError
) -> LlmResponse:
    return client.complete(repair_request(original, error.missing))


def structured_completion(
    client: LlmClient,
    template: PromptTemplate,
    context: Mapping[str, str],
    *,
    row_key: str | None = None,
    definitions: Mapping[str, str] | None = None,
    item_text: str | None = None,
) -> dict[str, str]:
    """Render, call, parse; retry the parse once via a repaired request.

    At most two LLM calls per row (original plus one repair). A second parse
    failure raises RepairFailed: the row is recorded as failed and the run
    continues.
    """
    messages = render(template, context, definitions=definitions, item_text=item_text)
    request = LlmRequest(
        step_id=template.step_id,
        messages=tuple(messages),
        temperature=template.temperature,
        max_tokens=template.max_tokens,
        row_key=row_key,
    )
    response = client.complete(request)
    try:
        return parse_structured(response.content, template.output_schema)
    except ParseError as first_error:
        repaired = repair_once(client, request, first_error)
        try:
            return parse_structured(repaired.content, template.output_schema)
        except ParseError as second_error:
            raise RepairFailed(
                template.step_id, row_key, str(second_error)
            ) from second_error


# --- template files ----------------------------------------------------------


def _parse_front_matter(text: str) -> dict[str, str]:
    header: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep or not key.strip():
            raise ValueError(f"malformed front-matter line: {line!r}")
        header[key.strip()] = value.strip()
    return header


def parse_template_text(text: str) -> PromptTemplate:
    """Parse one template file: front matter, then ---system---/---user---
    blocks with optional ---example-input---/---example-output--- pairs."""
    matches = list(_BLOCK_MARKER_RE.finditer(text))
    if not matches:
        raise ValueError("template has no ---system--- block")
    header = _parse_front_matter(text[: matches[0].start()])
    blocks: list[tuple[str, str]] = []
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        blocks.append((match.group(1), text[match.end() : end].strip()))

    system_text = ""
    user_text = ""
    examples: list[tuple[str, str]] = []
    pending_input: str | None = None
    for name, body in blocks:
        if name == "system":
            system_text = body
        elif name == "user":
            user_text = body
        elif name == "example-input":
            pending_input = body
        elif name == "example-output":
            if pending_input is None:
                raise ValueError("example-output without a preceding example-input")
            examples.append((pending_input, body))
            pending_input = None
        else:
            raise ValueError(f"unknown template block: {name!r}")
    if pending_input is not None:
        raise ValueError("example-input without a following example-output")
    if not system_text or not user_text:
        raise ValueError("template must define system and user blocks")

    step_id = header.get("step_id", "")
    if not step_id:
        raise ValueError("front matter must declare step_id")
    sections = tuple(
        s.strip() for s in header.get("sections", ", ".join(REQUIRED_SECTIONS)).split(",")
    )
    key_terms = tuple(
        t.strip() for t in header.get("key_terms", "").split(",") if t.strip()
    )
    optional = frozenset(
        p.strip() for p in header.get("optional", "").split(",") if p.strip()
    )
    return PromptTemplate(
        step_id=step_id,
        temperature=float(header.get("temperature", "0.0")),
        system_text=system_text,
        user_text=user_text,
        key_terms=key_terms,
        few_shot_examples=tuple(examples),
        output_schema=OutputSchema(
            required_sections=sections,
            result_shape=ResultShape(header.get("result_shape", "free_text")),
        ),
        optional_placeholders=optional,
        max_tokens=int(header.get("max_tokens", "1024")),
    )


def load_template_dir(directory: Path) -> dict[str, PromptTemplate]:
    templates: dict[str, PromptTemplate] = {}
    for path in sorted(directory.glob("*.txt")):
        template = parse_template_text(path.read_text(encoding="utf-8"))
        if template.step_id in templates:
            raise ValueError(f"duplicate template for step {template.step_id}")
        templates[template.step_id] = template
    if not templates:
        raise ValueError(f"no templates found in {directory}")
    return templates


def default_template_dir() -> Path:
    return Path(str(resources.files("harakit").joinpath("templates")))


def load_templates(directory: Path | None = None) -> dict[str, PromptTemplate]:
    """Load step templates, falling back to the shipped defaults."""
    return load_template_dir(directory or default_template_dir())


def templates_fingerprint(directory: Path | None = None) -> str:
    """Hash of the template files, recorded as prompt_version provenance."""
    directory = directory or default_template_dir()
    digest = hashlib.sha256()
    for path in sorted(directory.glob("*.txt")):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]
