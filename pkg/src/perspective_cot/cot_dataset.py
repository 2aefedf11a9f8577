"""``<think>/<answer>`` training targets: wrapping, parsing, validation, SFT assembly."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .corpus import Label, UnknownLabelError
from .prompts import StudentPrompt

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
RESERVED = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

SENTENCE_BUDGET = 2


class ReservedSubstringError(ValueError):
    pass


class ParseError(ValueError):
    """Base class for tagged-output parse failures."""


class MissingThink(ParseError):
    pass


class MissingAnswer(ParseError):
    pass


class UnknownLabel(ParseError):
    def __init__(self, value: str):
        self.value = value
        super().__init__(f"unknown answer label {value!r}")


class NestedOrDuplicateTags(ParseError):
    pass


@dataclass(frozen=True)
class TaggedTarget:
    think_text: str
    answer_label: Label

    @property
    def rendered(self) -> str:
        return f"{THINK_OPEN}{self.think_text}{THINK_CLOSE}{ANSWER_OPEN}{self.answer_label.value}{ANSWER_CLOSE}"


@dataclass(frozen=True)
class TaggedOutput:
    think_text: str
    answer_label: Label


def wrap_training_target(think_text: str, label: Label) -> TaggedTarget:
    for tag in RESERVED:
        if tag in think_text:
            raise ReservedSubstringError(f"reasoning text contains reserved tag {tag}")
    return TaggedTarget(think_text, label)


def parse_tagged_output(text: str | bytes) -> TaggedOutput:
    """Extract the first think block and the first answer block after it.

    Anything before ``<think>`` or after ``</answer>`` is ignored, as is
    whitespace (or other text) between the blocks. The answer is trimmed and
    must be exactly one of the two labels.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")

    t_open = text.find(THINK_OPEN)
    if t_open < 0:
        raise MissingThink("no <think> tag")
    t_body = t_open + len(THINK_OPEN)
    t_close = text.find(THINK_CLOSE, t_body)
    if t_close < 0:
        raise MissingThink("unterminated <think> block")
    think = text[t_body:t_close]
    if THINK_OPEN in think or ANSWER_OPEN in think or ANSWER_CLOSE in think:
        raise NestedOrDuplicateTags("tag nested inside <think> block")

    after_think = t_close + len(THINK_CLOSE)
    a_open = text.find(ANSWER_OPEN, after_think)
    if a_open < 0:
        raise MissingAnswer("no <answer> tag after </think>")
    between = text[after_think:a_open]
    if THINK_OPEN in between or THINK_CLOSE in between:
        raise NestedOrDuplicateTags("duplicate think block before <answer>")
    a_body = a_open + len(ANSWER_OPEN)
    a_close = text.find(ANSWER_CLOSE, a_body)
    if a_close < 0:
        raise MissingAnswer("unterminated <answer> block")
    answer = text[a_body:a_close]
    if any(tag in answer for tag in (ANSWER_OPEN, THINK_OPEN, THINK_CLOSE)):
        raise NestedOrDuplicateTags("tag nested inside <answer> block")

    answer = answer.strip()
    try:
        label = Label.parse(answer)
    except UnknownLabelError:
        raise UnknownLabel(answer) from None
    return TaggedOutput(think, label)


def parse_bare_label(text: str) -> Label:
    """Label-only output of a model trained without reasoning targets."""
    answer = text.strip()
    try:
        return Label.parse(answer)
    except UnknownLabelError:
        raise UnknownLabel(answer) from None


# ---------------------------------------------------------------------------
# validation

_MARKER_TEMPLATE = r"(?:(?<=\s)|^)(?:관점\s*)?{n}\.(?=\s|$)"
_SENTENCE_RE = re.compile(r"[^.?!…]*[^\s.?!…][^.?!…]*(?:[.?!…]+|$)")


def split_perspective_segments(think_text: str) -> list[str]:
    """Split reasoning at sequential markers "1.", "2.", ... (optionally "관점 N.").

    Returns the text of each numbered segment (marker stripped). Markers must
    appear in order; scanning stops at the first missing number.
    """
    starts = []
    pos = 0
    n = 1
    while True:
        m = re.compile(_MARKER_TEMPLATE.format(n=n), re.MULTILINE).search(think_text, pos)
        if m is None:
            break
        starts.append((m.start(), m.end()))
        pos = m.end()
        n += 1
    segments = []
    for i, (_, body_start) in enumerate(starts):
        end = starts[i + 1][0] if i + 1 < len(starts) else len(think_text)
        segments.append(think_text[body_start:end])
    return segments


def count_sentences(text: str) -> int:
    """Runs of text ending in '.', '?', '!' or '…' (ellipsis runs count once)."""
    return len(_SENTENCE_RE.findall(text))


@dataclass
class ValidationReport:
    label_consistent: bool
    perspectives_covered: bool
    within_sentence_budget: bool
    issues: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.label_consistent and self.perspectives_covered and self.within_sentence_budget

    def first_failure(self) -> Optional[str]:
        if not self.label_consistent:
            return "label_inconsistent"
        if not self.perspectives_covered:
            return "perspectives_uncovered"
        if not self.within_sentence_budget:
            return "over_sentence_budget"
        return None

    def to_dict(self) -> dict:
        return {
            "label_consistent": self.label_consistent,
            "perspectives_covered": self.perspectives_covered,
            "within_sentence_budget": self.within_sentence_budget,
            "issues": list(self.issues),
        }


@dataclass
class CoTRecord:
    instance_id: str
    dialogue_id: str
    gold_label: Label
    teacher_prompt: str = ""
    teacher_text: Optional[str] = None
    target: Optional[TaggedTarget] = None
    validation: Optional[ValidationReport] = None
    prompt_hash: Optional[str] = None
    from_cache: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.target is not None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "dialogue_id": self.dialogue_id,
            "gold_label": self.gold_label.value,
            "teacher_prompt": self.teacher_prompt,
            "teacher_text": self.teacher_text,
            "target": self.target.rendered if self.target else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "prompt_hash": self.prompt_hash,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoTRecord":
        target = None
        if d.get("target") is not None:
            parsed = parse_tagged_output(d["target"])
            target = TaggedTarget(parsed.think_text, parsed.answer_label)
        v = d.get("validation")
        return cls(
            instance_id=d["instance_id"],
            dialogue_id=d["dialogue_id"],
            gold_label=Label.parse(d["gold_label"]),
            teacher_prompt=d.get("teacher_prompt", ""),
            teacher_text=d.get("teacher_text"),
            target=target,
            validation=ValidationReport(**v) if v else None,
            prompt_hash=d.get("prompt_hash"),
            error=d.get("error"),
        )


def validate_cot_record(record: CoTRecord, k: int) -> ValidationReport:
    """Structural checks on a teacher-derived target.

    ``k`` is the number of perspectives the teacher was asked to cover; with
    ``k == 0`` (unconstrained CoT) the whole reasoning is one segment.
    """
    if record.target is None:
        return ValidationReport(False, False, False, [f"no target: {record.error or 'missing'}"])
    issues = []
    label_ok = record.target.answer_label == record.gold_label
    if not label_ok:
        issues.append(
            f"answer {record.target.answer_label.value} != gold {record.gold_label.value}"
        )

    think = record.target.think_text
    if k > 0:
        segments = split_perspective_segments(think)
        covered = len(segments) >= k
        if not covered:
            issues.append(f"perspective markers found for 1..{len(segments)}, expected 1..{k}")
    else:
        segments = [think]
        covered = True

    budget_ok = True
    for i, seg in enumerate(segments, start=1):
        n = count_sentences(seg)
        if n > SENTENCE_BUDGET:
            budget_ok = False
            issues.append(f"segment {i} has {n} sentences (budget {SENTENCE_BUDGET})")
    return ValidationReport(label_ok, covered, budget_ok, issues)


# ---------------------------------------------------------------------------
# SFT dataset


@dataclass(frozen=True)
class SFTExample:
    system: str
    user: str
    target: str

    def to_dict(self) -> dict:
        return {"system": self.system, "user": self.user, "target": self.target}


@dataclass
class AssemblySummary:
    total: int
    retained: int
    dropped: dict[str, int]


class EmptyDatasetError(ValueError):
    pass


def assemble_sft_dataset(
    records: Sequence[CoTRecord],
    prompts: Sequence[StudentPrompt],
    path: str | Path | None = None,
    keep_invalid: bool = False,
) -> tuple[list[SFTExample], AssemblySummary]:
    """Pair validated records with their student prompts; optionally write JSONL.

    Failing records are dropped unless ``keep_invalid`` is set. Records that
    never produced a target are always dropped.
    """
    if len(records) != len(prompts):
        raise ValueError(f"{len(records)} records but {len(prompts)} prompts")
    examples = []
    dropped: Counter[str] = Counter()
    for rec, prompt in zip(records, prompts):
        if not rec.ok:
            dropped["generation_failed"] += 1
            continue
        reason = rec.validation.first_failure() if rec.validation else None
        if reason and not keep_invalid:
            dropped[reason] += 1
            continue
        examples.append(SFTExample(prompt.system, prompt.user, rec.target.rendered))
    if not examples:
        raise EmptyDatasetError(f"no records retained out of {len(records)}")
    summary = AssemblySummary(len(records), len(examples), dict(sorted(dropped.items())))
    if path is not None:
        write_sft_dataset(examples, path)
    return examples, summary


def write_sft_dataset(examples: Sequence[SFTExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def read_sft_dataset(path: str | Path) -> list[SFTExample]:
    with Path(path).open(encoding="utf-8") as f:
        return [SFTExample(**json.loads(line)) for line in f if line.strip()]


def format_summary_table(summary: AssemblySummary) -> str:
    rows = [("total", summary.total), ("retained", summary.retained)]
    rows += [(f"dropped:{reason}", n) for reason, n in summary.dropped.items()]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {n}" for name, n in rows)
