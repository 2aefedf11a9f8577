"""Perspective-constrained prompt construction.

Teacher prompts are answer-conditioned (they state the gold label and ask for
the reasoning that leads to it). Student prompts carry the same dialog and
perspective blocks but never the label.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional

from .corpus import AnalysisInstance, Label

DIALOG_HEADER_TEACHER = "[전체 대화 내용]"
DIALOG_HEADER_STUDENT = "[전체 대화]"
TARGET_HEADER = "[분석 대상 발화]"
GOLD_HEADER = "[이 발화의 정답]"
PERSPECTIVE_HEADER = "[추론 관점]"
REQUIREMENTS_HEADER = "요구사항:"

STUDENT_TASK = "전체 대화 맥락을 바탕으로 현재 발화가 '적절'인지 또는 '부적절'인지 판단할 수 있습니다."
STUDENT_FORMAT_TAGGED = (
    "추론 과정은 <think></think> 태그 안에, 최종 판단은 <answer></answer> 태그 안에 작성하세요."
)
STUDENT_FORMAT_BARE = "최종 판단만 '적절' 또는 '부적절'로 출력하세요."

# Matches one rendered perspective block line, e.g. "2. <원인적 관점> ...".
PERSPECTIVE_LINE_RE = re.compile(r"^(\d+)\. <(\S+) 관점> ", re.MULTILINE)


class PerspectiveName(str, Enum):
    SURFACE = "표면적"
    CAUSAL = "원인적"
    IMPACT = "영향적"
    COMPREHENSIVE = "종합적"


@dataclass(frozen=True)
class Perspective:
    index: int
    name: PerspectiveName
    instruction: str

    def render(self, number: int) -> str:
        return f"{number}. <{self.name.value} 관점> {self.instruction}"


@dataclass(frozen=True)
class PerspectiveSet:
    perspectives: tuple[Perspective, ...]

    def __post_init__(self):
        for expected, p in enumerate(self.perspectives, start=1):
            if p.index != expected:
                raise ValueError(f"perspective indices must be 1..n in order, got {p.index} at {expected}")
            if not p.instruction.strip():
                raise ValueError(f"perspective {p.index} has an empty instruction")

    def __len__(self) -> int:
        return len(self.perspectives)

    def __iter__(self):
        return iter(self.perspectives)

    def render(self) -> str:
        return "\n".join(p.render(i) for i, p in enumerate(self.perspectives, start=1))


NO_PERSPECTIVES = PerspectiveSet(())


def load_perspectives(path: str | Path | None = None) -> PerspectiveSet:
    """Load a perspective file (one JSON record per line: index, name, instruction)."""
    if path is None:
        text = resources.files(__package__).joinpath("data/perspectives.jsonl").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    records.sort(key=lambda r: r["index"])
    return PerspectiveSet(
        tuple(Perspective(int(r["index"]), PerspectiveName(r["name"]), r["instruction"]) for r in records)
    )


def canonical_perspectives() -> PerspectiveSet:
    """The four built-in perspectives: surface, causal, impact, comprehensive."""
    return load_perspectives()


def perspective_prefix(pset: PerspectiveSet, k: int) -> PerspectiveSet:
    if not 1 <= k <= len(pset):
        raise ValueError(f"stage count k={k} outside 1..{len(pset)}")
    return PerspectiveSet(pset.perspectives[:k])


@dataclass(frozen=True)
class TeacherPrompt:
    rendered: str
    sections: dict

    def messages(self) -> list[dict]:
        return [{"role": "user", "content": self.rendered}]


@dataclass(frozen=True)
class StudentPrompt:
    system: str
    user: str


def _requirements(label: Label, perspectives: PerspectiveSet) -> str:
    lines = [f"1. 분석 대상 발화는 {label.value}입니다. 발화의 정답을 바꾸지 말고 정답에 이르는 추론 과정을 작성하세요."]
    if len(perspectives):
        lines.append("2. 각 관점마다 2문장 이내로 간결하고 핵심적인 추론 과정을 작성하세요.")
        lines.append("3. 각 관점의 추론은 '관점 1.', '관점 2.'와 같이 관점 번호로 시작하세요.")
    else:
        lines.append("2. 2문장 이내로 간결하고 핵심적인 추론 과정을 작성하세요.")
    lines.append("정답 태그나 추가 설명 없이 추론 과정만 출력하세요.")
    return "\n".join(lines)


def build_teacher_prompt(instance: AnalysisInstance, perspectives: PerspectiveSet) -> TeacherPrompt:
    """Render the answer-conditioned CoT extraction prompt.

    An empty perspective set gives the unconstrained variant (plain CoT
    distillation baseline) with no perspective block.
    """
    if instance.gold_label is None:
        raise ValueError(f"instance {instance.instance_id} has no gold label")
    label = instance.gold_label
    sections = {
        "full_dialog": f"{DIALOG_HEADER_TEACHER}\n{instance.full_dialog}",
        "target_utterance": f"{TARGET_HEADER} {instance.target_utterance_id}: {instance.target_text}",
        "gold_label": f"{GOLD_HEADER} {label.value}",
        "perspectives": f"{PERSPECTIVE_HEADER}\n{perspectives.render()}" if len(perspectives) else "",
        "requirements": f"{REQUIREMENTS_HEADER}\n{_requirements(label, perspectives)}",
    }
    rendered = "\n".join(s for s in sections.values() if s)
    return TeacherPrompt(rendered, sections)


def build_student_prompt(
    instance: AnalysisInstance, perspectives: PerspectiveSet, tagged: bool = True
) -> StudentPrompt:
    system = f"{STUDENT_TASK} {STUDENT_FORMAT_TAGGED if tagged else STUDENT_FORMAT_BARE}"
    parts = [
        f"{DIALOG_HEADER_STUDENT}\n{instance.full_dialog}",
        f"{TARGET_HEADER} {instance.target_utterance_id}: {instance.target_text}",
    ]
    if len(perspectives):
        parts.append(f"{PERSPECTIVE_HEADER}\n{perspectives.render()}")
    return StudentPrompt(system, "\n".join(parts))


def count_perspective_blocks(text: str) -> list[int]:
    """Numbers of the rendered perspective blocks found in ``text``, in order."""
    return [int(m.group(1)) for m in PERSPECTIVE_LINE_RE.finditer(text)]


def stages_of(text: str) -> Optional[int]:
    nums = count_perspective_blocks(text)
    return len(nums) if nums else None
