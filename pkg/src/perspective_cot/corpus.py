"""Dialog corpus loading and the dialog -> per-utterance instance transformation.

Corpus files are UTF-8, one dialog object per line::

    {"id": "dev-00069", "utterances": [
        {"id": "dev-00069-001", "speaker": 1, "text": "...", "label": "부적절"}, ...]}

``label`` may be omitted (or null) on the eval split, whose gold answers are
withheld; such instances can be used for inference but not for scoring.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "eval")


class CorpusError(ValueError):
    """Malformed corpus record. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownLabelError(CorpusError):
    pass


class Label(str, Enum):
    APPROPRIATE = "적절"
    INAPPROPRIATE = "부적절"

    @classmethod
    def parse(cls, value: str) -> "Label":
        for label in cls:
            if value == label.value:
                return label
        raise UnknownLabelError(f"unknown label {value!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Utterance:
    speaker_id: int
    turn_index: int
    utterance_id: str
    text: str
    label: Optional[Label] = None


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    utterances: tuple[Utterance, ...]

    def render(self) -> str:
        return "\n".join(f"{u.utterance_id}: {u.text}" for u in self.utterances)


@dataclass
class DialogueCorpus:
    dialogues: list[Dialogue] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def dialog_count(self) -> int:
        return len(self.dialogues)

    @property
    def utterance_count(self) -> int:
        return sum(len(d.utterances) for d in self.dialogues)


@dataclass(frozen=True)
class AnalysisInstance:
    dialogue_id: str
    full_dialog: str
    target_utterance_id: str
    target_text: str
    gold_label: Optional[Label] = None

    @property
    def instance_id(self) -> str:
        return self.target_utterance_id

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gold_label"] = self.gold_label.value if self.gold_label else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisInstance":
        label = d.get("gold_label")
        return cls(
            dialogue_id=d["dialogue_id"],
            full_dialog=d["full_dialog"],
            target_utterance_id=d["target_utterance_id"],
            target_text=d["target_text"],
            gold_label=Label.parse(label) if label is not None else None,
        )


@dataclass(frozen=True)
class SplitStats:
    split_name: Optional[str]
    dialog_count: int
    instance_count: int


def _parse_dialogue(record: object, line: int) -> tuple[Dialogue, list[str]]:
    if not isinstance(record, dict):
        raise CorpusError("record is not a JSON object", line)
    try:
        dialogue_id = str(record["id"])
        raw_utts = record["utterances"]
    except KeyError as e:
        raise CorpusError(f"missing field {e.args[0]!r}", line) from None
    if not isinstance(raw_utts, list) or not raw_utts:
        raise CorpusError("'utterances' must be a non-empty list", line)

    utterances = []
    for turn, u in enumerate(raw_utts, start=1):
        if not isinstance(u, dict):
            raise CorpusError(f"utterance {turn} is not an object", line)
        try:
            uid, speaker, text = str(u["id"]), u["speaker"], u["text"]
        except KeyError as e:
            raise CorpusError(f"utterance {turn}: missing field {e.args[0]!r}", line) from None
        if not isinstance(speaker, int) or isinstance(speaker, bool):
            raise CorpusError(f"utterance {uid}: speaker must be an integer", line)
        if not isinstance(text, str) or not text.strip():
            raise CorpusError(f"utterance {uid}: empty text", line)
        raw_label = u.get("label")
        try:
            label = Label.parse(raw_label) if raw_label is not None else None
        except UnknownLabelError:
            raise UnknownLabelError(f"utterance {uid}: unknown label {raw_label!r}", line) from None
        utterances.append(Utterance(speaker, turn, uid, text, label))

    warnings = []
    speakers = {u.speaker_id for u in utterances}
    if len(speakers) > 2:
        raise CorpusError(f"dialog {dialogue_id} has {len(speakers)} speakers (max 2)", line)
    for prev, cur in zip(utterances, utterances[1:]):
        if prev.speaker_id == cur.speaker_id:
            warnings.append(
                f"dialog {dialogue_id}: speaker {cur.speaker_id} speaks twice in a row "
                f"at turn {cur.turn_index}"
            )
    return Dialogue(dialogue_id, tuple(utterances)), warnings


def parse_corpus_lines(lines: Iterable[str], require_labels: bool = False) -> DialogueCorpus:
    corpus = DialogueCorpus()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid JSON ({e.msg})", lineno) from None
        dialogue, warnings = _parse_dialogue(record, lineno)
        if require_labels:
            for u in dialogue.utterances:
                if u.label is None:
                    raise CorpusError(f"utterance {u.utterance_id}: missing label", lineno)
        corpus.dialogues.append(dialogue)
        corpus.warnings.extend(warnings)
    for w in corpus.warnings:
        logger.warning(w)
    return corpus


def load_corpus(path: str | Path, require_labels: bool = False) -> DialogueCorpus:
    """Read a line-delimited dialog corpus.

    Raises FileNotFoundError for a missing path and CorpusError (with the
    offending line number) for malformed records or unknown label strings.
    Speaker-alternation violations are logged and collected in
    ``corpus.warnings`` but do not fail the load.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        return parse_corpus_lines(f, require_labels=require_labels)


def transform_corpus(corpus: DialogueCorpus) -> list[AnalysisInstance]:
    """One instance per utterance: the whole dialog plus that utterance as target."""
    instances = []
    for dialogue in corpus.dialogues:
        rendered = dialogue.render()
        for u in dialogue.utterances:
            instances.append(
                AnalysisInstance(
                    dialogue_id=dialogue.dialogue_id,
                    full_dialog=rendered,
                    target_utterance_id=u.utterance_id,
                    target_text=u.text,
                    gold_label=u.label,
                )
            )
    return instances


def corpus_stats(
    corpus: DialogueCorpus, instances: list[AnalysisInstance], split: Optional[str] = None
) -> SplitStats:
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    expected = corpus.utterance_count
    if len(instances) != expected:
        raise RuntimeError(
            f"instance count {len(instances)} does not match corpus utterance count {expected}"
        )
    return SplitStats(split, corpus.dialog_count, len(instances))


def format_stats_table(stats: list[SplitStats]) -> str:
    """Before/after count table, one column per split."""
    header = ["구분"] + [s.split_name or "-" for s in stats]
    before = ["변환 전"] + [f"{s.dialog_count:,}" for s in stats]
    after = ["변환 후"] + [f"{s.instance_count:,}" for s in stats]
    return "\n".join("\t".join(row) for row in (header, before, after))


def write_instances(instances: list[AnalysisInstance], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_instances(path: str | Path) -> list[AnalysisInstance]:
    with Path(path).open(encoding="utf-8") as f:
        return [AnalysisInstance.from_dict(json.loads(line)) for line in f if line.strip()]
