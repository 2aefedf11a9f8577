from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reference_values import SAMPLE_DIALOG  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def dialog_record(dialogue_id: str, utterances) -> dict:
    return {
        "id": dialogue_id,
        "utterances": [{"id": u, "speaker": s, "text": t, "label": l} for u, s, t, l in utterances],
    }


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def sample_corpus_file(tmp_path) -> Path:
    path = tmp_path / "sample.jsonl"
    path.write_text(json.dumps(dialog_record("P1", SAMPLE_DIALOG), ensure_ascii=False) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def sample_instances(sample_corpus_file):
    from perspective_cot.corpus import load_corpus, transform_corpus

    return transform_corpus(load_corpus(sample_corpus_file, require_labels=True))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
