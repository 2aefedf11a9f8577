from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perspective_cot.corpus import Label
from perspective_cot.cot_dataset import (
    RESERVED,
    CoTRecord,
    EmptyDatasetError,
    MissingAnswer,
    MissingThink,
    NestedOrDuplicateTags,
    ParseError,
    ReservedSubstringError,
    TaggedTarget,
    UnknownLabel,
    assemble_sft_dataset,
    count_sentences,
    format_summary_table,
    parse_bare_label,
    parse_tagged_output,
    read_sft_dataset,
    split_perspective_segments,
    validate_cot_record,
    wrap_training_target,
)
from perspective_cot.prompts import StudentPrompt
from reference_values import COT_OUTPUT, PROPOSED_OUTPUT

SAMPLE_TARGET = "<think>관점 1. ...</think> <answer>적절</answer>"
# the sample elides perspectives 2-4; this is the same answer written out in full
SAMPLE_TARGET_FULL = (
    "관점 1. 발화에 욕설이나 비속어가 없습니다. "
    "관점 2. 차별이나 혐오의 의도 없이 자신의 경험을 전하고 있습니다. "
    "관점 3. 상대에게 불쾌감을 주지 않아 대화 분위기를 해치지 않습니다. "
    "관점 4. 종합하면 대화 맥락에서 적절한 발화입니다."
)


def _record(think: str, answer: Label, gold: Label) -> CoTRecord:
    return CoTRecord("d:1", "d", gold, teacher_text=think, target=TaggedTarget(think, answer))


def test_wrap_renders_exact_concatenation():
    t = wrap_training_target("관점 1. …", Label.APPROPRIATE)
    assert t.rendered == "<think>관점 1. …</think><answer>적절</answer>"
    assert wrap_training_target("", Label.APPROPRIATE).rendered == "<think></think><answer>적절</answer>"


@pytest.mark.parametrize("bad", ["a</think>b", "x<answer>y", "<think>", "z</answer>"])
def test_wrap_rejects_reserved(bad):
    with pytest.raises(ReservedSubstringError):
        wrap_training_target(bad, Label.APPROPRIATE)


def test_parse_reference_outputs():
    out = parse_tagged_output(PROPOSED_OUTPUT)
    assert out.answer_label is Label.INAPPROPRIATE
    assert out.think_text.startswith("1. “님이 모자란 건데”")
    assert parse_tagged_output(COT_OUTPUT).answer_label is Label.APPROPRIATE
    fig = parse_tagged_output(SAMPLE_TARGET)
    assert (fig.think_text, fig.answer_label) == ("관점 1. ...", Label.APPROPRIATE)


@pytest.mark.parametrize(
    "text, error",
    [
        ("<think>abc<answer>적절</answer>", MissingThink),
        ("적절", MissingThink),
        ("", MissingThink),
        ("<think>abc</think>", MissingAnswer),
        ("<think>abc</think><answer>적절", MissingAnswer),
        ("<answer>적절</answer><think>abc</think>", MissingAnswer),
        ("<think>abc</think><answer>좋음</answer>", UnknownLabel),
        ("<think>abc</think><answer>적 절</answer>", UnknownLabel),
        ("<think>abc</think><answer></answer>", UnknownLabel),
        ("<think>a<think>b</think><answer>적절</answer>", NestedOrDuplicateTags),
        ("<think>a</think><think>b</think><answer>적절</answer>", NestedOrDuplicateTags),
        ("<think>a</answer></think><answer>적절</answer>", NestedOrDuplicateTags),
        ("<think>a</think><answer><think>적절</answer>", NestedOrDuplicateTags),
    ],
)
def test_malformed_cases(text, error):
    with pytest.raises(error):
        parse_tagged_output(text)


def test_error_types_are_distinct():
    kinds = {MissingThink, MissingAnswer, UnknownLabel, NestedOrDuplicateTags}
    assert all(issubclass(k, ParseError) for k in kinds)
    assert len(kinds) == 4
    with pytest.raises(UnknownLabel) as exc:
        parse_tagged_output("<think></think><answer>maybe</answer>")
    assert exc.value.value == "maybe"


@pytest.mark.parametrize(
    "text", ["<think>t</think> \n <answer> 부적절\n</answer>", "prefix <think>t</think><answer>부적절</answer> trailing"]
)
def test_whitespace_and_surroundings_tolerated(text):
    out = parse_tagged_output(text)
    assert (out.think_text, out.answer_label) == ("t", Label.INAPPROPRIATE)


def test_bare_label_parse():
    assert parse_bare_label(" 적절\n") is Label.APPROPRIATE
    with pytest.raises(UnknownLabel):
        parse_bare_label("<think></think><answer>적절</answer>")


def test_segments_and_sentences():
    assert split_perspective_segments("관점 1. 가. 관점 2. 나.") == [" 가. ", " 나."]
    assert split_perspective_segments("1. a 3. b") == [" a 3. b"]
    assert split_perspective_segments("x1. a") == []
    assert count_sentences("하나. 둘? 셋!") == 3
    assert count_sentences("말줄임…… 끝") == 2
    assert count_sentences("...") == 0
    assert count_sentences("") == 0


def test_validation_sample_full_passes():
    report = validate_cot_record(_record(SAMPLE_TARGET_FULL, Label.APPROPRIATE, Label.APPROPRIATE), 4)
    assert report.passed and report.issues == []


def test_validation_sample_literal_single_perspective():
    think = parse_tagged_output(SAMPLE_TARGET).think_text
    assert validate_cot_record(_record(think, Label.APPROPRIATE, Label.APPROPRIATE), 1).passed
    uncovered = validate_cot_record(_record(think, Label.APPROPRIATE, Label.APPROPRIATE), 4)
    assert not uncovered.perspectives_covered


def test_validation_label_mismatch():
    report = validate_cot_record(_record(SAMPLE_TARGET_FULL, Label.INAPPROPRIATE, Label.APPROPRIATE), 4)
    assert not report.label_consistent and report.first_failure() == "label_inconsistent"


def test_validation_sentence_budget():
    think = "1. 문장 하나. 문장 둘. 문장 셋. 2. 괜찮다."
    report = validate_cot_record(_record(think, Label.APPROPRIATE, Label.APPROPRIATE), 2)
    assert report.label_consistent and report.perspectives_covered
    assert not report.within_sentence_budget
    assert any("segment 1 has 3 sentences" in i for i in report.issues)


def test_validation_reference_outputs_cover_four():
    think = parse_tagged_output(PROPOSED_OUTPUT).think_text
    report = validate_cot_record(_record(think, Label.INAPPROPRIATE, Label.INAPPROPRIATE), 4)
    assert report.perspectives_covered


def test_validation_unconstrained_uses_whole_text():
    rep = validate_cot_record(_record("첫째. 둘째. 셋째.", Label.APPROPRIATE, Label.APPROPRIATE), 0)
    assert rep.perspectives_covered and not rep.within_sentence_budget


def test_record_round_trip():
    rec = _record(SAMPLE_TARGET_FULL, Label.APPROPRIATE, Label.APPROPRIATE)
    rec.validation = validate_cot_record(rec, 4)
    back = CoTRecord.from_dict(json.loads(json.dumps(rec.to_dict(), ensure_ascii=False)))
    assert back.target == rec.target and back.validation == rec.validation


def _prompts(n):
    return [StudentPrompt("sys", f"user {i}") for i in range(n)]


def test_assemble_all_valid(tmp_path):
    recs = [_record(SAMPLE_TARGET_FULL, Label.APPROPRIATE, Label.APPROPRIATE) for _ in range(3)]
    for r in recs:
        r.validation = validate_cot_record(r, 4)
    examples, summary = assemble_sft_dataset(recs, _prompts(3), tmp_path / "sft.jsonl")
    assert summary.retained == 3 and summary.dropped == {}
    assert [e.user for e in examples] == ["user 0", "user 1", "user 2"]
    assert read_sft_dataset(tmp_path / "sft.jsonl") == examples


def test_assemble_drop_and_keep():
    recs = [_record(SAMPLE_TARGET_FULL, Label.APPROPRIATE, Label.APPROPRIATE) for _ in range(3)]
    recs[1] = _record(SAMPLE_TARGET_FULL, Label.INAPPROPRIATE, Label.APPROPRIATE)
    for r in recs:
        r.validation = validate_cot_record(r, 4)
    examples, summary = assemble_sft_dataset(recs, _prompts(3))
    assert len(examples) == 2 and summary.dropped == {"label_inconsistent": 1}
    assert "dropped:label_inconsistent  1" in format_summary_table(summary)
    kept, summary = assemble_sft_dataset(recs, _prompts(3), keep_invalid=True)
    assert len(kept) == 3 and summary.dropped == {}


def test_assemble_generation_failures_and_empty():
    failed = CoTRecord("d:1", "d", Label.APPROPRIATE, error="TeacherError: boom")
    with pytest.raises(EmptyDatasetError):
        assemble_sft_dataset([failed], _prompts(1), keep_invalid=True)
    with pytest.raises(ValueError):
        assemble_sft_dataset([failed], _prompts(2))


def test_assemble_at_split_scale(tmp_path):
    n = 2109
    recs = []
    for i in range(n):
        r = _record(f"관점 1. 근거 {i}.", Label.APPROPRIATE, Label.APPROPRIATE)
        r.validation = validate_cot_record(r, 1)
        recs.append(r)
    path = tmp_path / "train.jsonl"
    assemble_sft_dataset(recs, _prompts(n), path)
    assert sum(1 for _ in path.open(encoding="utf-8")) == n


think_texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=200).filter(
    lambda s: not any(tag in s for tag in RESERVED)
)


@settings(max_examples=300, deadline=None)
@given(think_texts, st.sampled_from(list(Label)))
def test_round_trip_property(think, label):
    out = parse_tagged_output(wrap_training_target(think, label).rendered)
    assert (out.think_text, out.answer_label) == (think, label)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_parser_totality_property(blob):
    try:
        parse_tagged_output(blob)
    except ParseError:
        pass


tagged_fragments = st.lists(
    st.sampled_from(["<think>", "</think>", "<answer>", "</answer>", "적절", "부적절", " ", "1. 가.", "x"]),
    max_size=12,
).map("".join)


@settings(max_examples=300, deadline=None)
@given(tagged_fragments)
def test_parser_totality_on_tag_soup(text):
    try:
        parse_tagged_output(text)
    except ParseError:
        pass


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=50))
def test_trailing_text_never_flips_validation(trailing):
    rendered = wrap_training_target(SAMPLE_TARGET_FULL, Label.APPROPRIATE).rendered
    out = parse_tagged_output(rendered + trailing)
    rec = _record(out.think_text, out.answer_label, Label.APPROPRIATE)
    assert validate_cot_record(rec, 4).passed
