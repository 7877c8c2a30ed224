import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvol import respparse
from medvol.respparse import FormatFailure, ParsedResponse, parse, serialize
from medvol.reward import reward_format
from medvol.targets import Box2D, EvidenceAnchor

DIMS = (64, 64, 64)


def anchors(h=64, w=64, d=64, max_boxes=4):
    box = st.tuples(st.integers(0, w - 1), st.integers(0, h - 1)).flatmap(
        lambda p: st.builds(Box2D, st.just(p[0]), st.just(p[1]), st.integers(p[0] + 1, w), st.integers(p[1] + 1, h)))
    return st.builds(EvidenceAnchor, st.integers(0, d - 1), st.lists(box, max_size=max_boxes).map(tuple))


def answer(obj) -> str:
    return f"<think>t</think><answer>{json.dumps(obj)}</answer>"


def test_well_formed_example():
    text = '<think>the largest cross-section is slice 32</think><answer>{"slice": 32, "bbox_2d_list": [[24,24,40,40]]}</answer>'
    parsed = parse(text, DIMS)
    assert isinstance(parsed, ParsedResponse)
    assert parsed.anchor == EvidenceAnchor(32, (Box2D(24, 24, 40, 40),))
    assert parsed.think == "the largest cross-section is slice 32"


@pytest.mark.parametrize("text, reason", [
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": []}', "missing-block"),
    ('<answer>{"slice": 1, "bbox_2d_list": []}</answer>', "missing-block"),
    ('<think>a</think><think>b</think><answer>{"slice": 1, "bbox_2d_list": []}</answer>', "duplicate-block"),
    ('<answer>{"slice": 1, "bbox_2d_list": []}</answer><think>a</think>', "bad-order"),
    ('<think>a<answer></think>{"slice": 1}</answer>', "bad-order"),
    ('hello <think>a</think><answer>{"slice": 1, "bbox_2d_list": []}</answer>', "schema-error"),
    ('<think>a</think> x <answer>{"slice": 1, "bbox_2d_list": []}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": []}</answer>!', "schema-error"),
    ('<think>a</think><answer>slice 1</answer>', "schema-error"),
    ('<think>a</think><answer>[1, 2]</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [], "x": 0}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1.0, "bbox_2d_list": []}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": true, "bbox_2d_list": []}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [[1, 2, 3]]}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [[1, 2, 3, 4.5]]}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [1, 2, 3, 4]}</answer>', "schema-error"),
    ('<think>a</think><answer>{"slice": 64, "bbox_2d_list": []}</answer>', "out-of-bounds"),
    ('<think>a</think><answer>{"slice": -1, "bbox_2d_list": []}</answer>', "out-of-bounds"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [[0, 0, 65, 10]]}</answer>', "out-of-bounds"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [[10, 10, 10, 20]]}</answer>', "degenerate-box"),
    ('<think>a</think><answer>{"slice": 1, "bbox_2d_list": [[10, 30, 12, 20]]}</answer>', "degenerate-box"),
])
def test_failure_reasons(text, reason):
    result = parse(text, DIMS)
    assert isinstance(result, FormatFailure)
    assert result.reason == reason
    assert not result
    assert reason in respparse.REASONS


def test_one_based_slice_identifier():
    parsed = parse(answer({"slice": "<slice 33>", "bbox_2d_list": [[1, 1, 2, 2]]}), DIMS)
    assert parsed.anchor.key_slice == 32
    assert parse(answer({"slice": "<slice 65>", "bbox_2d_list": []}), DIMS).reason == "out-of-bounds"
    assert parse(answer({"slice": "<slice 0>", "bbox_2d_list": []}), DIMS).reason == "schema-error"


def test_whitespace_tolerated():
    text = '  \n<think> a </think>\n\n  <answer>\n { "slice" : 3 ,\n "bbox_2d_list" : [ [1,2,3,4] ] }\n</answer>\n'
    parsed = parse(text, DIMS)
    assert parsed.anchor == EvidenceAnchor(3, (Box2D(1, 2, 3, 4),))
    assert parsed.think == " a "


def test_serialize_rejects_tags_in_think():
    anchor = EvidenceAnchor(0, (Box2D(0, 0, 1, 1),))
    with pytest.raises(ValueError):
        serialize("see <answer> below", anchor)
    with pytest.raises(ValueError):
        serialize("x", EvidenceAnchor(70, ()), DIMS)


def test_empty_think_is_valid():
    anchor = EvidenceAnchor(5, (Box2D(0, 0, 3, 3),))
    parsed = parse(serialize("", anchor), DIMS)
    assert parsed.think == "" and parsed.anchor == anchor


def test_round_trip_1000_random_anchors():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        h, w, d = (int(v) for v in rng.integers(1, 80, size=3))
        boxes = []
        for _ in range(int(rng.integers(0, 5))):
            x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            boxes.append(Box2D(x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))))
        anchor = EvidenceAnchor(int(rng.integers(0, d)), tuple(boxes))
        think = "".join(chr(int(c)) for c in rng.integers(32, 0x3000, size=int(rng.integers(0, 30))))
        think = think.replace("<", "(")
        parsed = parse(serialize(think, anchor, (h, w, d)), (h, w, d))
        assert parsed == ParsedResponse(think, anchor)


@settings(max_examples=200, deadline=None)
@given(st.text(), anchors())
def test_round_trip_property(think, anchor):
    if any(tag in think for tag in respparse.TAGS):
        with pytest.raises(ValueError):
            serialize(think, anchor)
        return
    assert parse(serialize(think, anchor), DIMS) == ParsedResponse(think, anchor)


def test_fuzz_random_bytes_never_crash():
    rng = np.random.default_rng(9)
    for _ in range(100_000):
        raw = rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        text = raw.decode("utf-8", errors="replace")
        assert reward_format(text, DIMS) == 0


def test_fuzz_mutated_responses_never_crash():
    rng = np.random.default_rng(10)
    base = serialize("ok", EvidenceAnchor(3, (Box2D(1, 2, 5, 9), Box2D(10, 10, 20, 30))))
    alphabet = list('<>/{}[]",:0123456789- thinkanswerslicebbox_2d_list') + ["<think>", "</answer>"]
    for _ in range(20_000):
        chars = list(base)
        for _ in range(int(rng.integers(1, 4))):
            i = int(rng.integers(0, len(chars) + 1))
            op = rng.integers(3)
            if op == 0 and chars:
                del chars[min(i, len(chars) - 1)]
            elif op == 1:
                chars.insert(i, alphabet[int(rng.integers(len(alphabet)))])
            elif chars:
                chars[min(i, len(chars) - 1)] = alphabet[int(rng.integers(len(alphabet)))]
        result = parse("".join(chars), DIMS)
        assert isinstance(result, (ParsedResponse, FormatFailure))
        if isinstance(result, FormatFailure):
            assert result.reason in respparse.REASONS


def test_non_text_input_is_a_failure():
    assert parse(None, DIMS).reason == "schema-error"
    assert parse(b"<think></think>", DIMS).reason == "schema-error"


def test_deeply_nested_json_is_a_failure():
    text = "<think></think><answer>" + "[" * 100_000 + "]" * 100_000 + "</answer>"
    assert parse(text, DIMS).reason == "schema-error"
