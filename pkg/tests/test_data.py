import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab.data import (
    SEP_ID,
    Example,
    TaskSpec,
    bow_probe_accuracy,
    gen_ood_variant,
    gen_task,
    jaccard,
    lcs_len,
    load_jsonl,
    motif_of,
    oracle_label,
    save_jsonl,
    split_pair,
)
from kdlab.errors import ConfigError, DataError


def make_spec(kind="single", **overrides):
    base = dict(
        name=f"toy-{kind}",
        kind=kind,
        vocab_size=40,
        seq_len=12,
        num_classes=1 if kind == "regression" else 2,
        train_size=200,
        dev_size=60,
        test_size=60,
        seed=0,
    )
    base.update(overrides)
    return TaskSpec(**base)


# --- oracles ------------------------------------------------------------------


def test_lcs_known_cases():
    assert lcs_len([1, 2, 3, 4], [2, 4]) == 2
    assert lcs_len([1, 2, 3], [4, 5, 6]) == 0
    assert lcs_len([1, 2, 3], [3, 2, 1]) == 1
    assert lcs_len([], [1]) == 0


@given(
    st.lists(st.integers(min_value=0, max_value=9), max_size=8),
    st.lists(st.integers(min_value=0, max_value=9), max_size=8),
)
@settings(max_examples=200, deadline=None)
def test_lcs_properties(a, b):
    n = lcs_len(a, b)
    assert 0 <= n <= min(len(a), len(b))
    assert n == lcs_len(b, a)
    assert lcs_len(a, a) == len(a)


def test_jaccard_identical_is_one():
    assert jaccard([3, 4, 5], [5, 4, 3]) == 1.0


def test_jaccard_disjoint_is_zero():
    assert jaccard([1, 2], [3, 4]) == 0.0


def test_jaccard_partial():
    assert jaccard([1, 2, 3], [3, 4]) == 0.25  # |{3}| / |{1,2,3,4}|


# --- spec validation ------------------------------------------------------------


def test_spec_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        make_spec(kind="ranking")


def test_spec_rejects_motif_longer_than_sequence():
    with pytest.raises(ConfigError, match="motif"):
        make_spec(seq_len=4, motif_len=5)


def test_spec_rejects_wrong_class_count():
    with pytest.raises(ConfigError, match="num_classes"):
        make_spec(kind="pair", num_classes=3)


def test_spec_json_round_trip():
    spec = make_spec(kind="pair")
    assert TaskSpec.from_json(spec.to_json()) == spec


def test_spec_from_json_rejects_garbage():
    with pytest.raises(DataError):
        TaskSpec.from_json("{not json")
    with pytest.raises(DataError):
        TaskSpec.from_json('{"name": "x", "unknown_field": 1}')


# --- generation ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["single", "pair", "regression"])
def test_generated_labels_agree_with_oracle(kind):
    spec = make_spec(kind=kind)
    for split in gen_task(spec):
        for ex in split:
            assert ex.label == oracle_label(spec, ex.tokens)


@pytest.mark.parametrize("kind", ["single", "pair", "regression"])
def test_generation_deterministic(kind):
    spec = make_spec(kind=kind)
    first = gen_task(spec)
    second = gen_task(spec)
    assert first == second


def test_splits_pairwise_disjoint():
    spec = make_spec(kind="single", train_size=300, dev_size=100, test_size=100)
    train, dev, test = gen_task(spec)
    sets = [set(ex.tokens for ex in split) for split in (train, dev, test)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert len(sets[0]) == 300  # no internal duplicates either


def test_token_bounds_hold():
    spec = make_spec(kind="pair")
    for split in gen_task(spec):
        for ex in split:
            assert len(ex.tokens) == spec.seq_len
            assert all(0 <= t < spec.vocab_size for t in ex.tokens)


def test_motif_examples_contain_motif():
    spec = make_spec(kind="single")
    motif = motif_of(spec)
    train, _, _ = gen_task(spec)
    k = len(motif)
    for ex in train:
        present = any(ex.tokens[i : i + k] == motif for i in range(len(ex.tokens) - k + 1))
        assert present == bool(ex.label)


def test_regression_identical_segments_score_one():
    spec = make_spec(kind="regression", seq_len=13)
    a = [5, 6, 7, 8, 9, 10]
    tokens = tuple(a + [SEP_ID] + list(reversed(a)))
    assert oracle_label(spec, tokens) == 1.0


def test_label_balance_over_10000_samples():
    spec = make_spec(kind="single", train_size=10_000, dev_size=1, test_size=1)
    train, _, _ = gen_task(spec)
    mean = np.mean([ex.label for ex in train])
    assert abs(mean - 0.5) < 0.05


def test_pair_label_balance():
    spec = make_spec(kind="pair", train_size=1000, dev_size=1, test_size=1)
    train, _, _ = gen_task(spec)
    mean = np.mean([ex.label for ex in train])
    assert abs(mean - 0.5) < 0.05


def test_regression_targets_spread():
    spec = make_spec(kind="regression", train_size=500, dev_size=1, test_size=1)
    train, _, _ = gen_task(spec)
    targets = np.array([ex.label for ex in train])
    assert targets.min() >= 0.0 and targets.max() <= 1.0
    assert targets.std() > 0.1  # enough signal for a regression metric


def test_split_pair_round_trip():
    a, b = split_pair((4, 5, 6, SEP_ID, 7, 8))
    assert a == [4, 5, 6] and b == [7, 8]
    with pytest.raises(DataError):
        split_pair((4, 5, 6))


# --- OOD variant ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["single", "pair", "regression"])
def test_ood_labels_remain_oracle_valid(kind):
    spec = make_spec(kind=kind, test_size=200)
    for ex in gen_ood_variant(spec):
        assert ex.label == oracle_label(spec, ex.tokens)


def test_ood_deterministic():
    spec = make_spec(kind="pair")
    assert gen_ood_variant(spec) == gen_ood_variant(spec)


@pytest.mark.parametrize("kind", ["single", "pair"])
def test_ood_unigram_shift_total_variation(kind):
    spec = make_spec(kind=kind, train_size=1500, test_size=1500)
    train, _, _ = gen_task(spec)
    ood = gen_ood_variant(spec)

    def unigram(examples):
        counts = np.zeros(spec.vocab_size)
        for ex in examples:
            for t in ex.tokens:
                counts[t] += 1
        return counts / counts.sum()

    tv = 0.5 * np.abs(unigram(train) - unigram(ood)).sum()
    assert tv > 0.2


@pytest.mark.parametrize("kind", ["single", "pair"])
def test_bow_probe_drops_at_least_10_points_ood(kind):
    spec = make_spec(kind=kind, train_size=800, dev_size=50, test_size=400)
    train, _, test = gen_task(spec)
    ood = gen_ood_variant(spec)
    in_domain = bow_probe_accuracy(train, test, spec.vocab_size)
    shifted = bow_probe_accuracy(train, ood, spec.vocab_size)
    assert in_domain - shifted >= 0.10, (in_domain, shifted)
    assert in_domain > 0.7  # the shortcut must actually work in-domain


# --- files -----------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    spec = make_spec(kind="pair", train_size=50)
    train, _, _ = gen_task(spec)
    path = tmp_path / "train.jsonl"
    save_jsonl(path, train)
    assert load_jsonl(path, spec) == train


def test_jsonl_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_jsonl(path) == []


def test_jsonl_bad_line_names_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": [1, 2], "label": 1}\n{oops\n')
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(path)


def test_jsonl_missing_field_rejected(tmp_path):
    path = tmp_path / "missing.jsonl"
    path.write_text('{"tokens": [1, 2]}\n')
    with pytest.raises(DataError, match="line 1"):
        load_jsonl(path)


def test_jsonl_validates_against_spec(tmp_path):
    spec = make_spec(kind="single", vocab_size=40, seq_len=12)
    path = tmp_path / "oob.jsonl"
    path.write_text('{"tokens": [999], "label": 0}\n')
    with pytest.raises(DataError, match="token id"):
        load_jsonl(path, spec)
    path.write_text('{"tokens": %s, "label": 0}\n' % list(range(13)))
    with pytest.raises(DataError, match="length"):
        load_jsonl(path, spec)


def test_jsonl_missing_file():
    with pytest.raises(DataError, match="cannot read"):
        load_jsonl("/nonexistent/nowhere.jsonl")


def test_example_coerces_tokens_to_ints():
    ex = Example(tokens=(np.int64(3), np.int64(4)), label=1)
    assert ex.tokens == (3, 4)
    assert all(isinstance(t, int) for t in ex.tokens)
