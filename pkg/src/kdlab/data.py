"""Synthetic sequence tasks and JSON-lines dataset files.

Three task kinds mirror single-sentence classification, sentence-pair
classification, and regression:

- single: label 1 iff a planted motif (a fixed k-gram derived from the task
  seed) occurs contiguously in the sequence.
- pair: tokens are A + SEP + B; label 1 iff B is a noisy subsequence of A,
  i.e. LCS(A, B) >= len(B) - pair_noise.
- regression: tokens are A + SEP + B; target is the Jaccard overlap of the
  two segments' token sets, in [0, 1].

Every label is recomputable from the tokens alone via ``oracle_label``.

The classification generators plant a deliberate surface bias: in-domain
positives draw their tokens mostly from the upper half of the vocabulary and
negatives from the lower half, so a bag-of-words model scores well without
using the labeling rule. ``gen_ood_variant`` keeps the labeling rule but
reverses the class-token correlation, restricts tokens to a sub-alphabet
(shifting the unigram distribution), and inserts counterexamples: near-motif
distractors in negative singles, and high-overlap shuffled-subsequence
negatives in pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError

SEP_ID = 1  # token 0 is reserved/unused, 1 separates pair segments
FIRST_REGULAR = 2

KINDS = ("single", "pair", "regression")

_MAX_RESAMPLES = 1000

# salts for independent per-purpose rng streams derived from the task seed
_SALT_MOTIF = 11
_SALT_TRAIN, _SALT_DEV, _SALT_TEST, _SALT_OOD = 1, 2, 3, 4


@dataclass(frozen=True)
class Example:
    tokens: tuple
    label: object  # int class index or float target

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    vocab_size: int
    seq_len: int
    num_classes: int
    train_size: int
    dev_size: int
    test_size: int
    seed: int = 0
    motif_len: int = 3
    pair_noise: int = 1
    bias_strength: float = 8.0  # 1.0 disables the class-token correlation

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for field_name in ("vocab_size", "seq_len", "train_size", "dev_size", "test_size"):
            if getattr(self, field_name) <= 0:
                raise ConfigError(f"{field_name} must be > 0")
        if self.vocab_size < FIRST_REGULAR + 8:
            raise ConfigError(f"vocab_size must be >= {FIRST_REGULAR + 8} (token budget)")
        if self.kind == "single":
            if self.motif_len > self.seq_len:
                raise ConfigError(
                    f"motif of length {self.motif_len} cannot fit in seq_len {self.seq_len}"
                )
            if self.motif_len < 2:
                raise ConfigError("motif_len must be >= 2")
        if self.kind in ("pair", "regression") and self.seq_len < 7:
            raise ConfigError("pair tasks need seq_len >= 7 (two segments plus separator)")
        expected_classes = 1 if self.kind == "regression" else 2
        if self.num_classes != expected_classes:
            raise ConfigError(
                f"{self.kind} tasks use num_classes == {expected_classes}, got {self.num_classes}"
            )
        if self.pair_noise < 0:
            raise ConfigError("pair_noise must be >= 0")
        if self.bias_strength < 1.0:
            raise ConfigError("bias_strength must be >= 1.0 (1.0 means unbiased)")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(text: str) -> "TaskSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"task spec is not valid JSON: {exc}") from exc
        try:
            return TaskSpec(**payload)
        except TypeError as exc:
            raise DataError(f"task spec has wrong fields: {exc}") from exc


def regular_range(spec: TaskSpec) -> tuple:
    return FIRST_REGULAR, spec.vocab_size


def motif_of(spec: TaskSpec) -> tuple:
    """The planted k-gram; a pure function of the task seed."""
    rng = np.random.default_rng([spec.seed, _SALT_MOTIF])
    lo, hi = regular_range(spec)
    return tuple(int(t) for t in rng.integers(lo, hi, size=spec.motif_len))


def _segment_lengths(spec: TaskSpec) -> tuple:
    body = spec.seq_len - 1
    if spec.kind == "regression":
        b_len = body // 2
    else:
        b_len = max(3, body // 4)
    return body - b_len, b_len


def lcs_len(a, b) -> int:
    """Length of the longest common subsequence (classic DP)."""
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def jaccard(a, b) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def _contains_motif(tokens, motif) -> bool:
    k = len(motif)
    return any(tuple(tokens[i : i + k]) == motif for i in range(len(tokens) - k + 1))


def split_pair(tokens) -> tuple:
    """Split A + SEP + B at the separator token."""
    tokens = list(tokens)
    if SEP_ID not in tokens:
        raise DataError("pair example has no separator token")
    cut = tokens.index(SEP_ID)
    return tokens[:cut], tokens[cut + 1 :]


def oracle_label(spec: TaskSpec, tokens):
    """Recompute the label of any token sequence from the task definition."""
    if spec.kind == "single":
        return int(_contains_motif(tuple(tokens), motif_of(spec)))
    a, b = split_pair(tokens)
    if spec.kind == "pair":
        return int(lcs_len(a, b) >= len(b) - spec.pair_noise)
    return jaccard(a, b)


# ---------------------------------------------------------------------------
# Token distributions


def _token_weights(spec: TaskSpec, label: int, ood: bool) -> np.ndarray:
    """Class-conditional unigram weights over the regular token range.

    In-domain: positives lean on the upper vocabulary half, negatives on the
    lower half (the plantable bias). OOD reverses the lean and zeroes every
    odd-offset token, which both breaks the learned shortcut and moves the
    unigram marginal.
    """
    lo, hi = regular_range(spec)
    size = hi - lo
    half = size // 2
    w = np.ones(size)
    if spec.kind != "regression" and spec.bias_strength > 1.0:
        lean_hi = (label == 1) != ood  # XOR: OOD flips which half is heavy
        if lean_hi:
            w[half:] *= spec.bias_strength
        else:
            w[:half] *= spec.bias_strength
    if ood:
        w[1::2] = 0.0
    return w / w.sum()


def _draw(rng, spec: TaskSpec, label: int, ood: bool, size: int) -> list:
    lo, _ = regular_range(spec)
    w = _token_weights(spec, label, ood)
    return [int(t) + lo for t in rng.choice(len(w), size=size, p=w)]


# ---------------------------------------------------------------------------
# Per-kind example constructors


def _make_single(rng, spec: TaskSpec, label: int, ood: bool) -> tuple:
    motif = motif_of(spec)
    for _ in range(_MAX_RESAMPLES):
        tokens = _draw(rng, spec, label, ood, spec.seq_len)
        if label == 1:
            start = int(rng.integers(0, spec.seq_len - spec.motif_len + 1))
            tokens[start : start + spec.motif_len] = list(motif)
        elif ood:
            # distractor: a near-motif differing in exactly one position
            distractor = list(motif)
            pos = int(rng.integers(0, spec.motif_len))
            lo, hi = regular_range(spec)
            choices = [t for t in range(lo, hi) if t != motif[pos]]
            distractor[pos] = int(rng.choice(choices))
            start = int(rng.integers(0, spec.seq_len - spec.motif_len + 1))
            tokens[start : start + spec.motif_len] = distractor
        if _contains_motif(tokens, motif) == bool(label):
            return tuple(tokens)
    raise DataError(f"could not build a label-{label} single example in {_MAX_RESAMPLES} tries")


def _corrupted_subsequence(rng, spec: TaskSpec, a: list, b_len: int, label: int,
                           ood: bool) -> list:
    positions = sorted(rng.choice(len(a), size=b_len, replace=False))
    b = [a[p] for p in positions]
    n_corrupt = int(rng.integers(0, spec.pair_noise + 1))
    if n_corrupt:
        for p in rng.choice(b_len, size=n_corrupt, replace=False):
            b[int(p)] = _draw(rng, spec, label, ood, 1)[0]
    return b


def _make_pair(rng, spec: TaskSpec, label: int, ood: bool) -> tuple:
    a_len, b_len = _segment_lengths(spec)
    threshold = b_len - spec.pair_noise
    for _ in range(_MAX_RESAMPLES):
        a = _draw(rng, spec, label, ood, a_len)
        if label == 1:
            b = _corrupted_subsequence(rng, spec, a, b_len, label, ood)
        elif ood and rng.random() < 0.5:
            # counterexample to the overlap shortcut: B reuses A's tokens but
            # scrambled out of order, so the oracle still says 0
            b = _corrupted_subsequence(rng, spec, a, b_len, label, ood)
            rng.shuffle(b)
        else:
            b = _draw(rng, spec, label, ood, b_len)
        if (lcs_len(a, b) >= threshold) == bool(label):
            return tuple(a + [SEP_ID] + b)
    raise DataError(f"could not build a label-{label} pair example in {_MAX_RESAMPLES} tries")


def _make_regression(rng, spec: TaskSpec, ood: bool) -> tuple:
    a_len, b_len = _segment_lengths(spec)
    a = _draw(rng, spec, 0, ood, a_len)
    pool = sorted(set(a))
    # mix tokens from A's set with fresh draws so targets spread over [0, 1]
    reuse = rng.random(size=b_len) < rng.random()
    fresh = _draw(rng, spec, 0, ood, b_len)
    b = [int(rng.choice(pool)) if r else f for r, f in zip(reuse, fresh)]
    return tuple(a + [SEP_ID] + b)


def _build_example(rng, spec: TaskSpec, label, ood: bool) -> Example:
    if spec.kind == "single":
        tokens = _make_single(rng, spec, label, ood)
    elif spec.kind == "pair":
        tokens = _make_pair(rng, spec, label, ood)
    else:
        tokens = _make_regression(rng, spec, ood)
    return Example(tokens=tokens, label=oracle_label(spec, tokens))


def _gen_split(rng, spec: TaskSpec, size: int, seen: set, ood: bool = False) -> list:
    examples = []
    for i in range(size):
        label = i % 2  # alternation keeps classes balanced; ignored for regression
        for _ in range(_MAX_RESAMPLES):
            ex = _build_example(rng, spec, label, ood)
            if ex.tokens not in seen:
                seen.add(ex.tokens)
                examples.append(ex)
                break
        else:
            raise DataError(
                f"could not generate {size} distinct examples "
                f"(stuck after {len(examples)}); enlarge vocab or seq_len"
            )
    order = rng.permutation(len(examples))
    return [examples[i] for i in order]


def gen_task(spec: TaskSpec, rng=None) -> tuple:
    """Generate (train, dev, test) splits, pairwise disjoint by token sequence.

    Deterministic per spec: split streams are derived from spec.seed unless an
    explicit generator is supplied.
    """
    seen: set = set()
    if rng is not None:
        return tuple(
            _gen_split(rng, spec, size, seen)
            for size in (spec.train_size, spec.dev_size, spec.test_size)
        )
    splits = []
    for salt, size in zip(
        (_SALT_TRAIN, _SALT_DEV, _SALT_TEST),
        (spec.train_size, spec.dev_size, spec.test_size),
    ):
        stream = np.random.default_rng([spec.seed, salt])
        splits.append(_gen_split(stream, spec, size, seen))
    return tuple(splits)


def gen_ood_variant(spec: TaskSpec, rng=None) -> list:
    """A test-size set under the shifted distribution; labels stay oracle-valid."""
    if rng is None:
        rng = np.random.default_rng([spec.seed, _SALT_OOD])
    return _gen_split(rng, spec, spec.test_size, set(), ood=True)


# ---------------------------------------------------------------------------
# JSON-lines files


def save_jsonl(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"tokens": list(ex.tokens), "label": ex.label}) + "\n")


def load_jsonl(path, spec: TaskSpec | None = None) -> list:
    examples = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path} line {lineno}: invalid JSON ({exc})") from exc
            if (
                not isinstance(payload, dict)
                or "tokens" not in payload
                or "label" not in payload
            ):
                raise DataError(f'{path} line {lineno}: expected {{"tokens": ..., "label": ...}}')
            tokens = payload["tokens"]
            if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
                raise DataError(f"{path} line {lineno}: tokens must be a list of ints")
            label = payload["label"]
            if not isinstance(label, (int, float)) or isinstance(label, bool):
                raise DataError(f"{path} line {lineno}: label must be an int or float")
            if spec is not None:
                if len(tokens) > spec.seq_len:
                    raise DataError(
                        f"{path} line {lineno}: sequence length {len(tokens)} "
                        f"exceeds seq_len {spec.seq_len}"
                    )
                if tokens and (min(tokens) < 0 or max(tokens) >= spec.vocab_size):
                    raise DataError(
                        f"{path} line {lineno}: token id outside [0, {spec.vocab_size})"
                    )
            examples.append(Example(tokens=tuple(tokens), label=label))
    return examples


# ---------------------------------------------------------------------------
# Bias probe


def bow_probe_accuracy(train, test, vocab_size: int) -> float:
    """Accuracy of a ridge-regression bag-of-words classifier.

    The probe sees only unigram counts, so it can exploit surface biases but
    not the structural labeling rules.
    """

    def counts(examples):
        x = np.zeros((len(examples), vocab_size))
        for i, ex in enumerate(examples):
            for t in ex.tokens:
                x[i, t] += 1.0
        return x

    x_train = counts(train)
    y = np.array([1.0 if ex.label == 1 else -1.0 for ex in train])
    gram = x_train.T @ x_train + 1e-3 * np.eye(vocab_size)
    w = np.linalg.solve(gram, x_train.T @ y)
    pred = counts(test) @ w
    hits = sum(
        1 for p, ex in zip(pred, test) if (1 if p >= 0 else 0) == ex.label
    )
    return hits / len(test)
