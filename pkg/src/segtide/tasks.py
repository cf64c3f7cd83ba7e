"""Synthetic token tasks.

``local-lm`` is an order-1 Markov stream over a fixed random transition
table: plenty of local structure to learn, entropy well below uniform.
``planted-recall`` hides a (marker, key) pair far behind the carried-tail
horizon and asks for the key again after a second marker near the end, so
answering requires the retrieval channel.

Token id 0 is reserved as BOS (the input slot that predicts a sample's
first token); generators emit ids in [1, vocab).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticSample:
    tokens: np.ndarray
    meta: dict | None = None


def make_transition_table(vocab: int, table_seed: int = 0, sharpness: float = 6.0) -> np.ndarray:
    """Row-stochastic next-token table over ids [1, vocab); row i gives the
    distribution after token i+1. Sharpness controls how peaked rows are."""
    n = vocab - 1
    rng = np.random.default_rng(table_seed)
    logits = rng.normal(0.0, sharpness, size=(n, n))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def chain_entropy(table: np.ndarray) -> float:
    """Mean next-token entropy in nats over the table's rows."""
    p = np.clip(table, 1e-300, None)
    return float(-(p * np.log(p)).sum(axis=1).mean())


def gen_local_lm(seed: int, length: int, vocab: int, table_seed: int = 0) -> SyntheticSample:
    """Walk the fixed transition table; deterministic per seed."""
    if length < 2:
        raise ValueError("length must be >= 2")
    table = make_transition_table(vocab, table_seed)
    rng = np.random.default_rng(seed)
    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = rng.integers(1, vocab)
    for t in range(1, length):
        row = table[tokens[t - 1] - 1]
        tokens[t] = 1 + rng.choice(vocab - 1, p=row)
    return SyntheticSample(tokens)


def gen_planted_recall(
    seed: int,
    length: int,
    vocab: int,
    gap: int,
    seg_len: int,
    carry_len: int,
) -> SyntheticSample:
    """Noise stream with a planted (marker, key) pair whose key must be
    recalled ``gap`` tokens later, after a second marker.

    ``gap`` counts from the key position to the query marker and must be at
    least one full segment plus the carried-tail length, so the key is out
    of reach of the carry when the query arrives. The query marker sits on
    the last position of the second segment: it thereby lands inside the
    retrieval-query window, and the answer is the following segment's first
    token, predicted from the carry and the retrieved prefix alone.

    The (marker, key) pattern is planted twice in close succession at the
    start; the second occurrence is answerable within one segment, which
    gives training a differentiable path for the marker-matching attention
    that retrieval scoring then reuses.
    """
    if gap < seg_len + carry_len:
        raise ValueError(
            f"gap {gap} too small: recall must cross the carried-tail horizon "
            f"(need >= segment + carry = {seg_len + carry_len})"
        )
    marker = vocab - 1
    query_pos = 2 * seg_len - 1
    key_pos = query_pos - gap
    if key_pos < 1:
        raise ValueError(
            f"gap {gap} too large: query sits at {query_pos}, key would land at {key_pos}"
        )
    if length < query_pos + 2:
        raise ValueError(f"length {length} too short: answer lands at {query_pos + 1}")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, vocab - 1, size=length).astype(np.int64)
    key = int(rng.integers(1, vocab - 1))
    tokens[key_pos - 1] = marker
    tokens[key_pos] = key
    if key_pos + 2 < seg_len:  # in-segment practice repetition
        tokens[key_pos + 1] = marker
        tokens[key_pos + 2] = key
    tokens[query_pos] = marker
    tokens[query_pos + 1] = key
    return SyntheticSample(
        tokens,
        meta={
            "key_pos": key_pos,
            "key_token": key,
            "query_pos": query_pos,
            "answer_token": key,
            "marker": marker,
        },
    )


def local_lm_stream(base_seed: int, length: int, vocab: int, table_seed: int = 0):
    """Infinite per-step sample stream for training; step i uses seed
    base_seed + i so runs are reproducible."""
    i = 0
    while True:
        yield gen_local_lm(base_seed + i, length, vocab, table_seed).tokens
        i += 1


def planted_recall_stream(
    base_seed: int, length: int, vocab: int, gap: int, seg_len: int, carry_len: int
):
    i = 0
    while True:
        yield gen_planted_recall(base_seed + i, length, vocab, gap, seg_len, carry_len).tokens
        i += 1
