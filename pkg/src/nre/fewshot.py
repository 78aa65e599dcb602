"""N-way K-shot episodic few-shot relation extraction."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class SamplingError(ValueError):
    """Raised when a dataset cannot supply the requested episode."""


@dataclass
class Episode:
    """N distinct relations, K support and Q query instances per relation."""

    relations: list  # N relation names/ids
    support: list  # N lists of K EncodedInstances
    query: list  # N*Q EncodedInstances
    query_labels: np.ndarray  # gold indices in [0, N)


def sample_episode(by_relation, n, k, q, rng):
    """Uniformly sample an N-way K-shot episode without replacement.

    by_relation maps relation -> list of instances. Deterministic under a
    fixed rng state.
    """
    names = sorted(by_relation)
    eligible = [r for r in names if len(by_relation[r]) >= k + q]
    if len(eligible) < n:
        short = [r for r in names if len(by_relation[r]) < k + q]
        raise SamplingError(
            f"need {n} relations with >= {k + q} instances, have {len(eligible)}"
            + (f"; deficient: {short[0]}" if short else "")
        )
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=n, replace=False)]
    support, query, labels = [], [], []
    for idx, rel in enumerate(chosen):
        pool = by_relation[rel]
        picks = rng.choice(len(pool), size=k + q, replace=False)
        support.append([pool[i] for i in picks[:k]])
        query.extend(pool[i] for i in picks[k:])
        labels.extend([idx] * q)
    return Episode(relations=chosen, support=support, query=query,
                   query_labels=np.array(labels, dtype=np.int64))


def prototypes_from_reps(support_reps, n, k):
    """Mean of each relation's K support rows, reduced in ascending index order."""
    avg = np.zeros((n, n * k))
    for i in range(n):
        avg[i, i * k : (i + 1) * k] = 1.0 / k
    return T.matmul(T.Tensor(avg), support_reps)


def proto_logits(support_reps, query_reps, n, k):
    """Negative squared distance of each query to each relation prototype."""
    return T.neg_sqdist(query_reps, prototypes_from_reps(support_reps, n, k))


def proto_scores(episode, encode_batch):
    """Query logits [N*Q x N] under a prototypical classifier.

    encode_batch maps a list of EncodedInstances to a Tensor of row
    representations.
    """
    n = len(episode.relations)
    k = len(episode.support[0])
    flat_support = [inst for group in episode.support for inst in group]
    support_reps = encode_batch(flat_support)
    query_reps = encode_batch(episode.query)
    return proto_logits(support_reps, query_reps, n, k)


def proto_predict(episode, encode_batch):
    logits = proto_scores(episode, encode_batch)
    return logits.data.argmax(axis=1)


def pair_scores(episode, pair_probability):
    """Mean same-relation probability of each query against each support set.

    pair_probability(query_instance, support_instance) -> float in [0, 1].
    Argmax ties break toward the lowest relation index.
    """
    n = len(episode.relations)
    scores = np.zeros((len(episode.query), n))
    for qi, query in enumerate(episode.query):
        for ni, group in enumerate(episode.support):
            scores[qi, ni] = float(np.mean([pair_probability(query, s) for s in group]))
    return scores


def episode_accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    return float((predictions == np.asarray(labels)).mean())
