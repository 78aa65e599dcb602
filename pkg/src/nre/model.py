"""Relation classification heads, bag-level aggregation, adversarial perturbation."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import xavier_uniform


@dataclass
class RelationClassifierParams:
    """Relation matrix M [R x D] and bias [R]; M's rows double as attention queries."""

    weight: T.Tensor
    bias: T.Tensor

    @classmethod
    def init(cls, rng, n_relations, dim):
        return cls(
            weight=T.Tensor(xavier_uniform(rng, (n_relations, dim)), requires_grad=True),
            bias=T.Tensor(np.zeros(n_relations), requires_grad=True),
        )

    @property
    def n_relations(self):
        return self.weight.data.shape[0]

    def parameters(self):
        return {"clf.weight": self.weight, "clf.bias": self.bias}

    def load_state(self, state):
        self.weight.data = np.asarray(state["clf.weight"])
        self.bias.data = np.asarray(state["clf.bias"])


@dataclass
class BagBatch:
    """Flat instance list partitioned into bags by (begin, end) scopes."""

    instances: list
    scopes: list  # [(begin, end)] per bag
    labels: list  # gold relation id per bag

    def __post_init__(self):
        expected = 0
        for begin, end in self.scopes:
            if begin != expected or end <= begin:
                raise T.ContractError(f"scopes must partition the instances; bad scope ({begin},{end})")
            expected = end
        if expected != len(self.instances):
            raise T.ContractError("scopes do not cover all instances")


def classify_logits(reps, params):
    """Raw relation scores M . rep + b for a batch of representations."""
    return T.add(T.matmul(reps, T.transpose(params.weight)), params.bias)


def classify_softmax(rep, params):
    """Relation probability vector for a single representation."""
    if rep.data.shape != (params.weight.data.shape[1],):
        raise T.ShapeError(
            f"classify_softmax: rep {rep.data.shape} vs weight {params.weight.data.shape}"
        )
    logits = classify_logits(T.reshape(rep, (1, -1)), params)
    return T.reshape(T.softmax_rows(logits), (params.n_relations,))


def bag_attention_aggregate(scopes, reps, query_relations, params):
    """Selective attention over each bag's instances.

    Scores e_i = reps_i . M[query]; alpha = softmax within the bag; the bag
    representation is the alpha-weighted sum. Returns (bag reps [bags x D],
    attention weight arrays per bag).
    """
    scores = T.matmul(reps, T.transpose(params.weight))  # [n x R]
    bag_reps = []
    alphas = []
    for (begin, end), query in zip(scopes, query_relations):
        e = T.slice_rows(T.slice_cols(scores, query, query + 1), begin, end)
        alpha = T.softmax_rows(T.reshape(e, (1, end - begin)))
        bag_reps.append(T.matmul(alpha, T.slice_rows(reps, begin, end)))
        alphas.append(alpha.data.ravel())
    return T.concat(bag_reps, axis=0), alphas


def bag_average_aggregate(scopes, reps):
    """Unweighted mean of instance representations per bag."""
    n = reps.data.shape[0]
    avg = np.zeros((len(scopes), n))
    for i, (begin, end) in enumerate(scopes):
        avg[i, begin:end] = 1.0 / (end - begin)
    return T.matmul(T.Tensor(avg), reps)


def bag_inference_scores(scopes, reps, params):
    """Per-bag, per-relation scores for ranking (inference path, no grad).

    For each relation r the bag representation is computed under query r and
    the r-th softmax probability is read off; scores across relations need
    not sum to 1 and are consumed as a ranking only.
    """
    m, b = params.weight.data, params.bias.data
    scores = reps.data @ m.T  # [n x R]
    out = np.zeros((len(scopes), m.shape[0]))
    for i, (begin, end) in enumerate(scopes):
        e = scores[begin:end]  # [size x R]
        e = e - e.max(axis=0, keepdims=True)
        alpha = np.exp(e) / np.exp(e).sum(axis=0, keepdims=True)  # softmax per query column
        bag_reps = alpha.T @ reps.data[begin:end]  # [R x D], row r under query r
        logits = bag_reps @ m.T + b
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        out[i] = np.diag(probs)
    return out


def adversarial_perturbation(word_grad, epsilon):
    """L2-normalized ascent direction on the looked-up word embeddings."""
    norm = float(np.sqrt((np.asarray(word_grad) ** 2).sum()))
    return epsilon * np.asarray(word_grad) / max(norm, 1e-12)
