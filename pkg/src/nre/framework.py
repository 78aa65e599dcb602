"""Training, evaluation and orchestration across the three RE scenarios."""

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .encoder import CnnEncoderParams, TransformerEncoderParams, cnn_forward_batch, transformer_encode
from .fewshot import episode_accuracy, proto_logits, sample_episode
from .model import (RelationClassifierParams, adversarial_perturbation, bag_attention_aggregate,
                    bag_average_aggregate, bag_inference_scores, classify_logits)
from .optim import make_optimizer, zero_grads
from .tokenization import (MAX_LENGTH, MAX_POS, SpanError, SubwordVocab, Vocab, build_vocab,
                           encode_instance, insert_entity_markers)

MODES = ("sentence", "bag", "fewshot")
ENCODERS = ("cnn", "pcnn", "transformer")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """NaN loss; message carries the epoch and batch index."""


@dataclass
class TrainConfig:
    mode: str
    seed: int
    encoder: str = "cnn"
    aggregator: str = "att"  # bag mode: "att" | "avg"
    optimizer: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 1e-5
    batch_size: int = 160
    max_epochs: int = 100
    patience: int = 5
    dropout: float = 0.5
    adv_eps: float = 0.0  # > 0 enables adversarial training
    # few-shot episode geometry
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    episodes_per_epoch: int = 100
    val_episodes: int = 1000
    # encoding geometry / sizes
    max_length: int = MAX_LENGTH
    max_pos: int = MAX_POS
    d_w: int = 50
    d_p: int = 5
    hidden: int = 230
    window: int = 3
    min_count: int = 1
    # optional data paths (used by the CLI)
    train_path: str = ""
    val_path: str = ""
    test_path: str = ""
    relation_map_path: str = ""
    embeddings_path: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.mode == "bag" and self.aggregator not in ("att", "avg"):
            raise ConfigError(f"bag mode needs aggregator 'att' or 'avg', got {self.aggregator!r}")
        if self.mode == "fewshot" and min(self.n_way, self.k_shot, self.q_query) < 1:
            raise ConfigError("fewshot mode needs n_way, k_shot, q_query >= 1")
        if self.adv_eps and self.encoder == "transformer":
            raise ConfigError("adversarial training is only supported for cnn/pcnn encoders")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        if "NRE_SEED" in os.environ:
            raw["seed"] = int(os.environ["NRE_SEED"])
        return cls(**raw)


# ---------------------------------------------------------------------------
# metrics


def evaluate_accuracy(preds, golds):
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds) or not preds:
        raise ValueError(f"length mismatch or empty: {len(preds)} vs {len(golds)}")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def evaluate_micro_f1(preds, golds, na_id=0):
    """Micro F1 over pooled non-NA counts; 0 when degenerate."""
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds) or not preds:
        raise ValueError(f"length mismatch or empty: {len(preds)} vs {len(golds)}")
    tp = sum(p == g and p != na_id for p, g in zip(preds, golds))
    pred_pos = sum(p != na_id for p in preds)
    gold_pos = sum(g != na_id for g in golds)
    if tp == 0 or pred_pos == 0 or gold_pos == 0:
        return 0.0
    precision, recall = tp / pred_pos, tp / gold_pos
    return 2 * precision * recall / (precision + recall)


class MetricError(ValueError):
    pass


def evaluate_pr_auc(scored_facts, gold_facts):
    """Average precision of ranked (bag, relation) predictions vs gold facts.

    scored_facts: iterable of (bag_key, relation, score); gold_facts: set of
    (bag_key, relation). Returns (auc, max_f1, curve) where curve is a list of
    (recall, precision) points at each rank.
    """
    gold_facts = set(gold_facts)
    if not gold_facts:
        raise MetricError("empty gold fact set")
    ranked = sorted(scored_facts, key=lambda x: (-x[2], x[0], x[1]))
    curve = []
    auc = 0.0
    max_f1 = 0.0
    hits = 0
    for rank, (key, rel, _score) in enumerate(ranked, start=1):
        if (key, rel) in gold_facts:
            hits += 1
            auc += hits / rank
        precision = hits / rank
        recall = hits / len(gold_facts)
        curve.append((recall, precision))
        if precision + recall > 0:
            max_f1 = max(max_f1, 2 * precision * recall / (precision + recall))
    return auc / len(gold_facts), max_f1, curve


def dump_pr_curve(curve, path):
    with open(path, "w", encoding="utf-8") as f:
        for recall, precision in curve:
            f.write(f"{recall} {precision}\n")


# ---------------------------------------------------------------------------
# bag grouping


@dataclass
class Bag:
    key: tuple
    instances: list
    relation: str = ""  # training bags only


def group_into_bags(instances, na_name="NA", for_training=True):
    """Group instances into bags, deterministically ordered by key.

    Training key: (head id, tail id, relation). Evaluation key: (head id,
    tail id); returns (bags, gold fact set of (key, relation != NA)).
    """
    bags = {}
    gold = set()
    for idx, inst in enumerate(instances):
        if not inst.head.id or not inst.tail.id:
            raise D.DataError(f"instance {idx}: missing head/tail entity id")
        pair = (inst.head.id, inst.tail.id)
        key = pair + (inst.relation,) if for_training else pair
        bags.setdefault(key, []).append(inst)
        if inst.relation != na_name:
            gold.add((pair, inst.relation))
    out = [Bag(key=k, instances=v, relation=k[2] if for_training else "")
           for k, v in sorted(bags.items())]
    if for_training:
        return out
    return out, gold


# ---------------------------------------------------------------------------
# model container


class ReModel:
    """A trained relation extractor: vocab + encoder + (optional) classifier."""

    def __init__(self, mode, encoder_kind, vocab, relation_map, encoder_params,
                 classifier=None, aggregator="", max_length=MAX_LENGTH, max_pos=MAX_POS,
                 dropout=0.0):
        self.mode = mode
        self.encoder_kind = encoder_kind
        self.vocab = vocab
        self.relation_map = relation_map
        self.encoder_params = encoder_params
        self.classifier = classifier
        self.aggregator = aggregator
        self.max_length = max_length
        self.max_pos = max_pos
        self.dropout = dropout

    def parameters(self):
        params = dict(self.encoder_params.parameters())
        if self.classifier is not None:
            params.update(self.classifier.parameters())
        return params

    def architecture(self):
        arch = {
            "mode": self.mode,
            "encoder": self.encoder_kind,
            "aggregator": self.aggregator,
            "max_length": self.max_length,
            "max_pos": self.max_pos,
            "dropout": self.dropout,
            "encoder_config": self.encoder_params.describe(),
        }
        if self.classifier is not None:
            arch["n_relations"] = self.classifier.n_relations
        return arch

    # -- encoding ----------------------------------------------------------

    def encode_instances(self, instances):
        """Encode instances, rejecting span-truncated ones with a count."""
        encoded, kept, skipped = [], [], 0
        for inst in instances:
            try:
                if self.encoder_kind == "transformer":
                    encoded.append(insert_entity_markers(inst, self.vocab))
                else:
                    encoded.append(encode_instance(inst, self.vocab, self.max_length, self.max_pos))
                kept.append(inst)
            except SpanError:
                skipped += 1
        return encoded, kept, skipped

    def encode_batch(self, encs, train=False, rng=None, word_perturbation=None):
        """Batch of encoded instances -> (reps Tensor, word-vector node or None)."""
        if self.encoder_kind == "transformer":
            reps = T.stack_rows([
                transformer_encode(ids, h, t, self.encoder_params) for ids, h, t in encs
            ])
            if train and self.dropout > 0.0:
                reps = T.dropout(reps, self.dropout, rng, train=True)
            return reps, None
        return cnn_forward_batch(
            encs, self.encoder_params, piecewise=(self.encoder_kind == "pcnn"),
            train=train, dropout_p=self.dropout, rng=rng, word_perturbation=word_perturbation,
        )

    def predict_probs(self, encs):
        """Relation probabilities [B x R] with gradients disabled."""
        with T.no_grad():
            reps, _ = self.encode_batch(encs)
            logits = classify_logits(reps, self.classifier)
            return T.softmax_rows(logits).data

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        D.save_checkpoint(path, self.architecture(), self.vocab.tokens,
                          self.relation_map, self.parameters())

    @classmethod
    def load(cls, path):
        ckpt = D.load_checkpoint(path)
        arch = ckpt.architecture
        rng = np.random.default_rng(0)  # overwritten immediately below
        if arch["encoder"] == "transformer":
            vocab = SubwordVocab.from_tokens(ckpt.vocab_tokens)
            cfg = arch["encoder_config"]
            enc = TransformerEncoderParams.init(
                rng, vocab_size=cfg["vocab_size"], d_model=cfg["d_model"],
                n_heads=cfg["n_heads"], n_layers=cfg["n_layers"],
                max_positions=arch["max_length"], pooling_mode=cfg["pooling_mode"])
        else:
            vocab = Vocab.from_tokens(ckpt.vocab_tokens)
            cfg = arch["encoder_config"]
            enc = CnnEncoderParams.init(
                rng, vocab_size=cfg["vocab_size"], d_w=cfg["d_w"], d_p=cfg["d_p"],
                hidden=cfg["hidden"], window=cfg["window"], max_pos=cfg["max_pos"])
        enc.load_state(ckpt.params)
        clf = None
        if "n_relations" in arch:
            clf = RelationClassifierParams.init(rng, arch["n_relations"],
                                                ckpt.params["clf.weight"].shape[1])
            clf.load_state(ckpt.params)
        return cls(mode=arch["mode"], encoder_kind=arch["encoder"], vocab=vocab,
                   relation_map=ckpt.relation_map, encoder_params=enc, classifier=clf,
                   aggregator=arch.get("aggregator", ""), max_length=arch["max_length"],
                   max_pos=arch["max_pos"], dropout=arch.get("dropout", 0.0))


def build_relation_map(instances, na_name="NA"):
    names = sorted({inst.relation for inst in instances} - {na_name})
    return D.RelationMap({na_name: 0, **{n: i + 1 for i, n in enumerate(names)}}, na_name=na_name)


# ---------------------------------------------------------------------------
# training


def _build_model(cfg, train_instances, relation_map, rng, with_classifier=True):
    if cfg.encoder == "transformer":
        word_vocab = build_vocab(train_instances, cfg.min_count)
        vocab = SubwordVocab(word_vocab.tokens[3:])
        enc = TransformerEncoderParams.init(
            rng, vocab_size=len(vocab), d_model=64, n_heads=4, n_layers=2,
            max_positions=cfg.max_length, pooling_mode="cls")
        dim = enc.output_dim
    else:
        vocab = build_vocab(train_instances, cfg.min_count)
        enc = CnnEncoderParams.init(
            rng, vocab_size=len(vocab), d_w=cfg.d_w, d_p=cfg.d_p,
            hidden=cfg.hidden, window=cfg.window, max_pos=cfg.max_pos)
        dim = cfg.hidden * (3 if cfg.encoder == "pcnn" else 1)
    clf = None
    if with_classifier:
        clf = RelationClassifierParams.init(rng, len(relation_map), dim)
    return ReModel(mode=cfg.mode, encoder_kind=cfg.encoder, vocab=vocab,
                   relation_map=relation_map, encoder_params=enc, classifier=clf,
                   aggregator=cfg.aggregator if cfg.mode == "bag" else "",
                   max_length=cfg.max_length, max_pos=cfg.max_pos, dropout=cfg.dropout)


def _adversarial_loss(model, encs, rng, loss_fn, eps):
    """L(x) + L(x + v) with v the normalized word-embedding gradient ascent step."""
    reps, word = model.encode_batch(encs, train=True, rng=rng)
    loss = loss_fn(reps)
    T.backward(loss)  # populates parameter grads and word.grad
    pert = adversarial_perturbation(word.grad, eps)
    reps_adv, _ = model.encode_batch(encs, train=True, rng=rng, word_perturbation=pert)
    adv_loss = loss_fn(reps_adv)
    T.backward(adv_loss)  # accumulates on top of the clean-pass grads
    return float(loss.data) + float(adv_loss.data)


def _train_step(model, encs, rng, loss_fn, adv_eps):
    if adv_eps:
        return _adversarial_loss(model, encs, rng, loss_fn, adv_eps)
    reps, _ = model.encode_batch(encs, train=True, rng=rng)
    loss = loss_fn(reps)
    T.backward(loss)
    return float(loss.data)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class _EpochLoop:
    """Shared early-stopping / logging shell around per-mode epoch bodies."""

    def __init__(self, cfg, model, metric_name):
        self.cfg = cfg
        self.model = model
        self.metric_name = metric_name
        self.log = []
        self.best_metric = -np.inf
        self.best_state = None

    def run(self, train_epoch, evaluate):
        bad = 0
        for epoch in range(1, self.cfg.max_epochs + 1):
            loss = train_epoch(epoch)
            metric = evaluate()
            self.log.append(f"epoch={epoch} loss={loss:.6f} val_{self.metric_name}={metric:.6f}")
            if metric > self.best_metric:
                self.best_metric = metric
                self.best_state = {k: v.data.copy() for k, v in self.model.parameters().items()}
                bad = 0
            else:
                bad += 1
            if bad >= self.cfg.patience:
                break
        if self.best_state is not None:
            for name, p in self.model.parameters().items():
                p.data = self.best_state[name]
        return self.model, self.log, self.best_metric


def _check_loss(loss, epoch, batch_idx):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")


def run_training(cfg, train_instances, val_instances, relation_map=None):
    """Train per config; returns (model, log lines, best validation metric)."""
    if not train_instances or (cfg.mode != "fewshot" and not val_instances):
        raise ConfigError("empty training or validation data")
    rng_init = np.random.default_rng(cfg.seed)
    rng_train = np.random.default_rng(cfg.seed + 1)
    if cfg.mode == "sentence":
        return _train_sentence(cfg, train_instances, val_instances, relation_map,
                               rng_init, rng_train)
    if cfg.mode == "bag":
        return _train_bag(cfg, train_instances, val_instances, relation_map,
                          rng_init, rng_train)
    return _train_fewshot(cfg, train_instances, val_instances, rng_init, rng_train)


def _train_sentence(cfg, train_instances, val_instances, relation_map, rng_init, rng_train):
    if relation_map is None:
        relation_map = build_relation_map(train_instances + val_instances)
    model = _build_model(cfg, train_instances, relation_map, rng_init)
    opt_state, opt_step = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    params = model.parameters()

    train_encs, kept, _ = model.encode_instances(train_instances)
    train_labels = np.array([relation_map.id_of(i.relation) for i in kept])
    val_encs, val_kept, _ = model.encode_instances(val_instances)
    val_labels = [relation_map.id_of(i.relation) for i in val_kept]

    def train_epoch(epoch):
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(len(train_encs), cfg.batch_size, rng_train)):
            encs = [train_encs[i] for i in idx]
            labels = train_labels[idx]
            zero_grads(params)
            loss = _train_step(model, encs, rng_train,
                               lambda reps: T.cross_entropy(classify_logits(reps, model.classifier), labels),
                               cfg.adv_eps)
            _check_loss(loss, epoch, bi)
            opt_step(params, opt_state)
            total += loss * len(idx)
            count += len(idx)
        return total / count

    def evaluate():
        preds = predict_relations(model, val_encs)
        return evaluate_accuracy(preds, val_labels)

    return _EpochLoop(cfg, model, "acc").run(train_epoch, evaluate)


def predict_relations(model, encs, batch_size=256):
    preds = []
    for start in range(0, len(encs), batch_size):
        probs = model.predict_probs(encs[start : start + batch_size])
        preds.extend(probs.argmax(axis=1).tolist())
    return preds


def _train_bag(cfg, train_instances, val_instances, relation_map, rng_init, rng_train):
    na = "NA"
    if relation_map is None:
        relation_map = build_relation_map(train_instances + val_instances, na_name=na)
    model = _build_model(cfg, train_instances, relation_map, rng_init)
    opt_state, opt_step = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    params = model.parameters()

    train_bags = group_into_bags(train_instances, na_name=relation_map.na_name)
    encoded_bags = []
    for bag in train_bags:
        encs, kept, _ = model.encode_instances(bag.instances)
        if encs:
            encoded_bags.append((encs, relation_map.id_of(bag.relation)))

    def train_epoch(epoch):
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(len(encoded_bags), cfg.batch_size, rng_train)):
            flat, scopes, labels = [], [], []
            for i in idx:
                encs, label = encoded_bags[i]
                scopes.append((len(flat), len(flat) + len(encs)))
                flat.extend(encs)
                labels.append(label)
            labels = np.array(labels)

            def loss_fn(reps):
                if cfg.aggregator == "att":
                    bag_reps, _ = bag_attention_aggregate(scopes, reps, labels, model.classifier)
                else:
                    bag_reps = bag_average_aggregate(scopes, reps)
                return T.cross_entropy(classify_logits(bag_reps, model.classifier), labels)

            zero_grads(params)
            loss = _train_step(model, flat, rng_train, loss_fn, cfg.adv_eps)
            _check_loss(loss, epoch, bi)
            opt_step(params, opt_state)
            total += loss * len(idx)
            count += len(idx)
        return total / count

    def evaluate():
        auc, _, _ = evaluate_bag_auc(model, val_instances)
        return auc

    return _EpochLoop(cfg, model, "auc").run(train_epoch, evaluate)


def evaluate_bag_auc(model, instances):
    """PR-AUC of bag-level predictions over pair-keyed evaluation bags."""
    relation_map = model.relation_map
    eval_bags, gold = group_into_bags(instances, na_name=relation_map.na_name, for_training=False)
    scored = []
    with T.no_grad():
        for bag in eval_bags:
            encs, _, _ = model.encode_instances(bag.instances)
            if not encs:
                continue
            reps, _ = model.encode_batch(encs)
            if model.aggregator == "att":
                scores = bag_inference_scores([(0, len(encs))], reps, model.classifier)[0]
            else:
                avg = bag_average_aggregate([(0, len(encs))], reps)
                logits = classify_logits(avg, model.classifier)
                scores = T.softmax_rows(logits).data[0]
            for r in range(1, len(relation_map)):
                scored.append((bag.key, relation_map.name_of(r), float(scores[r])))
    return evaluate_pr_auc(scored, gold)


def _train_fewshot(cfg, train_instances, val_instances, rng_init, rng_train):
    relation_map = build_relation_map(train_instances + val_instances)
    model = _build_model(cfg, train_instances, relation_map, rng_init, with_classifier=False)
    opt_state, opt_step = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    params = model.parameters()

    def encode_and_group(instances):
        by_rel = {}
        for inst in instances:
            encs, _, _ = model.encode_instances([inst])
            if encs:
                by_rel.setdefault(inst.relation, []).append(encs[0])
        return by_rel

    train_by_rel = encode_and_group(train_instances)
    val_by_rel = encode_and_group(val_instances)
    n, k, q = cfg.n_way, cfg.k_shot, cfg.q_query

    def train_epoch(epoch):
        total = 0.0
        for step in range(cfg.episodes_per_epoch):
            ep = sample_episode(train_by_rel, n, k, q, rng_train)
            flat = [inst for group in ep.support for inst in group] + ep.query

            def loss_fn(reps):
                support = T.slice_rows(reps, 0, n * k)
                query = T.slice_rows(reps, n * k, reps.data.shape[0])
                return T.cross_entropy(proto_logits(support, query, n, k), ep.query_labels)

            zero_grads(params)
            loss = _train_step(model, flat, rng_train, loss_fn, cfg.adv_eps)
            _check_loss(loss, epoch, step)
            opt_step(params, opt_state)
            total += loss
        return total / cfg.episodes_per_epoch

    def evaluate():
        return evaluate_fewshot(model, val_by_rel, n, k, q,
                                episodes=cfg.val_episodes, seed=cfg.seed + 2)

    return _EpochLoop(cfg, model, "acc").run(train_epoch, evaluate)


def evaluate_fewshot(model, by_relation, n, k, q, episodes=1000, seed=0):
    """Accuracy over a seeded bank of evaluation episodes."""
    rng = np.random.default_rng(seed)
    correct, total = 0, 0
    with T.no_grad():
        for _ in range(episodes):
            ep = sample_episode(by_relation, n, k, q, rng)
            flat = [inst for group in ep.support for inst in group] + ep.query
            reps, _ = model.encode_batch(flat)
            support = T.slice_rows(reps, 0, n * k)
            query = T.slice_rows(reps, n * k, reps.data.shape[0])
            preds = proto_logits(support, query, n, k).data.argmax(axis=1)
            correct += int((preds == ep.query_labels).sum())
            total += len(ep.query_labels)
    return correct / total
