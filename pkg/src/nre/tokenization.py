"""Word- and subword-level tokenization with entity-relative position features.

Converts raw text or pre-tokenized instances into the fixed-length id arrays
(token / position / segment / mask) the encoders consume.
"""

import string
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, BLANK = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[BLANK]")

# default encoding geometry; fits the cited CNN settings
MAX_LENGTH = 128
MAX_POS = 100

_PUNCT = set(string.punctuation)


class SpanError(ValueError):
    """Raised for invalid or truncation-destroyed entity spans."""


def word_tokenize(text):
    """Lowercase, split on whitespace, split ASCII punctuation into own tokens."""
    return [tok for tok, _, _ in word_tokenize_with_spans(text)]


def word_tokenize_with_spans(text):
    """Tokenize keeping (lowercased token, char start, char end) triples.

    The char offsets index the original text, so callers can recover the
    original casing or map char-offset annotations to token spans.
    """
    out = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        if text[i] in _PUNCT:
            out.append((text[i].lower(), i, i + 1))
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in _PUNCT:
            j += 1
        out.append((text[i:j].lower(), i, j))
        i = j
    return out


class Vocab:
    """Dense 0-based token->id map with reserved PAD/UNK/BLANK ids."""

    def __init__(self):
        self._token_to_id = {tok: i for i, tok in enumerate(RESERVED)}
        self._id_to_token = list(RESERVED)
        self.frozen = False

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def add(self, token):
        if self.frozen:
            raise ValueError("vocab is frozen")
        if token not in self._token_to_id:
            self._token_to_id[token] = len(self._id_to_token)
            self._id_to_token.append(token)
        return self._token_to_id[token]

    def freeze(self):
        self.frozen = True
        return self

    def lookup(self, token):
        return self._token_to_id.get(token, UNK)

    def id_to_token(self, idx):
        return self._id_to_token[idx]

    @property
    def tokens(self):
        return list(self._id_to_token)

    @classmethod
    def from_tokens(cls, tokens):
        """Rebuild a frozen vocab from a full id-ordered token list."""
        v = cls()
        if tokens[:3] != list(RESERVED):
            raise ValueError("token list must start with the reserved tokens")
        for tok in tokens[3:]:
            v.add(tok)
        return v.freeze()


def build_vocab(instances, min_count=1):
    """Vocab of all tokens with frequency >= min_count.

    Id order is deterministic: frequency descending, then lexicographic.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = {}
    for inst in instances:
        for tok in inst.tokens:
            counts[tok] = counts.get(tok, 0) + 1
    vocab = Vocab()
    for tok in sorted(counts, key=lambda t: (-counts[t], t)):
        if counts[tok] >= min_count:
            vocab.add(tok)
    return vocab.freeze()


@dataclass
class EntityMention:
    name: str
    id: str
    span: tuple  # [start, end) in token indices


@dataclass
class Instance:
    """One sentence with head/tail entity mentions and a relation label."""

    tokens: list
    head: EntityMention
    tail: EntityMention
    relation: str

    def __post_init__(self):
        n = len(self.tokens)
        for ent in (self.head, self.tail):
            s, e = ent.span
            if not (0 <= s < e <= n):
                raise SpanError(f"entity span [{s},{e}) invalid for {n} tokens")
        if self.head.span == self.tail.span:
            raise SpanError("head and tail spans must differ")


@dataclass
class EncodedInstance:
    """Fixed-length id arrays for one instance."""

    token_ids: np.ndarray
    pos1_ids: np.ndarray
    pos2_ids: np.ndarray
    segment_ids: np.ndarray  # 0 pad, 1/2/3 sentence pieces
    attention_mask: np.ndarray  # 1 real, 0 pad
    head_span: tuple = (0, 0)
    tail_span: tuple = (0, 0)


def encode_instance(inst, vocab, max_length=MAX_LENGTH, max_pos=MAX_POS):
    """Encode an instance into fixed-length token/position/segment id arrays.

    Position ids are clamp(i - entity_start, -max_pos, +max_pos) + max_pos.
    Segment boundaries: order the entities by start; piece 1 ends at the first
    entity's end, piece 2 at the second's end, piece 3 runs to the sentence end.
    Truncation keeps the prefix and rejects instances whose spans don't fit.
    """
    n = len(inst.tokens)
    if inst.head.span[1] > max_length or inst.tail.span[1] > max_length:
        raise SpanError(
            f"entity span beyond max_length={max_length}: head={inst.head.span} tail={inst.tail.span}"
        )
    real = min(n, max_length)
    token_ids = np.zeros(max_length, dtype=np.int64)  # PAD = 0
    for i in range(real):
        token_ids[i] = vocab.lookup(inst.tokens[i])

    idx = np.arange(max_length)
    pos1 = np.clip(idx - inst.head.span[0], -max_pos, max_pos) + max_pos
    pos2 = np.clip(idx - inst.tail.span[0], -max_pos, max_pos) + max_pos

    first, second = sorted((inst.head.span, inst.tail.span))
    b1, b2 = first[1], second[1]
    segments = np.zeros(max_length, dtype=np.int64)
    for i in range(real):
        if i < b1:
            segments[i] = 1
        elif i < b2:
            segments[i] = 2
        else:
            segments[i] = 3

    mask = np.zeros(max_length, dtype=np.int64)
    mask[:real] = 1
    return EncodedInstance(
        token_ids=token_ids,
        pos1_ids=pos1.astype(np.int64),
        pos2_ids=pos2.astype(np.int64),
        segment_ids=segments,
        attention_mask=mask,
        head_span=inst.head.span,
        tail_span=inst.tail.span,
    )


# ---------------------------------------------------------------------------
# subword level

SUB_PAD, SUB_UNK, SUB_CLS, SUB_SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SUB_HEAD, SUB_HEAD_END, SUB_TAIL, SUB_TAIL_END = "[HEAD]", "[/HEAD]", "[TAIL]", "[/TAIL]"
SPECIALS = (SUB_PAD, SUB_UNK, SUB_CLS, SUB_SEP, SUB_HEAD, SUB_HEAD_END, SUB_TAIL, SUB_TAIL_END)
CONT_PREFIX = "##"


class SubwordVocab:
    """Greedy-longest-match subword vocab with ## continuation convention."""

    def __init__(self, pieces):
        self._token_to_id = {}
        self._id_to_token = []
        for tok in SPECIALS:
            self._add(tok)
        alphabet = set()
        for piece in pieces:
            self._add(piece)
            bare = piece[len(CONT_PREFIX):] if piece.startswith(CONT_PREFIX) else piece
            alphabet.update(bare)
        # every single character must be present so greedy matching terminates
        for ch in sorted(alphabet):
            self._add(ch)
            self._add(CONT_PREFIX + ch)

    def _add(self, tok):
        if tok not in self._token_to_id:
            self._token_to_id[tok] = len(self._id_to_token)
            self._id_to_token.append(tok)

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, piece):
        return piece in self._token_to_id

    def lookup(self, piece):
        return self._token_to_id.get(piece, self._token_to_id[SUB_UNK])

    def id_to_token(self, idx):
        return self._id_to_token[idx]

    @property
    def tokens(self):
        return list(self._id_to_token)

    @classmethod
    def from_tokens(cls, tokens):
        """Rebuild from a full id-ordered piece list (specials first)."""
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("piece list must start with the special tokens")
        v = cls.__new__(cls)
        v._token_to_id = {tok: i for i, tok in enumerate(tokens)}
        v._id_to_token = list(tokens)
        return v


def wordpiece_tokenize(text, vocab):
    """Greedy longest-match-first subword split within each whitespace word.

    A word containing any character outside the vocab alphabet becomes [UNK].
    Special tokens are never split.
    """
    pieces = []
    for word in text.split():
        if word in SPECIALS:
            pieces.append(word)
            continue
        pieces.extend(_wordpiece_word(word.lower(), vocab))
    return pieces


def _wordpiece_word(word, vocab):
    out = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONT_PREFIX + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [SUB_UNK]
        out.append(match)
        start = end
    return out


def insert_entity_markers(inst, vocab):
    """Subword-encode with [HEAD]/[TAIL] markers around the entity mentions.

    Returns (subword ids, head marker index, tail marker index). Marker order
    follows text order; marker indices point at the opening markers.
    """
    (hs, he), (ts, te) = inst.head.span, inst.tail.span
    if hs < te and ts < he:
        raise SpanError(f"overlapping entity spans: head={inst.head.span} tail={inst.tail.span}")
    opens = {hs: SUB_HEAD, ts: SUB_TAIL}
    closes = {he: SUB_HEAD_END, te: SUB_TAIL_END}
    pieces = [SUB_CLS]
    head_idx = tail_idx = -1
    for i in range(len(inst.tokens) + 1):
        if i in closes:
            pieces.append(closes[i])
        if i in opens:
            if opens[i] is SUB_HEAD:
                head_idx = len(pieces)
            else:
                tail_idx = len(pieces)
            pieces.append(opens[i])
        if i < len(inst.tokens):
            pieces.extend(_wordpiece_word(inst.tokens[i].lower(), vocab))
    pieces.append(SUB_SEP)
    ids = [vocab.lookup(p) for p in pieces]
    return ids, head_idx, tail_idx
