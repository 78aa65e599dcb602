"""Dataset, relation-map, embedding and checkpoint I/O."""

import json
import struct

import numpy as np

from .tensor import Tensor
from .tokenization import EntityMention, Instance, SpanError, word_tokenize_with_spans

CKPT_MAGIC = b"NREC"
CKPT_VERSION = 1
DTYPE_F32 = 0


class DataError(ValueError):
    """Malformed dataset content."""


class FormatError(ValueError):
    """Malformed auxiliary file (embeddings, relation map)."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VocabHashError(CheckpointError):
    pass


class RelationMap:
    """Bijective relation name <-> dense id map with NA pinned to id 0."""

    def __init__(self, name_to_id, na_name="NA"):
        ids = sorted(name_to_id.values())
        if len(set(ids)) != len(name_to_id):
            raise FormatError("duplicate relation id")
        if na_name not in name_to_id or name_to_id[na_name] != 0:
            raise FormatError(f"NA relation {na_name!r} must map to id 0")
        if ids != list(range(len(ids))):
            raise FormatError("relation ids must be dense starting at 0")
        self.na_name = na_name
        self._name_to_id = dict(name_to_id)
        self._id_to_name = [None] * len(name_to_id)
        for name, i in name_to_id.items():
            self._id_to_name[i] = name

    def __len__(self):
        return len(self._id_to_name)

    def id_of(self, name):
        if name not in self._name_to_id:
            raise DataError(f"unknown relation name: {name!r}")
        return self._name_to_id[name]

    def name_of(self, idx):
        return self._id_to_name[idx]

    def to_dict(self):
        return dict(self._name_to_id)


def load_relation_map(path, na_name="NA"):
    with open(path, encoding="utf-8") as f:
        mapping = json.load(f)
    return RelationMap(mapping, na_name=na_name)


def _char_span_to_token_span(spans, char_start, char_end):
    """Map a [char_start, char_end) range onto the covering token range."""
    start = end = None
    for i, (_, s, e) in enumerate(spans):
        if s < char_end and e > char_start:
            if start is None:
                start = i
            end = i + 1
    if start is None:
        raise DataError(f"char span [{char_start},{char_end}) covers no token")
    return (start, end)


def _parse_entity(obj, spans):
    pos = obj["pos"]
    span = (int(pos[0]), int(pos[1]))
    if spans is not None:
        span = _char_span_to_token_span(spans, *span)
    return EntityMention(name=obj.get("name", ""), id=str(obj.get("id", "")), span=span)


def load_jsonl_dataset(path, relation_map=None):
    """Load a JSONL dataset of instances; returns (instances, skipped_count).

    Each line holds either pre-tokenized input ("token": [...], entity "pos"
    in token indices) or raw text ("text": ..., entity "pos" in char offsets).
    Malformed lines are skipped and counted; unknown relation names are a
    hard error when a relation map is given.
    """
    instances = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if "token" in obj:
                    tokens = [str(t).lower() for t in obj["token"]]
                    spans = None
                elif "text" in obj:
                    triples = word_tokenize_with_spans(obj["text"])
                    tokens = [t for t, _, _ in triples]
                    spans = triples
                else:
                    raise DataError("line has neither 'token' nor 'text'")
                relation = obj["relation"]
                if relation_map is not None:
                    relation_map.id_of(relation)  # unknown relation -> DataError
                inst = Instance(
                    tokens=tokens,
                    head=_parse_entity(obj["h"], spans),
                    tail=_parse_entity(obj["t"], spans),
                    relation=relation,
                )
            except DataError as exc:
                if "unknown relation" in str(exc):
                    raise DataError(f"line {lineno}: {exc}") from exc
                skipped += 1
                continue
            except (KeyError, ValueError, TypeError, SpanError):
                skipped += 1
                continue
            instances.append(inst)
    return instances, skipped


def save_jsonl_dataset(instances, path):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            obj = {
                "token": inst.tokens,
                "h": {"name": inst.head.name, "id": inst.head.id, "pos": list(inst.head.span)},
                "t": {"name": inst.tail.name, "id": inst.tail.id, "pos": list(inst.tail.span)},
                "relation": inst.relation,
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_pretrained_embeddings(path, vocab, table):
    """Overwrite rows of `table` (Tensor [V x d]) with vectors from a text file.

    Format: `token v1 v2 ... vd` per line. Returns the fraction of vocab
    tokens covered. Tokens absent from the file keep their current init.
    """
    d = table.data.shape[1]
    covered = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != d:
                raise FormatError(f"line {lineno}: expected {d} values, got {len(values)}")
            if token in vocab:
                idx = vocab.lookup(token)
                table.data[idx] = np.array([float(v) for v in values])
                covered.add(idx)
    return len(covered) / len(vocab)


def vocab_hash(tokens):
    """64-bit FNV-1a over tokens joined by newline in id order."""
    h = 0xCBF29CE484222325
    for byte in "\n".join(tokens).encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(path, architecture, vocab_tokens, relation_map, params):
    """Write the binary checkpoint format.

    Layout: magic "NREC"; u32 LE version; u64 LE metadata length + UTF-8 JSON
    metadata (architecture descriptor, vocab, vocab hash, relation map); then
    per parameter: u16 LE name length, name, u8 dtype tag (0 = f32), u8 rank,
    rank x u64 LE dims, raw LE f32 data. Parameters are written in sorted
    name order so save/load/save is byte-identical.
    """
    meta = {
        "architecture": architecture,
        "vocab": list(vocab_tokens),
        "vocab_hash": vocab_hash(vocab_tokens),
        "relations": relation_map.to_dict(),
        "na_name": relation_map.na_name,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class Checkpoint:
    """Parsed checkpoint: architecture descriptor, vocab, relations, params."""

    def __init__(self, architecture, vocab_tokens, relation_map, params):
        self.architecture = architecture
        self.vocab_tokens = vocab_tokens
        self.relation_map = relation_map
        self.params = params  # name -> float64 ndarray


def load_checkpoint(path, expected_vocab_tokens=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    if off + meta_len > len(blob):
        raise TruncatedCheckpointError("metadata extends past end of file")
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len

    tokens = meta["vocab"]
    if vocab_hash(tokens) != meta["vocab_hash"]:
        raise VocabHashError("stored vocab does not match recorded hash")
    if expected_vocab_tokens is not None and vocab_hash(expected_vocab_tokens) != meta["vocab_hash"]:
        raise VocabHashError("checkpoint was built with a different vocab")

    params = {}
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            dtype, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            end = off + 4 * count
            if dtype != DTYPE_F32 or end > len(blob) or len(name) != name_len:
                raise struct.error("bad block")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).astype(np.float64)
            off = end
        except struct.error as exc:
            raise TruncatedCheckpointError(f"truncated parameter block at offset {off}") from exc
        params[name] = arr
    rel_map = RelationMap(meta["relations"], na_name=meta.get("na_name", "NA"))
    return Checkpoint(meta["architecture"], tokens, rel_map, params)
