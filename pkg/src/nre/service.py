"""HTTP inference service: real-time extraction from a trained checkpoint."""

from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .data import DataError, _char_span_to_token_span
from .framework import ReModel
from .tokenization import EntityMention, Instance, word_tokenize_with_spans

STOPWORDS = {
    "the", "a", "an", "in", "on", "at", "of", "and", "or", "but", "he", "she",
    "it", "they", "we", "i", "you", "his", "her", "its", "this", "that", "as",
    "to", "for", "with", "by", "from", "so", "if", "then",
}
_SENTENCE_ENDS = {".", "!", "?"}


def detect_mentions(text):
    """Naive rule-based mention detector: maximal runs of capitalized tokens.

    Returns (mention, char_start, char_end) triples. A run that is a single
    sentence-initial stopword is dropped. Stand-in for a real NER component.
    """
    triples = word_tokenize_with_spans(text)
    mentions = []
    run = []
    for i, (tok, s, e) in enumerate(triples):
        if text[s].isupper():
            run.append((i, s, e))
            continue
        _flush_run(run, triples, text, mentions)
        run = []
    _flush_run(run, triples, text, mentions)
    return mentions


def _flush_run(run, triples, text, mentions):
    if not run:
        return
    first_idx, start, _ = run[0]
    end = run[-1][2]
    sentence_initial = first_idx == 0 or triples[first_idx - 1][0] in _SENTENCE_ENDS
    if len(run) == 1 and sentence_initial and text[start:end].lower() in STOPWORDS:
        return
    mentions.append((text[start:end], start, end))


def _pair_instance(text, h_span, t_span):
    triples = word_tokenize_with_spans(text)
    tokens = [t for t, _, _ in triples]
    head = EntityMention(name=text[h_span[0]:h_span[1]], id="",
                         span=_char_span_to_token_span(triples, *h_span))
    tail = EntityMention(name=text[t_span[0]:t_span[1]], id="",
                         span=_char_span_to_token_span(triples, *t_span))
    return Instance(tokens=tokens, head=head, tail=tail, relation="NA")


def _entity_payload(text, span, entity_id):
    payload = {"mention": text[span[0]:span[1]], "span": [span[0], span[1]]}
    if entity_id:
        payload["id"] = entity_id
    return payload


def extract(model, text, h_span=None, t_span=None, top_k=1, h_id="", t_id=""):
    """Classify one annotated pair, or detect mentions and classify all pairs.

    Returns a list of result dicts with per-pair scores sorted descending.
    Entity ids are echoed back verbatim; they are never resolved.
    """
    rel_map = model.relation_map
    results = []
    if h_span is not None:
        pairs = [(tuple(h_span), tuple(t_span), h_id, t_id)]
        suppress_na = False
    else:
        mentions = detect_mentions(text)
        pairs = [(m1[1:], m2[1:], "", "")
                 for i, m1 in enumerate(mentions) for j, m2 in enumerate(mentions) if i != j]
        suppress_na = True
    for hs, ts, hid, tid in pairs:
        inst = _pair_instance(text, hs, ts)
        encs, _, skipped = model.encode_instances([inst])
        if skipped:
            raise DataError("entity span does not fit the model's max length")
        probs = model.predict_probs(encs)[0]
        order = probs.argsort()[::-1]
        if suppress_na and rel_map.name_of(int(order[0])) == rel_map.na_name:
            continue
        for r in order[:top_k]:
            results.append({
                "head": _entity_payload(text, hs, hid),
                "tail": _entity_payload(text, ts, tid),
                "relation": rel_map.name_of(int(r)),
                "score": float(probs[r]),
            })
    return results


class EntitySpan(BaseModel):
    pos: tuple[int, int]
    id: Optional[str] = None


class ExtractionRequest(BaseModel):
    text: str
    h: Optional[EntitySpan] = None
    t: Optional[EntitySpan] = None
    top_k: int = Field(default=1, ge=1)


def _validate_spans(req):
    if (req.h is None) != (req.t is None):
        raise HTTPException(status_code=400, detail="h and t spans must be given together")
    if req.h is None:
        return None, None
    for span in (req.h.pos, req.t.pos):
        if not (0 <= span[0] < span[1] <= len(req.text)):
            raise HTTPException(status_code=400, detail=f"span {list(span)} outside text bounds")
    hs, ts = req.h.pos, req.t.pos
    if hs[0] < ts[1] and ts[0] < hs[1]:
        raise HTTPException(status_code=400, detail="head and tail spans overlap")
    return hs, ts


def create_app(checkpoint_path=None, model=None, static_dir=None):
    """Build the service around one immutable sentence-level model snapshot."""
    if model is None and checkpoint_path is not None:
        model = ReModel.load(checkpoint_path)
    app = FastAPI(title="nre inference service")
    app.state.model = model

    @app.get("/health")
    def health():
        if app.state.model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return {"status": "ok", "model": app.state.model.architecture()}

    @app.post("/extract")
    def extract_endpoint(req: ExtractionRequest):
        if app.state.model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        hs, ts = _validate_spans(req)
        try:
            results = extract(app.state.model, req.text, h_span=hs, t_span=ts,
                              top_k=req.top_k,
                              h_id=req.h.id if req.h else "",
                              t_id=req.t.id if req.t else "")
        except DataError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"results": results}

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="static")
    return app
