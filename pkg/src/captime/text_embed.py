"""Word-level tokenizer, vocabulary file format and frozen-table embedding."""
import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, QUERY, SEP = "<pad>", "<unk>", "<query>", "<sep>"
SPECIALS = (PAD, UNK, QUERY, SEP)
PAD_ID, UNK_ID, QUERY_ID, SEP_ID = 0, 1, 2, 3
DEFAULT_MAX_LEN = 256

_WORD = re.compile(r"\w+")


class Vocabulary:
    """Bijective token <-> id map with four reserved ids at the front."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def token(self, idx):
        return self.itos[idx]

    @classmethod
    def build(cls, texts, min_freq=2):
        """Vocabulary of every word seen at least ``min_freq`` times; order is by count, then alphabetical."""
        counts = Counter()
        for text in texts:
            counts.update(m.group().lower() for m in _WORD.finditer(text))
        kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError(f"vocabulary file must start with {SPECIALS}")
        return cls(lines[4:])

    def digest(self):
        return hashlib.sha256("".join(t + "\n" for t in self.itos).encode("utf-8")).hexdigest()


@dataclass
class TextPrompt:
    token_ids: list
    spans: list = field(default_factory=list)  # (start_byte, end_byte) into ``source``
    source: str = ""

    def __len__(self):
        return len(self.token_ids)


def _segments(text):
    """(lowercased word, byte start, byte end) for each word in ``text``."""
    out = []
    byte_pos = 0
    char_pos = 0
    for m in _WORD.finditer(text):
        byte_pos += len(text[char_pos:m.start()].encode("utf-8"))
        width = len(m.group().encode("utf-8"))
        out.append((m.group().lower(), byte_pos, byte_pos + width))
        byte_pos += width
        char_pos = m.end()
    return out


def tokenize(text, vocab, max_len=DEFAULT_MAX_LEN):
    """Lowercase, split on whitespace and punctuation, map through ``vocab``.

    Unknown words map to ``<unk>``; output is truncated to ``max_len`` and an
    empty result becomes a single ``<pad>``.
    """
    segs = _segments(text)[:max_len]
    if not segs:
        return TextPrompt([PAD_ID], [(0, 0)], text)
    return TextPrompt([vocab.id(w) for w, _, _ in segs], [(a, b) for _, a, b in segs], text)


def embed(prompt, table):
    """Gather rows of the frozen ``table`` (V x D numpy array) for each token id."""
    table = table.data if hasattr(table, "data") and not isinstance(table, np.ndarray) else table
    ids = np.asarray(prompt.token_ids if isinstance(prompt, TextPrompt) else prompt, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for a table of {table.shape[0]} rows")
    return table[ids].copy()


def embed_batch(prompts, table):
    """Right-padded B x N_s x D embeddings plus a B x N_s mask of real tokens."""
    table = table.data if hasattr(table, "data") and not isinstance(table, np.ndarray) else table
    n_s = max(len(p) for p in prompts)
    out = np.zeros((len(prompts), n_s, table.shape[1]))
    mask = np.zeros((len(prompts), n_s), dtype=bool)
    for i, p in enumerate(prompts):
        e = embed(p, table)
        out[i, : len(e)] = e
        mask[i, : len(e)] = True
    return out, mask


def overlaps(interval, window):
    """Closed-interval overlap; touching at a single instant counts."""
    return interval[0] <= window[1] and interval[1] >= window[0]


def _record_parts(rec):
    if hasattr(rec, "start"):
        return (rec.start, rec.end), rec.text
    interval, text = rec
    return tuple(interval), text


def build_prompt(texts, window, vocab, max_len=DEFAULT_MAX_LEN):
    """Tokenize every text overlapping ``window`` in chronological order, joined by ``<sep>``.

    ``texts`` holds ``((start, end), text)`` pairs or objects with
    ``start``/``end``/``text`` attributes.
    """
    hits = []
    for order, rec in enumerate(texts):
        interval, text = _record_parts(rec)
        if overlaps(interval, window):
            hits.append((interval[0], interval[1], order, text))
    hits.sort(key=lambda r: r[:3])
    if not hits:
        return TextPrompt([PAD_ID], [(0, 0)], "")
    ids, spans = [], []
    source = ""
    for k, (_, _, _, text) in enumerate(hits):
        base = len(source.encode("utf-8"))
        if k:
            ids.append(SEP_ID)
            spans.append((base, base + 1))
            source += "\n"
            base += 1
        for w, a, b in _segments(text):
            ids.append(vocab.id(w))
            spans.append((base + a, base + b))
        source += text
    if not ids:
        return TextPrompt([PAD_ID], [(0, 0)], source)
    return TextPrompt(ids[:max_len], spans[:max_len], source)
