"""Corpus files, chronological splits, windowing and the synthetic regime benchmark.

File formats
------------
series CSV
    Header ``timestamp,<channel>,...``; one row per time step. Timestamps are
    numbers or ISO-8601 strings (converted to POSIX seconds) and must be
    strictly increasing. Empty cells are forward-filled; a leading gap is
    back-filled from the first observed value.
texts JSONL
    One object per line: ``{"start": t0, "end": t1, "text": "..."}`` with the
    same timestamp convention and ``end >= start``.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .text_embed import DEFAULT_MAX_LEN, build_prompt, overlaps

DEFAULT_SPLITS = (0.7, 0.1, 0.2)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class TextRecord:
    start: float
    end: float
    text: str


@dataclass
class MultimodalCorpus:
    timestamps: np.ndarray
    values: np.ndarray  # T x C
    channel_names: list
    texts: list = field(default_factory=list)
    frequency: Optional[float] = None
    splits: tuple = DEFAULT_SPLITS
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.timestamps) != self.values.shape[0]:
            raise CorpusError("timestamps and values have different lengths")
        if np.any(np.diff(self.timestamps) <= 0):
            raise CorpusError("timestamps must be strictly increasing")
        if self.frequency is None and len(self.timestamps) > 1:
            self.frequency = float(np.median(np.diff(self.timestamps)))
        if abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise CorpusError("split fractions must be non-negative and sum to 1")

    def __len__(self):
        return len(self.timestamps)

    @property
    def n_channels(self):
        return self.values.shape[1]

    def split_bounds(self):
        """Index ranges ``{"train": (0, a), "val": (a, b), "test": (b, T)}``, chronological."""
        n = len(self)
        # the epsilon keeps 0.7 + 0.1 from landing just below 0.8
        a = int(math.floor(self.splits[0] * n + 1e-9))
        b = int(math.floor((self.splits[0] + self.splits[1]) * n + 1e-9))
        return {"train": (0, a), "val": (a, b), "test": (b, n)}

    def texts_overlapping(self, t0, t1):
        return [r for r in self.texts if overlaps((r.start, r.end), (t0, t1))]


@dataclass
class TrainSample:
    """One channel's window: ``inputs`` (H) followed by ``target`` (L_p or the horizon)."""

    inputs: np.ndarray
    target: np.ndarray
    channel: int
    start: int
    window: tuple  # (first, last) lookback timestamp
    texts: list
    prompt: object = None


def _parse_time(raw, where):
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise CorpusError(f"{where}: cannot parse timestamp {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_series(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "timestamp":
            raise CorpusError(f"{path}:1: header must be 'timestamp,<channel>,...'")
        names = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CorpusError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            stamps.append(_parse_time(row[0], f"{path}:{lineno}"))
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "" or cell.lower() in ("nan", "na"):
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CorpusError(f"{path}:{lineno}: cannot parse value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise CorpusError(f"{path}: no data rows")
    stamps = np.array(stamps)
    bad = np.nonzero(np.diff(stamps) <= 0)[0]
    if bad.size:
        raise CorpusError(f"{path}:{bad[0] + 3}: timestamps are not strictly increasing")
    return stamps, _fill_gaps(np.array(rows, dtype=np.float64)), names


def _fill_gaps(values):
    out = values.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        ok = ~np.isnan(col)
        if not ok.any():
            raise CorpusError(f"channel {c + 1} has no observed values")
        idx = np.where(ok, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        filled = col[idx]
        first = np.argmax(ok)
        filled[:first] = col[first]
        out[:, c] = filled
    return out


def load_texts(path):
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                start = _parse_time(str(obj["start"]), f"{path}:{lineno}")
                end = _parse_time(str(obj["end"]), f"{path}:{lineno}")
                text = str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed text record ({exc})") from exc
            if end < start:
                raise CorpusError(f"{path}:{lineno}: text record has end < start ({text[:40]!r})")
            records.append(TextRecord(start, end, text))
    return records


def load_csv(series_path, texts_path=None, splits=DEFAULT_SPLITS):
    stamps, values, names = load_series(series_path)
    texts = load_texts(texts_path) if texts_path else []
    return MultimodalCorpus(stamps, values, names, texts, splits=tuple(splits))


def _fmt(x):
    return repr(float(x))


def write_csv(corpus, series_path, texts_path=None):
    with Path(series_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + list(corpus.channel_names))
        for t, row in zip(corpus.timestamps, corpus.values):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])
    if texts_path is not None:
        with Path(texts_path).open("w", encoding="utf-8") as fh:
            for r in corpus.texts:
                fh.write(json.dumps({"start": float(r.start), "end": float(r.end), "text": r.text},
                                    ensure_ascii=False) + "\n")


def count_windows(length, lookback, patch_len, stride):
    if length < lookback + patch_len:
        return 0
    return (length - lookback - patch_len) // stride + 1


def windows(corpus, lookback, patch_len, stride=None, split=None, vocab=None,
            max_len=DEFAULT_MAX_LEN, horizon=None):
    """Yield chronological windows per channel as :class:`TrainSample`.

    Each window is ``lookback`` inputs followed by ``horizon`` targets
    (default one patch). Windows lie entirely inside ``split`` when one is
    given. Text records attach by overlap with the lookback interval only.
    """
    stride = stride or patch_len
    target_len = horizon or patch_len
    lo, hi = corpus.split_bounds()[split] if split else (0, len(corpus))
    length = hi - lo
    starts = range(lo, lo + count_windows(length, lookback, target_len, stride) * stride, stride)
    for c in range(corpus.n_channels):
        col = corpus.values[:, c]
        for s in starts:
            t0, t1 = corpus.timestamps[s], corpus.timestamps[s + lookback - 1]
            recs = corpus.texts_overlapping(t0, t1)
            prompt = build_prompt(recs, (t0, t1), vocab, max_len) if vocab is not None else None
            yield TrainSample(
                inputs=col[s:s + lookback].copy(),
                target=col[s + lookback:s + lookback + target_len].copy(),
                channel=c,
                start=s,
                window=(t0, t1),
                texts=recs,
                prompt=prompt,
            )


# ---------------------------------------------------------------------------
# synthetic regime benchmark
# ---------------------------------------------------------------------------

REGIME_SIGN = {"surge": 1.0, "drop": -1.0, "flat": 0.0}

_TEMPLATES = (
    "analysts expect demand to {w} over the coming weeks",
    "latest market report signals prices will {w} next period",
    "officials say the outlook is {w} for the next period",
    "traders anticipate a {w} in the weeks ahead",
)


@dataclass
class SyntheticSpec:
    length: int = 4000
    period: float = 16.0
    noise: float = 0.1
    slope: float = 0.25
    segment: int = 16
    regimes: tuple = ("surge", "drop", "flat")
    heteroscedastic: bool = False
    hetero_scale: float = 2.0
    amplitude: float = 1.0
    n_channels: int = 1
    seed: int = 0
    splits: tuple = DEFAULT_SPLITS

    def to_dict(self):
        return asdict(self)


def generate_synthetic(spec):
    """Seasonal series whose per-segment trend is announced only in text.

    Every ``segment`` steps a regime is drawn i.i.d. from ``spec.regimes``;
    its slope (``+slope``, ``-slope`` or 0 per step) is added to a continuous
    level over that segment. A text record covering the preceding segment
    announces the regime, so the numeric lookback carries no information
    about it. With ``heteroscedastic`` the noise scale is multiplied by
    ``hetero_scale`` inside announced non-flat regimes.
    """
    rng = np.random.default_rng(spec.seed)
    n_seg = -(-spec.length // spec.segment)
    labels = rng.integers(0, len(spec.regimes), size=n_seg)
    names = [spec.regimes[i] for i in labels]
    slopes = np.array([REGIME_SIGN[n] * spec.slope for n in names])
    t = np.arange(spec.length)
    seg_of = t // spec.segment
    per_step = slopes[seg_of]
    level = np.cumsum(per_step)
    noise_scale = np.full(spec.length, spec.noise)
    if spec.heteroscedastic:
        moving = np.array([REGIME_SIGN[n] != 0.0 for n in names])[seg_of]
        noise_scale = np.where(moving, spec.noise * spec.hetero_scale, spec.noise)
    values = np.empty((spec.length, spec.n_channels))
    for c in range(spec.n_channels):
        phase = 2 * np.pi * c / max(spec.n_channels, 1)
        seasonal = spec.amplitude * np.sin(2 * np.pi * t / spec.period + phase)
        values[:, c] = seasonal + level + rng.normal(size=spec.length) * noise_scale
    texts = []
    for k in range(1, n_seg):
        a = (k - 1) * spec.segment
        b = min(k * spec.segment, spec.length) - 1
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        texts.append(TextRecord(float(a), float(b), template.format(w=names[k])))
    return MultimodalCorpus(
        timestamps=t.astype(np.float64),
        values=values,
        channel_names=[f"ch{c + 1}" for c in range(spec.n_channels)],
        texts=texts,
        frequency=1.0,
        splits=tuple(spec.splits),
        annotations={"regimes": names, "segment": spec.segment, "slopes": slopes, "noise_scale": noise_scale},
    )
