"""Feature engineering: meta imputation, time features, tag statistics,
log transforms, IQR target filtering and the canonical feature matrix.

Canonical column order (22 columns) is fixed so importance charts and
exported files stay stable across runs:

    log1p of the four author count fields,
    the five imputed video meta fields,
    year, month, day, hour, is_us_holiday, daypart one-hot (working,
    leisure, sleeping), post_age_norm,
    hashtag_count, mention_count, hashtag_freq_sum, mention_freq_sum.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np

from .errors import AllMissing, DegenerateRange, DomainError, InputError
from .ingest import COUNT_FIELDS, META_FIELDS, RecordTable, TARGETS

CANONICAL_FEATURES = (
    tuple(f"log1p_{c}" for c in COUNT_FIELDS)
    + META_FIELDS
    + ("year", "month", "day", "hour", "is_us_holiday")
    + ("daypart_working", "daypart_leisure", "daypart_sleeping")
    + ("post_age_norm",)
    + ("hashtag_count", "mention_count", "hashtag_freq_sum", "mention_freq_sum")
)

DAYPARTS = ("working", "leisure", "sleeping")

# A tag marker counts only at string start or after a char outside [A-Za-z0-9_].
_HASHTAG_RE = re.compile(r"(?<![A-Za-z0-9_])#([A-Za-z0-9_]+)")
_MENTION_RE = re.compile(r"(?<![A-Za-z0-9_])@([A-Za-z0-9_.]+)")


@dataclass(frozen=True)
class DaypartBounds:
    """Hour boundaries: sleeping [0, sleep_end), working [work_start, work_end),
    leisure otherwise."""

    sleep_end: int = 7
    work_start: int = 9
    work_end: int = 17


DEFAULT_DAYPART = DaypartBounds()


@dataclass
class MedianStats:
    per_author: dict[str, dict[str, float]]
    global_medians: dict[str, float]

    def to_json(self) -> dict:
        return {"per_author": self.per_author, "global": self.global_medians}

    @classmethod
    def from_json(cls, obj: dict) -> "MedianStats":
        return cls(per_author=obj["per_author"], global_medians=obj["global"])


@dataclass
class FrequencyTable:
    hashtag_freq: dict[str, int]
    mention_freq: dict[str, int]
    corpus_size: int

    def to_json(self) -> dict:
        return {
            "hashtag_freq": self.hashtag_freq,
            "mention_freq": self.mention_freq,
            "corpus_size": self.corpus_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FrequencyTable":
        return cls(
            hashtag_freq={k: int(v) for k, v in obj["hashtag_freq"].items()},
            mention_freq={k: int(v) for k, v in obj["mention_freq"].items()},
            corpus_size=int(obj["corpus_size"]),
        )


@dataclass
class TimeFeatures:
    year: int
    month: int
    day: int
    hour: int
    is_us_holiday: bool
    daypart: str
    post_age_norm: float


@dataclass
class FeatureMatrix:
    names: list[str]
    values: np.ndarray  # (n_rows, n_features) float64, no NaN/inf
    row_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise InputError("feature matrix shape does not match its column names")
        if len(self.row_ids) != self.values.shape[0]:
            raise InputError("feature matrix row_ids do not match its row count")
        if self.values.size and not np.isfinite(self.values).all():
            raise InputError("feature matrix contains non-finite entries")

    def subset(self, keep: np.ndarray) -> "FeatureMatrix":
        keep = np.asarray(keep)
        ids = [self.row_ids[i] for i in np.flatnonzero(keep)] if keep.dtype == bool else [
            self.row_ids[i] for i in keep
        ]
        return FeatureMatrix(names=list(self.names), values=self.values[keep], row_ids=ids)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["video_id"] + list(self.names))
            for vid, row in zip(self.row_ids, self.values):
                writer.writerow([vid] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureMatrix":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            names = header[1:]
            ids, rows = [], []
            for row in reader:
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
        values = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(names)))
        return cls(names=names, values=values, row_ids=ids)


# --- medians / imputation -----------------------------------------------------


def fit_median_stats(train: RecordTable) -> MedianStats:
    """Per-author and global medians of the five video meta fields.

    Midpoint rule for even counts; only non-missing training values are used.
    A field with zero non-missing training values cannot be imputed at all.
    """
    if not train.rows:
        raise InputError("cannot fit median stats on an empty table")
    global_medians: dict[str, float] = {}
    per_author: dict[str, dict[str, float]] = defaultdict(dict)
    for name in META_FIELDS:
        all_vals = [r.meta(name) for r in train.rows if r.meta(name) is not None]
        if not all_vals:
            raise AllMissing(name)
        global_medians[name] = float(np.median(np.asarray(all_vals, dtype=np.float64)))
        groups: dict[str, list[float]] = defaultdict(list)
        for r in train.rows:
            v = r.meta(name)
            if v is not None:
                groups[r.author_id].append(v)
        for author, vals in groups.items():
            per_author[author][name] = float(np.median(np.asarray(vals, dtype=np.float64)))
    return MedianStats(per_author=dict(per_author), global_medians=global_medians)


def impute_video_meta(table: RecordTable, stats: MedianStats) -> RecordTable:
    """Fill missing meta fields: per-author median first, global median else.

    Non-missing values are never altered.
    """
    rows = []
    for r in table.rows:
        fills = {}
        for name in META_FIELDS:
            if r.meta(name) is None:
                author_entry = stats.per_author.get(r.author_id, {})
                fills[name] = author_entry.get(name, stats.global_medians[name])
        rows.append(replace(r, **fills) if fills else r)
    return RecordTable(rows=rows)


# --- time features --------------------------------------------------------------


def classify_daypart(hour: int, bounds: DaypartBounds = DEFAULT_DAYPART) -> str:
    if not 0 <= hour <= 23:
        raise InputError(f"hour out of range: {hour}")
    if hour < bounds.sleep_end:
        return "sleeping"
    if bounds.work_start <= hour < bounds.work_end:
        return "working"
    return "leisure"


def _nth_weekday(year: int, month: int, weekday: int, n: int) -> date:
    first = date(year, month, 1)
    offset = (weekday - first.weekday()) % 7
    return date(year, month, 1 + offset + 7 * (n - 1))


def _last_weekday(year: int, month: int, weekday: int) -> date:
    if month == 12:
        nxt = date(year + 1, 1, 1)
    else:
        nxt = date(year, month + 1, 1)
    last = nxt.toordinal() - 1
    d = date.fromordinal(last)
    return date.fromordinal(last - (d.weekday() - weekday) % 7)


def is_us_holiday(d: date) -> bool:
    """Built-in US holiday rules; no observed-day shifting.

    Fixed dates: Jan 1, Jun 19, Jul 4, Nov 11, Dec 25. Rule-based: MLK (3rd
    Mon Jan), Presidents (3rd Mon Feb), Memorial (last Mon May), Labor (1st
    Mon Sep), Columbus (2nd Mon Oct), Thanksgiving (4th Thu Nov).
    """
    if (d.month, d.day) in {(1, 1), (6, 19), (7, 4), (11, 11), (12, 25)}:
        return True
    rules = (
        _nth_weekday(d.year, 1, 0, 3),
        _nth_weekday(d.year, 2, 0, 3),
        _last_weekday(d.year, 5, 0),
        _nth_weekday(d.year, 9, 0, 1),
        _nth_weekday(d.year, 10, 0, 2),
        _nth_weekday(d.year, 11, 3, 4),
    )
    return d in rules


def derive_time_features(
    create_time: int,
    train_min: int,
    train_max: int,
    bounds: DaypartBounds = DEFAULT_DAYPART,
) -> TimeFeatures:
    """Calendar fields in UTC plus min-max post-age normalization.

    post_age_norm is 0 at the earliest training timestamp and 1 at the
    latest; test rows may fall outside [0, 1] (no clamping).
    """
    if train_min == train_max:
        raise DegenerateRange("train_min equals train_max")
    dt = datetime.fromtimestamp(create_time, tz=timezone.utc)
    return TimeFeatures(
        year=dt.year,
        month=dt.month,
        day=dt.day,
        hour=dt.hour,
        is_us_holiday=is_us_holiday(dt.date()),
        daypart=classify_daypart(dt.hour, bounds),
        post_age_norm=(create_time - train_min) / (train_max - train_min),
    )


def train_time_range(train: RecordTable) -> tuple[int, int]:
    times = [r.create_time for r in train.rows]
    if not times:
        raise InputError("empty training table has no time range")
    lo, hi = min(times), max(times)
    if lo == hi:
        raise DegenerateRange("all training rows share one create_time")
    return lo, hi


# --- tags -----------------------------------------------------------------------


def tokenize_tags(caption: str) -> tuple[list[str], list[str]]:
    """Extract hashtags and mentions, lowercased, duplicates kept, in order."""
    hashtags = [m.lower() for m in _HASHTAG_RE.findall(caption)]
    mentions = [m.lower() for m in _MENTION_RE.findall(caption)]
    return hashtags, mentions


def fit_tag_frequency(captions: list[str]) -> FrequencyTable:
    """Occurrence counts (not per-caption presence) across the corpus."""
    h_counter: Counter[str] = Counter()
    m_counter: Counter[str] = Counter()
    for caption in captions:
        h, m = tokenize_tags(caption)
        h_counter.update(h)
        m_counter.update(m)
    return FrequencyTable(
        hashtag_freq=dict(h_counter), mention_freq=dict(m_counter), corpus_size=len(captions)
    )


def tag_features(caption: str, freq: FrequencyTable) -> tuple[int, int, float, float]:
    """(hashtag_count, mention_count, hashtag_freq_sum, mention_freq_sum).

    Frequency sums add the corpus frequency once per occurrence; unknown tags
    contribute 0.
    """
    hashtags, mentions = tokenize_tags(caption)
    return (
        len(hashtags),
        len(mentions),
        float(sum(freq.hashtag_freq.get(t, 0) for t in hashtags)),
        float(sum(freq.mention_freq.get(t, 0) for t in mentions)),
    )


# --- transforms ------------------------------------------------------------------


def log1p_value(x):
    """ln(1+x) for non-negative scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("log1p requires non-negative input")
    out = np.log1p(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def expm1_value(y):
    """exp(y)-1 for non-negative scalars or arrays (inverse of log1p_value)."""
    arr = np.asarray(y, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("expm1 inverse requires non-negative input")
    out = np.expm1(arr)
    return float(out) if np.isscalar(y) or arr.ndim == 0 else out


def to_raw_predictions(z) -> np.ndarray:
    """Inverse-transform model outputs: max(expm1(z), 0), elementwise."""
    return np.maximum(np.expm1(np.asarray(z, dtype=np.float64)), 0.0)


# --- IQR filtering ----------------------------------------------------------------


def _quantile_linear(sorted_vals: np.ndarray, p: float) -> float:
    """Order-statistic quantile with linear interpolation at p*(n-1)."""
    n = len(sorted_vals)
    pos = p * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo]))


def iqr_filter(values, k: float = 1.5) -> np.ndarray:
    """Keep mask: value within [Q1 - k*IQR, Q3 + k*IQR]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InputError("iqr_filter requires a non-empty sequence")
    if k <= 0:
        raise InputError("iqr_filter requires k > 0")
    s = np.sort(arr)
    q1 = _quantile_linear(s, 0.25)
    q3 = _quantile_linear(s, 0.75)
    iqr = q3 - q1
    return (arr >= q1 - k * iqr) & (arr <= q3 + k * iqr)


def iqr_keep_rows(train: RecordTable, k: float = 1.5) -> tuple[np.ndarray, dict[str, list[str]]]:
    """Row keep mask over training rows; a row is dropped if ANY of its four
    raw target values is an IQR outlier. Returns (mask, per-target dropped ids).
    """
    keep = np.ones(len(train), dtype=bool)
    flagged: dict[str, list[str]] = {}
    ids = train.ids()
    for t in TARGETS:
        mask = iqr_filter(train.target_vector(t), k)
        flagged[t] = [ids[i] for i in np.flatnonzero(~mask)]
        keep &= mask
    return keep, flagged


# --- assembly ---------------------------------------------------------------------


def assemble_feature_matrix(
    table: RecordTable,
    stats: MedianStats,
    freq: FrequencyTable,
    time_range: tuple[int, int],
    bounds: DaypartBounds = DEFAULT_DAYPART,
) -> FeatureMatrix:
    """Build the canonical 22-column matrix for a record table.

    Deterministic and permutation-equivariant: permuting input rows permutes
    output rows identically.
    """
    imputed = impute_video_meta(table, stats)
    train_min, train_max = time_range
    rows = np.empty((len(imputed), len(CANONICAL_FEATURES)), dtype=np.float64)
    for i, r in enumerate(imputed.rows):
        tf = derive_time_features(r.create_time, train_min, train_max, bounds)
        h_count, m_count, h_sum, m_sum = tag_features(r.caption, freq)
        rows[i] = [
            math.log1p(r.author_follower_count),
            math.log1p(r.author_following_count),
            math.log1p(r.author_total_heart_count),
            math.log1p(r.author_total_video_count),
            r.duration_s,
            r.frame_count,
            r.fps,
            r.width,
            r.height,
            tf.year,
            tf.month,
            tf.day,
            tf.hour,
            1.0 if tf.is_us_holiday else 0.0,
            1.0 if tf.daypart == "working" else 0.0,
            1.0 if tf.daypart == "leisure" else 0.0,
            1.0 if tf.daypart == "sleeping" else 0.0,
            tf.post_age_norm,
            h_count,
            m_count,
            h_sum,
            m_sum,
        ]
    return FeatureMatrix(names=list(CANONICAL_FEATURES), values=rows, row_ids=imputed.ids())
