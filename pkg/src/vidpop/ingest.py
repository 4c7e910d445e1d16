"""Dataset bundle: tabular CSV + per-source embedding files + manifest.

File formats
------------
Tabular CSV (UTF-8, comma separated, quoted captions), header exactly::

    video_id,author_id,create_time,caption,author_follower_count,
    author_following_count,author_total_heart_count,author_total_video_count,
    duration_s,frame_count,fps,width,height[,comment,heart,play,share]

Embedding file v1, one per source, LF line endings::

    #popembed v1 source=<name> id=<1-6> dim=<D>
    <video_id><TAB><f1> <f2> ... <fD>

Lines after the first that start with ``#`` are treated as comments (writers
may record e.g. a pooling rule there). Floats are written as the shortest
decimal that round-trips to the same binary64 value, so write-then-load is
bit-exact.

Manifest JSON::

    {"train_csv": path, "test_csv": path, "embeddings": {"1": path, ...},
     "max_missing_frac": real}

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    CoverageBelowThreshold,
    DimMismatch,
    DuplicateVideoId,
    InputError,
    MalformedRow,
    ManifestError,
    ManifestMissingSource,
    MissingColumn,
    NonFiniteValue,
)
from .util import derive_seed, dump_json, fmt_float, load_json

SOURCE_REGISTRY = {
    1: "VideoMAE",
    2: "ViViT",
    3: "TimeSformer",
    4: "X-CLIP",
    5: "LLaVA-NeXT",
    6: "InternVideo2",
}
TEXT_SOURCES = frozenset({5, 6})

TARGETS = ("comment", "heart", "play", "share")
META_FIELDS = ("duration_s", "frame_count", "fps", "width", "height")
COUNT_FIELDS = (
    "author_follower_count",
    "author_following_count",
    "author_total_heart_count",
    "author_total_video_count",
)
BASE_COLUMNS = (
    "video_id",
    "author_id",
    "create_time",
    "caption",
) + COUNT_FIELDS + META_FIELDS

DEFAULT_MAX_MISSING_FRAC = 0.25

_HEADER_RE = re.compile(r"^#popembed v1 source=(.+) id=([1-6]) dim=([1-9][0-9]*)$")


@dataclass
class Record:
    video_id: str
    author_id: str
    create_time: int
    caption: str
    author_follower_count: int
    author_following_count: int
    author_total_heart_count: int
    author_total_video_count: int
    duration_s: float | None = None
    frame_count: float | None = None
    fps: float | None = None
    width: float | None = None
    height: float | None = None
    targets: dict[str, float] | None = None

    def meta(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass
class RecordTable:
    rows: list[Record]

    def ids(self) -> list[str]:
        return [r.video_id for r in self.rows]

    def by_id(self) -> dict[str, Record]:
        return {r.video_id: r for r in self.rows}

    def target_vector(self, target: str) -> np.ndarray:
        vals = []
        for r in self.rows:
            if r.targets is None:
                raise InputError(f"record {r.video_id} has no targets")
            vals.append(r.targets[target])
        return np.asarray(vals, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class EmbeddingSet:
    source_id: int
    source_name: str
    dim: int
    vectors: dict[str, np.ndarray]


@dataclass
class DatasetBundle:
    train: RecordTable
    test: RecordTable
    embeddings: dict[int, EmbeddingSet]
    manifest_path: str = ""
    max_missing_frac: float = DEFAULT_MAX_MISSING_FRAC
    missing_ids: dict[int, list[str]] = field(default_factory=dict)

    def coverage_report(self) -> dict:
        total = len(self.train) + len(self.test)
        report = {}
        for sid in sorted(self.embeddings):
            missing = self.missing_ids.get(sid, [])
            report[str(sid)] = {
                "source_name": self.embeddings[sid].source_name,
                "dim": self.embeddings[sid].dim,
                "missing_count": len(missing),
                "missing_frac": (len(missing) / total) if total else 0.0,
            }
        return report


# --- tabular CSV ------------------------------------------------------------


def _parse_count(cell: str, line: int, name: str) -> int:
    s = cell.strip()
    try:
        value = int(s)
    except ValueError:
        try:
            f = float(s)
        except ValueError:
            raise MalformedRow(line, f"{name}={cell!r} is not an integer") from None
        if not (math.isfinite(f) and f.is_integer()):
            raise MalformedRow(line, f"{name}={cell!r} is not an integer") from None
        value = int(f)
    if value < 0:
        raise MalformedRow(line, f"{name}={cell!r} is negative")
    return value


def _parse_optional_meta(cell: str) -> float | None:
    # Unparseable, non-finite or negative optional cells all count as missing;
    # a RecordTable never stores NaN.
    s = cell.strip()
    if not s:
        return None
    try:
        v = float(s)
    except ValueError:
        return None
    if not math.isfinite(v) or v < 0:
        return None
    return v


def _parse_target(cell: str, line: int, name: str) -> float:
    try:
        v = float(cell.strip())
    except ValueError:
        raise MalformedRow(line, f"target {name}={cell!r} is not a number") from None
    if not math.isfinite(v) or v < 0:
        raise MalformedRow(line, f"target {name}={cell!r} must be a non-negative real")
    return v


def load_tabular(path: str | Path, has_targets: bool) -> RecordTable:
    """Parse a tabular CSV into a RecordTable.

    Mandatory-field failures raise MalformedRow with the CSV line number;
    unparseable optional meta cells become missing values.
    """
    expected = list(BASE_COLUMNS) + (list(TARGETS) if has_targets else [])
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(expected[0]) from None
        if header != expected:
            for name in expected:
                if name not in header:
                    raise MissingColumn(name)
            raise MalformedRow(1, f"unexpected header {header!r}")

        rows: list[Record] = []
        seen: set[str] = set()
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(expected):
                raise MalformedRow(line, f"expected {len(expected)} cells, got {len(row)}")
            video_id = row[0].strip()
            author_id = row[1].strip()
            if not video_id or not author_id:
                raise MalformedRow(line, "empty video_id or author_id")
            if video_id in seen:
                raise DuplicateVideoId(video_id)
            seen.add(video_id)
            try:
                create_time = int(row[2].strip())
            except ValueError:
                raise MalformedRow(line, f"create_time={row[2]!r} is not an integer") from None
            counts = [_parse_count(row[4 + i], line, COUNT_FIELDS[i]) for i in range(4)]
            meta = {META_FIELDS[i]: _parse_optional_meta(row[8 + i]) for i in range(5)}
            targets = None
            if has_targets:
                targets = {t: _parse_target(row[13 + i], line, t) for i, t in enumerate(TARGETS)}
            rows.append(
                Record(
                    video_id=video_id,
                    author_id=author_id,
                    create_time=create_time,
                    caption=row[3],
                    author_follower_count=counts[0],
                    author_following_count=counts[1],
                    author_total_heart_count=counts[2],
                    author_total_video_count=counts[3],
                    targets=targets,
                    **meta,
                )
            )
    return RecordTable(rows=rows)


def write_tabular(table: RecordTable, path: str | Path, include_targets: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(BASE_COLUMNS) + (list(TARGETS) if include_targets else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in table.rows:
            row = [
                r.video_id,
                r.author_id,
                str(r.create_time),
                r.caption,
                str(r.author_follower_count),
                str(r.author_following_count),
                str(r.author_total_heart_count),
                str(r.author_total_video_count),
            ]
            for name in META_FIELDS:
                v = r.meta(name)
                row.append("" if v is None else fmt_float(v))
            if include_targets:
                if r.targets is None:
                    raise InputError(f"record {r.video_id} lacks targets required for writing")
                row.extend(fmt_float(r.targets[t]) for t in TARGETS)
            writer.writerow(row)


def _peek_has_targets(path: str | Path) -> bool:
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        header = next(csv.reader(fh), [])
    return header == list(BASE_COLUMNS) + list(TARGETS)


# --- embedding files --------------------------------------------------------


def load_embeddings(path: str | Path) -> EmbeddingSet:
    """Parse an embedding file v1 into an EmbeddingSet (bit-exact floats)."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        m = _HEADER_RE.match(first)
        if not m:
            raise BadHeader(f"{path}: bad or missing v1 header line: {first!r}")
        name, sid, dim = m.group(1), int(m.group(2)), int(m.group(3))
        if SOURCE_REGISTRY.get(sid) != name:
            raise BadHeader(
                f"{path}: source name {name!r} does not match registry entry "
                f"{SOURCE_REGISTRY.get(sid)!r} for id {sid}"
            )
        vectors: dict[str, np.ndarray] = {}
        for line_num, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                continue
            vid, tab, payload = line.partition("\t")
            if not tab:
                raise DimMismatch(line_num, "missing TAB separator")
            toks = payload.split()
            if len(toks) != dim:
                raise DimMismatch(line_num, f"expected {dim} floats, got {len(toks)}")
            try:
                vals = [float(t) for t in toks]
            except ValueError:
                raise NonFiniteValue(line_num, "unparseable float") from None
            if not all(math.isfinite(v) for v in vals):
                raise NonFiniteValue(line_num)
            vectors[vid] = np.asarray(vals, dtype=np.float64)
    return EmbeddingSet(source_id=sid, source_name=name, dim=dim, vectors=vectors)


def write_embeddings(es: EmbeddingSet, path: str | Path, comments: tuple[str, ...] = ()) -> None:
    """Write an EmbeddingSet in v1 format, ids sorted, values round-trip exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#popembed v1 source={es.source_name} id={es.source_id} dim={es.dim}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        for vid in sorted(es.vectors):
            vec = es.vectors[vid]
            if len(vec) != es.dim:
                raise DimMismatch(0, f"vector for {vid} has {len(vec)} entries, dim={es.dim}")
            fh.write(vid + "\t" + " ".join(fmt_float(v) for v in vec) + "\n")


# --- manifest / bundle -------------------------------------------------------


def load_manifest(path: str | Path) -> dict:
    manifest = load_json(path)
    for key in ("train_csv", "test_csv", "embeddings"):
        if key not in manifest:
            raise ManifestError(f"manifest lacks required key {key!r}")
    if not isinstance(manifest["embeddings"], dict) or not manifest["embeddings"]:
        raise ManifestError("manifest 'embeddings' must be a non-empty object")
    for key in manifest["embeddings"]:
        if key not in {str(i) for i in SOURCE_REGISTRY}:
            raise ManifestError(f"manifest embedding key {key!r} is not a source id 1..6")
    return manifest


def validate_bundle(manifest_path: str | Path) -> DatasetBundle:
    """Load and validate every file a manifest references.

    Never mutates input files. Missing embedding coverage per source is
    recorded; a source whose missing-id fraction exceeds the manifest's
    ``max_missing_frac`` fails validation.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    max_missing = float(manifest.get("max_missing_frac", DEFAULT_MAX_MISSING_FRAC))

    train_path = base / manifest["train_csv"]
    test_path = base / manifest["test_csv"]
    train = load_tabular(train_path, has_targets=True)
    test = load_tabular(test_path, has_targets=_peek_has_targets(test_path))

    train_ids = set(train.ids())
    overlap = train_ids.intersection(test.ids())
    if overlap:
        raise DuplicateVideoId(sorted(overlap)[0])

    all_ids = train.ids() + test.ids()
    embeddings: dict[int, EmbeddingSet] = {}
    missing_ids: dict[int, list[str]] = {}
    for key in sorted(manifest["embeddings"], key=int):
        sid = int(key)
        epath = base / manifest["embeddings"][key]
        if not epath.exists():
            raise ManifestMissingSource(sid, str(epath))
        es = load_embeddings(epath)
        if es.source_id != sid:
            raise ManifestError(
                f"manifest lists {epath} under source {sid} but its header says {es.source_id}"
            )
        missing = [vid for vid in all_ids if vid not in es.vectors]
        frac = len(missing) / len(all_ids) if all_ids else 0.0
        if frac > max_missing:
            raise CoverageBelowThreshold(sid, frac, max_missing)
        embeddings[sid] = es
        missing_ids[sid] = missing

    return DatasetBundle(
        train=train,
        test=test,
        embeddings=embeddings,
        manifest_path=str(manifest_path),
        max_missing_frac=max_missing,
        missing_ids=missing_ids,
    )


def write_bundle(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Write CSVs, embedding files and manifest under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tabular(bundle.train, out_dir / "train.csv", include_targets=True)
    test_has_targets = all(r.targets is not None for r in bundle.test.rows) and len(bundle.test) > 0
    write_tabular(bundle.test, out_dir / "test.csv", include_targets=test_has_targets)
    emb_entries = {}
    for sid in sorted(bundle.embeddings):
        fname = f"embeddings_{sid}.txt"
        write_embeddings(bundle.embeddings[sid], out_dir / fname)
        emb_entries[str(sid)] = fname
    manifest = {
        "train_csv": "train.csv",
        "test_csv": "test.csv",
        "embeddings": emb_entries,
        "max_missing_frac": bundle.max_missing_frac,
    }
    manifest_path = out_dir / "manifest.json"
    dump_json(manifest, manifest_path)
    return manifest_path


# --- synthetic bundles --------------------------------------------------------

DEFAULT_SYNTH_DIMS = {1: 24, 2: 24, 3: 24, 4: 16, 5: 32, 6: 32}

_WORDS = (
    "check this out new clip daily vlog fun late night morning coffee dance "
    "tutorial recipe cat dog fail win story time behind scenes quick tip big "
    "news little moment best worst day ever watch until end sound on"
).split()

_TAG_VOCAB = [
    "fyp", "viral", "funny", "dance", "music", "food", "travel", "diy", "gym",
    "makeup", "gaming", "pets", "art", "football", "satisfying", "asmr",
    "comedy", "fashion", "nature", "cars", "prank", "school", "life", "mood",
    "trend", "duet", "slowmo", "recipe_2", "Fit_Check", "NoFilter", "tbt",
    "ootd", "catsoftiktok", "dogs", "skit", "hack", "story", "fy", "xyz", "lol",
]

_MENTION_VOCAB = [
    "bob_1", "alice.w", "creator.hub", "dj_max", "its.me", "team_lift",
    "chef_ana", "gamerx", "the.editor", "milo", "nina_v", "studio.9",
    "coach_k", "artsy.cat", "ben10", "zoe.zoe", "marco_p", "luna4",
    "wanderer.jay", "kitkat", "pixel.pete", "ava_m", "ron.g", "skyhigh", "moss",
]

_RESOLUTIONS = ((540.0, 960.0), (720.0, 1280.0), (1080.0, 1920.0))
_FPS_CHOICES = (24.0, 25.0, 30.0, 60.0)

# 2022-01-01T00:00:00Z .. 2023-06-30T23:59:59Z
_TIME_LO = 1640995200
_TIME_HI = 1688169599


def _zipf_weights(n: int, exponent: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def _make_caption(rng: np.random.Generator) -> str:
    words = list(rng.choice(_WORDS, size=rng.integers(2, 7)))
    n_tags = int(min(rng.poisson(1.4), 5))
    n_mentions = int(min(rng.poisson(0.4), 3))
    tags = [f"#{t}" for t in rng.choice(_TAG_VOCAB, size=n_tags, p=_zipf_weights(len(_TAG_VOCAB)))]
    mentions = [
        f"@{m}"
        for m in rng.choice(_MENTION_VOCAB, size=n_mentions, p=_zipf_weights(len(_MENTION_VOCAB)))
    ]
    parts = words + tags + mentions
    # occasional boundary-rule bait: an email-like token is not a mention
    if rng.random() < 0.05:
        parts.append("mail a@b")
    if rng.random() < 0.05:
        parts.append("#99last!")
    order = rng.permutation(len(parts))
    return " ".join(parts[i] for i in order)


def generate_synthetic(
    seed: int,
    n_train: int,
    n_test: int,
    dims: dict[int, int] | None = None,
) -> DatasetBundle:
    """Deterministic synthetic bundle with learnable engagement signal.

    Targets come from a smooth function of the engineered features (follower
    counts, posting time, duration, tag popularity) times lognormal noise, so
    both model families have signal to find. Embedding vectors carry a noisy
    projection of the same latent popularity, giving the fusion branches
    signal too. A small seeded fraction of meta cells is blanked and a small
    fraction of ids is dropped from each embedding source.
    """
    if n_train < 10:
        raise InputError("generate_synthetic requires n_train >= 10")
    dims = dict(DEFAULT_SYNTH_DIMS if dims is None else dims)
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))

    n_total = n_train + n_test
    n_authors = max(3, n_train // 8)
    author_ids = [f"a{i:04d}" for i in range(n_authors)]
    followers = np.floor(np.exp(rng.normal(8.0, 1.6, size=n_authors))).astype(np.int64)
    following = rng.integers(10, 2000, size=n_authors)
    hearts = np.floor(followers * np.exp(rng.normal(2.0, 0.8, size=n_authors))).astype(np.int64)
    videos = rng.integers(1, 900, size=n_authors)

    create_times = rng.integers(_TIME_LO, _TIME_HI, size=n_total)
    # train range must be non-degenerate for post-age normalization
    while len(set(create_times[:n_train].tolist())) < 2:  # pragma: no cover
        create_times = rng.integers(_TIME_LO, _TIME_HI, size=n_total)
    t_min = int(create_times[:n_train].min())
    t_max = int(create_times[:n_train].max())

    tag_weights = _zipf_weights(len(_TAG_VOCAB))
    tag_freq_lookup = {t.lower(): w for t, w in zip(_TAG_VOCAB, tag_weights)}

    records: list[Record] = []
    latents = np.empty(n_total, dtype=np.float64)
    for i in range(n_total):
        a = int(rng.integers(0, n_authors))
        caption = _make_caption(rng)
        duration = float(np.round(rng.uniform(5.0, 180.0), 1))
        fps = float(rng.choice(np.asarray(_FPS_CHOICES)))
        width, height = _RESOLUTIONS[int(rng.integers(0, len(_RESOLUTIONS)))]
        frame_count = float(round(duration * fps))

        tag_pop = sum(
            tag_freq_lookup.get(t[1:].lower(), 0.0) for t in caption.split() if t.startswith("#")
        )
        age = (int(create_times[i]) - t_min) / (t_max - t_min)
        hour = (int(create_times[i]) // 3600) % 24
        latent = (
            0.85 * (np.log1p(followers[a]) - 8.0) / 1.6
            + 0.60 * age
            + 0.25 * (duration - 92.5) / 92.5
            + 0.50 * tag_pop * 10.0
            + 0.20 * (1.0 if 17 <= hour or hour < 7 else 0.0)
        )
        latents[i] = latent
        log_play = 6.5 + 1.1 * latent + rng.normal(0.0, 0.45)
        play = max(1.0, float(np.round(np.expm1(log_play))))
        heart = max(1.0, float(np.round(play * np.exp(rng.normal(-2.2, 0.35)))))
        comment = max(1.0, float(np.round(play * np.exp(rng.normal(-4.6, 0.5)))))
        share = max(1.0, float(np.round(play * np.exp(rng.normal(-5.0, 0.6)))))

        meta = {
            "duration_s": duration,
            "frame_count": frame_count,
            "fps": fps,
            "width": width,
            "height": height,
        }
        for name in META_FIELDS:
            if rng.random() < 0.06:
                meta[name] = None

        records.append(
            Record(
                video_id=f"v{i:05d}",
                author_id=author_ids[a],
                create_time=int(create_times[i]),
                caption=caption,
                author_follower_count=int(followers[a]),
                author_following_count=int(following[a]),
                author_total_heart_count=int(hearts[a]),
                author_total_video_count=int(videos[a]),
                targets={"comment": comment, "heart": heart, "play": play, "share": share},
                **meta,
            )
        )

    pop_signal = (latents - latents.mean()) / (latents.std() + 1e-12)
    embeddings: dict[int, EmbeddingSet] = {}
    missing_ids: dict[int, list[str]] = {}
    for sid in sorted(dims):
        dim = int(dims[sid])
        srng = np.random.default_rng(derive_seed(seed, "embed", sid))
        direction = srng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        strength = srng.uniform(0.6, 1.3)
        vectors: dict[str, np.ndarray] = {}
        missing: list[str] = []
        for i, rec in enumerate(records):
            if srng.random() < 0.03:
                missing.append(rec.video_id)
                continue
            noise = srng.normal(size=dim)
            signal = strength * (pop_signal[i] + 0.5 * srng.normal())
            vectors[rec.video_id] = noise + signal * direction
        embeddings[sid] = EmbeddingSet(
            source_id=sid, source_name=SOURCE_REGISTRY[sid], dim=dim, vectors=vectors
        )
        missing_ids[sid] = missing

    return DatasetBundle(
        train=RecordTable(rows=records[:n_train]),
        test=RecordTable(rows=records[n_train:]),
        embeddings=embeddings,
        missing_ids=missing_ids,
    )
