"""Ablation grid: train the fusion net on every requested subset of the
embedding sources, per target, and collect the MAPE table.

Each (subset, target) cell derives its own seed from (base seed, label,
target), so cells are independent of execution order, parallelizable and
resumable from per-cell checkpoint files.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import BadLabel, DuplicateSource, MissingSource, VidpopError
from .evaluate import mape
from .features import log1p_value
from .fusion import TrainConfig, build_fusion_net, make_branch_spec, predict_fusion, train_fusion
from .ingest import TARGETS, DatasetBundle
from .util import derive_seed, dump_json, load_json

_LABEL_RE = re.compile(r"^[1-6](\+[1-6])*$")

ABLATION_COLUMNS = ("share", "heart", "comment", "play")


@dataclass(frozen=True)
class SubsetSpec:
    sources: tuple[int, ...]  # ascending

    @property
    def label(self) -> str:
        return "+".join(str(s) for s in self.sources)


def parse_subset(label: str) -> SubsetSpec:
    """Parse a label like "3+4" into a canonical ascending subset."""
    if not _LABEL_RE.match(label):
        raise BadLabel(f"bad subset label {label!r}; expected digits 1-6 joined by '+'")
    ids = [int(tok) for tok in label.split("+")]
    if len(set(ids)) != len(ids):
        raise DuplicateSource(f"label {label!r} repeats a source")
    return SubsetSpec(sources=tuple(sorted(ids)))


def enumerate_subsets(available: set[int], mode: str = "all", labels_file: str | Path | None = None) -> list[SubsetSpec]:
    """All non-empty subsets (sorted by size, then ids) or an explicit list."""
    if not available:
        raise MissingSource(0)
    if mode == "all":
        ids = sorted(available)
        out = []
        for size in range(1, len(ids) + 1):
            for combo in combinations(ids, size):
                out.append(SubsetSpec(sources=combo))
        return out
    if mode == "listed":
        if labels_file is None:
            raise BadLabel("mode=listed requires a labels file")
        out = []
        with open(labels_file, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                spec = parse_subset(line)
                for sid in spec.sources:
                    if sid not in available:
                        raise MissingSource(sid)
                out.append(spec)
        return out
    raise BadLabel(f"unknown subset mode {mode!r}")


@dataclass
class AblationTable:
    rows: dict[str, dict[str, float | None]]  # label -> column -> MAPE % (None = failed cell)
    errors: dict[str, dict[str, str]] = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label"] + list(ABLATION_COLUMNS))
            for label in self.rows:
                row = [label]
                for col in ABLATION_COLUMNS:
                    v = self.rows[label][col]
                    row.append("" if v is None else f"{v:.6f}")
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "AblationTable":
        rows: dict[str, dict[str, float | None]] = {}
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols = header[1:]
            for row in reader:
                rows[row[0]] = {
                    c: (float(v) if v != "" else None) for c, v in zip(cols, row[1:])
                }
        return cls(rows=rows)


def highlight_best(table: AblationTable) -> dict[str, dict]:
    """Per-target argmin over rows; ties break to the lexicographically
    earlier label."""
    if not table.rows:
        raise BadLabel("empty ablation table")
    best: dict[str, dict] = {}
    for col in ABLATION_COLUMNS:
        candidates = [
            (vals[col], label) for label, vals in table.rows.items() if vals.get(col) is not None
        ]
        if not candidates:
            continue
        value, label = min(candidates, key=lambda kv: (kv[0], kv[1]))
        best[col] = {"label": label, "mape": value}
    return best


def _cell_path(checkpoint_dir: Path, label: str, target: str) -> Path:
    return checkpoint_dir / f"cell_{label.replace('+', '_')}__{target}.json"


def _train_cell(
    bundle: DatasetBundle,
    subset: SubsetSpec,
    target: str,
    cfg: TrainConfig,
    cell_seed: int,
    unified_width: int,
    head_widths: list[int],
    keep_ids: set[str] | None,
) -> float:
    rows = bundle.train.rows
    if keep_ids is not None:
        rows = [r for r in rows if r.video_id in keep_ids]
    # fusion training drops rows lacking a vector for any requested source
    usable = [
        r for r in rows
        if all(r.video_id in bundle.embeddings[sid].vectors for sid in subset.sources)
    ]
    if len(usable) < 10:
        raise VidpopError(
            f"only {len(usable)} rows have vectors for every source in {subset.label}"
        )
    feats = {
        sid: np.stack([bundle.embeddings[sid].vectors[r.video_id] for r in usable])
        for sid in subset.sources
    }
    y_raw = np.asarray([r.targets[target] for r in usable], dtype=np.float64)
    y = log1p_value(y_raw)

    specs = [
        make_branch_spec(sid, bundle.embeddings[sid].dim, unified_width)
        for sid in subset.sources
    ]
    net = build_fusion_net(specs, head_widths, seed=cell_seed, dropout_rate=cfg.dropout_rate)
    cell_cfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        val_fraction=cfg.val_fraction,
        dropout_rate=cfg.dropout_rate,
        seed=cell_seed,
    )
    result = train_fusion(net, feats, y, cell_cfg)
    val_idx = result["val_indices"]
    val_batch = {sid: feats[sid][val_idx] for sid in feats}
    pred_raw = predict_fusion(result["net"], val_batch)
    return mape(y_raw[val_idx], pred_raw)


def run_ablation(
    bundle: DatasetBundle,
    subsets: list[SubsetSpec],
    targets: tuple[str, ...] = TARGETS,
    cfg: TrainConfig | None = None,
    seed: int = 0,
    unified_width: int = 64,
    head_widths: list[int] | None = None,
    checkpoint_dir: str | Path | None = None,
    keep_ids: set[str] | None = None,
) -> AblationTable:
    """Train every (subset, target) cell and collect validation MAPE.

    Completed cells found in ``checkpoint_dir`` are reused, so an interrupted
    grid resumes to the same values it would have produced uninterrupted.
    Failed cells record an error marker instead of aborting the grid.
    """
    cfg = cfg or TrainConfig(seed=seed)
    head_widths = head_widths or [32, 8, 1]
    for spec in subsets:
        for sid in spec.sources:
            if sid not in bundle.embeddings:
                raise MissingSource(sid)

    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    rows: dict[str, dict[str, float | None]] = {}
    errors: dict[str, dict[str, str]] = {}
    for spec in subsets:
        label = spec.label
        rows[label] = {}
        for target in targets:
            cell = None
            if ckpt is not None:
                path = _cell_path(ckpt, label, target)
                if path.exists():
                    cell = load_json(path)
            if cell is None:
                cell_seed = derive_seed(seed, label, target)
                try:
                    value = _train_cell(
                        bundle, spec, target, cfg, cell_seed,
                        unified_width, head_widths, keep_ids,
                    )
                    cell = {"label": label, "target": target, "mape": value, "seed": cell_seed}
                except VidpopError as exc:
                    cell = {"label": label, "target": target, "error": str(exc), "seed": cell_seed}
                if ckpt is not None:
                    dump_json(cell, _cell_path(ckpt, label, target))
            if "error" in cell:
                rows[label][target] = None
                errors.setdefault(label, {})[target] = cell["error"]
            else:
                rows[label][target] = float(cell["mape"])

    table_rows = {
        label: {col: rows[label].get(col) for col in ABLATION_COLUMNS} for label in rows
    }
    return AblationTable(
        rows=table_rows,
        errors=errors,
        seed=seed,
        config={
            "unified_width": unified_width,
            "head_widths": head_widths,
            "train": cfg.__dict__,
        },
    )
