"""Multi-branch fusion regressor built on plain numpy.

Each embedding source gets its own projection branch to a shared width:
text-derived sources (5, 6) use dense -> per-row layer norm -> GELU, video
sources (1-4) use dense -> per-feature batch norm -> ReLU. Branch outputs are
concatenated in ascending source order and fed through a dense head with
strictly decreasing widths, ReLU + dropout between hidden layers and a linear
final layer of width 1.

Backward passes are hand-derived (including the normalization layers'
dependence of batch statistics on their inputs) and verified against central
finite differences by ``gradient_check``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadHeadShape,
    DivergedLoss,
    DuplicateSource,
    MissingSourceInBatch,
    ShapeMismatch,
    TooFewRows,
)
from .features import to_raw_predictions
from .ingest import TEXT_SOURCES
from .util import derive_seed

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh form, as in the original BERT implementation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


@dataclass(frozen=True)
class BranchSpec:
    source_id: int
    input_dim: int
    kind: str
    unified_width: int

    def __post_init__(self):
        expected = "text" if self.source_id in TEXT_SOURCES else "video"
        if self.kind != expected:
            raise ShapeMismatch(
                f"source {self.source_id} must be kind {expected!r}, got {self.kind!r}"
            )
        if self.input_dim < 1 or self.unified_width < 1:
            raise ShapeMismatch("branch dims must be positive")


def make_branch_spec(source_id: int, input_dim: int, unified_width: int) -> BranchSpec:
    kind = "text" if source_id in TEXT_SOURCES else "video"
    return BranchSpec(source_id=source_id, input_dim=input_dim, kind=kind, unified_width=unified_width)


@dataclass
class BranchParams:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None  # video branches only
    running_var: np.ndarray | None = None


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    dropout_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ShapeMismatch("patience must be >= 1")
        if not (0.0 < self.val_fraction <= 0.5):
            raise ShapeMismatch("val_fraction must lie in (0, 0.5]")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ShapeMismatch("dropout_rate must lie in [0, 1)")


@dataclass
class FusionNet:
    specs: list[BranchSpec]  # ascending source_id
    branches: dict[int, BranchParams]
    head: list[DenseLayer]
    head_widths: list[int]
    dropout_rate: float
    seed: int
    bn_momentum: float = 0.1
    eps: float = 1e-5

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed order (running stats are buffers)."""
        out = []
        for spec in self.specs:
            p = self.branches[spec.source_id]
            prefix = f"branch{spec.source_id}"
            out += [(f"{prefix}.W", p.W), (f"{prefix}.b", p.b),
                    (f"{prefix}.gamma", p.gamma), (f"{prefix}.beta", p.beta)]
        for i, layer in enumerate(self.head):
            out += [(f"head{i}.W", layer.W), (f"head{i}.b", layer.b)]
        return out

    def state_copy(self) -> dict[str, np.ndarray]:
        state = {name: arr.copy() for name, arr in self.parameters()}
        for spec in self.specs:
            p = self.branches[spec.source_id]
            if p.running_mean is not None:
                state[f"branch{spec.source_id}.running_mean"] = p.running_mean.copy()
                state[f"branch{spec.source_id}.running_var"] = p.running_var.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in self.parameters():
            arr[...] = state[name]
        for spec in self.specs:
            p = self.branches[spec.source_id]
            if p.running_mean is not None:
                p.running_mean[...] = state[f"branch{spec.source_id}.running_mean"]
                p.running_var[...] = state[f"branch{spec.source_id}.running_var"]


def build_fusion_net(
    specs: list[BranchSpec],
    head_widths: list[int],
    seed: int,
    dropout_rate: float = 0.3,
) -> FusionNet:
    """Seeded construction: He-style uniform fan-in init for video branches
    and ReLU head layers, Xavier-style for text branches and the final layer.
    """
    if not specs:
        raise ShapeMismatch("need at least one branch spec")
    ids = [s.source_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DuplicateSource(f"duplicate source ids in specs: {sorted(ids)}")
    if not head_widths or head_widths[-1] != 1:
        raise BadHeadShape("head widths must end at 1")
    if any(a <= b for a, b in zip(head_widths, head_widths[1:])):
        raise BadHeadShape(f"head widths must be strictly decreasing: {head_widths}")

    specs = sorted(specs, key=lambda s: s.source_id)
    rng = np.random.default_rng(derive_seed(seed, "fusion-init"))

    def uniform(shape, limit):
        return rng.uniform(-limit, limit, size=shape)

    branches = {}
    for spec in specs:
        fan_in, fan_out = spec.input_dim, spec.unified_width
        if spec.kind == "video":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        branches[spec.source_id] = BranchParams(
            W=uniform((fan_in, fan_out), limit),
            b=np.zeros(fan_out),
            gamma=np.ones(fan_out),
            beta=np.zeros(fan_out),
            running_mean=np.zeros(fan_out) if spec.kind == "video" else None,
            running_var=np.ones(fan_out) if spec.kind == "video" else None,
        )

    head = []
    in_dim = sum(s.unified_width for s in specs)
    for i, width in enumerate(head_widths):
        is_final = i == len(head_widths) - 1
        limit = np.sqrt(6.0 / (in_dim + width)) if is_final else np.sqrt(6.0 / in_dim)
        head.append(DenseLayer(W=uniform((in_dim, width), limit), b=np.zeros(width)))
        in_dim = width

    return FusionNet(
        specs=specs,
        branches=branches,
        head=head,
        head_widths=list(head_widths),
        dropout_rate=dropout_rate,
        seed=seed,
    )


# --- forward / backward -----------------------------------------------------


def _check_batch(net: FusionNet, batch: dict[int, np.ndarray]) -> int:
    n = None
    for spec in net.specs:
        if spec.source_id not in batch:
            raise MissingSourceInBatch(spec.source_id)
        X = np.asarray(batch[spec.source_id])
        if X.ndim != 2 or X.shape[1] != spec.input_dim:
            raise ShapeMismatch(
                f"source {spec.source_id}: expected (n, {spec.input_dim}), got {X.shape}"
            )
        if n is None:
            n = X.shape[0]
        elif X.shape[0] != n:
            raise ShapeMismatch("branch matrices have differing row counts")
    if n is None or n == 0:
        raise ShapeMismatch("empty batch")
    return n


def _forward(
    net: FusionNet,
    batch: dict[int, np.ndarray],
    train: bool,
    update_stats: bool = False,
    dropout_rng: np.random.Generator | None = None,
    apply_dropout: bool = False,
):
    """Returns (predictions, cache). Batch statistics are used for video
    branches in train mode; running statistics in eval mode."""
    n = _check_batch(net, batch)
    eps = net.eps
    cache = {"branches": {}, "head": [], "n": n}
    pieces = []
    for spec in net.specs:
        X = np.asarray(batch[spec.source_id], dtype=np.float64)
        p = net.branches[spec.source_id]
        Z = X @ p.W + p.b
        if spec.kind == "video":
            if train:
                mu = Z.mean(axis=0)
                var = Z.var(axis=0)
                if update_stats:
                    m = net.bn_momentum
                    unbiased = var * n / (n - 1) if n > 1 else var
                    p.running_mean[...] = (1 - m) * p.running_mean + m * mu
                    p.running_var[...] = (1 - m) * p.running_var + m * unbiased
            else:
                mu = p.running_mean
                var = p.running_var
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (Z - mu) * inv_std
            P = p.gamma * xhat + p.beta
            A = np.maximum(P, 0.0)
        else:
            mu = Z.mean(axis=1, keepdims=True)
            var = Z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (Z - mu) * inv_std
            P = p.gamma * xhat + p.beta
            A = _gelu(P)
        cache["branches"][spec.source_id] = {
            "X": X, "xhat": xhat, "inv_std": inv_std, "P": P, "train_norm": train,
        }
        pieces.append(A)

    H = np.concatenate(pieces, axis=1)
    cache["concat_widths"] = [s.unified_width for s in net.specs]

    rate = net.dropout_rate
    for i, layer in enumerate(net.head):
        is_final = i == len(net.head) - 1
        Z = H @ layer.W + layer.b
        layer_cache = {"input": H, "Z": Z, "mask": None}
        if is_final:
            H = Z
        else:
            A = np.maximum(Z, 0.0)
            if train and apply_dropout and rate > 0.0:
                if dropout_rng is None:
                    dropout_rng = np.random.default_rng(derive_seed(net.seed, "dropout"))
                mask = (dropout_rng.random(A.shape) >= rate) / (1.0 - rate)
                A = A * mask
                layer_cache["mask"] = mask
            H = A
        cache["head"].append(layer_cache)
    return H[:, 0], cache


def _backward(net: FusionNet, cache, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the scalar loss wrt every trainable array, given dL/dpred."""
    grads: dict[str, np.ndarray] = {}
    dH = dpred[:, None]
    for i in range(len(net.head) - 1, -1, -1):
        layer = net.head[i]
        c = cache["head"][i]
        is_final = i == len(net.head) - 1
        if is_final:
            dZ = dH
        else:
            dA = dH if c["mask"] is None else dH * c["mask"]
            dZ = dA * (c["Z"] > 0.0)
        grads[f"head{i}.W"] = c["input"].T @ dZ
        grads[f"head{i}.b"] = dZ.sum(axis=0)
        dH = dZ @ layer.W.T

    # split concat gradient back into branches (ascending source order)
    offsets = np.cumsum([0] + cache["concat_widths"])
    for j, spec in enumerate(net.specs):
        dA = dH[:, offsets[j]:offsets[j + 1]]
        c = cache["branches"][spec.source_id]
        p = net.branches[spec.source_id]
        prefix = f"branch{spec.source_id}"
        if spec.kind == "video":
            dP = dA * (c["P"] > 0.0)
        else:
            dP = dA * _gelu_grad(c["P"])
        grads[f"{prefix}.gamma"] = (dP * c["xhat"]).sum(axis=0)
        grads[f"{prefix}.beta"] = dP.sum(axis=0)
        dxhat = dP * p.gamma
        xhat = c["xhat"]
        inv_std = c["inv_std"]
        if spec.kind == "video":
            if c["train_norm"]:
                # batch statistics depend on Z: full batch-norm backward
                N = xhat.shape[0]
                dZ = (inv_std / N) * (
                    N * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                dZ = dxhat * inv_std
        else:
            D = xhat.shape[1]
            dZ = (inv_std / D) * (
                D * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
        grads[f"{prefix}.W"] = c["X"].T @ dZ
        grads[f"{prefix}.b"] = dZ.sum(axis=0)
    return grads


def forward(
    net: FusionNet,
    batch: dict[int, np.ndarray],
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Prediction vector for a batch; mode is "train" or "eval".

    Train mode uses batch statistics for video branches and applies seeded
    dropout; eval mode is a deterministic per-row function of the inputs.
    """
    if mode not in ("train", "eval"):
        raise ShapeMismatch(f"unknown mode {mode!r}")
    train = mode == "train"
    pred, _ = _forward(
        net, batch, train=train, update_stats=train, dropout_rng=dropout_rng,
        apply_dropout=train,
    )
    return pred


def predict_fusion(net: FusionNet, features: dict[int, np.ndarray]) -> np.ndarray:
    """Eval-mode predictions mapped back to raw scale: max(expm1(z), 0)."""
    return to_raw_predictions(forward(net, features, mode="eval"))


# --- training ----------------------------------------------------------------


class _Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(arr) for name, arr in params}
        self.v = {name: np.zeros_like(arr) for name, arr in params}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, arr in params:
            gr = grads[name]
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * gr
            v[...] = b2 * v + (1 - b2) * gr * gr
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    slices = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing single-row batch would make batch statistics degenerate
    if len(slices) > 1 and len(slices[-1]) == 1:
        slices[-2] = np.concatenate([slices[-2], slices[-1]])
        slices.pop()
    return slices


def train_fusion(
    net: FusionNet,
    features: dict[int, np.ndarray],
    targets: np.ndarray,
    cfg: TrainConfig,
) -> dict:
    """Mini-batch Adam on MSE in transformed space, with early stopping.

    Validation MSE is evaluated in eval mode after every epoch; training
    stops once it fails to improve for ``cfg.patience`` epochs and the
    best-validation parameters (including running statistics) are restored.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = _check_batch(net, features)
    if len(targets) != n:
        raise ShapeMismatch("targets do not match feature rows")

    n_val = int(round(cfg.val_fraction * n))
    if n_val < 2:
        raise TooFewRows("need at least 2 validation rows after the split")
    if n - n_val < 2:
        raise TooFewRows("need at least 2 training rows after the split")

    split_rng = np.random.default_rng(derive_seed(cfg.seed, "val-split"))
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "batch-order"))
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))

    perm = split_rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    val_batch = {sid: np.asarray(features[sid])[val_idx] for sid in features}
    y_val = targets[val_idx]

    net.dropout_rate = cfg.dropout_rate
    adam = _Adam(net.parameters(), lr=cfg.learning_rate)

    history_train: list[float] = []
    history_val: list[float] = []
    best_val = np.inf
    best_epoch = -1
    best_state = net.state_copy()
    bad = 0

    for epoch in range(cfg.max_epochs):
        order = train_idx[order_rng.permutation(len(train_idx))]
        loss_sum = 0.0
        for rows in _batch_slices(order, cfg.batch_size):
            xb = {sid: np.asarray(features[sid])[rows] for sid in features}
            yb = targets[rows]
            pred, cache = _forward(
                net, xb, train=True, update_stats=True,
                dropout_rng=dropout_rng, apply_dropout=True,
            )
            err = pred - yb
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            loss_sum += loss * len(rows)
            grads = _backward(net, cache, 2.0 * err / len(rows))
            adam.step(net.parameters(), grads)
        history_train.append(loss_sum / len(train_idx))

        val_pred = forward(net, val_batch, mode="eval")
        val_mse = float(np.mean((val_pred - y_val) ** 2))
        if not np.isfinite(val_mse):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        history_val.append(val_mse)

        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = net.state_copy()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    net.load_state(best_state)
    return {
        "net": net,
        "history": {
            "train_mse": history_train,
            "val_mse": history_val,
            "best_epoch": best_epoch,
        },
        "best_val_mse": best_val,
        "val_indices": val_idx,
        "train_indices": train_idx,
    }


# --- verification ---------------------------------------------------------------


def gradient_check(net: FusionNet, batch: dict[int, np.ndarray], targets, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Meant for small nets (a few thousand parameters) in double precision.
    Dropout is disabled; video branches use batch statistics on both sides of
    each probe, with running statistics left untouched.
    """
    targets = np.asarray(targets, dtype=np.float64)

    def loss_only() -> float:
        pred, _ = _forward(net, batch, train=True, update_stats=False, apply_dropout=False)
        return float(np.mean((pred - targets) ** 2))

    pred, cache = _forward(net, batch, train=True, update_stats=False, apply_dropout=False)
    analytic = _backward(net, cache, 2.0 * (pred - targets) / len(targets))

    worst = 0.0
    for name, arr in net.parameters():
        flat = arr.ravel()
        ana = analytic[name].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            up = loss_only()
            flat[i] = keep - epsilon
            down = loss_only()
            flat[i] = keep
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(float(ana[i])), abs(numeric), 1e-8)
            worst = max(worst, abs(float(ana[i]) - numeric) / denom)
    return worst


# --- persistence -------------------------------------------------------------------


def save_fusion(net: FusionNet, path: str | Path) -> None:
    doc = {
        "format": "vidpop-fusion-v1",
        "specs": [
            {"source_id": s.source_id, "input_dim": s.input_dim,
             "kind": s.kind, "unified_width": s.unified_width}
            for s in net.specs
        ],
        "head_widths": net.head_widths,
        "dropout_rate": net.dropout_rate,
        "seed": net.seed,
        "bn_momentum": net.bn_momentum,
        "eps": net.eps,
        "state": {name: arr.tolist() for name, arr in sorted(net.state_copy().items())},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_fusion(path: str | Path) -> FusionNet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "vidpop-fusion-v1":
        raise ShapeMismatch(f"{path}: not a fusion model file")
    specs = [BranchSpec(**s) for s in doc["specs"]]
    net = build_fusion_net(
        specs, doc["head_widths"], seed=int(doc["seed"]), dropout_rate=float(doc["dropout_rate"])
    )
    net.bn_momentum = float(doc["bn_momentum"])
    net.eps = float(doc["eps"])
    state = {name: np.asarray(vals, dtype=np.float64) for name, vals in doc["state"].items()}
    net.load_state(state)
    return net
