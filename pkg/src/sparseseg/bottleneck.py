"""Viewpoint Bottleneck loss, a per-point MLP encoder, and its training loops.

The cross-correlation between two viewpoints' column-normalized features is
pushed towards the identity; off-diagonal entries are scaled by ``lam``
before taking the Frobenius distance.  Everything here is plain numpy with
hand-written backpropagation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import PseudoLabelSet, SceneMesh, SparseLabelSet
from .transforms import DEFAULT_FPS_TARGET, SampleIndexSet, apply_transform, fps, sample_transform_pair

NORM_EPS = 1e-12
LOGDET_EPS = 1e-6


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *tags]))


def _subseed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2**64, *tags]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class VBConfig:
    lam: float
    feature_dim: int = 256
    fps_target: int = DEFAULT_FPS_TARGET
    squared_norm: bool = True
    lr: float = 0.1
    momentum: float = 0.99
    total_steps: int = 20000
    poly_power: float = 0.9
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.fps_target < 2:
            raise ValueError("fps_target must be >= 2")


# ---------------------------------------------------------------------------
# loss


def column_normalize(Z: np.ndarray) -> np.ndarray:
    """Center each column and scale it to unit Euclidean norm.

    Columns whose centered norm is below 1e-12 come back as zeros.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("need an (H, D) matrix with H >= 2")
    C = Z - Z.mean(axis=0)
    norms = np.linalg.norm(C, axis=0)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    out = C / safe
    out[:, norms < NORM_EPS] = 0.0
    return out


def _column_normalize_backward(Z: np.ndarray, G: np.ndarray) -> np.ndarray:
    C = Z - Z.mean(axis=0)
    norms = np.linalg.norm(C, axis=0)
    live = norms >= NORM_EPS
    N = np.zeros_like(C)
    N[:, live] = C[:, live] / norms[live]
    gC = np.zeros_like(C)
    proj = np.sum(N * G, axis=0)
    gC[:, live] = (G[:, live] - N[:, live] * proj[live]) / norms[live]
    return gC - gC.mean(axis=0)


def cross_correlation(Zp: np.ndarray, Zq: np.ndarray) -> np.ndarray:
    """``Zp^T Zq`` for column-normalized inputs; no 1/H factor."""
    Zp, Zq = np.asarray(Zp, dtype=np.float64), np.asarray(Zq, dtype=np.float64)
    if Zp.shape != Zq.shape:
        raise ValueError(f"shape mismatch {Zp.shape} vs {Zq.shape}")
    return Zp.T @ Zq


def _scaled_residual(Z: np.ndarray, lam: float) -> np.ndarray:
    E = lam * np.asarray(Z, dtype=np.float64)
    np.fill_diagonal(E, np.diag(Z) - 1.0)
    return E


def vb_loss(Z: np.ndarray, cfg: VBConfig) -> float:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
        raise ValueError(f"cross-correlation must be square, got {Z.shape}")
    sq = float(np.sum(_scaled_residual(Z, cfg.lam) ** 2))
    return sq if cfg.squared_norm else float(np.sqrt(sq))


def vb_loss_grad(Zp: np.ndarray, Zq: np.ndarray, cfg: VBConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss on raw features and its gradient w.r.t. both feature matrices."""
    Zp, Zq = np.asarray(Zp, dtype=np.float64), np.asarray(Zq, dtype=np.float64)
    Np, Nq = column_normalize(Zp), column_normalize(Zq)
    Z = cross_correlation(Np, Nq)
    E = _scaled_residual(Z, cfg.lam)
    sq = float(np.sum(E ** 2))
    # d/dZ of sum(E^2): 2*E on the diagonal, 2*lam*E off it
    gZ = cfg.lam * E
    np.fill_diagonal(gZ, np.diag(E))
    if cfg.squared_norm:
        loss, gZ = sq, 2.0 * gZ
    else:
        loss = float(np.sqrt(sq))
        gZ = gZ / loss if loss > 0 else np.zeros_like(gZ)
    gNp = Nq @ gZ.T
    gNq = Np @ gZ
    return loss, _column_normalize_backward(Zp, gNp), _column_normalize_backward(Zq, gNq)


def logdet_covariance(Z: np.ndarray) -> float:
    """Log-determinant of the sample covariance of ``Z`` plus 1e-6 * I."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] < 2:
        raise ValueError("need at least two samples")
    C = Z - Z.mean(axis=0)
    cov = C.T @ C / (Z.shape[0] - 1) + LOGDET_EPS * np.eye(Z.shape[1])
    sign, val = np.linalg.slogdet(cov)
    return float(val)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderParams:
    """Per-point MLP ``6 -> hidden -> hidden -> feature_dim`` plus an optional linear head.

    Dropout acts on the last hidden layer only, so features are affine in
    the dropped activations.  The head reads L2-normalized features: the VB
    loss is blind to feature scale and pretraining lets it drift freely.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.5
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        fan_in = 6
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != fan_in or b.shape != (W.shape[1],):
                raise ValueError("layer shapes do not chain")
            fan_in = W.shape[1]
        if self.head_w is not None:
            if self.head_w.shape[0] != fan_in or self.head_b is None or self.head_b.shape != (self.head_w.shape[1],):
                raise ValueError("head shape does not match feature dimension")

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_categories(self) -> int | None:
        return None if self.head_w is None else self.head_w.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [a for pair in zip(self.weights, self.biases) for a in pair]
        if self.head_w is not None:
            out += [self.head_w, self.head_b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        n = len(self.weights)
        ws = [np.array(a) for a in arrays[0:2 * n:2]]
        bs = [np.array(a) for a in arrays[1:2 * n:2]]
        hw = hb = None
        if self.head_w is not None:
            hw, hb = np.array(arrays[2 * n]), np.array(arrays[2 * n + 1])
        return EncoderParams(ws, bs, self.dropout_rate, hw, hb)

    def with_head(self, num_categories: int, seed: int = 0) -> "EncoderParams":
        rng = _rng(seed, 7)
        d = self.feature_dim
        hw = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, num_categories))
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.dropout_rate, hw, np.zeros(num_categories))

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]


def init_encoder(feature_dim: int = 256, hidden: Sequence[int] = (64, 64), dropout_rate: float = 0.5,
                 seed: int = 0) -> EncoderParams:
    rng = _rng(seed, 1)
    dims = [6, *hidden, feature_dim]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        biases.append(np.zeros(b))
    return EncoderParams(weights, biases, dropout_rate)


def point_inputs(cloud: SceneMesh, indices: np.ndarray | None = None) -> np.ndarray:
    """xyz scaled into [-1, 1] by the scene bounding box, concatenated with rgb/255."""
    v = cloud.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    half = max(float(np.max(hi - lo)) / 2.0, 1e-12)
    sel = slice(None) if indices is None else np.asarray(indices)
    xyz = (v[sel] - (lo + hi) / 2.0) / half
    if cloud.colors is None:
        rgb = np.zeros_like(xyz)
    else:
        rgb = cloud.colors[sel] / 255.0
    return np.hstack([xyz, rgb])


def _dropout_mask(shape, p: float, seed: int | None) -> np.ndarray:
    rng = _rng(0 if seed is None else seed, 3)
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward(params: EncoderParams, X: np.ndarray, mask: np.ndarray | None):
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
            if k == last - 1 and mask is not None:
                h = h * mask
        acts.append(h)
    return h, acts


def _backward(params: EncoderParams, acts: list[np.ndarray], mask: np.ndarray | None, gout: np.ndarray):
    last = len(params.weights) - 1
    gW, gb = [None] * (last + 1), [None] * (last + 1)
    g = gout
    for k in range(last, -1, -1):
        gW[k] = acts[k].T @ g
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = g @ params.weights[k].T
            if k - 1 == last - 1 and mask is not None:
                g = g * mask
            g = g * (acts[k] > 0)
    return gW, gb


def encoder_forward(params: EncoderParams, cloud: SceneMesh, indices: SampleIndexSet | np.ndarray | None = None,
                    dropout_on: bool = False, seed: int | None = None) -> np.ndarray:
    idx = indices.indices if isinstance(indices, SampleIndexSet) else indices
    X = point_inputs(cloud, idx)
    mask = _make_mask(params, X.shape[0], dropout_on, seed)
    out, _ = _forward(params, X, mask)
    return out


def _make_mask(params: EncoderParams, n: int, dropout_on: bool, seed):
    if not dropout_on or params.dropout_rate == 0 or len(params.weights) < 2:
        return None
    return _dropout_mask((n, params.weights[-2].shape[1]), params.dropout_rate, seed)


def classify(params: EncoderParams, cloud: SceneMesh, indices=None, dropout_on: bool = False,
             seed: int | None = None) -> np.ndarray:
    if params.head_w is None:
        raise ValueError("encoder has no classifier head")
    feats = encoder_forward(params, cloud, indices, dropout_on, seed)
    return head_inputs(feats)[0] @ params.head_w + params.head_b


def head_inputs(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit features and the norms used (zero rows stay zero)."""
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return feats / safe, safe


def _head_inputs_backward(u: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (g - u * np.sum(u * g, axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class SGDState:
    """Momentum buffers and step counter for polynomially decayed SGD."""

    lr: float = 0.1
    momentum: float = 0.99
    total_steps: int = 20000
    power: float = 0.9
    grad_clip: float | None = None
    step: int = 0
    velocity: list[np.ndarray] | None = None

    def current_lr(self) -> float:
        frac = min(self.step, self.total_steps) / max(self.total_steps, 1)
        return self.lr * (1.0 - frac) ** self.power

    def apply(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        if self.velocity is None or [v.shape for v in self.velocity] != [a.shape for a in arrays]:
            self.velocity = [np.zeros_like(a) for a in arrays]
        lr = self.current_lr()
        out = []
        for k, (a, g) in enumerate(zip(arrays, grads)):
            self.velocity[k] = self.momentum * self.velocity[k] + g
            out.append(a - lr * self.velocity[k])
        self.step += 1
        return out


def sgd_for(cfg: VBConfig) -> SGDState:
    return SGDState(cfg.lr, cfg.momentum, cfg.total_steps, cfg.poly_power, cfg.grad_clip)


def pretrain_step(params: EncoderParams, cloud: SceneMesh, cfg: VBConfig, seed: int,
                  state: SGDState | None = None) -> tuple[EncoderParams, float]:
    """One self-supervised step: two random views, shared FPS indices, VB loss, SGD update.

    FPS runs on the untransformed cloud; the views differ from it by an
    isometry, so the selected indices are those FPS would pick on either view.
    The returned loss is measured before the update.
    """
    state = state if state is not None else sgd_for(cfg)
    tp, tq = sample_transform_pair(_subseed(seed, 11))
    Xp, Xq = apply_transform(tp, cloud), apply_transform(tq, cloud)
    sample = fps(cloud, cfg.fps_target, seed=_subseed(seed, 12)).indices
    inp_p, inp_q = point_inputs(Xp, sample), point_inputs(Xq, sample)
    Zp, acts_p = _forward(params, inp_p, None)
    Zq, acts_q = _forward(params, inp_q, None)
    loss, gp, gq = vb_loss_grad(Zp, Zq, cfg)
    gWp, gbp = _backward(params, acts_p, None, gp)
    gWq, gbq = _backward(params, acts_q, None, gq)
    grads = [g for pair in zip([a + b for a, b in zip(gWp, gWq)], [a + b for a, b in zip(gbp, gbq)]) for g in pair]
    arrays = params.arrays()[: len(grads)]
    updated = state.apply(arrays, grads)
    new = params.with_arrays(updated + params.arrays()[len(grads):])
    return new, loss


def pretrain(params: EncoderParams, scenes: Sequence[SceneMesh], cfg: VBConfig, steps: int, seed: int,
             state: SGDState | None = None) -> tuple[EncoderParams, list[float]]:
    """Cycle through ``scenes`` for ``steps`` steps; returns params and the loss trace."""
    state = state if state is not None else sgd_for(cfg)
    losses = []
    for k in range(steps):
        params, loss = pretrain_step(params, scenes[k % len(scenes)], cfg, _subseed(seed, 21, k), state)
        losses.append(loss)
    return params, losses


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.1
    momentum: float = 0.99
    total_epochs: int = 30000
    poly_power: float = 0.9
    grad_clip: float | None = None

    def sgd(self) -> SGDState:
        return SGDState(self.lr, self.momentum, self.total_epochs, self.poly_power, self.grad_clip)


def _label_arrays(labels) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(labels, SparseLabelSet):
        return labels.indices, labels.categories
    if isinstance(labels, PseudoLabelSet):
        return labels.indices, labels.categories
    if isinstance(labels, dict):
        return (np.fromiter(labels.keys(), np.int64, len(labels)),
                np.fromiter(labels.values(), np.int64, len(labels)))
    idx, cat = labels
    return np.asarray(idx, np.int64), np.asarray(cat, np.int64)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    n = len(targets)
    loss = -float(np.mean(logp[np.arange(n), targets]))
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    return loss, g / n


def labeled_loss_grad(params: EncoderParams, cloud: SceneMesh, labels, dropout_on: bool = True,
                      seed: int | None = None) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy over labeled vertices only, with gradients for every array."""
    idx, cat = _label_arrays(labels)
    X = point_inputs(cloud, idx)
    mask = _make_mask(params, len(idx), dropout_on, seed)
    feats, acts = _forward(params, X, mask)
    u, norms = head_inputs(feats)
    logits = u @ params.head_w + params.head_b
    loss, glog = cross_entropy(logits, cat)
    ghw, ghb = u.T @ glog, glog.sum(axis=0)
    gW, gb = _backward(params, acts, mask, _head_inputs_backward(u, norms, glog @ params.head_w.T))
    grads = [g for pair in zip(gW, gb) for g in pair] + [ghw, ghb]
    return loss, grads


def finetune_epoch(params: EncoderParams, scenes: Sequence[SceneMesh], labels: Sequence, seed: int,
                   state: SGDState | None = None, cfg: FinetuneConfig | None = None) -> tuple[EncoderParams, float]:
    """One pass over the scenes, one SGD step per labeled scene; returns the mean loss."""
    if params.head_w is None:
        raise ValueError("attach a classifier head with EncoderParams.with_head first")
    if len(scenes) != len(labels):
        raise ValueError("need one label set per scene")
    if not any(len(_label_arrays(lb)[0]) for lb in labels):
        raise ValueError("all label sets are empty")
    state = state if state is not None else (cfg or FinetuneConfig()).sgd()
    losses = []
    for k, (scene, lb) in enumerate(zip(scenes, labels)):
        if not len(_label_arrays(lb)[0]):
            continue
        loss, grads = labeled_loss_grad(params, scene, lb, True, _subseed(seed, 31, k))
        params = params.with_arrays(state.apply(params.arrays(), grads))
        losses.append(loss)
    return params, float(np.mean(losses))


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"VBCK"
_CKPT_VERSION = 1


def save_checkpoint(params: EncoderParams, path, config: dict | None = None) -> None:
    """Versioned blob: header, config echo (JSON), then shapes and float32 arrays."""
    meta = json.dumps({"dropout_rate": params.dropout_rate, "num_layers": len(params.weights),
                       "has_head": params.head_w is not None, "config": config or {}},
                      sort_keys=True).encode("utf-8")
    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(meta)), meta]
    arrays = params.arrays()
    chunks.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, like: EncoderParams | None = None) -> tuple[EncoderParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise ValueError("truncated checkpoint")
        arrays.append(np.frombuffer(data, "<f4", n, pos).astype(np.float64).reshape(shape))
        pos += 4 * n
    nl = meta["num_layers"]
    head_w = head_b = None
    if meta["has_head"]:
        head_w, head_b = arrays[2 * nl], arrays[2 * nl + 1]
    params = EncoderParams(arrays[0:2 * nl:2], arrays[1:2 * nl:2], meta["dropout_rate"], head_w, head_b)
    if like is not None and like.shapes() != params.shapes():
        raise ValueError(f"checkpoint shapes {params.shapes()} do not match expected {like.shapes()}")
    return params, meta["config"]
