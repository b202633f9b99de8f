"""Context-aware multiple-instance learning head.

Instances (one embedding per tile, with integer grid coordinates) pass through
a multi-head self-attention block whose logits carry a learned 2-D
relative-position bias, then through an adaptive pooling step that softmaxes
across instances per output coordinate. A linear classifier on the pooled bag
vector is trained with cross-entropy. Max/mean/soft/gated-attention poolings
are kept as ablation baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import _layernorm, _linear, _mlp_init, _linear_init, _kaiming_uniform, multihead_attention
from .errors import ConfigError, ContractViolation
from .tensor import Tensor

POOLING_KINDS = ("adaptive", "max", "mean", "soft", "gated_attention")


@dataclass
class Bag:
    """One tiled image: instance embeddings, grid positions, class label."""

    instances: np.ndarray  # (I, C)
    positions: np.ndarray  # (I, 2) int grid coordinates
    label: int

    def __post_init__(self):
        self.instances = np.asarray(self.instances)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ContractViolation(f"bag needs (I>=1, C) instances, got {self.instances.shape}")
        if self.positions.shape != (self.instances.shape[0], 2):
            raise ContractViolation("positions must be (I, 2) grid coordinates")
        if len({tuple(p) for p in self.positions}) != len(self.positions):
            raise ContractViolation("bag positions must be unique")


@dataclass(frozen=True)
class MILConfig:
    feature_dim: int = 128
    n_classes: int = 7
    heads: int = 4
    depth: int = 1
    bias_radius: int = 7
    use_position_bias: bool = True
    pooling: str = "adaptive"
    normalize_bag: bool = False
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(
                f"unknown pooling kind {self.pooling!r}; valid kinds: {', '.join(POOLING_KINDS)}"
            )
        if self.feature_dim % self.heads != 0:
            raise ConfigError("feature_dim must be divisible by heads")


def init_mil(rng: np.random.Generator, cfg: MILConfig) -> dict:
    cfg.validate()
    c = cfg.feature_dim
    p: dict[str, Tensor] = {}
    for b in range(cfg.depth):
        p[f"msa{b}_ln1_g"] = T.parameter(np.ones(c))
        p[f"msa{b}_ln1_b"] = T.parameter(np.zeros(c))
        _linear_init(rng, p, f"msa{b}_qkv", c, 3 * c, True)
        _linear_init(rng, p, f"msa{b}_proj", c, c, True)
        p[f"msa{b}_ln2_g"] = T.parameter(np.ones(c))
        p[f"msa{b}_ln2_b"] = T.parameter(np.zeros(c))
        _linear_init(rng, p, f"msa{b}_mlp1", c, 2 * c, True)
        _linear_init(rng, p, f"msa{b}_mlp2", 2 * c, c, True)
        span = 2 * cfg.bias_radius + 1
        p[f"msa{b}_bias"] = T.parameter(np.zeros((cfg.heads, span * span)))
    _linear_init(rng, p, "hw1", c, c, True)
    _linear_init(rng, p, "hw2", c, c, True)
    _linear_init(rng, p, "gate_v", c, 64, True)
    _linear_init(rng, p, "gate_u", c, 64, True)
    _linear_init(rng, p, "gate_w", 64, 1, True)
    _linear_init(rng, p, "cls", c, cfg.n_classes, True)
    return p


def _bias_index(positions: np.ndarray, radius: int) -> np.ndarray:
    """(..., I, 2) grid coordinates -> (..., I, I) bias-table indices."""
    delta = positions[..., :, None, :] - positions[..., None, :, :]
    delta = np.clip(delta, -radius, radius) + radius
    span = 2 * radius + 1
    return delta[..., 0] * span + delta[..., 1]


def msa_refine(instances, positions: np.ndarray, params: dict, cfg: MILConfig) -> Tensor:
    """Contextual refinement of (B, I, C) or (I, C) instances."""
    x = T.as_tensor(instances)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
        positions = positions[None]
    b, i, c = x.shape
    for blk in range(cfg.depth):
        bias = None
        if cfg.use_position_bias:
            idx = _bias_index(positions, cfg.bias_radius)  # (B, I, I)
            table = params[f"msa{blk}_bias"]  # (heads, span^2)
            bias = T.transpose(table[:, idx], (1, 0, 2, 3))  # (B, heads, I, I)
        normed = _layernorm(x, params[f"msa{blk}_ln1_g"], params[f"msa{blk}_ln1_b"])
        x = x + multihead_attention(normed, params, f"msa{blk}", cfg.heads, bias=bias)
        normed = _layernorm(x, params[f"msa{blk}_ln2_g"], params[f"msa{blk}_ln2_b"])
        x = x + _linear(T.gelu(_linear(normed, params, f"msa{blk}_mlp1")), params, f"msa{blk}_mlp2")
    return x[0] if squeeze else x


def adaptive_pool(refined, params: dict, cfg: MILConfig, return_weights: bool = False):
    """Instance-axis softmax gating: mean_i softmax_i(h1(z_i)) * h2(z_i)."""
    z = T.as_tensor(refined)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.reshape((1,) + z.shape)
    weights = T.softmax(_linear(z, params, "hw1"), axis=-2)  # per coordinate, over I
    gated = weights * _linear(z, params, "hw2")
    bag = gated.sum(axis=-2) if cfg.normalize_bag else gated.mean(axis=-2)
    if squeeze:
        bag, weights = bag[0], weights[0]
    return (bag, weights) if return_weights else bag


def baseline_pool(refined, kind: str, params: dict, cfg: MILConfig) -> Tensor:
    z = T.as_tensor(refined)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.reshape((1,) + z.shape)
    if kind == "max":
        bag = T.reduce_max(z, axis=-2)
    elif kind == "mean":
        bag = z.mean(axis=-2)
    elif kind == "soft":
        bag = (T.softmax(z, axis=-2) * z).sum(axis=-2)
    elif kind == "gated_attention":
        gate = T.tanh(_linear(z, params, "gate_v")) * T.sigmoid(_linear(z, params, "gate_u"))
        logits = _linear(gate, params, "gate_w")  # (B, I, 1)
        attn = T.softmax(logits, axis=-2)
        bag = (attn * z).sum(axis=-2)
    else:
        raise ConfigError(
            f"unknown pooling kind {kind!r}; valid kinds: {', '.join(POOLING_KINDS)}"
        )
    return bag[0] if squeeze else bag


def pool(refined, params: dict, cfg: MILConfig) -> Tensor:
    if cfg.pooling == "adaptive":
        return adaptive_pool(refined, params, cfg)
    return baseline_pool(refined, cfg.pooling, params, cfg)


def bag_logits(instances, positions, params: dict, cfg: MILConfig) -> Tensor:
    refined = msa_refine(instances, positions, params, cfg)
    return _linear(pool(refined, params, cfg), params, "cls")


def classify_bag(bag: Bag, params: dict, cfg: MILConfig) -> np.ndarray:
    """Class logits for one bag; argmax (lowest index on ties) is the prediction."""
    if bag.instances.shape[0] < 1:
        raise ContractViolation("cannot classify an empty bag")
    return bag_logits(bag.instances, bag.positions, params, cfg).numpy()


def predict(bag: Bag, params: dict, cfg: MILConfig) -> int:
    return int(np.argmax(classify_bag(bag, params, cfg)))


def cross_entropy(logits, labels) -> Tensor:
    """Softmax cross-entropy, averaged over a batch of (B, K) logits."""
    z = T.as_tensor(logits)
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape((1,) + z.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b = z.shape[0]
    shifted = z - T.reduce_max(z, axis=-1, keepdims=True).detach()
    log_norm = T.log(T.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(b), labels]
    return (log_norm - picked).mean()


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        self.t += 1
        sq = 0.0
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sq += float((g * g).sum())
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            v = self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None
        return math.sqrt(sq)


def _group_by_size(bags):
    groups: dict[int, list[int]] = {}
    for i, bag in enumerate(bags):
        groups.setdefault(bag.instances.shape[0], []).append(i)
    return groups


def evaluate_bags(bags, params: dict, cfg: MILConfig):
    """Predicted class ids for a list of bags (batched by instance count)."""
    preds = np.zeros(len(bags), dtype=np.int64)
    for _, idx in _group_by_size(bags).items():
        inst = np.stack([bags[i].instances for i in idx])
        pos = np.stack([bags[i].positions for i in idx])
        logits = bag_logits(inst, pos, params, cfg).numpy()
        preds[idx] = np.argmax(logits, axis=1)
    return preds


def train_mil(train_bags, val_bags, cfg: MILConfig, progress=None):
    """Cross-entropy training; returns (best params, history).

    Keeps the parameters of the epoch with the best validation accuracy.
    """
    cfg.validate()
    if not train_bags:
        raise ContractViolation("train_mil needs at least one training bag")
    rng = np.random.default_rng(cfg.seed)
    params = init_mil(rng, cfg)
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    best = {k: p.data.copy() for k, p in params.items()}
    best_acc = -1.0
    labels = np.array([b.label for b in train_bags])
    groups = _group_by_size(train_bags)
    for epoch in range(cfg.epochs):
        losses = []
        for _, idx in groups.items():
            idx = np.array(idx)
            rng.shuffle(idx)
            for s in range(0, len(idx), cfg.batch_size):
                chunk = idx[s : s + cfg.batch_size]
                inst = np.stack([train_bags[i].instances for i in chunk])
                pos = np.stack([train_bags[i].positions for i in chunk])
                loss = cross_entropy(bag_logits(inst, pos, params, cfg), labels[chunk])
                loss.backward()
                opt.step()
                losses.append(loss.item())
        train_preds = evaluate_bags(train_bags, params, cfg)
        train_acc = float((train_preds == labels).mean())
        if val_bags:
            val_preds = evaluate_bags(val_bags, params, cfg)
            val_acc = float((val_preds == np.array([b.label for b in val_bags])).mean())
        else:
            val_acc = train_acc
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": train_acc, "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best = {k: p.data.copy() for k, p in params.items()}
        if progress is not None:
            progress(history[-1])
    for k, p in params.items():
        p.data[...] = best[k]
    return params, history


def attention_report(bag: Bag, params: dict, cfg: MILConfig):
    """Adaptive-pool weights (I, C) and MSA attention maps (heads, I, I) for export."""
    refined = msa_refine(bag.instances, bag.positions, params, cfg)
    _, weights = adaptive_pool(refined, params, cfg, return_weights=True)
    # recompute the first block's attention matrix for the raw map export
    x = T.as_tensor(bag.instances).reshape((1,) + bag.instances.shape)
    normed = _layernorm(x, params["msa0_ln1_g"], params["msa0_ln1_b"])
    b, t, c = normed.shape
    dh = c // cfg.heads
    qkv = _linear(normed, params, "msa0_qkv")
    qkv = T.transpose(qkv.reshape(b, t, 3, cfg.heads, dh), (2, 0, 3, 1, 4))
    q, k = qkv[0], qkv[1]
    logits = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if cfg.use_position_bias:
        idx = _bias_index(bag.positions[None], cfg.bias_radius)
        logits = logits + T.transpose(params["msa0_bias"][:, idx], (1, 0, 2, 3))
    attn = T.softmax(logits, axis=-1).numpy()[0]
    return weights.numpy(), attn
