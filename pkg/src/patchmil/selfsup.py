"""Self-supervised training of the double-tier encoder.

A student branch (encoder + projection/prediction heads) is trained against a
momentum teacher on two augmented views of each patch. The objective combines
a global cosine loss, a per-part cosine loss, and variance/covariance
regularizers that keep the embedding batch from collapsing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import backbone as bb
from . import tensor as T
from .errors import ConfigError, ContractViolation, NumericError
from .tensor import Tensor

LOSS_TERMS = ("global", "parts", "var", "cov")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 5.0
    lam: float = 0.005
    epsilon: float = 1e-4
    momentum: float = 0.99

    def validate(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractViolation(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")


@dataclass
class ViewPair:
    view_s: np.ndarray
    view_t: np.ndarray
    source_id: int = 0


@dataclass(frozen=True)
class SSLConfig:
    arch: bb.ArchConfig = field(default_factory=bb.ArchConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    loss_terms: tuple = LOSS_TERMS
    symmetrize: bool = False
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 3e-4
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self):
        self.arch.validate()
        self.weights.validate()
        unknown = set(self.loss_terms) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        if "global" not in self.loss_terms:
            raise ConfigError("the global cosine term cannot be toggled off")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid: adam, sgd")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _color_jitter(img, rng):
    """Staining-style jitter: gamma, per-channel gain, and offset."""
    mult = rng.uniform(0.75, 1.25, size=3)
    add = rng.uniform(-0.1, 0.1, size=3)
    gamma = np.exp(rng.normal(scale=0.3))
    return np.clip(np.clip(img, 0.0, 1.0) ** gamma * mult + add, 0.0, 1.0)


def _random_affine(img, rng):
    side = img.shape[0]
    angle = math.radians(rng.uniform(-10.0, 10.0))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.1, 0.1, size=2) * side
    center = (side - 1) / 2.0
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    # output -> input mapping (scipy applies matrix @ out + offset)
    matrix = np.array([[cos_a, -sin_a], [sin_a, cos_a]]) / scale
    offset = np.array([center, center]) - matrix @ np.array(
        [center + shift[0], center + shift[1]]
    )
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            img[:, :, c], matrix, offset=offset, order=1, mode="reflect"
        )
    return out


def _gaussian_blur(img, rng):
    if rng.uniform() < 0.5:
        sigma = rng.uniform(0.0, 1.5)
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    return img


def _resized_crop(img, rng):
    side = img.shape[0]
    for _ in range(10):
        crop = int(round(rng.uniform(0.8, 1.0) * side))
        if crop >= 4:
            break
    r = rng.integers(0, side - crop + 1)
    c = rng.integers(0, side - crop + 1)
    patch = img[r : r + crop, c : c + crop]
    if crop == side:
        return patch
    zoom = side / crop
    out = ndimage.zoom(patch, (zoom, zoom, 1.0), order=1)
    return out[:side, :side]


def augment_view(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One stochastic draw of the jitter/affine/blur/crop pipeline.

    Deliberately no flips or large rotations: texture orientation carries
    class identity, so the pipeline is restricted to photometric jitter and
    mild geometric perturbations.
    """
    img = _color_jitter(np.asarray(patch, dtype=np.float64), rng)
    img = _random_affine(img, rng)
    img = _gaussian_blur(img, rng)
    img = _resized_crop(img, rng)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def augment(patch: np.ndarray, rng: np.random.Generator, source_id: int = 0) -> ViewPair:
    """Two independent augmented views of one source patch."""
    return ViewPair(augment_view(patch, rng), augment_view(patch, rng), source_id)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def global_loss(z_s, z_t) -> Tensor:
    """Cosine distance 2 - 2 cos(z_s, z_t); batched inputs are averaged."""
    z_s, z_t = T.as_tensor(z_s), T.as_tensor(z_t)
    cos = (T.l2_normalize(z_s, axis=-1) * T.l2_normalize(z_t, axis=-1)).sum(axis=-1)
    loss = 2.0 - 2.0 * cos
    return loss if loss.ndim == 0 else loss.mean()


def parts_loss(z_s, z_t) -> Tensor:
    """Sum over parts of the cosine distance between matching part rows."""
    z_s, z_t = T.as_tensor(z_s), T.as_tensor(z_t)
    if z_s.shape != z_t.shape:
        raise ContractViolation(f"part shapes differ: {z_s.shape} vs {z_t.shape}")
    for name, z in (("student", z_s), ("teacher", z_t)):
        norms = np.linalg.norm(z.data, axis=-1)
        if np.any(norms == 0):
            k = int(np.argwhere(norms == 0)[0][-1])
            raise NumericError(f"zero-norm {name} part row k={k}")
    cos = (T.l2_normalize(z_s, axis=-1) * T.l2_normalize(z_t, axis=-1)).sum(axis=-1)
    loss = (2.0 - 2.0 * cos).sum(axis=-1)  # over parts
    return loss if loss.ndim == 0 else loss.mean()


def variance_loss(batch, epsilon: float = 1e-4) -> Tensor:
    """Hinge on the per-dimension std of a batch of embeddings (N, D)."""
    batch = T.as_tensor(batch)
    n = batch.shape[0]
    if batch.ndim != 2 or n < 2:
        raise ContractViolation(f"variance_loss needs an (N>=2, D) batch, got {batch.shape}")
    centered = batch - batch.mean(axis=0, keepdims=True)
    var = (centered * centered).sum(axis=0) * (1.0 / (n - 1))
    return T.relu(1.0 - T.sqrt(var + epsilon)).mean()


def covariance_loss(batch) -> Tensor:
    """Mean squared off-diagonal of the batch covariance matrix."""
    batch = T.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ContractViolation(f"covariance_loss needs an (N>=2, D) batch, got {batch.shape}")
    n, d = batch.shape
    if d < 2:
        raise ContractViolation("covariance_loss needs D >= 2 (no off-diagonal terms)")
    centered = batch - batch.mean(axis=0, keepdims=True)
    cov = T.swapaxes(centered, 0, 1) @ centered * (1.0 / (n - 1))
    diag = cov[np.arange(d), np.arange(d)]
    off_sq = (cov * cov).sum() - (diag * diag).sum()
    return off_sq * (1.0 / (d * d - d))


def total_loss(components: dict, weights: LossWeights) -> Tensor:
    """L_global + L_parts + gamma * L_var + lam * L_cov."""
    for name, value in components.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if math.isnan(v):
            raise NumericError(f"loss component '{name}' is NaN")
    zero = T.Tensor(0.0)
    lg = components.get("global", zero)
    lp = components.get("parts", zero)
    lv = components.get("var", zero)
    lc = components.get("cov", zero)
    return (
        T.as_tensor(lg)
        + T.as_tensor(lp)
        + weights.gamma * T.as_tensor(lv)
        + weights.lam * T.as_tensor(lc)
    )


# ---------------------------------------------------------------------------
# momentum teacher
# ---------------------------------------------------------------------------

_TEACHER_TO_STUDENT = {"g_tg": "g_sg", "g_to": "g_so", "g_tp": "g_sp"}


def _student_key(teacher_key: str, student: dict) -> str:
    if teacher_key in student:
        return teacher_key
    for t_prefix, s_prefix in _TEACHER_TO_STUDENT.items():
        if teacher_key.startswith(t_prefix):
            return s_prefix + teacher_key[len(t_prefix) :]
    raise ContractViolation(f"no student twin for teacher parameter '{teacher_key}'")


def momentum_update(student: dict, teacher: dict, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, scalar-wise, in place."""
    if not 0.0 <= m < 1.0:
        raise ContractViolation(f"momentum must be in [0, 1), got {m}")
    for key, eta in teacher.items():
        theta = student[_student_key(key, student)]
        if theta.shape != eta.shape:
            raise ContractViolation(
                f"shape mismatch for '{key}': student {theta.shape} vs teacher {eta.shape}"
            )
        eta.data[...] = m * eta.data + (1.0 - m) * theta.data


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGDMomentum:
    """Plain SGD with heavy-ball momentum and decoupled L2 weight decay."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the global gradient norm."""
        sq = 0.0
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sq += float((g * g).sum())
            g = g + self.weight_decay * p.data
            v = self.velocity[key]
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None
        return math.sqrt(sq)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Adam:
    """Adam with bias correction and L2 weight decay; lr is passed per step.

    The conv stack conditions the gradient badly at this scale (bias terms
    receive most of the raw gradient), so per-parameter step normalization is
    what actually trains the encoder weights; plain SGD leaves them nearly
    untouched.
    """

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the global gradient norm."""
        self.t += 1
        sq = 0.0
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sq += float((g * g).sum())
            g = g + self.weight_decay * p.data
            m = self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            v = self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None
        return math.sqrt(sq)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base
    t = min(step, total_steps) / total_steps
    return base * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# training state and step
# ---------------------------------------------------------------------------


class SSLState:
    """Student/teacher parameters plus the optimizer for the student side."""

    def __init__(self, cfg: SSLConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.student = bb.init_backbone(rng, cfg.arch)
        self.student_heads = bb.init_heads(rng, cfg.arch, "student")
        self.teacher = bb.clone_as_teacher(self.student)
        # teacher heads start as exact copies of their student twins
        self.teacher_heads = {}
        for t_prefix, s_prefix in _TEACHER_TO_STUDENT.items():
            for key, p in self.student_heads.items():
                if key.startswith(s_prefix):
                    self.teacher_heads[t_prefix + key[len(s_prefix) :]] = T.parameter(
                        p.data.copy(), requires_grad=False
                    )
        trainable = {**self.student, **{f"head:{k}": v for k, v in self.student_heads.items()}}
        if cfg.optimizer == "adam":
            self.optimizer = Adam(trainable, weight_decay=cfg.weight_decay)
        else:
            self.optimizer = SGDMomentum(trainable, cfg.sgd_momentum, cfg.weight_decay)
        self.step_count = 0

    def student_forward(self, views: np.ndarray):
        m = bb.embed_patch(views, self.student, self.cfg.arch)
        z_g = bb.global_embed(m, self.student_heads, "student")
        _, z_o = bb.part_attention(m, self.student_heads, "student", self.cfg.arch)
        return z_g, z_o

    def teacher_forward(self, views: np.ndarray):
        m = bb.embed_patch(views, self.teacher, self.cfg.arch)
        z_g = bb.global_embed(m, self.teacher_heads, "teacher")
        _, z_o = bb.part_attention(m, self.teacher_heads, "teacher", self.cfg.arch)
        return z_g, z_o


def _pair_terms(state: SSLState, views_s, views_t):
    z_g_s, z_o_s = state.student_forward(views_s)
    z_g_t, z_o_t = state.teacher_forward(views_t)
    terms = {}
    cfg = state.cfg
    if "global" in cfg.loss_terms:
        terms["global"] = global_loss(z_g_s, z_g_t)
    if "parts" in cfg.loss_terms:
        terms["parts"] = parts_loss(z_o_s, z_o_t)
    if "var" in cfg.loss_terms:
        terms["var"] = variance_loss(z_g_s, cfg.weights.epsilon)
    if "cov" in cfg.loss_terms:
        terms["cov"] = covariance_loss(z_g_s)
    return terms


def pretrain_step(views_s: np.ndarray, views_t: np.ndarray, state: SSLState, lr: float) -> dict:
    """One optimizer step on the student plus one momentum update of the teacher."""
    if views_s.shape[0] < 2:
        raise ContractViolation("pretrain_step needs a batch of at least 2 view pairs")
    terms = _pair_terms(state, views_s, views_t)
    if state.cfg.symmetrize:
        swapped = _pair_terms(state, views_t, views_s)
        for key in ("global", "parts"):
            if key in terms:
                terms[key] = 0.5 * (terms[key] + swapped[key])
    loss = total_loss(terms, state.cfg.weights)
    loss.backward()
    grad_norm = state.optimizer.step(lr)
    momentum_update(state.student, state.teacher, state.cfg.weights.momentum)
    momentum_update(state.student_heads, state.teacher_heads, state.cfg.weights.momentum)
    state.step_count += 1
    report = {name: (terms[name].item() if name in terms else 0.0) for name in LOSS_TERMS}
    report["all"] = loss.item()
    report["lr"] = lr
    report["grad_norm"] = grad_norm
    return report


def pretrain(
    patches: np.ndarray,
    cfg: SSLConfig,
    log_path=None,
    progress=None,
) -> SSLState:
    """Full pretraining loop over an array of (P, side, side, 3) patches.

    Writes a per-step CSV loss log when `log_path` is given.
    """
    cfg.validate()
    state = SSLState(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    n = patches.shape[0]
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "L_global", "L_parts", "L_var", "L_cov", "L_all", "lr", "grad_norm"])
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                if idx.size < 2:
                    continue
                views_s = np.empty((idx.size,) + patches.shape[1:])
                views_t = np.empty_like(views_s)
                for row, i in enumerate(idx):
                    pair = augment(patches[i], rng, source_id=int(i))
                    views_s[row] = pair.view_s
                    views_t[row] = pair.view_t
                lr = cosine_lr(cfg.lr, state.step_count, total_steps)
                report = pretrain_step(views_s, views_t, state, lr)
                if writer is not None:
                    writer.writerow(
                        [state.step_count]
                        + [f"{report[k]:.6f}" for k in ("global", "parts", "var", "cov", "all")]
                        + [f"{lr:.6f}", f"{report['grad_norm']:.6f}"]
                    )
            if progress is not None:
                progress(epoch, report if total_steps else {})
    finally:
        if log_file is not None:
            log_file.close()
    return state
