"""Glue between corpus, encoder, probes and the MIL head.

Whole images are tiled into encoder-sized patches; each patch embedding is the
GAP of its feature map. A whole-image embedding (for linear probing) is the
mean of its patch embeddings; a bag (for MIL) keeps the patch embeddings and
their grid positions.
"""

from __future__ import annotations

import numpy as np

from . import backbone as bb
from . import data as D
from . import mil as ML
from . import selfsup as S
from . import tensor as T
from .errors import ConfigError


def embed_patches(patches: np.ndarray, params: dict, arch: bb.ArchConfig,
                  chunk: int = 256) -> np.ndarray:
    """GAP patch embeddings (P, C) for an array of (P, side, side, 3) patches."""
    outs = []
    for start in range(0, patches.shape[0], chunk):
        m = bb.embed_patch(patches[start : start + chunk], params, arch)
        outs.append(bb.gap(m).numpy())
    return np.concatenate(outs, axis=0)


def image_patches(images: np.ndarray, patch_side: int):
    """Tile every image; returns (all_patches, patches_per_image, positions)."""
    tiles, positions = D.tile_image(images[0], patch_side)
    per_image = tiles.shape[0]
    all_tiles = [tiles]
    for img in images[1:]:
        t, _ = D.tile_image(img, patch_side)
        all_tiles.append(t)
    return np.concatenate(all_tiles, axis=0), per_image, positions


def embed_images(images: np.ndarray, params: dict, arch: bb.ArchConfig) -> np.ndarray:
    """Whole-image embeddings: mean of GAP patch embeddings per image."""
    patches, per_image, _ = image_patches(images, arch.side)
    emb = embed_patches(patches, params, arch)
    return emb.reshape(images.shape[0], per_image, -1).mean(axis=1)


def bags_from_corpus(corpus_dir, split: str, params: dict, arch: bb.ArchConfig):
    """One Bag per corpus image of the split (instances = patch embeddings)."""
    images, labels, _ = D.load_split(corpus_dir, split)
    patches, per_image, positions = image_patches(images, arch.side)
    emb = embed_patches(patches, params, arch).reshape(images.shape[0], per_image, -1)
    return [
        ML.Bag(emb[i], positions, int(labels[i])) for i in range(images.shape[0])
    ]


def bag_normalization(train_bags):
    """Per-feature mean/std over all instances of the training bags."""
    stacked = np.concatenate([b.instances for b in train_bags], axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0) + 1e-6


def standardize_bags(bags, norm):
    """New Bag list with instances z-scored by (mu, sd) training statistics."""
    mu, sd = norm
    return [ML.Bag((b.instances - mu) / sd, b.positions, b.label) for b in bags]


def finetune_mil(
    corpus_dir,
    init_params: dict,
    arch: bb.ArchConfig,
    cfg: ML.MILConfig,
    epochs: int = 20,
    batch_size: int = 8,
    lr: float = 3e-3,
    progress=None,
):
    """Train encoder and MIL head end to end with cross-entropy on bags.

    Starts from `init_params` (typically pretrained encoder weights), keeps
    the parameters of the epoch with the best validation accuracy, and
    returns (encoder params, MIL params, history).
    """
    cfg.validate()
    images, labels, _ = D.load_split(corpus_dir, "train")
    val_images, val_labels, _ = D.load_split(corpus_dir, "val")
    _, per_image, positions = image_patches(images[:1], arch.side)
    encoder = {k: T.parameter(np.array(p.data, copy=True)) for k, p in init_params.items()}
    mil_params = ML.init_mil(np.random.default_rng(cfg.seed), cfg)
    trainable = {**encoder, **{f"mil:{k}": v for k, v in mil_params.items()}}
    opt = S.Adam(trainable, weight_decay=cfg.weight_decay)

    def forward(batch_images):
        tiles = np.concatenate([D.tile_image(img, arch.side)[0] for img in batch_images])
        feature_map = bb.embed_patch(tiles, encoder, arch)
        instances = bb.gap(feature_map).reshape(len(batch_images), per_image, arch.feature_dim)
        pos = np.stack([positions] * len(batch_images))
        return ML.bag_logits(instances, pos, mil_params, cfg)

    def accuracy(split_images, split_labels):
        preds = []
        for start in range(0, len(split_images), 32):
            logits = forward(split_images[start : start + 32]).numpy()
            preds.extend(np.argmax(logits, axis=1))
        return float((np.array(preds) == split_labels).mean())

    rng = np.random.default_rng(cfg.seed)
    history = []
    best_val, best = -1.0, {k: v.data.copy() for k, v in trainable.items()}
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            loss = ML.cross_entropy(forward(images[idx]), labels[idx])
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
        val_acc = accuracy(val_images, val_labels)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc})
        if val_acc > best_val:
            best_val = val_acc
            best = {k: v.data.copy() for k, v in trainable.items()}
        if progress is not None:
            progress(epoch, history[-1])
    for key, value in trainable.items():
        value.data = best[key]
    return encoder, mil_params, history


def train_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int = 7,
    iters: int = 300,
    lr: float = 0.5,
    l2: float = 1e-4,
):
    """Full-batch softmax regression; returns (weights, bias, normalization)."""
    present = set(labels.tolist())
    missing = set(range(n_classes)) - present
    if missing:
        raise ConfigError(f"classes absent from probe training set: {sorted(missing)}")
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-8
    x = (features - mu) / sd
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / n
        w -= lr * (x.T @ delta + l2 * w)
        b -= lr * delta.sum(axis=0)
    return w, b, (mu, sd)


def probe_predict(features: np.ndarray, w, b, norm) -> np.ndarray:
    mu, sd = norm
    return np.argmax(((features - mu) / sd) @ w + b, axis=1)


def linear_probe_metrics(corpus_dir, params: dict, arch: bb.ArchConfig) -> dict:
    """Freeze the encoder, fit a linear classifier on train, score on test."""
    from . import metrics as MM

    train_x, train_y, _ = D.load_split(corpus_dir, "train")
    test_x, test_y, _ = D.load_split(corpus_dir, "test")
    f_tr = embed_images(train_x, params, arch)
    f_te = embed_images(test_x, params, arch)
    w, b, norm = train_linear_probe(f_tr, train_y)
    preds = probe_predict(f_te, w, b, norm)
    return MM.metrics_from_predictions(preds, test_y)
