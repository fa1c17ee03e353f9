"""Retrieval (Ret@k) and recognition (Rec) protocols, healing and latent interpolation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CANVAS, MaskSpec, StrokeSequence, mask_seed, prepare_patches, rasterize
from .model import Gra2Seq, downsample, read_checkpoint, write_container
from .nn import Adam, Conv2d, Linear, Module
from .tensor import Tensor, gradient, no_grad

log = logging.getLogger(__name__)

CLASSIFIER_INPUT = 32


@dataclass
class Gallery:
    keys: list[str]
    mu: np.ndarray  # (G, N_z)


def build_gallery(model: Gra2Seq, seqs: Sequence[StrokeSequence]) -> Gallery:
    """Codes of the uncorrupted test sketches."""
    if not seqs:
        raise ValueError("build_gallery: empty test set")
    return Gallery([s.key for s in seqs], model.encode_mu(model.images_for(seqs)))


def distances(gallery: np.ndarray, queries: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """(Q, G) distance matrix."""
    if metric == "euclidean":
        d2 = (queries ** 2).sum(1)[:, None] + (gallery ** 2).sum(1)[None, :] - 2 * queries @ gallery.T
        return np.sqrt(np.maximum(d2, 0))
    if metric == "cosine":
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


def retrieval_ranks(gallery: np.ndarray, queries: np.ndarray, true_index: np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    """0-based rank of each query's true entry: the number of gallery entries strictly closer."""
    d = distances(gallery, queries, metric)
    own = d[np.arange(len(queries)), true_index]
    return (d < own[:, None]).sum(axis=1)


def ret_at_k(ranks: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    return {k: 100.0 * float(np.mean(ranks < k)) for k in ks}


def regenerate(model: Gra2Seq, seqs: Sequence[StrokeSequence], mask_prob: float = 0.0, seed: int = 0,
               temperature: float | None = None) -> list[StrokeSequence]:
    """Encode (optionally corrupted) inputs with y = μ and decode one sketch each.

    Masks and sampling streams are seeded per sketch index, so they do not
    depend on the model. ``temperature=None`` decodes greedily.
    """
    seeds = [mask_seed(i, seed) for i in range(len(seqs))]
    mu = model.encode_mu(model.images_for(seqs, mask_prob, seeds))
    out = []
    for i, s in enumerate(seqs):
        rng = np.random.default_rng(seeds[i])
        g = model.generate(mu[i], temperature or 1.0, rng, greedy=temperature is None)
        g.category, g.key = s.category, s.key
        out.append(g)
    return out


def evaluate_ret(model: Gra2Seq, seqs: Sequence[StrokeSequence], ks: Sequence[int] = (1, 10, 50),
                 mask_prob: float = 0.0, seed: int = 0, metric: str = "euclidean",
                 generated: Sequence[StrokeSequence] | None = None,
                 temperature: float | None = None) -> dict[int, float]:
    gallery = build_gallery(model, seqs)
    generated = generated if generated is not None else regenerate(model, seqs, mask_prob, seed, temperature)
    q = model.encode_mu(model.images_for(generated))
    ranks = retrieval_ranks(gallery.mu, q, np.arange(len(seqs)), metric)
    return ret_at_k(ranks, ks)


# -- recognition classifier -----------------------------------------------------

class SketchClassifier(Module):
    """Small CNN on 32x32 block-max reductions of the full canvas: three conv stages and a linear layer."""

    def __init__(self, categories: Sequence[str], seed: int = 0):
        rng = np.random.default_rng(seed)
        self.categories = list(categories)
        self.convs = [Conv2d(1, 8, 3, rng, padding=1), Conv2d(8, 16, 3, rng, padding=1),
                      Conv2d(16, 16, 3, rng, padding=1)]
        self.fc = Linear(16 * 4 * 4, len(categories), rng)

    @staticmethod
    def inputs(seqs: Sequence[StrokeSequence], thickness: int = 3) -> np.ndarray:
        return np.stack([downsample(rasterize(s, thickness=thickness), CLASSIFIER_INPUT) for s in seqs])[:, None]

    def logits(self, x) -> Tensor:
        h = Tensor(np.asarray(x, dtype=np.float32))
        for conv in self.convs:
            h = T.maxpool2d(T.relu(conv(h)), 2)
        return self.fc(h.reshape(h.shape[0], -1))

    def fit(self, seqs: Sequence[StrokeSequence], steps: int = 200, lr: float = 1e-2, seed: int = 0) -> float:
        labels = np.array([self.categories.index(s.category) for s in seqs])
        x = self.inputs(seqs)
        onehot = np.eye(len(self.categories), dtype=np.float32)[labels]
        rng = np.random.default_rng(seed)
        params = self.parameters()
        opt = Adam(params, lr=lr)
        loss = None
        for _ in range(steps):
            idx = rng.choice(len(x), min(64, len(x)), replace=False)
            loss = -(T.log_softmax(self.logits(x[idx]), axis=-1) * onehot[idx]).sum(axis=-1).mean()
            opt.step(gradient(loss, params))
        return float(loss.data) if loss is not None else float("nan")

    @no_grad()
    def predict(self, seqs: Sequence[StrokeSequence]) -> list[str]:
        if not seqs:
            return []
        logits = self.logits(self.inputs(seqs)).data
        return [self.categories[i] for i in logits.argmax(axis=1)]

    def save(self, path: str | Path) -> None:
        write_container(path, {"categories": self.categories}, "classifier", self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "SketchClassifier":
        header, state = read_checkpoint(path)
        if header.get("fingerprint") != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        clf = cls(header["config"]["categories"])
        clf.load_state_dict(state)
        return clf


def evaluate_rec(generated: Sequence[StrokeSequence], true_categories: Sequence[str], classifier) -> float:
    """Percentage of generated sketches classified into their input's category."""
    known = set(classifier.categories)
    missing = set(true_categories) - known
    if missing:
        raise ValueError(f"classifier does not know categories {sorted(missing)}")
    pred = classifier.predict(list(generated))
    return 100.0 * float(np.mean([p == t for p, t in zip(pred, true_categories)]))


def evaluate(model: Gra2Seq, seqs: Sequence[StrokeSequence], classifier=None, mask_prob: float = 0.0,
             seed: int = 0, ks: Sequence[int] = (1, 10, 50), metric: str = "euclidean",
             temperature: float | None = None) -> dict:
    generated = regenerate(model, seqs, mask_prob, seed, temperature)
    ret = evaluate_ret(model, seqs, ks, mask_prob, seed, metric, generated)
    out = {f"Ret@{k}": v for k, v in ret.items()}
    if classifier is not None:
        out["Rec"] = evaluate_rec(generated, [s.category for s in seqs], classifier)
    return out


# -- synthesis utilities ---------------------------------------------------------

def interpolate_latents(model: Gra2Seq, y_a: np.ndarray, y_b: np.ndarray, steps: int, seed: int = 0,
                        temperature: float | None = None) -> list[StrokeSequence]:
    if steps < 2:
        raise ValueError("interpolate_latents: steps must be >= 2")
    y_a, y_b = np.asarray(y_a, np.float64), np.asarray(y_b, np.float64)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        y = (1 - t) * y_a + t * y_b
        rng = np.random.default_rng(seed)
        out.append(model.generate(y, temperature or 1.0, rng, greedy=temperature is None))
    return out


def heal(model: Gra2Seq, seq: StrokeSequence, mask_prob: float, seed: int,
         temperature: float | None = None) -> tuple[np.ndarray, StrokeSequence, MaskSpec]:
    """Mask the canvas around chosen patch centres, encode the corrupted input and regenerate."""
    ps, canvas, masking = prepare_patches(seq, model.cfg.patches, mask_prob, seed, model.cfg.thickness)
    mu = model.encode_mu(model.preprocess(ps)[None])[0]
    out = model.generate(mu, temperature or 1.0, np.random.default_rng(seed), greedy=temperature is None)
    out.category, out.key = seq.category, seq.key
    return canvas, out, masking
