"""Semantic-proximity sketch graphs.

All functions accept :class:`Tensor` inputs with optional leading batch axes
and stay differentiable in the similarity values. Neighbour *selection* is a
discrete choice made on the forward values (ties go to the lowest index).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

TOP1_WEIGHT = 0.5
TOP2_WEIGHT = 0.2
GLOBAL_WEIGHT = 0.5
NORM_EPS = 1e-12


@dataclass
class AdjacencyMatrix:
    masked: Tensor  # A, (..., M, M)
    extended: Tensor  # Ã, (..., M+1, M+1), after the softmax in the PE-in-edges variant
    normalized: Tensor  # Â


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        log.debug("cosine_similarity: near-zero norm, similarity set to 0")
        return 0.0
    return float(u @ v / (nu * nv))


def cosine_matrix(v) -> Tensor:
    """Pairwise cosine similarities of the rows of ``v`` (..., M, dim) -> (..., M, M)."""
    v = as_tensor(v)
    norms = T.l2norm(v, axis=-1, keepdims=True)
    blank = norms.data < NORM_EPS
    if blank.any():
        log.debug("cosine_matrix: %d near-zero rows, similarities set to 0", int(blank.sum()))
    unit = v / (norms + blank.astype(v.dtype)) * (~blank).astype(v.dtype)
    return unit @ T.transpose(unit, _swap_last(v.ndim))


def dot_matrix(v) -> Tensor:
    v = as_tensor(v)
    return v @ T.transpose(v, _swap_last(v.ndim))


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def top2_weights(alpha: np.ndarray) -> np.ndarray:
    """Per row: 0.5 on the most similar other node, 0.2 on the runner-up, 0 elsewhere.

    Ties are broken by lowest column index. With a single candidate only the 0.5 slot is filled.
    """
    alpha = np.asarray(alpha)
    m = alpha.shape[-1]
    scores = np.array(alpha, dtype=np.float64, copy=True)
    diag = np.arange(m)
    scores[..., diag, diag] = -np.inf
    order = np.argsort(-scores, axis=-1, kind="stable")
    w = np.zeros(alpha.shape, dtype=alpha.dtype)
    for rank, weight in ((0, TOP1_WEIGHT), (1, TOP2_WEIGHT)):
        if rank >= m - 1:
            break
        np.put_along_axis(w, order[..., rank:rank + 1], weight, axis=-1)
    return w


def masked_adjacency_from_similarity(alpha) -> Tensor:
    """A = I + 0.5·α at the top-1 neighbour + 0.2·α at the top-2 neighbour."""
    alpha = as_tensor(alpha)
    w = top2_weights(alpha.data)
    eye = np.eye(alpha.shape[-1], dtype=alpha.dtype)
    return alpha * w + eye


def build_masked_adjacency(v) -> Tensor:
    """Masked adjacency of patch embeddings ``v`` (..., M, dim); positional encodings never enter."""
    return masked_adjacency_from_similarity(cosine_matrix(v))


def extend_with_global(a) -> Tensor:
    """Ã = [[0.5, 0ᵀ], [0.5·1, A]]."""
    a = as_tensor(a)
    lead = a.shape[:-2]
    m = a.shape[-1]
    top = np.zeros(lead + (1, m + 1), dtype=a.dtype)
    top[..., 0, 0] = GLOBAL_WEIGHT
    left = np.full(lead + (m, 1), GLOBAL_WEIGHT, dtype=a.dtype)
    return T.concat([Tensor(top), T.concat([Tensor(left), a], axis=-1)], axis=-2)


def sym_normalize(a_ext) -> Tensor:
    """D^{-1/2} Ã D^{-1/2} with D the diagonal of row sums of Ã."""
    a_ext = as_tensor(a_ext)
    deg = a_ext.sum(axis=-1)
    if np.any(deg.data <= 0):
        raise ValueError("sym_normalize: non-positive row sum in adjacency")
    dinv = deg ** -0.5
    rows = dinv.reshape(deg.shape + (1,))
    cols = dinv.reshape(deg.shape[:-1] + (1, deg.shape[-1]))
    return rows * a_ext * cols


def global_support(m: int, lead: tuple[int, ...], w: np.ndarray) -> np.ndarray:
    """Structural non-zero pattern of Ã given the top-2 weight pattern ``w``."""
    sup = np.zeros(lead + (m + 1, m + 1), dtype=bool)
    sup[..., 0, 0] = True
    sup[..., 1:, 0] = True
    sup[..., 1:, 1:] = (w != 0) | np.eye(m, dtype=bool)
    return sup


def masked_row_softmax(x: Tensor, support: np.ndarray) -> Tensor:
    """Softmax over each row restricted to ``support``; off-support entries are exactly 0."""
    shift = np.where(support, x.data, -np.inf).max(axis=-1, keepdims=True)
    e = T.exp(x - shift) * support.astype(x.dtype)
    return e / e.sum(axis=-1, keepdims=True)


def pe_in_edges_adjacency(v, p) -> AdjacencyMatrix:
    """Variant where positional encodings shape the edges.

    Coefficients are plain dot products of ``v + p`` (no norm division); top-2
    masking follows, then a softmax over each row's support of Ã.
    """
    v, p = as_tensor(v), as_tensor(p)
    alpha = dot_matrix(v + p)
    w = top2_weights(alpha.data)
    a = alpha * w + np.eye(alpha.shape[-1], dtype=alpha.dtype)
    ext = extend_with_global(a)
    soft = masked_row_softmax(ext, global_support(a.shape[-1], a.shape[:-2], w))
    return AdjacencyMatrix(a, soft, sym_normalize(soft))


def build_graph(v_patches, pe_rows=None, pe_in_edges: bool = False) -> AdjacencyMatrix:
    """Full adjacency pipeline for patch embeddings (..., M, dim).

    ``pe_rows`` (M, dim) is only read in the PE-in-edges variant.
    """
    if pe_in_edges:
        if pe_rows is None:
            raise ValueError("pe_in_edges variant needs positional encodings")
        return pe_in_edges_adjacency(v_patches, pe_rows)
    a = build_masked_adjacency(v_patches)
    ext = extend_with_global(a)
    return AdjacencyMatrix(a, ext, sym_normalize(ext))


def dump_adjacency_csv(prefix: str | Path, adj: AdjacencyMatrix) -> list[Path]:
    """Write A, Ã and Â of a single (unbatched) graph as CSV files."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag, mat in (("A", adj.masked), ("A_ext", adj.extended), ("A_norm", adj.normalized)):
        path = prefix.with_name(f"{prefix.name}_{tag}.csv")
        np.savetxt(path, np.asarray(mat.data, dtype=np.float64).reshape(mat.shape[-2:]), delimiter=",", fmt="%.8g")
        paths.append(path)
    return paths
