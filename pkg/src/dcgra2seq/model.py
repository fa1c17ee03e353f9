"""Graph-to-sequence sketch model: CNN patch encoder -> PE-equipped GCN -> latent code -> GMM-LSTM decoder."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CANVAS, PATCH, StrokeSequence, from_stroke5, prepare_patches, to_stroke5
from .graph import AdjacencyMatrix, build_graph
from .nn import BatchNorm2d, Conv2d, Linear, LSTMCell, Module
from .posenc import RelativePEBank, offset_incidence, pe_tables_for_graph
from .tensor import Tensor, no_grad

LOGVAR_CLAMP = 20.0
LOGSIGMA_CLAMP = 10.0
RHO_SHRINK = 1.0 - 1e-6


@dataclass(frozen=True)
class ModelConfig:
    patches: int = 20
    input_size: int = 256
    channels: tuple[int, ...] = (8, 32, 64, 128, 256, 512, 512)
    dim: int = 512
    z_dim: int = 128
    mlp_hidden: int = 512
    hidden: int = 512
    mixtures: int = 20
    max_len: int = 200
    use_absolute_pe: bool = True
    use_relative_pe: bool = True
    pe_in_edges: bool = False
    thickness: int = 1
    logvar_init: float = -6.0

    @classmethod
    def preset(cls, scale: str, **overrides) -> "ModelConfig":
        if scale == "paper":
            base = cls()
        elif scale == "toy":
            base = cls(patches=8, input_size=16, channels=(4, 8), dim=16, z_dim=8, mlp_hidden=32,
                       hidden=32, mixtures=3, max_len=20)
        else:
            raise ValueError(f"unknown scale preset {scale!r}")
        return dataclasses.replace(base, **overrides)

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class LatentCode:
    mu: Tensor
    logvar: Tensor
    y: Tensor


@dataclass
class MixtureParams:
    log_pi: Tensor  # (..., K) log mixture weights
    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    rho: Tensor
    pen_logits: Tensor  # (..., 3)

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi.data)


def mixture_from_raw(raw: Tensor, k: int) -> MixtureParams:
    """Split the decoder projection (…, 6K+3) into constrained mixture parameters."""
    parts = [raw[..., i * k:(i + 1) * k] for i in range(6)]
    return MixtureParams(
        log_pi=T.log_softmax(parts[0], axis=-1),
        mu_x=parts[1],
        mu_y=parts[2],
        sigma_x=T.exp(T.clip(parts[3], -LOGSIGMA_CLAMP, LOGSIGMA_CLAMP)),
        sigma_y=T.exp(T.clip(parts[4], -LOGSIGMA_CLAMP, LOGSIGMA_CLAMP)),
        rho=T.tanh(parts[5]) * RHO_SHRINK,
        pen_logits=raw[..., 6 * k:6 * k + 3],
    )


def bivariate_log_density(x: Tensor, y: Tensor, mix: MixtureParams) -> Tensor:
    """log N(x, y | component k) for every component, shape (..., K)."""
    dx = (x - mix.mu_x) / mix.sigma_x
    dy = (y - mix.mu_y) / mix.sigma_y
    one_m_r2 = 1.0 - mix.rho * mix.rho
    z = dx * dx + dy * dy - 2.0 * mix.rho * dx * dy
    return (-math.log(2 * math.pi) - T.log(mix.sigma_x) - T.log(mix.sigma_y)
            - 0.5 * T.log(one_m_r2) - z / (2.0 * one_m_r2))


def reconstruction_nll(mix: MixtureParams, target: np.ndarray, lengths: np.ndarray | None = None,
                       reduce: str = "mean") -> Tensor:
    """Negative log-likelihood of stroke-5 targets (B, T, 5) under per-step mixtures.

    Offsets count for the first ``lengths[b]`` steps, pen states for those plus
    the end token. ``reduce="mean"`` averages per-sequence sums over the batch,
    ``"none"`` returns them.
    """
    target = np.asarray(target)
    b, steps = target.shape[:2]
    if lengths is None:
        lengths = np.full(b, steps)
    t_idx = np.arange(steps)[None, :]
    off_mask = (t_idx < np.asarray(lengths)[:, None]).astype(mix.mu_x.dtype)
    pen_mask = (t_idx <= np.asarray(lengths)[:, None]).astype(mix.mu_x.dtype)
    dtype = mix.mu_x.dtype
    tx = Tensor(target[..., 0:1].astype(dtype))
    ty = Tensor(target[..., 1:2].astype(dtype))
    log_mix = T.logsumexp(mix.log_pi + bivariate_log_density(tx, ty, mix), axis=-1)
    pen_lp = (T.log_softmax(mix.pen_logits, axis=-1) * target[..., 2:5].astype(dtype)).sum(axis=-1)
    per_step = -(log_mix * off_mask) - pen_lp * pen_mask
    per_seq = per_step.sum(axis=-1)
    if reduce == "none":
        return per_seq
    return per_seq.mean()


class PatchEncoder(Module):
    """Conv(2x2) -> ReLU -> max-pool(2) -> batch-norm stages, then a linear projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.convs, self.norms = [], []
        c_in, size = 1, cfg.input_size
        for c_out in cfg.channels:
            self.convs.append(Conv2d(c_in, c_out, 2, rng, dtype=dtype))
            self.norms.append(BatchNorm2d(c_out, dtype=dtype))
            c_in, size = c_out, (size - 1) // 2
            if size < 1:
                raise ValueError(f"input_size {cfg.input_size} too small for {len(cfg.channels)} stages")
        self.proj = Linear(c_in * size * size, cfg.dim, rng, dtype=dtype)
        self.input_size = cfg.input_size

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise T.ShapeError(f"encode_patches: expected {self.input_size}x{self.input_size} inputs, got {x.shape}")
        for conv, norm in zip(self.convs, self.norms):
            x = norm(T.maxpool2d(T.relu(conv(x)), 2))
        return self.proj(x.reshape(x.shape[0], -1))


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Block-max reduction of square images (..., S, S) to (..., size, size); S must be a multiple of size."""
    s = images.shape[-1]
    if s == size:
        return images
    if s % size:
        raise ValueError(f"cannot block-reduce {s} to {size}")
    f = s // size
    return images.reshape(images.shape[:-2] + (size, f, size, f)).max(axis=(-3, -1))


class Gra2Seq(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        m, d = cfg.patches, cfg.dim
        self.encoder = PatchEncoder(cfg, rng, dtype)
        self.rel_pe = RelativePEBank(m, d, rng, dtype=dtype)
        self.head1 = Linear((m + 1) * d, cfg.mlp_hidden, rng, dtype)
        self.head2 = Linear(cfg.mlp_hidden, 2 * cfg.z_dim, rng, dtype)
        # small initial sigma: no KL term pulls it back towards 1, so start near the deterministic code
        self.head2.bias.data[cfg.z_dim:] = cfg.logvar_init
        self.init_state = Linear(cfg.z_dim, 2 * cfg.hidden, rng, dtype)
        self.cell = LSTMCell(5 + cfg.z_dim, cfg.hidden, rng, dtype=dtype)
        self.out = Linear(cfg.hidden, 6 * cfg.mixtures + 3, rng, dtype)
        self.offset_scale = np.ones(1, dtype=np.float64)
        # fixed, never-trained tables; kept out of parameter/buffer discovery
        self._const = {
            "abs_pe": pe_tables_for_graph(m, d, np.float64),
            "incidence": offset_incidence(m),
        }
        if dtype != np.float32:
            self.to(dtype)

    @property
    def dtype(self):
        return self.head1.weight.dtype

    def abs_pe_table(self) -> np.ndarray:
        return self._const["abs_pe"].astype(self.dtype)

    # -- encoder side -------------------------------------------------------
    def preprocess(self, patchset) -> np.ndarray:
        """(M+1, S, S) encoder input: full image first, then patches in drawing order."""
        imgs = np.concatenate([patchset.full[None], patchset.patches], axis=0)
        return downsample(imgs, self.cfg.input_size).astype(self.dtype)

    def images_for(self, seqs: Sequence[StrokeSequence], mask_prob: float = 0.0,
                   mask_seeds: Sequence[int] | None = None) -> np.ndarray:
        out = []
        for i, s in enumerate(seqs):
            seed = 0 if mask_seeds is None else mask_seeds[i]
            ps, _, _ = prepare_patches(s, self.cfg.patches, mask_prob, seed, self.cfg.thickness)
            out.append(self.preprocess(ps))
        return np.stack(out)

    def encode_patches(self, images) -> Tensor:
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        b, n = images.shape[:2]
        if n != self.cfg.patches + 1:
            raise T.ShapeError(f"encode_patches: expected {self.cfg.patches + 1} images per sketch, got {n}")
        flat = Tensor(images.reshape((b * n, 1) + images.shape[2:]).astype(self.dtype))
        return self.encoder(flat).reshape(b, n, self.cfg.dim)

    def graph(self, v: Tensor) -> AdjacencyMatrix:
        p = self.abs_pe_table()[1:] if self.cfg.use_absolute_pe else np.zeros((self.cfg.patches, self.cfg.dim), self.dtype)
        return build_graph(v[:, 1:, :], p, pe_in_edges=self.cfg.pe_in_edges)

    def aggregate(self, v: Tensor, a_norm: Tensor, use_abs: bool | None = None,
                  use_rel: bool | None = None) -> Tensor:
        """H_i = Σ_j Â(i,j)·(V_j + R(i,j)) + P̃_i, batched over the leading axis."""
        use_abs = self.cfg.use_absolute_pe if use_abs is None else use_abs
        use_rel = self.cfg.use_relative_pe if use_rel is None else use_rel
        h = a_norm @ v
        if use_rel:
            inc = self._const["incidence"].astype(self.dtype)
            # per-row offset weights: B[b,i,k] = Σ_j Â[b,i,j]·[|i-j| = k]
            w = T.transpose(T.transpose(a_norm, (1, 0, 2)) @ inc, (1, 0, 2))
            h = h + w @ self.rel_pe.matrix()
        if use_abs:
            h = h + self.abs_pe_table()
        return h

    def latent(self, h: Tensor, eps: np.ndarray | None = None) -> LatentCode:
        flat = h.reshape(h.shape[0], -1)
        out = self.head2(T.relu(self.head1(flat)))
        z = self.cfg.z_dim
        mu = out[:, :z]
        logvar = T.clip(out[:, z:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
        y = mu if eps is None else mu + T.exp(logvar * 0.5) * eps.astype(self.dtype)
        return LatentCode(mu, logvar, y)

    def encode(self, images, eps: np.ndarray | None = None) -> tuple[LatentCode, AdjacencyMatrix]:
        v = self.encode_patches(images)
        adj = self.graph(v)
        return self.latent(self.aggregate(v, adj.normalized), eps), adj

    # -- decoder side -------------------------------------------------------
    def initial_state(self, y: Tensor) -> tuple[Tensor, Tensor]:
        s = T.tanh(self.init_state(y))
        hsz = self.cfg.hidden
        return s[..., :hsz], s[..., hsz:]

    def scale_offsets(self, s5: np.ndarray) -> np.ndarray:
        s5 = np.array(s5, dtype=np.float64, copy=True)
        s5[..., :2] /= self.offset_scale[0]
        return s5

    def decode_sequence(self, y: Tensor, target5: np.ndarray) -> MixtureParams:
        """Teacher-forced emissions for each row of the scaled stroke-5 target (B, T, 5)."""
        b, steps = target5.shape[:2]
        k = self.cfg.mixtures
        if steps == 0:
            empty = Tensor(np.zeros((b, 0, 6 * k + 3), self.dtype))
            return mixture_from_raw(empty, k)
        start = np.zeros((b, 1, 5))
        start[:, 0, 2] = 1
        prev = np.concatenate([start, target5[:, :-1]], axis=1).astype(self.dtype)
        state = self.initial_state(y)
        outs = []
        for t in range(steps):
            x = T.concat([Tensor(prev[:, t]), y], axis=-1)
            state = self.cell(x, state)
            outs.append(self.out(state[0]))
        return mixture_from_raw(T.stack(outs, axis=1), k)

    def targets(self, seqs: Sequence[StrokeSequence]) -> tuple[np.ndarray, np.ndarray]:
        s5 = np.stack([to_stroke5(s, self.cfg.max_len) for s in seqs])
        return self.scale_offsets(s5), np.array([len(s) for s in seqs])

    def loss(self, images, target5: np.ndarray, lengths: np.ndarray, eps: np.ndarray | None) -> Tensor:
        code, _ = self.encode(images, eps)
        steps = int(lengths.max()) + 1
        mix = self.decode_sequence(code.y, target5[:, :steps])
        return reconstruction_nll(mix, target5[:, :steps], lengths)

    # -- sampling -----------------------------------------------------------
    def generate(self, y, temperature: float = 1.0, rng: np.random.Generator | None = None,
                 greedy: bool = False) -> StrokeSequence:
        """Autoregressive sampling from one latent code until the end state or ``max_len``.

        ``temperature`` divides mixture/pen logits and scales variances;
        ``greedy`` takes the top component's mean and the most likely pen state.
        """
        if not greedy and not 0 < temperature <= 1:
            raise ValueError(f"temperature must be in (0, 1], got {temperature}")
        rng = rng or np.random.default_rng(0)
        k = self.cfg.mixtures
        y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=self.dtype).reshape(1, -1)
        rows = []
        with no_grad():
            yt = Tensor(y)
            state = self.initial_state(yt)
            prev = np.array([[0, 0, 1, 0, 0]], dtype=self.dtype)
            for _ in range(self.cfg.max_len):
                state = self.cell(T.concat([Tensor(prev), yt], axis=-1), state)
                raw = self.out(state[0]).data[0].astype(np.float64)
                row = _sample_step(raw, k, temperature, rng, greedy)
                rows.append(row)
                if row[4] > 0.5:
                    break
                prev = row[None].astype(self.dtype)
        s5 = np.array(rows).reshape(-1, 5)
        s5[:, :2] *= self.offset_scale[0]
        return from_stroke5(s5)

    @no_grad()
    def encode_mu(self, images) -> np.ndarray:
        """Deterministic codes (y = μ) in eval mode."""
        was = self.training
        self.eval()
        try:
            code, _ = self.encode(images)
        finally:
            self.train(was)
        return code.mu.data.astype(np.float64)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _sample_step(raw: np.ndarray, k: int, tau: float, rng: np.random.Generator, greedy: bool) -> np.ndarray:
    pi_logits, mux, muy = raw[:k], raw[k:2 * k], raw[2 * k:3 * k]
    sx = np.exp(np.clip(raw[3 * k:4 * k], -LOGSIGMA_CLAMP, LOGSIGMA_CLAMP))
    sy = np.exp(np.clip(raw[4 * k:5 * k], -LOGSIGMA_CLAMP, LOGSIGMA_CLAMP))
    rho = np.tanh(raw[5 * k:6 * k]) * RHO_SHRINK
    pen_logits = raw[6 * k:6 * k + 3]
    out = np.zeros(5)
    if greedy:
        j = int(np.argmax(pi_logits))
        out[0], out[1] = mux[j], muy[j]
        out[2 + int(np.argmax(pen_logits))] = 1
        return out
    j = int(rng.choice(k, p=_softmax(pi_logits / tau)))
    n1, n2 = rng.standard_normal(2)
    s = math.sqrt(tau)
    out[0] = mux[j] + sx[j] * s * n1
    out[1] = muy[j] + sy[j] * s * (rho[j] * n1 + math.sqrt(1 - rho[j] ** 2) * n2)
    out[2 + int(rng.choice(3, p=_softmax(pen_logits / tau)))] = 1
    return out


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"DCK1"
CKPT_VERSION = 1


class CheckpointMismatch(ValueError):
    pass


def write_container(path: str | Path, config: dict, fingerprint: str, state: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Versioned container: magic, version, JSON header (config + fingerprint + names), tensor snapshots."""
    names = sorted(state)
    header = {
        "version": CKPT_VERSION,
        "config": config,
        "fingerprint": fingerprint,
        "names": names,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        T.save_tensor(buf, np.asarray(state[n]))
    Path(path).write_bytes(buf.getvalue())


def save_checkpoint(path: str | Path, model: Gra2Seq, extra: dict | None = None) -> None:
    write_container(path, model.cfg.to_dict(), model.cfg.fingerprint(), model.state_dict(), extra)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        state = {name: T.load_tensor(fh) for name in header["names"]}
    return header, state


def load_model(path: str | Path, expect: ModelConfig | None = None) -> tuple[Gra2Seq, dict]:
    header, state = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointMismatch(f"{path}: fingerprint does not match stored config")
    if expect is not None and expect.fingerprint() != cfg.fingerprint():
        raise CheckpointMismatch(f"{path}: architecture {cfg.fingerprint()} != expected {expect.fingerprint()}")
    dtype = state["head1.weight"].dtype
    model = Gra2Seq(cfg, dtype=dtype)
    model.load_state_dict(state)
    return model, header
