"""End-to-end finite-difference check of the full model loss."""
from __future__ import annotations

import numpy as np

from .data import StrokeSequence, synthetic_corpus
from .gradcheck import GradcheckReport, check_parameters
from .model import Gra2Seq, ModelConfig, reconstruction_nll
from .tensor import Tensor, no_grad

GROUPS = {
    "cnn": ("encoder.",),
    "relative_pe": ("rel_pe.",),
    "latent_mlp": ("head1.", "head2."),
    "decoder": ("init_state.", "cell.", "out."),
}


def truncate(seq: StrokeSequence, n: int) -> StrokeSequence:
    pts = seq.points[:n].copy()
    pts[-1, 2] = 1.0
    return StrokeSequence(pts, seq.category, seq.key)


def gradcheck_fixture(seed: int = 0, patches: int = 3, length: int = 5, batch: int = 2):
    cfg = ModelConfig.preset("toy", patches=patches, max_len=length)
    seqs = [truncate(s, length) for s in synthetic_corpus(["circle", "zigzag"], (batch + 1) // 2, seed)][:batch]
    model = Gra2Seq(cfg, seed=seed, dtype=np.float64)
    model.offset_scale[0] = 100.0
    for norm in model.encoder.norms:
        norm.update_stats = False
    images = model.images_for(seqs)
    # random texture on top of the rasterised strokes keeps every pooling window tie-free
    images = images + np.random.default_rng(seed).uniform(-0.5, 0.5, images.shape)
    target5, lengths = model.targets(seqs)
    eps = np.random.default_rng(seed + 1).standard_normal((len(seqs), cfg.z_dim))
    return model, images, target5, lengths, eps


def end_to_end_gradcheck(seed: int = 0, h: float = 1e-5, max_coords: int | None = None) -> tuple[GradcheckReport, dict[str, float]]:
    """Returns the per-tensor report and the max relative error per parameter group."""
    model, images, target5, lengths, eps = gradcheck_fixture(seed)
    params = dict(model.named_parameters())
    # decoder weights cannot move the latent code, so probe them with the code held fixed
    with no_grad():
        code, _ = model.encode(images, eps)
    y = Tensor(code.y.data)
    steps = int(lengths.max()) + 1

    def decoder_only():
        return reconstruction_nll(model.decode_sequence(y, target5[:, :steps]), target5[:, :steps], lengths)

    shortcuts = {name: decoder_only for name in params if name.startswith(GROUPS["decoder"])}
    report = check_parameters(lambda: model.loss(images, target5, lengths, eps), params, h=h,
                              max_coords=max_coords, rng=np.random.default_rng(seed), shortcuts=shortcuts)
    groups = {g: max(err for name, err in report.per_tensor.items() if name.startswith(prefixes))
              for g, prefixes in GROUPS.items()}
    return report, groups
