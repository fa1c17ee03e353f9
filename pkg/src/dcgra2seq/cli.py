"""``dcg`` command line: ingest, synth-data, train, generate, heal, eval, interpolate, gradcheck.

Every command resolves its configuration (defaults < ``--config`` file < flags)
before doing any work and writes ``resolved_config.txt`` into its output
directory. The config file is plain ``key = value`` lines, ``#`` comments
allowed; keys are the long flag names with dashes replaced by underscores.

Exit codes: 0 success, 1 runtime failure (including a failed gradient check),
2 usage error, 3 missing or incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import collections
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .data import (SHAPES, StrokeSequence, load_dataset, mask_seed, normalize, parse_quickdraw_ndjson,
                   rasterize, synthetic_corpus, to_ndjson_line, write_cache)
from .diagnostics import end_to_end_gradcheck
from .evaluation import SketchClassifier, evaluate, heal, interpolate_latents, regenerate
from .graph import AdjacencyMatrix, dump_adjacency_csv
from .model import CheckpointMismatch, load_model, save_checkpoint
from .tensor import Tensor, no_grad
from .training import TrainConfig, train, write_loss_curve

log = logging.getLogger("dcg")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3

COMMANDS = ("ingest", "train", "generate", "heal", "eval", "interpolate", "gradcheck", "synth-data")
CHECKPOINT_FILE = "model.dck"
RET_KS = (1, 10, 50)

# value every resolvable key takes when neither the config file nor a flag sets it
DEFAULTS = {
    "data": None, "out": None, "ckpt": None, "scale": "toy", "mask": 0.0, "seed": 0,
    "epochs": None, "batch": None, "patches": None, "no_abs_pe": False, "no_rel_pe": False,
    "pe_in_edges": False, "dump_graph": False, "threads": None, "count": 32,
    "shapes": "circle,zigzag", "steps": 5, "limit": None, "classifier_steps": 200,
}
_TYPES = {"mask": float, "seed": int, "epochs": int, "batch": int, "patches": int, "threads": int,
          "count": int, "steps": int, "limit": int, "classifier_steps": int}
_BOOLS = {"no_abs_pe", "no_rel_pe", "pe_in_edges", "dump_graph"}


class UsageError(Exception):
    pass


class MissingCheckpoint(Exception):
    pass


# -- configuration -----------------------------------------------------------------

def read_config_file(path: str | Path) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    parser.read_string("[run]\n" + text)
    out = {}
    for key, raw in parser["run"].items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def _coerce(key: str, raw: str):
    if raw.strip().lower() in ("", "none"):
        return None
    if key in _BOOLS:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    try:
        return _TYPES.get(key, str)(raw.strip())
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from exc


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicitly given flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    if cfg["mask"] not in (0.0, 0.1, 0.3):
        raise UsageError(f"mask must be one of 0, 0.1, 0.3 (got {cfg['mask']})")
    if cfg["scale"] not in ("paper", "toy"):
        raise UsageError(f"scale must be paper or toy (got {cfg['scale']})")
    if cfg["out"] is None:
        cfg["out"] = str(Path(os.environ.get("DCG_OUT_DIR", "dcg_runs")) / command)
    cfg["command"] = command
    return cfg


def write_resolved(cfg: dict, out: Path) -> None:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(cfg.items())]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def train_config(cfg: dict) -> TrainConfig:
    overrides = {"seed": cfg["seed"], "use_absolute_pe": not cfg["no_abs_pe"],
                 "use_relative_pe": not cfg["no_rel_pe"], "pe_in_edges": cfg["pe_in_edges"]}
    for key in ("epochs", "batch", "patches"):
        if cfg[key] is not None:
            overrides[key] = cfg[key]
    return TrainConfig.preset(cfg["scale"], **overrides)


# -- artifact helpers ----------------------------------------------------------------

def save_png(path: Path, image: np.ndarray) -> None:
    """Black strokes on white, 8-bit grayscale."""
    pixels = (255 * (1.0 - np.clip(image, 0.0, 1.0))).round().astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, optimize=False)


def write_ndjson(path: Path, seqs) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(to_ndjson_line(s) + "\n")


def require_data(cfg: dict, max_len: int | None = None) -> list[StrokeSequence]:
    if cfg["data"] is None:
        raise UsageError("--data is required for this command")
    if not Path(cfg["data"]).exists():
        raise UsageError(f"data path {cfg['data']} does not exist")
    seqs = load_dataset(cfg["data"], max_len)
    if not seqs:
        raise UsageError(f"no sketches found under {cfg['data']}")
    if cfg["limit"] is not None:
        seqs = seqs[:cfg["limit"]]
    return seqs


def require_model(cfg: dict):
    ckpt = cfg["ckpt"]
    if ckpt is None:
        raise MissingCheckpoint("--ckpt is required for this command")
    path = Path(ckpt)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint {path} not found")
    model, header = load_model(path)
    model.eval()
    if cfg["data"] is None:
        cfg["data"] = header["extra"].get("data")
    return model, header


# -- commands -------------------------------------------------------------------------

def cmd_synth_data(cfg: dict, out: Path) -> dict:
    shapes = [s.strip() for s in cfg["shapes"].split(",") if s.strip()]
    unknown = set(shapes) - set(SHAPES)
    if unknown or not shapes:
        raise UsageError(f"unknown shapes {sorted(unknown)}; choose from {SHAPES}")
    per = -(-cfg["count"] // len(shapes))
    seqs = synthetic_corpus(shapes, per, cfg["seed"])
    written = collections.Counter()
    for shape in shapes:
        mine = [s for s in seqs if s.category == shape]
        mine = mine[:cfg["count"] - sum(written.values())] if shape == shapes[-1] else mine
        write_ndjson(out / f"{shape}.ndjson", mine)
        written[shape] = len(mine)
    return {"written": dict(written)}


def cmd_ingest(cfg: dict, out: Path) -> dict:
    if cfg["data"] is None:
        raise UsageError("--data is required for ingest")
    src = Path(cfg["data"])
    files = [src] if src.is_file() else sorted(src.glob("*.ndjson"))
    if not files:
        raise UsageError(f"no .ndjson files under {src}")
    report = {}
    for f in files:
        counter = collections.Counter()
        with open(f) as fh:
            seqs = [normalize(s) for s in parse_quickdraw_ndjson(fh, counter)]
        with open(out / f"{f.stem}.dcs", "wb") as fh:
            write_cache(fh, seqs)
        report[f.stem] = {"kept": len(seqs), "malformed": counter["malformed"], "empty": counter["empty"]}
    return report


def cmd_train(cfg: dict, out: Path) -> dict:
    tcfg = train_config(cfg)
    seqs = require_data(cfg, tcfg.model_config().max_len)
    res = train(seqs, tcfg, on_step=lambda step, epoch, nll: log.info("step %d epoch %d nll %.4f",
                                                                       step, epoch, nll))
    save_checkpoint(out / CHECKPOINT_FILE, res.model,
                    extra={"data": str(Path(cfg["data"]).resolve()), "steps": res.steps, "seed": tcfg.seed})
    write_loss_curve(out / "loss_curve.csv", res.curve)
    if cfg["dump_graph"]:
        dump_graphs(res.model, seqs[:1], out)
    return {"steps": res.steps, "skipped_steps": res.skipped_steps, "initial_nll": res.initial_nll,
            "final_nll": res.final_nll, "fingerprint": res.model.cfg.fingerprint()}


def dump_graphs(model, seqs, out: Path) -> None:
    was = model.training
    model.eval()
    with no_grad():
        _, adj = model.encode(model.images_for(seqs))
    model.train(was)
    for i in range(len(seqs)):
        one = AdjacencyMatrix(Tensor(adj.masked.data[i]), Tensor(adj.extended.data[i]),
                              Tensor(adj.normalized.data[i]))
        dump_adjacency_csv(out / f"graph_{i:03d}", one)


def cmd_generate(cfg: dict, out: Path) -> dict:
    model, _ = require_model(cfg)
    seqs = require_data(cfg, model.cfg.max_len)
    generated = regenerate(model, seqs, cfg["mask"], cfg["seed"])
    write_ndjson(out / "generated.ndjson", generated)
    for i, g in enumerate(generated):
        save_png(out / f"generated_{i:03d}.png", rasterize(g, thickness=3))
    if cfg["dump_graph"]:
        dump_graphs(model, seqs, out)
    return {"generated": len(generated)}


def cmd_heal(cfg: dict, out: Path) -> dict:
    model, _ = require_model(cfg)
    seqs = require_data(cfg, model.cfg.max_len)
    healed, masked_patches = [], 0
    for i, s in enumerate(seqs):
        canvas, g, masking = heal(model, s, cfg["mask"], mask_seed(i, cfg["seed"]))
        save_png(out / f"masked_{i:03d}.png", canvas)
        save_png(out / f"healed_{i:03d}.png", rasterize(g, thickness=3))
        healed.append(g)
        masked_patches += int(len(masking.applied))
    write_ndjson(out / "healed.ndjson", healed)
    return {"healed": len(healed), "masked_patches": masked_patches}


def cmd_eval(cfg: dict, out: Path) -> dict:
    model, _ = require_model(cfg)
    seqs = require_data(cfg, model.cfg.max_len)
    categories = sorted({s.category for s in seqs})
    classifier = SketchClassifier(categories, seed=cfg["seed"])
    classifier.fit(seqs, steps=cfg["classifier_steps"], seed=cfg["seed"])
    ks = RET_KS
    scores = evaluate(model, seqs, classifier, cfg["mask"], cfg["seed"], ks)
    metrics = {"fingerprint": model.cfg.fingerprint(), "Rec": scores["Rec"],
               **{f"Ret@{k}": scores[f"Ret@{k}"] for k in ks},
               "mask_prob": cfg["mask"], "seed": cfg["seed"],
               "note": "Rec uses a small classifier trained on the evaluation data"}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def cmd_interpolate(cfg: dict, out: Path) -> dict:
    model, _ = require_model(cfg)
    seqs = require_data(cfg, model.cfg.max_len)
    if len(seqs) < 2:
        raise UsageError("interpolate needs at least two sketches in --data")
    a, b = seqs[0], seqs[-1]
    mu = model.encode_mu(model.images_for([a, b]))
    frames = interpolate_latents(model, mu[0], mu[1], max(cfg["steps"], 2), cfg["seed"])
    for i, g in enumerate(frames):
        save_png(out / f"interp_{i:03d}.png", rasterize(g, thickness=3))
    write_ndjson(out / "interpolation.ndjson", frames)
    return {"from": a.key, "to": b.key, "frames": len(frames)}


def cmd_gradcheck(cfg: dict, out: Path) -> dict:
    if cfg["scale"] != "toy":
        raise UsageError("gradcheck runs on the toy configuration only (--scale toy)")
    report, groups = end_to_end_gradcheck(cfg["seed"])
    result = {"max_rel_error": report.max_rel_error, "groups": groups, "passed": report.passed(1e-4),
              "deterministic": report.deterministic}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    for g, err in groups.items():
        print(f"{g:12s} max relative error {err:.3e}")
    print(f"overall      max relative error {report.max_rel_error:.3e}  "
          f"{'PASS' if result['passed'] else 'FAIL'} (< 1e-4)")
    return result


HANDLERS = {
    "ingest": cmd_ingest, "train": cmd_train, "generate": cmd_generate, "heal": cmd_heal,
    "eval": cmd_eval, "interpolate": cmd_interpolate, "gradcheck": cmd_gradcheck,
    "synth-data": cmd_synth_data,
}


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override its entries")
    common.add_argument("--data", help="dataset directory or file (.ndjson or .dcs)")
    common.add_argument("--out", help="output directory (default $DCG_OUT_DIR/<command>)")
    common.add_argument("--ckpt", help="checkpoint file or training output directory")
    common.add_argument("--scale", choices=("paper", "toy"))
    common.add_argument("--mask", type=float, choices=(0.0, 0.1, 0.3), help="patch masking probability")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--patches", type=int, help="number of drawing-order patches per sketch")
    common.add_argument("--no-abs-pe", action="store_true", help="disable the absolute positional encoding")
    common.add_argument("--no-rel-pe", action="store_true", help="disable the relative positional encoding")
    common.add_argument("--pe-in-edges", action="store_true",
                        help="fold positional encodings into the edge weights")
    common.add_argument("--dump-graph", action="store_true", help="write adjacency matrices as CSV")
    common.add_argument("--threads", type=int, help="BLAS thread limit; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dcg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    extra = {
        "synth-data": [("--count", int, "number of sketches"), ("--shapes", str, "comma-separated shapes")],
        "interpolate": [("--steps", int, "frames including both endpoints")],
        "eval": [("--classifier-steps", int, "training steps of the recognition classifier")],
    }
    helps = {
        "ingest": "parse QuickDraw NDJSON into normalised binary caches",
        "train": "train a model and write checkpoint, loss curve and resolved config",
        "generate": "re-encode sketches and decode them (controllable synthesis)",
        "heal": "mask patches, encode the corrupted sketch and regenerate it",
        "eval": "Ret@k and Rec metrics at the chosen mask probability",
        "interpolate": "decode along the line between two sketches' codes",
        "gradcheck": "finite-difference check of every parameter group",
        "synth-data": "write a deterministic synthetic corpus as NDJSON",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        for flag, typ, text in extra.get(name, []):
            p.add_argument(flag, type=typ, help=text)
        if name in ("generate", "heal", "eval", "interpolate"):
            p.add_argument("--limit", type=int, help="use only the first N sketches")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on unknown commands or flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        with threadpool_limits(limits=cfg["threads"]):
            summary = HANDLERS[args.command](cfg, out)
        write_resolved(cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dcg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingCheckpoint, CheckpointMismatch) as exc:
        print(f"dcg {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    print(json.dumps(summary, sort_keys=True, default=float))
    if args.command == "gradcheck" and not summary["passed"]:
        return EXIT_RUNTIME
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
