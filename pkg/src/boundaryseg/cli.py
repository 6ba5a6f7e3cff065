"""Command-line entry point: ``boundaryseg {gen,train,eval,predict,attn,gradcheck}``.

Settings resolve as defaults < ``--config`` file (``key = value`` lines,
``#`` comments) < explicit flags. Failures print a single line
``error: <kind>: <message>`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data, gradcheck, metrics, network
from .data import FormatError, SynthConfig
from .losses import LossWeights
from .manifest import RunManifest
from .network import NetworkSpec
from .train import TrainConfig

DEFAULTS = {
    "seed": 0,
    "size": 64,
    "levels": 4,
    "base_channels": 16,
    "shape_channels": 8,
    "lambda1": 1.0,
    "lambda2": 0.5,
    "lambda3": 0.1,
    "epochs": 300,
    "batch_size": 8,
    "lr": 1e-3,
    "hd95": False,
    "eval_every": 0,
    "shuffle_seed": 1,
    "n": 8,
    "noise_sigma": 0.06,
    "contrast": 0.6,
    "boundary_jitter": 0.25,
    "trials": 5,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def parse_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise CliError("config", f"{path}:{lineno}: expected key = value")
        if key not in DEFAULTS:
            raise CliError("config", f"{path}:{lineno}: unknown key '{key}'")
        out[key] = _coerce(key, value.strip())
    return out


def _coerce(key: str, value: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        return type(default)(value)
    except ValueError:
        raise CliError("config", f"bad value for {key}: '{value}'") from None


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        if not Path(args.config).exists():
            raise CliError("missing-file", f"config file not found: {args.config}")
        cfg.update(parse_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _spec(cfg: dict) -> NetworkSpec:
    try:
        spec = NetworkSpec(levels=cfg["levels"], base_channels=cfg["base_channels"],
                           shape_channels=cfg["shape_channels"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    if cfg["size"] % spec.downsample_factor:
        raise CliError("config", f"size {cfg['size']} not divisible by {spec.downsample_factor} for {spec.levels} levels")
    return spec


def _train_config(cfg: dict, checkpoint_path=None) -> TrainConfig:
    try:
        weights = LossWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"])
        return TrainConfig(alpha0=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], weights=weights,
                           seed=cfg["seed"], shuffle_seed=cfg["shuffle_seed"], eval_every=cfg["eval_every"],
                           checkpoint_path=checkpoint_path, hd95=cfg["hd95"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _load_dataset(path) -> tuple:
    if path is None:
        raise CliError("usage", "--data is required", 2)
    path = Path(path)
    if not (path / data.MANIFEST).exists():
        raise CliError("missing-file", f"no dataset manifest in {path}")
    names = [ln.strip() for ln in (path / data.MANIFEST).read_text().splitlines() if ln.strip()]
    try:
        return names, data.load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError("missing-file", str(exc)) from None


def _load_model(path, spec):
    from .train import load_checkpoint

    if path is None:
        raise CliError("usage", "--checkpoint is required", 2)
    if not Path(path).exists():
        raise CliError("missing-file", f"checkpoint not found: {path}")
    try:
        params, _, _ = load_checkpoint(path, spec)
    except FormatError:
        raise
    except ValueError as exc:
        raise CliError("incompatible", str(exc)) from None
    return params


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# PGM helpers


def write_pgm(path, values: np.ndarray) -> None:
    """Plain (P2) 8-bit PGM of a 2D array already scaled to 0..255."""
    img = np.asarray(values)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    Path(path).write_text(f"P2\n{img.shape[1]} {img.shape[0]}\n255\n{rows}\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array(tokens[4:4 + w * h], dtype=np.int64)
    if pix.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return pix.reshape(h, w), maxval


def alpha_to_gray(alpha: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.asarray(alpha)).astype(np.int64)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg) -> None:
    try:
        synth = SynthConfig(size=cfg["size"], noise_sigma=cfg["noise_sigma"], contrast=cfg["contrast"],
                            boundary_jitter=cfg["boundary_jitter"], seed=cfg["seed"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    out = _out_dir(args)
    names = data.save_dataset(out, data.generate(synth, cfg["n"]))
    print(f"wrote {len(names)} samples to {out}")


def cmd_train(args, cfg) -> None:
    from .train import load_checkpoint, train

    spec = _spec(cfg)
    _, dataset = _load_dataset(args.data)
    eval_set = _load_dataset(args.eval_data)[1] if args.eval_data else None
    out = _out_dir(args)
    tcfg = _train_config(cfg, str(out / "model.ckpt"))
    params = state = None
    start = 0
    if args.resume:
        if not Path(args.resume).exists():
            raise CliError("missing-file", f"checkpoint not found: {args.resume}")
        try:
            params, state, start = load_checkpoint(args.resume, spec)
        except FormatError:
            raise
        except ValueError as exc:
            raise CliError("incompatible", str(exc)) from None
    t0 = time.perf_counter()
    result = train(dataset, tcfg, spec, eval_set=eval_set, params=params, state=state, start_epoch=start)
    rows = [r for r in result.log if r.dice is not None] or result.log[-1:]
    snapshot = {k: v for k, v in cfg.items() if k not in ("n", "noise_sigma", "contrast", "boundary_jitter", "trials")}
    snapshot["ablation"] = "no_edge_loss" if tcfg.weights.is_no_edge_ablation else "none"
    snapshot["data"] = str(args.data)
    RunManifest(snapshot, cfg["seed"], rows).write(out / "manifest.txt")
    print(f"trained {result.epochs_done - start} epochs in {time.perf_counter() - t0:.1f}s; "
          f"final loss {result.log[-1].total:.6f}; checkpoint {out / 'model.ckpt'}")


def cmd_eval(args, cfg) -> None:
    names, dataset = _load_dataset(args.data)
    masks = np.stack([s.mask[0] for s in dataset]) > 0.5
    if args.pred:
        preds = []
        for name in names:
            path = Path(args.pred) / (Path(name).stem + ".pgm")
            if not path.exists():
                raise CliError("missing-file", f"prediction not found: {path}")
            pix, maxval = read_pgm(path)
            preds.append(pix * 2 > maxval)
        preds = np.stack(preds)
    else:
        spec = _spec(cfg)
        params = _load_model(args.checkpoint, spec)
        images = np.stack([s.image for s in dataset])
        preds = metrics.binarize(network.predict(images, spec, params)[0][:, 0])
    if preds.shape != masks.shape:
        raise CliError("incompatible", f"prediction shape {preds.shape} vs labels {masks.shape}")
    print(metrics.evaluate(preds, masks, hd95=cfg["hd95"]).table())


def cmd_predict(args, cfg) -> None:
    spec = _spec(cfg)
    names, dataset = _load_dataset(args.data)
    params = _load_model(args.checkpoint, spec)
    y_prob = network.predict(np.stack([s.image for s in dataset]), spec, params)[0]
    out = _out_dir(args)
    for name, prob in zip(names, y_prob):
        write_pgm(out / (Path(name).stem + ".pgm"), np.where(prob[0] > 0.5, 255, 0))
    print(f"wrote {len(names)} masks to {out}")


def cmd_attn(args, cfg) -> None:
    spec = _spec(cfg)
    names, dataset = _load_dataset(args.data)
    params = _load_model(args.checkpoint, spec)
    _, _, alphas = network.predict(np.stack([s.image for s in dataset]), spec, params)
    out = _out_dir(args)
    for k, name in enumerate(names):
        stem = Path(name).stem
        write_pgm(out / f"{stem}_input.pgm", alpha_to_gray(dataset[k].image[0]))
        for g, alpha in enumerate(alphas, 1):
            write_pgm(out / f"{stem}_gate{g}.pgm", alpha_to_gray(alpha[k, 0]))
    print(f"wrote attention maps for {len(names)} samples to {out}")


def cmd_gradcheck(args, cfg) -> None:
    results = gradcheck.run_suite(trials=cfg["trials"], seed=cfg["seed"])
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        print(f"{'PASS' if r.passed() else 'FAIL'}\t{r.name}\t{r.max_rel_error:.3e}")
    print(f"max relative error {worst:.3e}")
    if not all(r.passed() for r in results):
        raise CliError("gradcheck", f"max relative error {worst:.3e} >= 1e-6")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "attn": cmd_attn, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--config")
    shared.add_argument("--out-dir")
    shared.add_argument("--size", type=int)
    shared.add_argument("--levels", type=int)
    shared.add_argument("--base-channels", type=int)
    shared.add_argument("--shape-channels", type=int)
    for k in (1, 2, 3):
        shared.add_argument(f"--lambda{k}", type=float)
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--batch-size", type=int)
    shared.add_argument("--lr", type=float)
    shared.add_argument("--hd95", action="store_const", const=True)

    parser = _Parser(prog="boundaryseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("gen", parents=[shared], help="generate a synthetic dataset")
    gen.add_argument("--n", type=int)
    gen.add_argument("--noise-sigma", type=float)
    gen.add_argument("--contrast", type=float)
    gen.add_argument("--boundary-jitter", type=float)
    tr = sub.add_parser("train", parents=[shared], help="train and write a checkpoint + manifest")
    tr.add_argument("--data")
    tr.add_argument("--eval-data")
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--shuffle-seed", type=int)
    tr.add_argument("--resume")
    ev = sub.add_parser("eval", parents=[shared], help="Dice/Jaccard/Hausdorff as mean±std")
    ev.add_argument("--data")
    ev.add_argument("--checkpoint")
    ev.add_argument("--pred", help="directory of predicted PGM masks instead of a checkpoint")
    pr = sub.add_parser("predict", parents=[shared], help="write predicted masks as PGM")
    pr.add_argument("--data")
    pr.add_argument("--checkpoint")
    at = sub.add_parser("attn", parents=[shared], help="write per-gate attention maps as PGM")
    at.add_argument("--data")
    at.add_argument("--checkpoint")
    gc = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of every op")
    gc.add_argument("--trials", type=int)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
