"""``rdcodec`` command-line entry points.

Exit codes: 0 ok, 1 partial sweep failure, 2 bad arguments,
3 model or version mismatch, 4 I/O error, 5 corrupt stream.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bitstream, checkpoint, data, evaluation
from .cognition import pretrain_proxy
from .config import PROBE_DATA, ConfigError, RunConfig, load_config
from .entropy import DecodeError
from .training import train_stage1, train_stage2

EXIT_OK, EXIT_PARTIAL, EXIT_ARGS, EXIT_MODEL, EXIT_IO, EXIT_CORRUPT = 0, 1, 2, 3, 4, 5

log = logging.getLogger("rdcodec")
_DEFAULTS = RunConfig()


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _unit_interval(name):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number") from None
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in [0, 1], got {v}")
        return v
    return parse


def _grid(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("grid values must lie in [0, 1]")
    return vals



# -- shared plumbing ----------------------------------------------------------

def _config(args, **overrides) -> RunConfig:
    try:
        return load_config(args.config, overrides)
    except ConfigError as err:
        raise CliError(EXIT_ARGS, str(err)) from err
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read config: {err}") from err


def _echo(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def _load(loader, path):
    try:
        return loader(path)
    except FileNotFoundError as err:
        raise CliError(EXIT_IO, f"missing file: {path}") from err
    except checkpoint.CheckpointError as err:
        raise CliError(EXIT_MODEL, str(err)) from err
    except OSError as err:
        raise CliError(EXIT_IO, f"{path}: {err}") from err


def _dataset(cfg: RunConfig, split: str):
    count = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}[split]
    try:
        return data.load_dataset(cfg.dataset, split, count)
    except OSError as err:
        raise CliError(EXIT_IO, f"dataset {cfg.dataset!r}: {err}") from err


def _probe(cfg: RunConfig, encoder, model):
    images, labels = _dataset(cfg, "train")
    if cfg.probe_data == "cognition":
        images, labels = images[: cfg.probe_count], labels[: cfg.probe_count]
        anchors = np.linspace(0.0, 1.0, model.gains.num_anchors)
        return evaluation.fit_probe(encoder, images, labels, "cognition", model, anchors, cfg.seed)
    return evaluation.fit_probe(encoder, images, labels, seed=cfg.seed)


# -- commands -----------------------------------------------------------------

def cmd_pretrain_proxy(args):
    cfg = _config(args, out_dir=args.out_dir, proxy_steps=args.steps)
    _echo(cfg, cfg.out_dir)
    images, _ = _dataset(cfg, "train")
    enc = pretrain_proxy(images, cfg.proxy_config())
    path = Path(cfg.out_dir) / "proxy.ckpt"
    checkpoint.save_encoder(path, enc, extra={"proxy": cfg.proxy_config().to_dict()})
    print(f"proxy encoder written to {path}")


def cmd_train_stage1(args):
    cfg = _config(args, out_dir=args.out_dir, proxy_checkpoint=args.proxy,
                  stage1_steps=args.steps, stage1_lambda_local=args.lambda_local)
    _echo(cfg, cfg.out_dir)
    enc = _load(checkpoint.load_encoder, cfg.proxy_checkpoint)
    images, _ = _dataset(cfg, "train")
    train_stage1(cfg.stage1_config(), images, enc, cfg.model_config(), cfg.out_dir)
    print(f"stage I checkpoint written to {Path(cfg.out_dir) / 'stage1.ckpt'}")


def cmd_train_stage2(args):
    cfg = _config(args, out_dir=args.out_dir, stage1_checkpoint=args.stage1, stage2_steps=args.steps)
    _echo(cfg, cfg.out_dir)
    model = _load(checkpoint.load_checkpoint, cfg.stage1_checkpoint)
    images, _ = _dataset(cfg, "train")
    try:
        train_stage2(cfg.stage2_config(), model, images, cfg.out_dir)
    except Exception as err:
        if "stage" in str(err):
            raise CliError(EXIT_MODEL, str(err)) from err
        raise
    print(f"stage II checkpoint written to {Path(cfg.out_dir) / 'stage2.ckpt'}")


def cmd_compress(args):
    model = _load(checkpoint.load_checkpoint, args.model)
    try:
        img = data.load_image(args.input)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read image {args.input}: {err}") from err
    alpha_s = args.alpha_s if args.aux else None
    try:
        stream = bitstream.compress(img, args.alpha, model, alpha_s=alpha_s)
    except bitstream.ModelVersionError as err:
        raise CliError(EXIT_MODEL, str(err)) from err
    out = args.out or str(Path(args.input).with_suffix(".rdc"))
    try:
        Path(out).write_bytes(stream.to_bytes())
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write {out}: {err}") from err
    hd = stream.header
    print(f"bpp {stream.bpp:.6f}")
    print(f"bytes header {bitstream.HEADER_SIZE} z {hd.len_z} y {hd.len_y} s {hd.len_s} total {len(stream)}")


def cmd_decompress(args):
    model = _load(checkpoint.load_checkpoint, args.model)
    try:
        blob = Path(args.input).read_bytes()
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read {args.input}: {err}") from err
    try:
        img = bitstream.decompress(blob, args.beta, model)
    except (DecodeError, bitstream.StreamFormatError) as err:
        raise CliError(EXIT_CORRUPT, f"corrupt stream: {err}") from err
    except bitstream.ModelVersionError as err:
        raise CliError(EXIT_MODEL, str(err)) from err
    out = args.out or str(Path(args.input).with_suffix(".png"))
    try:
        data.save_image(out, img)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot write {out}: {err}") from err
    print(f"wrote {out}")


def _stage2_setup(args, **overrides):
    cfg = _config(args, **overrides)
    model = _load(checkpoint.load_checkpoint, args.model or cfg.stage2_checkpoint)
    enc = _load(checkpoint.load_encoder, args.proxy or cfg.proxy_checkpoint)
    return cfg, model, enc


def cmd_eval(args):
    cfg, model, enc = _stage2_setup(args, probe_data=args.probe_data)
    images, labels = _dataset(cfg, args.split)
    aux = model.trained_stage >= 2
    probe = _probe(cfg, enc, model)
    surf = evaluation.sweep_surface(model, images, labels, enc, probe, [args.alpha], [args.beta],
                                    alpha_s=cfg.sweep_alpha_s if aux else None)
    p = surf.at(args.alpha, args.beta)
    print(json.dumps({"alpha": p.alpha, "beta": p.beta, "bpp": p.bpp, "psnr_db": p.psnr_db,
                      "probe_acc": p.probe_acc, "images": len(images)}))


def _plot_surface(surf, out_prefix: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for metric, label in (("probe_acc", "probe accuracy"), ("psnr_db", "PSNR (dB)")):
        fig, ax = plt.subplots(figsize=(5, 4))
        for b in surf.betas:
            pts = [surf.points[(a, b)] for a in surf.alphas if (a, b) in surf.points]
            ax.plot([p.bpp for p in pts], [getattr(p, metric) for p in pts], marker="o", label=f"beta={b:g}")
        ax.set_xlabel("bpp")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        path = out_prefix.with_name(f"{out_prefix.stem}_{metric}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def cmd_sweep(args):
    overrides = {"sweep_alphas": args.alphas, "sweep_betas": args.betas, "dataset": args.dataset,
                 "probe_data": args.probe_data}
    cfg, model, enc = _stage2_setup(args, **overrides)
    images, labels = _dataset(cfg, args.split)
    probe = _probe(cfg, enc, model)
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out_csv.parent)

    surf = evaluation.TradeoffSurface(tuple(cfg.sweep_alphas), tuple(cfg.sweep_betas))
    failures = {}
    for a in surf.alphas:
        try:
            part = evaluation.sweep_surface(model, images, labels, enc, probe, [a], surf.betas,
                                            alpha_s=cfg.sweep_alpha_s)
            for p in part.points.values():
                surf.add(p)
        except evaluation.SweepCellError as err:
            for b in surf.betas:
                if err.beta is None or err.beta == b:
                    failures[(a, b)] = str(err)
            log.error("%s", err)

    if failures:
        rows = [",".join((*evaluation.CSV_FIELDS, "error"))]
        for a in surf.alphas:
            for b in surf.betas:
                if (a, b) in surf.points:
                    p = surf.points[(a, b)]
                    rows.append(",".join([*(repr(float(v)) for v in
                                            (p.alpha, p.beta, p.alpha_s, p.bpp, p.psnr_db, p.probe_acc)), ""]))
                else:
                    msg = failures.get((a, b), "skipped").replace(",", ";")
                    rows.append(",".join([repr(float(a)), repr(float(b)), repr(float(cfg.sweep_alpha_s)),
                                          "nan", "nan", "nan", msg]))
        out_csv.write_text("\n".join(rows) + "\n")
        print(f"{len(failures)} sweep cells failed; see {out_csv}", file=sys.stderr)
        return EXIT_PARTIAL

    out_csv.write_text(surf.to_csv())
    plots = _plot_surface(surf, out_csv)
    print(f"wrote {out_csv} and {', '.join(str(p) for p in plots)}")
    corners = surf.corners()
    if {"A", "B"} <= corners.keys():
        a, b = corners["A"], corners["B"]
        ok_acc = a.probe_acc >= b.probe_acc
        ok_psnr = b.psnr_db >= a.psnr_db
        print(f"corner A acc {a.probe_acc:.4f} >= B acc {b.probe_acc:.4f}: {'PASS' if ok_acc else 'FAIL'}")
        print(f"corner B psnr {b.psnr_db:.3f} >= A psnr {a.psnr_db:.3f}: {'PASS' if ok_psnr else 'FAIL'}")
    return EXIT_OK


def _save_plot_image(path: Path, array: np.ndarray) -> None:
    lo, hi = float(np.min(array)), float(np.max(array))
    scaled = (array - lo) / (hi - lo) if hi > lo else np.zeros_like(array)
    data.save_image(path, np.repeat(scaled[None], 3, axis=0))


def cmd_diagnose(args):
    cfg, model, enc = _stage2_setup(args)
    images, _ = _dataset(cfg, args.split)
    images = images[: args.count]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x1s, x2s, first = [], [], None
    for x in images:
        stream = bitstream.compress(x, args.alpha, model, alpha_s=cfg.sweep_alpha_s)
        lat = bitstream.decode_latents(stream.to_bytes(), model)
        x1, r = bitstream.reconstruct(lat, model)
        h, w = x.shape[1:]
        x1s.append(x1[:, :h, :w].numpy())
        x2s.append((x1 + r)[:, :h, :w].numpy())
        first = first or lat
    x1s, x2s = np.stack(x1s), np.stack(x2s)
    rep = evaluation.diagnostics(images, x1s, x2s, model, first["y_hat"], first["s_hat"])
    for name, spec in rep["spectrum"].items():
        _save_plot_image(out / f"spectrum_{name}.png", spec)
    data.save_image(out / "x_hat1.png", np.clip(x1s[0], 0, 1))
    data.save_image(out / "x_hat2.png", np.clip(x2s[0], 0, 1))
    summary = {
        "hf_ratio": rep["hf_ratio"],
        "out_of_range": rep["out_of_range"],
        "histogram": {k: {"counts": c.tolist(), "edges": e.tolist()} for k, (c, e) in rep["histogram"].items()},
        "gradient": {k: v.tolist() for k, v in rep["gradient"].items()},
        "energy": {k: v.tolist() for k, v in rep["energy"].items()},
    }
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({"hf_ratio": rep["hf_ratio"], "out_of_range": rep["out_of_range"]}))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rdcodec", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="flat key = value config file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("pretrain-proxy", cmd_pretrain_proxy, "pretrain the contrastive proxy encoder")
    p.add_argument("--out-dir", default=_DEFAULTS.out_dir, help="output directory")
    p.add_argument("--steps", type=int, default=_DEFAULTS.proxy_steps, help="optimizer steps")

    p = add("train-stage1", cmd_train_stage1, "train the primary branch with the cognition loss")
    p.add_argument("--proxy", default=_DEFAULTS.proxy_checkpoint, help="proxy encoder checkpoint")
    p.add_argument("--out-dir", default=_DEFAULTS.out_dir, help="output directory")
    p.add_argument("--steps", type=int, default=_DEFAULTS.stage1_steps, help="optimizer steps")
    p.add_argument("--lambda-local", type=float, default=_DEFAULTS.stage1_lambda_local,
                   help="weight of the out-of-range pixel penalty")

    p = add("train-stage2", cmd_train_stage2, "train the auxiliary branch on a frozen stage-I model")
    p.add_argument("--stage1", default=_DEFAULTS.stage1_checkpoint, help="stage-I checkpoint")
    p.add_argument("--out-dir", default=_DEFAULTS.out_dir, help="output directory")
    p.add_argument("--steps", type=int, default=_DEFAULTS.stage2_steps, help="optimizer steps")

    p = add("compress", cmd_compress, "encode an image into a .rdc container")
    p.add_argument("input", help="8-bit RGB image")
    p.add_argument("--model", required=True, help="trained codec checkpoint")
    p.add_argument("--alpha", type=_unit_interval("alpha"), default=1.0, help="quality index in [0, 1]")
    p.add_argument("--aux", action=argparse.BooleanOptionalAction, default=True, help="emit the auxiliary stream")
    p.add_argument("--alpha-s", type=_unit_interval("alpha-s"), default=0.0, help="auxiliary quality index")
    p.add_argument("--out", default=None, help="output path; None means the input path with .rdc")

    p = add("decompress", cmd_decompress, "decode a .rdc container to an 8-bit PNG")
    p.add_argument("input", help=".rdc container")
    p.add_argument("--model", required=True, help="trained codec checkpoint")
    p.add_argument("--beta", type=_unit_interval("beta"), default=0.0,
                   help="mix weight; 1 favours cognition, 0 favours fidelity")
    p.add_argument("--out", default=None, help="output path; None means the input path with .png")

    for name, func, text in (
        ("eval", cmd_eval, "rate, PSNR and probe accuracy at one (alpha, beta)"),
        ("sweep", cmd_sweep, "evaluate the full (alpha, beta) trade-off grid"),
        ("diagnose", cmd_diagnose, "histograms, spectra and channel profiles"),
    ):
        p = add(name, func, text)
        p.add_argument("--model", default=None, help=f"codec checkpoint; None means {_DEFAULTS.stage2_checkpoint}")
        p.add_argument("--proxy", default=None, help=f"proxy checkpoint; None means {_DEFAULTS.proxy_checkpoint}")
        p.add_argument("--split", default="test", choices=("train", "val", "test"), help="evaluation split")
        if name in ("eval", "sweep"):
            p.add_argument("--probe-data", choices=PROBE_DATA, default=None,
                           help=f"probe training images; None means {_DEFAULTS.probe_data}")
        if name == "eval":
            p.add_argument("--alpha", type=_unit_interval("alpha"), default=1.0, help="quality index")
            p.add_argument("--beta", type=_unit_interval("beta"), default=0.0, help="mix weight")
        if name == "sweep":
            p.add_argument("--alphas", type=_grid, default=_DEFAULTS.sweep_alphas, help="comma-separated alpha grid")
            p.add_argument("--betas", type=_grid, default=_DEFAULTS.sweep_betas, help="comma-separated beta grid")
            p.add_argument("--dataset", default=_DEFAULTS.dataset, help="'builtin' or a manifest path")
            p.add_argument("--out-csv", default="runs/default/surface.csv", help="surface CSV path")
        if name == "diagnose":
            p.add_argument("--alpha", type=_unit_interval("alpha"), default=1.0, help="quality index")
            p.add_argument("--count", type=int, default=32, help="images to analyse")
            p.add_argument("--out-dir", default="runs/default/diagnostics", help="report directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except CliError as err:
        print(f"rdcodec {args.command}: {err}", file=sys.stderr)
        return err.code
    except bitstream.ModelVersionError as err:
        print(f"rdcodec {args.command}: {err}", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
