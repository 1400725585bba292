"""End-to-end toy training with an on-disk cache.

``build_all`` runs proxy pretraining, stage I, stage II and the two ablations
(no out-of-range penalty; no scalable stream) and stores every checkpoint under
one directory. A run whose stored config echo matches is loaded instead of
retrained.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import checkpoint, data
from .codec_core import VersatileCodec, without_scalable
from .cognition import ContrastiveEncoder, pretrain_proxy
from .config import RunConfig
from .training import train_stage1, train_stage2

log = logging.getLogger(__name__)


@dataclass
class Artifacts:
    root: Path
    encoder: ContrastiveEncoder
    stage1: VersatileCodec
    stage1_no_local: VersatileCodec
    stage2: VersatileCodec
    stage2_no_aux: VersatileCodec
    timings: dict


def _timed(timings: dict, name: str, fn):
    t0 = time.perf_counter()
    out = fn()
    timings[name] = time.perf_counter() - t0
    log.info("%s finished in %.1f s", name, timings[name])
    return out


def build_all(cfg: RunConfig | None = None, root: str | Path = ".artifacts", ablations: bool = True) -> Artifacts:
    cfg = cfg or RunConfig()
    root = Path(root)
    stamp = root / "config.txt"
    if root.exists() and (not stamp.exists() or stamp.read_text() != cfg.to_text()):
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp.write_text(cfg.to_text())
    timing_file = root / "timings.json"
    timings = json.loads(timing_file.read_text()) if timing_file.exists() else {}

    images = None

    def train_images():
        nonlocal images
        if images is None:
            images, _ = data.load_dataset(cfg.dataset, "train", cfg.train_count)
        return images

    proxy_path = root / "proxy.ckpt"
    if not proxy_path.exists():
        enc = _timed(timings, "proxy", lambda: pretrain_proxy(train_images(), cfg.proxy_config()))
        checkpoint.save_encoder(proxy_path, enc)
    encoder = checkpoint.load_encoder(proxy_path)

    def stage1_run(name, s1cfg):
        path = root / name / "stage1.ckpt"
        if not path.exists():
            _timed(timings, name, lambda: train_stage1(s1cfg, train_images(), encoder, cfg.model_config(), root / name))
        return checkpoint.load_checkpoint(path)

    def stage2_run(name, base_fn):
        path = root / name / "stage2.ckpt"
        if not path.exists():
            _timed(timings, name, lambda: train_stage2(cfg.stage2_config(), base_fn(), train_images(), root / name))
        return checkpoint.load_checkpoint(path)

    stage1 = stage1_run("stage1", cfg.stage1_config())
    stage2 = stage2_run("stage2", lambda: checkpoint.load_checkpoint(root / "stage1" / "stage1.ckpt"))
    if ablations:
        no_local = stage1_run("stage1_no_local", replace(cfg.stage1_config(), lambda_local=0.0))
        no_aux = stage2_run("stage2_no_aux",
                            lambda: without_scalable(checkpoint.load_checkpoint(root / "stage1" / "stage1.ckpt")))
    else:
        no_local = no_aux = None
    timing_file.write_text(json.dumps(timings, indent=1))
    return Artifacts(root, encoder, stage1, no_local, stage2, no_aux, timings)
