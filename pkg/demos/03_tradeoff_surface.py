"""Rate, fidelity and probe accuracy over an (alpha, beta) grid.

The probe is a linear classifier on frozen proxy features, trained on beta=1
reconstructions of 1000 training images at the six anchors.
Prints the surface and saves it as demos/out/surface.csv.
"""

from pathlib import Path

import numpy as np

from rdcodec import data
from rdcodec.evaluation import fit_probe, sweep_surface
from rdcodec.pipeline import build_all

root = Path(__file__).resolve().parents[1]
art = build_all(root=root / ".artifacts", ablations=False)
train_x, train_y = data.load_dataset("builtin", "train", 1000)
probe = fit_probe(art.encoder, train_x, train_y, "cognition", art.stage2, np.linspace(0, 1, 6))
test_x, test_y = data.load_dataset("builtin", "test", 100)

surf = sweep_surface(art.stage2, test_x, test_y, art.encoder, probe, (0.0, 0.5, 1.0), (0.0, 0.5, 1.0))
for (a, b), p in sorted(surf.points.items()):
    print(f"alpha {a:.1f} beta {b:.1f}: {p.bpp:.3f} bpp  {p.psnr_db:5.2f} dB  acc {p.probe_acc:.3f}")

out = root / "demos" / "out"
out.mkdir(exist_ok=True)
(out / "surface.csv").write_text(surf.to_csv())
