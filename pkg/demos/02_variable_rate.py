"""One model, many rates: sweep alpha and beta on a single test image.

Uses the cached checkpoints in .artifacts/ (trained on first use, which takes
about 20 minutes on one core). Writes reconstructions to demos/out/.
"""

from pathlib import Path

import numpy as np

from rdcodec import bitstream, data
from rdcodec.evaluation import psnr
from rdcodec.pipeline import build_all

root = Path(__file__).resolve().parents[1]
art = build_all(root=root / ".artifacts", ablations=False)
model = art.stage2
out = root / "demos" / "out"
out.mkdir(exist_ok=True)

images, labels = data.load_dataset("builtin", "test", 8)
x = images[0]
data.save_image(out / "original.png", x)

print("alpha   bpp    PSNR(beta=0)  PSNR(beta=1)")
for alpha in np.linspace(0, 1, 6):
    blob = bitstream.compress(x, alpha, model, alpha_s=0.0).to_bytes()
    fidelity = bitstream.decompress(blob, 0.0, model)
    cognition = bitstream.decompress(blob, 1.0, model)
    bpp = len(blob) * 8 / (x.shape[1] * x.shape[2])
    print(f"{alpha:4.2f}  {bpp:6.3f}  {psnr(x, fidelity):10.2f}  {psnr(x, cognition):12.2f}")
    data.save_image(out / f"alpha{alpha:.1f}_beta0.png", fidelity)
    data.save_image(out / f"alpha{alpha:.1f}_beta1.png", cognition)

# Dropping the auxiliary stream costs nothing at decode time: the same
# primary bits still give x_hat1.
blob = bitstream.compress(x, 1.0, model).to_bytes()
print(f"primary stream only: {len(blob)} bytes, PSNR {psnr(x, bitstream.decompress(blob, 0.0, model)):.2f} dB")
