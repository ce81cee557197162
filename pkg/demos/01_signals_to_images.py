"""
From bits to the five modality images
=====================================

One QPSK burst goes through the channel and comes out as the five aligned
views the model trains on. PPM files land in ./demo_out.
"""
from pathlib import Path

import numpy as np

from denomae.constellation import GridSpec, render_gray, render_rgb, write_ppm
from denomae.modulation import SCHEME_NAMES, apply_awgn, measure_snr, modulate, resample_to_base
from denomae.pipeline import make_sample

out = Path("demo_out")
out.mkdir(exist_ok=True)

print("schemes:", ", ".join(SCHEME_NAMES))

# 1024 symbols at one sample per symbol, unit mean power
sig = modulate("qpsk", seed=0)
print(sig.scheme, len(sig), "samples, power", round(sig.power, 6))

# GMSK is oversampled, so it comes back longer and gets decimated to 1024
gmsk = modulate("gmsk", seed=0)
print("gmsk native length", len(gmsk), "->", len(resample_to_base(gmsk)))

# the channel returns clean, noisy and the noise itself
draw = apply_awgn(sig, snr_db=0.0, seed=1)
print("requested 0 dB, measured", round(measure_snr(draw.clean.samples, draw.noisy.samples), 3), "dB")

# plain histogram versus the three-channel decay image
grid = GridSpec(resolution=64)
gray = render_gray(draw.noisy.samples, grid)
rgb = render_rgb(draw.noisy.samples, grid)
print("gray pixels lit:", np.count_nonzero(gray), " enhanced pixels lit:", np.count_nonzero(rgb[0]))
write_ppm(out / "qpsk_0dB_gray.ppm", gray)
write_ppm(out / "qpsk_0dB_enhanced.ppm", rgb)

# everything a training sample holds, side by side
sample = make_sample("16qam", snr_db=5.0, seed=3, side=32)
for name, img in sample.items():
    print(f"{name:20s} shape {img.shape} range [{img.min():.2f}, {img.max():.2f}]")
write_ppm(out / "16qam_modalities.ppm", np.concatenate(list(sample.values()), axis=2))
print("wrote", sorted(p.name for p in out.glob("*.ppm")))
