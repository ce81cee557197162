"""
Masked pretraining, then denoising below the training SNR range
===============================================================

A short run on 128 samples. The loss falls quickly; the denoising numbers
are only indicative at this size (the acceptance suite uses 512 samples
and 20 epochs).
"""
from pathlib import Path

import numpy as np

from denomae.pipeline import GenerationConfig, RunConfig, evaluate_extrapolation, generate_arrays, pretrain

data = generate_arrays(GenerationConfig(n_samples=128, seed=0))
print("pretrain set:", len(data), "samples, images", data.images.shape)
print("SNR range in data:", round(data.snr_db.min(), 2), "to", round(data.snr_db.max(), 2), "dB")

run = RunConfig.desk_pretrain(epochs=8)
print("model:", run.model.d_model, "wide,", run.model.encoder_layers, "encoder blocks,",
      run.model.n_patches, "patches per image,", run.model.n_masked, "masked")
res = pretrain(data, run)
losses = [r["loss"] for r in res.metrics.of_kind("train")]
print(f"{res.steps} steps, loss {losses[0]:.4f} -> {np.mean(losses[-4:]):.4f}")
print("last per-modality losses:", {k: round(v, 4) for k, v in res.metrics.of_kind("train")[-1]["losses"].items()})

# noisy constellation and noisy signal in; clean constellation out
rows = evaluate_extrapolation(res.model, [-12.0, -16.0, -20.0], n=16, out_dir=Path("demo_out/denoise"))
for r in rows:
    print(f"{r['snr_db']:+.0f} dB  MSE denoised {r['mse_denoised']:.4f}  noisy {r['mse_noisy']:.4f}  "
          f"improved on {100 * r['improved_fraction']:.0f}% of samples")
print("triptychs (noisy | denoised | clean) in demo_out/denoise")
