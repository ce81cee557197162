"""
Fine-tuning a classifier and reading accuracy against SNR
=========================================================

Four schemes that are easy to tell apart, a pretrained and a randomly
initialised encoder, the same fine-tuning recipe for both.
"""
import numpy as np

from denomae.pipeline import (
    REFERENCE_SNR_ACCURACY,
    WELL_SEPARATED,
    GenerationConfig,
    RunConfig,
    evaluate_snr_sweep,
    finetune,
    generate_arrays,
    pretrain,
)

pre = pretrain(generate_arrays(GenerationConfig(n_samples=128, seed=0)), RunConfig.desk_pretrain(epochs=10)).model

train = generate_arrays(GenerationConfig(n_samples=256, schemes=WELL_SEPARATED, seed=11, split="train"))
test = generate_arrays(GenerationConfig(n_samples=64, schemes=WELL_SEPARATED, seed=12, split="test"))
print("classes:", WELL_SEPARATED, " train/test:", len(train), len(test))

recipe = RunConfig.desk_finetune()
warm = finetune(train, test, recipe, pre, WELL_SEPARATED)
cold = finetune(train, test, recipe, None, WELL_SEPARATED)
print("epoch  pretrained  from scratch")
for a, b in zip(warm.history, cold.history):
    print(f"{a['epoch']:5d}  {a['test_accuracy']:9.1f}%  {b['test_accuracy']:11.1f}%")

rows = evaluate_snr_sweep(warm.model, WELL_SEPARATED, [-10, 0, 10], n_per_snr=64, exclude=[train, test])
for r in rows:
    ref = REFERENCE_SNR_ACCURACY.get(r["snr_db"])
    print(f"{r['snr_db']:+5.0f} dB  {r['accuracy']:5.1f}%" + (f"   (full-scale reference {ref:.2f}%)" if ref else ""))
print("spread:", round(float(np.ptp([r["accuracy"] for r in rows])), 1), "points")
