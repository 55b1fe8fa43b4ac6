"""4-bit floats with a shared exponent.

Each group is scaled and shifted into one binade [2^n, 2^(n+1)), where
binary16 values differ only in their fraction bits. The top four fraction
bits are the code; dequantizing is one shift and one OR with the shared
exponent, then the group's affine undo.
"""

from __future__ import annotations

import numpy as np

from dynlite.quantfp4 import Half, dequantize_e0m4, e0m4_half_bits, mae_compare, mean_ratio, quantize_e0m4

n = 1
print("code -> half bits -> value")
for code in (0, 1, 8, 15):
    bits = int(e0m4_half_bits(np.array([code]), n)[0])
    print(f"  {code:2d} -> {bits:#06x} -> {Half(bits).to_float()}")

rng = np.random.default_rng(0)
w = rng.standard_normal(128).astype(np.float32)
w[:4] = 0.0
g = quantize_e0m4(w, n)
back = dequantize_e0m4(g)
print("zeros survive exactly:", bool(np.all(back[:4] == 0)))
print("max abs error:", float(np.abs(back - w).max()))

reports = [mae_compare(rng.standard_normal((4096, 128)).astype(np.float32) * 0.02) for _ in range(5)]
print(f"mean MAE ratio fp4/int4 on Gaussian weights: {mean_ratio(reports):.3f}")
