"""Product quantization with symmetric lookup tables and the sign limit.

Run: python3 demos/04_product_quantization.py
"""

import numpy as np

import roivlad as rv

rng = np.random.default_rng(3)

# Training rows: whitened cell descriptors, every block unit-normalized.
m, dp, n = 4, 4, 2000
rows = rng.normal(0, 1, (n, m, dp))
rows /= np.linalg.norm(rows, axis=2, keepdims=True)
rows = rows.reshape(n, m * dp)

model = rv.pq_train(rows, m=m, zp=16, seed=0)
print(f"PQ model: {model.m} blocks x {model.zp} codewords of dim {model.d_prime}"
      f" -> {model.code_bits}-bit codes")

# The tables hold codeword inner products scaled by 1/M, so any code pair
# sums to a similarity inside [-1, 1] and identical codes score exactly 1.
codes = rv.quantize(rows[0], model)
print(f"codes of row 0: {codes.tolist()}")
print(f"self-similarity:  {rv.sdc_similarity(codes, codes, model):.6f}")
other = rv.quantize(rows[1], model)
print(f"cross-similarity: {rv.sdc_similarity(codes, other, model):.6f}")

# SDC equals the inner product of the scaled codeword reconstructions.
lhs = rv.sdc_similarity(codes, other, model)
rhs = float(rv.reconstruct(codes, model, scaled=True) @ rv.reconstruct(other, model, scaled=True))
print(f"table sum vs reconstruction dot: {lhs:.9f} vs {rhs:.9f}")

# In the one-component-per-block limit only signs survive, and similarity
# reduces to a Hamming distance with no table reads at all.
d = 16
a, b = rng.normal(0, 1, d), rng.normal(0, 1, d)
ham = rv.hamming_similarity(rv.sign_binarize(a), rv.sign_binarize(b))
sign_model = rv.sign_pq_model(d)
sdc = rv.sdc_similarity(
    rv.sign_codes_to_pq(rv.sign_binarize(a)), rv.sign_codes_to_pq(rv.sign_binarize(b)), sign_model
)
print(f"\nsign limit: hamming path {ham:.6f} == sign-codebook tables {sdc:.6f}")

# Whitening balances the per-block covariances, which is what makes a single
# shared codebook an efficient bit allocation.
d, n = 64, 4000
lam = 0.9 ** np.arange(1, d + 1)
data = rng.normal(0, 1, (n, d)) * np.sqrt(lam)
pca_like = rv.PcaModel(mean=np.zeros(d), projection=np.eye(d), eigenvalues=lam, training_rows=n)
plain = rv.subspace_variance_report(data, 8, "plain")
white = rv.subspace_variance_report(data, 8, "whitened", model=pca_like)
cv = lambda v: float(np.std(v) / abs(np.mean(v)))
print(f"\nblock log-determinant spread (coefficient of variation):")
print(f"  plain    {cv(plain.log_dets):.4f}")
print(f"  whitened {cv(white.log_dets):.6f}")
