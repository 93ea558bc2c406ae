"""The cell-descriptor pipeline: residual aggregation, normalization, PCA,
whitening, and leaf-only storage via level projection.

Run: python3 demos/03_descriptor_pipeline.py
"""

import numpy as np

import roivlad as rv

rng = np.random.default_rng(2)
spec = rv.SyntheticDatasetSpec(
    dataset_size=40, planted_roi_count=4, images_per_object=6,
    roi_points_range=(6, 14), background_points_range=(120, 180),
    descriptor_dim=12, seed=7,
)
sets, _ = rv.synth_generate(spec)
vocab = rv.kmeans(np.vstack([fs.descriptors for fs in sets]), 8, seed=0)

# Each cell aggregates the residuals of its descriptors to their visual word.
fs = sets[0]
raw = rv.vlad_encode(fs, vocab)
print(f"raw aggregated descriptor: {raw.shape[0]} = K({vocab.k}) x dim({vocab.dim})")

# Signed square root then unit normalization tames bursty components.
cell = rv.ssr_normalize(raw)
print(f"after signed sqrt + L2: norm {np.linalg.norm(cell):.6f}")

# One PCA model is trained on whole-image descriptors only.
rows = np.stack([rv.ssr_normalize(rv.vlad_encode(s, vocab)) for s in sets])
pca = rv.pca_train(rows, 24)
print(f"PCA: {pca.input_dim} -> {pca.dim}, eigenvalue range "
      f"[{pca.eigenvalues[-1]:.2e}, {pca.eigenvalues[0]:.2e}]")
projected = rv.project(cell, pca)
print(f"projected descriptor: dim {projected.shape[0]}, norm {np.linalg.norm(projected):.6f}")

# Whitening scales by eigenvalue**-0.5 and renormalizes each block, which is
# what makes quantized inner products bounded and well conditioned.
whitened = rv.whiten_normalize(projected, pca, m=4)
norms = np.linalg.norm(whitened.reshape(4, 6), axis=1)
print(f"whitened block norms: {np.round(norms, 6)}")

# Full index: one descriptor and point count per tree cell.
tree = rv.spatial_hkmeans(fs, 3, 3, seed=0)
index = rv.ve_encode(fs, vocab, tree, pca)
print(f"\nindex for {fs.image_id}: {index.cell_count} cells, root count {index.counts[0]}")

# Level projection stores only leaf cells and rebuilds ancestors by summing.
# Without the nonlinear SSR step the reconstruction is exact.
direct = rv.ve_encode(fs, vocab, tree, pca, ssr=False)
rebuilt = rv.level_project(rv.leaf_projections(fs, vocab, tree, pca, ssr=False), pca)
err = np.max(np.abs(rebuilt.descriptors - direct.descriptors))
print(f"leaf-only reconstruction (no SSR): max abs error {err:.2e}")

report = rv.storage_report(3, 3, pca.dim, pq_m=4, pq_zp=16)
print(f"\nstorage per image at dim {pca.dim}: full {report.full_bytes} B, "
      f"leaf-only {report.leaf_only_bytes} B, quantized {report.quantized_bytes} B")
