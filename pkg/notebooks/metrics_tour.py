"""
Similarity metrics on a synthetic pair
======================================

A walk through the building blocks of the registration loss on one
synthetic 64x64 pair: warping, MSE, patch-wise NCC, DeepSim, the diffusion
regularizer and the Jacobian-based regularity measures.

Run with ``python3 notebooks/metrics_tour.py``; it takes a few seconds.
"""

import numpy as np

from deepsimreg import tensor as T
from deepsimreg.data import SyntheticConfig, generate_synthetic_pair
from deepsimreg.evaluation import foreground_classes, mean_dice, regularity
from deepsimreg.metrics import deepsim, diffusion_regularizer, mse, ncc, ncc_map
from deepsimreg.networks import autoencoder_config, build_unet
from deepsimreg.warp import invert_field, warp_bilinear, warp_nearest

###############################################################################
# A synthetic pair: the fixed image is a blob-and-ring scene, the moving image
# is the same scene pushed through a smooth random deformation. Independent
# noise is added to both after warping.

cfg = SyntheticConfig()
pair = generate_synthetic_pair(cfg, np.random.default_rng(0))
moving = pair.moving[None, None]
fixed = pair.fixed[None, None]
classes = foreground_classes(cfg.classes)
print("identity Dice      ", round(mean_dice(pair.moving_labels, pair.fixed_labels, classes), 4))

###############################################################################
# The generator stores the field that created the moving image. Inverting it
# and warping the moving labels recovers most of the overlap.

inverse = invert_field(pair.ground_truth_field[None])
recovered = warp_nearest(pair.moving_labels, inverse)
print("ground-truth Dice  ", round(mean_dice(recovered, pair.fixed_labels, classes), 4))

###############################################################################
# Similarity before and after applying the recovered field. MSE is a
# distance (lower is better); NCC and DeepSim are similarities in [-1, 1].

morphed = warp_bilinear(moving, inverse).data
extractor = build_unet(autoencoder_config(), seed=0).eval()
for name, img in (("identity", moving), ("recovered", morphed)):
    print(f"{name:10s} mse {mse(img, fixed).item():.4f}  ncc {ncc(img, fixed).item():.4f}  "
          f"deepsim {deepsim(img, fixed, extractor).item():.4f}")

###############################################################################
# NCC is the cosine of mean-centred windows, so it ignores brightness and
# contrast changes.

print("ncc(I, J)          ", round(ncc(moving, fixed).item(), 6))
print("ncc(3I + 1, J)     ", round(ncc(3 * moving + 1, fixed).item(), 6))
local = ncc_map(morphed, fixed, window=9).data[0, 0]
print("local NCC map      ", local.shape, "min", round(float(local.min()), 3), "max", round(float(local.max()), 3))

###############################################################################
# The diffusion regularizer is the mean squared spatial gradient of the
# displacement; a unit shear ``u = (x, 0)`` scores exactly one.

ys, xs = np.mgrid[0:64, 0:64].astype(float)
print("R(0)               ", diffusion_regularizer(np.zeros((1, 2, 64, 64))).item())
print("R(u = (x, 0))      ", diffusion_regularizer(np.stack([xs, 0 * xs])[None]).item())
print("R(recovered field) ", round(diffusion_regularizer(inverse).item(), 5))

###############################################################################
# Regularity of a field: variance of the Jacobian determinant and the share
# of interior pixels where the map folds (determinant <= 0).

for name, u in (("recovered", inverse), ("fold", np.stack([-2 * xs, 0 * xs])[None])):
    r = regularity(u)
    print(f"{name:10s} sigma2(J) {r.sigma2_jac:.5f}  folding {r.fold_pct:.2f}%")

###############################################################################
# Gradients flow through the warp into the field, which is what lets a
# network learn to predict it.

u = T.Tensor(np.zeros((1, 2, 64, 64)), requires_grad=True)
loss = -ncc(warp_bilinear(moving, u), fixed)
loss.backward()
print("|dL/du| mean       ", float(np.abs(u.grad).mean()))
