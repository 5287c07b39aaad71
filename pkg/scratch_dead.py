"""Check whether a trained decoder still responds to its input."""
import numpy as np

from vlbidesign import autodiff as ad
from vlbidesign import train

cfg = train.TrainConfig(lam1=0.005, lam2=0.005, epochs=20, trials=1, seed=5,
                        dataset_size=320, batch_size=32, n_timestamps=12,
                        base_width=6, levels=4, noise_case=1, target="sgra",
                        array="ehtplus")
tr, art = train.train_joint(cfg)
sims = [r[3] for r in art.loss_history]
print(f"sim first/last: {sims[0]:.3f} {sims[-1]:.3f}")

# rebuild the best decoder and feed it two very different inputs
params = ad.ParameterSet()
rng = np.random.default_rng(0)
dec = tr._build_decoder(params, rng)
params.load_state_arrays(art.omegas[art.best_trial])

imgs = tr.images[:8]
packed = tr.fm.pack_unmasked(tr.fm.ideal_vis(imgs))
r_full = dec(ad.as_tensor(packed)).data
r_zero = dec(ad.as_tensor(np.zeros_like(packed))).data
r_half = dec(ad.as_tensor(packed * 0.5)).data
print(f"|rec(full) - rec(zero)| max: {np.abs(r_full - r_zero).max():.3e}")
print(f"|rec(full) - rec(half)| max: {np.abs(r_full - r_half).max():.3e}")
print(f"rec(full) spread across batch: {r_full.std(axis=0).max():.3e}")

# first conv layer health: max pre-activation over the batch
dense_w = params["dec.dense.w"].data
dense_b = params["dec.dense.b"].data
grid = (packed @ dense_w + dense_b).reshape(len(imgs), 1, 32, 32)
w0 = params["dec.down0.w"].data
b0 = params["dec.down0.b"].data
from scipy.signal import convolve2d
pre = np.stack([
    np.stack([sum(convolve2d(grid[i, c], np.flip(w0[o, c]), mode="same")
                  for c in range(1)) + b0[o] for o in range(w0.shape[0])])
    for i in range(len(imgs))])
print(f"down0 pre-activation max: {pre.max():.3e}  (dead if <= 0)")
print(f"down0 channels with any positive pre-activation: "
      f"{(pre.max(axis=(0, 2, 3)) > 0).sum()}/{w0.shape[0]}")
