"""Trace where input dependence dies inside a trained decoder."""
import numpy as np

from vlbidesign import autodiff as ad
from vlbidesign import train

cfg = train.TrainConfig(lam1=0.005, lam2=0.005, epochs=20, trials=1, seed=5,
                        dataset_size=320, batch_size=32, n_timestamps=12,
                        base_width=6, levels=4, noise_case=1, target="sgra",
                        array="ehtplus")
tr, art = train.train_joint(cfg)

params = ad.ParameterSet()
dec = tr._build_decoder(params, np.random.default_rng(0))
params.load_state_arrays(art.omegas[art.best_trial])

imgs = tr.images[:8]
packed = tr.fm.pack_unmasked(tr.fm.ideal_vis(imgs))


def trace(vec):
    out = {}
    x = dec.dense(ad.as_tensor(vec)).reshape((len(vec), 1, 32, 32))
    out["dense"] = x.data.copy()
    skips = []
    for i, layer in enumerate(dec.down):
        x = layer(x)
        out[f"down{i}"] = x.data.copy()
        skips.append(x)
        x = ad.downsample2(x)
    x = dec.bottom(x)
    out["bottom"] = x.data.copy()
    for i, (layer, skip) in enumerate(zip(dec.up, reversed(skips))):
        x = ad.upsample2(x)
        x = ad.concat([x, skip], axis=1)
        x = layer(x)
        out[f"up{i}"] = x.data.copy()
    x = dec.final(x, activation=None)
    out["final_pre"] = x.data.copy()
    return out

a = trace(packed)
b = trace(np.zeros_like(packed))
for k in a:
    diff = np.abs(a[k] - b[k]).max()
    alive = (a[k] > 0).mean() if k != "dense" and k != "final_pre" else np.nan
    print(f"{k:10s} |diff|max={diff:.3e}  act_frac_pos={alive:.3f}  "
          f"value_range=[{a[k].min():+.2e}, {a[k].max():+.2e}]")
