"""Inspect the worst FD entry of dec.bottom.w at several steps."""
import numpy as np

from vlbidesign import autodiff as ad
from vlbidesign import gibbs, ising, recon, train, vlbi

import pathlib
SITES = """\
AA 6378137 0 0 100
BB 0 6378137 0 200
CC 4000000 4000000 2000000 300
"""
p = pathlib.Path("/tmp/fdstep")
(p / "sites.txt").write_text(SITES)
sites = vlbi.load_sites(str(p / "sites.txt"))
geom = vlbi.uv_coverage(sites, vlbi.target_preset("sgra"),
                        vlbi.default_schedule(4, -90.0))

K, size, B = geom.K, 8, 4
rng = np.random.default_rng(404)
coords = ((np.arange(size) - size // 2)
          * vlbi.PIXEL_MUAS * vlbi.MUAS_TO_RAD * (32 // size))
ll, mm = np.tile(coords, size), np.repeat(coords, size)
uvf = geom.uv.reshape(-1, 2)
F = np.exp(-2j * np.pi * (uvf[:, :1] * ll + uvf[:, 1:] * mm))
imgs = rng.random((B, size, size))
vis = np.where(geom.pair_visible.reshape(-1), imgs.reshape(B, -1) @ F.T, 0)
packed = np.empty((B, 2 * vis.shape[1]))
packed[:, 0::2], packed[:, 1::2] = vis.real, vis.imag
kernel = recon.make_kernel(1.0)
targets = np.stack([recon.blur(z, kernel, "zero") for z in imgs])
indices = vlbi.packing_site_indices(geom, "complex")
gcfg = gibbs.GibbsConfig()
noise = gibbs.fresh_noise(rng, K, gcfg.n_layers, batch=B)
orders = gibbs.fresh_orderings(rng, K, gcfg.n_layers)

params = ad.ParameterSet()
theta_free = params.add("theta",
                        rng.normal(0, 0.3, ising.IsingModel.free_size(K)))
decoder = recon.build_decoder("a", geom, params, rng, image_size=size,
                              levels=2, base_width=4, hidden=16)
for t in params.tensors():
    if t is not theta_free:
        t.data = t.data + rng.normal(0, 0.05, size=t.data.shape)


def program():
    theta_sym = train.expand_theta(theta_free, K)
    states, masks = gibbs.relaxed_chain_graph(theta_sym, noise, orders, gcfg)
    masked = ad.as_tensor(packed) * train.mask_weights(masks, indices)
    rec = decoder(masked)
    sim = recon.l1_loss_graph(rec, targets, reduction="sum")
    spar = ad.tmean(ad.tsum(masks, axis=1))
    div = ad.tmean(train.hamiltonian_graph(theta_sym, states))
    return sim + 0.005 * spar - 0.005 * div


named = dict(params.items())
t = named["dec.bottom.w"]
out = program()
ad.backward(out, [t])
analytic = t.grad.copy()
r = np.random.default_rng(7)
entries = r.choice(t.size, size=30, replace=False)

rows = []
for k in entries:
    row = {"k": int(k), "a": analytic.flat[k]}
    for step in (1e-5, 1e-6, 1e-7, 1e-8):
        orig = t.data.flat[k]
        t.data.flat[k] = orig + step
        fp = float(program().data)
        t.data.flat[k] = orig - step
        fm = float(program().data)
        t.data.flat[k] = orig
        central = (fp - fm) / (2.0 * step)
        row[step] = central
    rows.append(row)

rows.sort(key=lambda rr: -abs(rr["a"] - rr[1e-8]) / (abs(rr[1e-8]) + 1e-8))
print(f"{'k':>5} {'analytic':>13} {'fd@1e-5':>13} {'fd@1e-6':>13} "
      f"{'fd@1e-7':>13} {'fd@1e-8':>13}   rel@1e-8")
for rr in rows[:8]:
    rel = abs(rr["a"] - rr[1e-8]) / (abs(rr[1e-8]) + 1e-8)
    print(f"{rr['k']:>5} {rr['a']:>13.6e} {rr[1e-5]:>13.6e} "
          f"{rr[1e-6]:>13.6e} {rr[1e-7]:>13.6e} {rr[1e-8]:>13.6e}   {rel:.3e}")
