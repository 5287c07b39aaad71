import numpy as np
from vlbidesign import autodiff as ad, gibbs, ising, recon, train, vlbi

rng = np.random.default_rng(7)
names = ["AA", "BB", "CC"]
pos = np.array([[6378137.0, 0, 0], [0, 6378137.0, 0], [4000000.0, 4000000.0, 2000000.0]])
sites = vlbi.SiteTable(names, pos, np.array([100.0, 200.0, 300.0]))
geom = vlbi.uv_coverage(sites, vlbi.target_preset("sgra"), vlbi.default_schedule(4))
fm = train.ForwardModel(geom, vlbi.NoiseConfig("none", False, 0.0), "a")
imgs = np.stack([train.synthetic_image(rng) for _ in range(4)])
packed = fm.packed_batch(fm.ideal_vis(imgs), rng)
targets8 = np.stack([z[::4, ::4] / z[::4, ::4].sum() for z in imgs])

params2 = ad.ParameterSet()
tf2 = params2.add("theta", rng.normal(0, 0.3, size=6))
dec = recon.DecoderA(fm.vec_len, params2, rng, image_size=8, levels=2, base_width=3)
gn = gibbs.fresh_noise(rng, 3, 5, batch=4)
order = np.array([1, 0, 2])
gcfg = gibbs.GibbsConfig()
frng = lambda: np.random.default_rng(0)

def chain():
    sym2 = train.expand_theta(tf2, 3)
    return gibbs.relaxed_chain_graph(sym2, gn, order, gcfg), sym2

def p_sparsity():
    (st, mk), sym2 = chain()
    return ad.tmean(ad.tsum(mk, axis=1))

def p_diversity():
    (st, mk), sym2 = chain()
    return ad.tmean(train.hamiltonian_graph(sym2, st))

def p_weights():
    (st, mk), sym2 = chain()
    w = train.mask_weights(mk, fm.indices)
    return ad.tsum(w * ad.as_tensor(np.arange(w.data.size).reshape(w.data.shape) / w.data.size))

def p_sim():
    (st, mk), sym2 = chain()
    masked = ad.as_tensor(packed) * train.mask_weights(mk, fm.indices)
    rec = dec(masked)
    return recon.l1_loss_graph(rec, targets8, reduction="sum")

def p_decoder_only():
    rec = dec(ad.as_tensor(packed))
    return recon.l1_loss_graph(rec, targets8, reduction="sum")

for name, prog, ps in [("sparsity", p_sparsity, [("theta", tf2)]),
                       ("diversity", p_diversity, [("theta", tf2)]),
                       ("weights", p_weights, [("theta", tf2)]),
                       ("decoder_only", p_decoder_only, list(params2.items())),
                       ("sim", p_sim, list(params2.items()))]:
    rep = ad.finite_diff_check(prog, dict(ps) if 0 else [t for _, t in ps],
                               max_entries_per_param=12, rng=frng())
    worst = max(rep.per_param.items(), key=lambda kv: kv[1]) if rep.per_param else None
    print(f"{name:14s} FD {rep.max_rel_error:.3e} nonsmooth={rep.nonsmooth} worst={worst}")
