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

def full():
    sym2 = train.expand_theta(tf2, 3)
    st, mk = gibbs.relaxed_chain_graph(sym2, gn, order, gcfg)
    l, _ = train.total_loss(packed, fm.indices, mk, st, sym2, dec, targets8,
                            0.01, 0.01, "l1")
    return l

tensors = params2.tensors()
out = full()
for t in tensors:
    t.grad = None
ad.backward(out, tensors)
grads = {name: t.grad.copy() for (name, t) in params2.items()}

h = 1e-5
probe_rng = np.random.default_rng(0)
rows = []
for name, t in params2.items():
    size = t.data.size
    idxs = probe_rng.choice(size, size=min(12, size), replace=False)
    for k in idxs:
        orig = t.data.flat[k]
        t.data.flat[k] = orig + h
        fp = float(full().data)
        t.data.flat[k] = orig - h
        fm_ = float(full().data)
        t.data.flat[k] = orig
        central = (fp - fm_) / (2 * h)
        a = grads[name].flat[k]
        rel = abs(a - central) / (abs(central) + 1e-8)
        rows.append((rel, abs(a - central), a, central, name, int(k)))
rows.sort(reverse=True)
print("worst entries (rel, absdiff, analytic, central, param, idx):")
for r in rows[:8]:
    print(f"  rel={r[0]:.3e} abs={r[1]:.3e} ana={r[2]:+.6e} fd={r[3]:+.6e} {r[4]}[{r[5]}]")
gmax = max(np.abs(g).max() for g in grads.values())
print("max |grad| overall:", gmax)
