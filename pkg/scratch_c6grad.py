"""Per-term gradient probe on the redundant-pair couplings.

argv: seed epochs T ds bw [lam2]
Every SAMPLE_EVERY steps, backward each objective term separately and
record its gradient on theta entries for (ALMA,APEX), (JCMT,SMA), and
GLT diagonal.  Prints windowed means so the drift direction per term is
visible over training time.
"""
import sys
import time

import numpy as np

from vlbidesign import autodiff as ad
from vlbidesign import gibbs, ising, recon, train

SAMPLE_EVERY = 8
WINDOW = 150  # steps per report row

seed, epochs, T, ds, bw = (int(a) for a in sys.argv[1:6])
lam2 = float(sys.argv[6]) if len(sys.argv) > 6 else 0.005
cfg = train.TrainConfig(lam1=0.005, lam2=lam2, epochs=epochs, trials=1,
                        seed=seed, dataset_size=ds, batch_size=32,
                        n_timestamps=T, base_width=bw, levels=4,
                        noise_case=1, target="sgra", array="ehtplus")
tr = train.Trainer(cfg)
K = tr.K
names = tr.sites.names
n_free = ising.IsingModel.free_size(K)

# locate free-vector entries by indicator expansion
entries = {}
for idx in range(n_free):
    e = np.zeros(n_free)
    e[idx] = 1.0
    m = ising.IsingModel.from_free(e, K, names)
    ia, ip = names.index("ALMA"), names.index("APEX")
    ij, ism = names.index("JCMT"), names.index("SMA")
    ig = names.index("GLT")
    if m.theta[ia, ip] == 1:
        entries["AA_AP"] = idx
    if m.theta[ij, ism] == 1:
        entries["JC_SM"] = idx
    if m.theta[ig, ig] == 1 and idx < K:
        entries["GLT_d"] = idx
print("entries:", entries, flush=True)

ss = tr._trial_ss[0]
omega_rng, order_rng, noise_rng, shuffle_rng, corrupt_rng = (
    np.random.default_rng(s) for s in ss.spawn(5))
params = ad.ParameterSet()
theta_free = params.add("theta", np.zeros(n_free))
decoder = tr._build_decoder(params, omega_rng)
adam = train.Adam(params.tensors(), lr=cfg.learning_rate,
                  beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                  eps=cfg.adam_eps)
order = gibbs.fresh_orderings(order_rng, K, tr.gibbs_cfg.n_layers)

acc = {k: {t: [] for t in ("sim", "spar", "div")} for k in entries}
rows = []
step = 0
t0 = time.time()
n = len(tr.images)
for epoch in range(cfg.epochs):
    perm = shuffle_rng.permutation(n)
    for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
        idx_b = perm[start:start + cfg.batch_size]
        packed = tr.fm.packed_batch(tr.vis_cache[idx_b], corrupt_rng)
        gnoise = gibbs.fresh_noise(noise_rng, K, tr.gibbs_cfg.n_layers,
                                   batch=len(idx_b))
        theta_sym = train.expand_theta(theta_free, K)
        states, masks = gibbs.relaxed_chain_graph(theta_sym, gnoise, order,
                                                  tr.gibbs_cfg)
        masked = ad.as_tensor(packed) * train.mask_weights(masks, tr.fm.indices)
        rec = decoder(masked)
        sim = recon.l1_loss_graph(rec, tr.targets[idx_b], reduction="sum")
        spar = ad.tmean(ad.tsum(masks, axis=1))
        div = ad.tmean(train.hamiltonian_graph(theta_sym, states))
        out = sim + cfg.lam1 * spar - cfg.lam2 * div

        if step % SAMPLE_EVERY == 0:
            for name, node in (("sim", sim), ("spar", spar), ("div", div)):
                params.zero_grad()
                ad.backward(node, [theta_free])
                g = theta_free.grad
                for key, ei in entries.items():
                    acc[key][name].append(g[ei])
        params.zero_grad()
        ad.backward(out, params.tensors())
        adam.step()
        step += 1
        if step % WINDOW == 0:
            th = ising.IsingModel.from_free(theta_free.data, K, names).theta
            row = [f"step {step:5d}"]
            for key, ei in entries.items():
                ms = {t: np.mean(acc[key][t]) if acc[key][t] else np.nan
                      for t in ("sim", "spar", "div")}
                tot = ms["sim"] + cfg.lam1 * ms["spar"] - cfg.lam2 * ms["div"]
                val = (th[names.index("ALMA"), names.index("APEX")]
                       if key == "AA_AP" else
                       th[names.index("JCMT"), names.index("SMA")]
                       if key == "JC_SM" else
                       th[names.index("GLT"), names.index("GLT")])
                row.append(f"{key}: v={val:+.4f} gsim={ms['sim']:+.2e} "
                           f"gl1={cfg.lam1 * ms['spar']:+.2e} "
                           f"gl2={-cfg.lam2 * ms['div']:+.2e} gtot={tot:+.2e}")
                acc[key] = {t: [] for t in ("sim", "spar", "div")}
            print(" | ".join(row), flush=True)

th = ising.IsingModel.from_free(theta_free.data, K, names).theta
ia, ip = names.index("ALMA"), names.index("APEX")
ij, ism = names.index("JCMT"), names.index("SMA")
d = np.diag(th)
print(f"final: th(ALMA,APEX)={th[ia, ip]:+.4f} th(JCMT,SMA)={th[ij, ism]:+.4f} "
      f"GLT={d[names.index('GLT')]:+.3f} min={names[int(np.argmin(d))]} "
      f"({(time.time() - t0) / 60:.1f} min)", flush=True)
