"""Probe criterion-6 structure emergence for one config. argv: seed epochs T dataset bw"""
import sys
import time

import numpy as np

from vlbidesign import train

seed, epochs, T, ds, bw = (int(a) for a in sys.argv[1:6])
cfg = train.TrainConfig(lam1=0.005, lam2=0.005, epochs=epochs, trials=5,
                        seed=seed, dataset_size=ds, batch_size=32,
                        n_timestamps=T, base_width=bw, levels=4,
                        noise_case=1, target="sgra", array="ehtplus")
t0 = time.time()
trainer, art = train.train_joint(cfg)
print(f"seed={seed} epochs={epochs} T={T} ds={ds} bw={bw}: "
      f"{(time.time() - t0) / 60:.1f} min")
names = art.site_names
ia, ip = names.index("ALMA"), names.index("APEX")
ij, ism = names.index("JCMT"), names.index("SMA")
ig = names.index("GLT")
npass = 0
for k, th in enumerate(art.theta_trials):
    d = np.diag(th)
    mn = names[int(np.argmin(d))]
    ok = th[ia, ip] < 0 and th[ij, ism] < 0 and mn == "GLT"
    npass += ok
    print(f"trial {k}: th(ALMA,APEX)={th[ia, ip]:+.4f} "
          f"th(JCMT,SMA)={th[ij, ism]:+.4f} GLT={d[ig]:+.3f} min={mn} pass={ok}")
print(f"passing trials: {npass}/5")
sims = [r[3] for r in art.loss_history]
print(f"similarity first/last: {sims[0]:.3f} {sims[-1]:.3f}")
