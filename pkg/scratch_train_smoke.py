import numpy as np, time, os, tempfile
from vlbidesign import autodiff as ad, gibbs, ising, recon, train, vlbi

rng = np.random.default_rng(7)

# 1. config validation
cfg = train.TrainConfig.from_dict({"lam1": 0.01, "epochs": 2, "trials": 1,
                                   "dataset_size": 64})
try:
    train.TrainConfig.from_dict({"bogus_key": 1})
    print("FAIL unknown key accepted")
except train.TrainError as e:
    print("config rejects unknown keys:", e)

# 2. augmentation identity: rotation by zero, no deformation
img = train.synthetic_image(rng)
assert abs(img.sum() - 1.0) < 1e-12
r0 = train.rotate_image(img, 0.0)
print("rotate-by-0 max abs diff:", np.abs(r0 - img).max())
aug_id = train.augment(img, rng, rotate=False, deform=False)
print("no-op augment max abs diff:", np.abs(aug_id - img).max())
a1 = train.augment(img, np.random.default_rng(3))
print("augment flux:", a1.sum(), "changed:", np.abs(a1 - img).max() > 1e-3)

# 3. IDX round-trip (28x28 pad to 32)
import struct
raw = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
with tempfile.NamedTemporaryFile(suffix=".idx", delete=False) as f:
    f.write(bytes([0, 0, 0x08, 3]) + struct.pack(">III", 5, 28, 28))
    f.write(raw.tobytes())
    idxpath = f.name
imgs = train.load_idx_images(idxpath)
print("idx shape:", imgs.shape, "flux:", imgs.sum(axis=(1, 2)))
assert imgs.shape == (5, 32, 32)
assert np.allclose(imgs.sum(axis=(1, 2)), 1.0)
assert np.all(imgs[:, :2, :] == 0)
os.unlink(idxpath)

# 4. theta expansion FD
K = 5
free0 = rng.normal(0, 0.4, size=ising.IsingModel.free_size(K))
params = ad.ParameterSet()
tf = params.add("theta", free0.copy())
sym = train.expand_theta(tf, K)
print("sym symmetric:", np.abs(sym.data - sym.data.T).max())
model_ref = ising.IsingModel.from_free(free0, K)
print("expand matches from_free:", np.abs(sym.data - model_ref.theta).max())
w = rng.normal(size=(K, K))
out = ad.tsum(sym * ad.as_tensor(w))
rep = ad.finite_diff_check(lambda: ad.tsum(train.expand_theta(tf, K) * ad.as_tensor(w)), [tf])
print("expand_theta FD:", rep.max_rel_error)

# 5. hamiltonian_graph vs oracle
states = np.where(rng.random((6, K)) < 0.5, 1.0, -1.0)
hg = train.hamiltonian_graph(sym, ad.as_tensor(states))
href = np.array([ising.hamiltonian(model_ref, s) for s in states])
print("hamiltonian_graph vs oracle:", np.abs(hg.data - href).max())
relaxed = rng.uniform(-1, 1, size=(6, K))
hg2 = train.hamiltonian_graph(sym, ad.as_tensor(relaxed))
href2 = np.array([ising.hamiltonian(model_ref, s) for s in relaxed])
print("relaxed-state hamiltonian:", np.abs(hg2.data - href2).max())

# 6/7. toy geometry + total_loss perfect-decoder zero
names = ["AA", "BB", "CC"]
pos = np.array([[6378137.0, 0, 0], [0, 6378137.0, 0], [4000000.0, 4000000.0, 2000000.0]])
sites = vlbi.SiteTable(names, pos, np.array([100.0, 200.0, 300.0]))
target = vlbi.target_preset("sgra")
sched = vlbi.default_schedule(4)
geom = vlbi.uv_coverage(sites, target, sched)
print("toy geometry T,P,K:", geom.T, geom.P, geom.K, "visible pairs:", geom.pair_visible.sum())
fm = train.ForwardModel(geom, vlbi.NoiseConfig("none", False, 0.0), "a")
imgs = np.stack([train.synthetic_image(rng) for _ in range(4)])
vis = fm.ideal_vis(imgs)
packed = fm.packed_batch(vis, rng)
print("packed shape:", packed.shape, "expected L:", fm.vec_len)

kernel = recon.make_kernel(0.75)
targets = np.stack([recon.blur(z, kernel) for z in imgs])
masks_all_on = ad.as_tensor(np.ones((4, 3)))
states_dummy = ad.as_tensor(np.ones((4, 3)))
class Stub:
    def __call__(self, x):
        return ad.as_tensor(targets)
loss, parts = train.total_loss(packed, fm.indices, masks_all_on, states_dummy,
                               ad.as_tensor(np.zeros((3, 3))), Stub(), targets,
                               0.0, 0.0, "l1")
print("perfect-decoder zero loss:", parts)

# mask_weights numeric check against direct product
m = rng.random((4, 3))
ip, iq, ib = fm.indices
aug = np.concatenate([m, np.ones((4, 1))], axis=1)
ref_w = aug[:, ip] * aug[:, iq] * aug[:, ib]
mw = train.mask_weights(ad.as_tensor(m), fm.indices)
print("mask_weights matches:", np.abs(mw.data - ref_w).max())

# 8. Adam on a quadratic
p = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
opt = train.Adam([p], lr=0.1)
for _ in range(200):
    l = ad.tsum(p * p)
    p.grad = None
    ad.backward(l, [p])
    opt.step()
print("adam quadratic min:", p.data)

# 9. FD through the whole objective (theta + decoder) on the toy
params2 = ad.ParameterSet()
tf2 = params2.add("theta", rng.normal(0, 0.3, size=6))
dec = recon.DecoderA(fm.vec_len, params2, rng, image_size=8, levels=2, base_width=3)
targets8 = np.stack([z[::4, ::4] / z[::4, ::4].sum() for z in imgs])
gn = gibbs.fresh_noise(rng, 3, 5, batch=4)
order = np.array([1, 0, 2])
gcfg = gibbs.GibbsConfig()
def full():
    sym2 = train.expand_theta(tf2, 3)
    st, mk = gibbs.relaxed_chain_graph(sym2, gn, order, gcfg)
    l, _ = train.total_loss(packed, fm.indices, mk, st, sym2, dec, targets8,
                            0.01, 0.01, "l1")
    return l
t0 = time.time()
rep = ad.finite_diff_check(full, params2, max_entries_per_param=12, rng=np.random.default_rng(0))
print(f"full-path FD: {rep.max_rel_error:.3e} nonsmooth={rep.nonsmooth} ({time.time()-t0:.1f}s)")

print("ALL TRAIN BASICS OK")
