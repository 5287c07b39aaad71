import numpy as np, os, tempfile, shutil, io, contextlib
from vlbidesign import cli, ising

def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(buf):
        code = cli.main(argv)
    return code, buf.getvalue()

root = tempfile.mkdtemp()
def p(*a): return os.path.join(root, *a)

# 1. simulate: point source on EHT+, Sgr A* -> all amps 1, GLT contributes no rows
code, out = run(["simulate", "--out", p("sim"), "--seed", "5", "--target", "sgra",
                 "--array", "ehtplus", "--noise-case", "1", "--timestamps", "6"])
print("simulate:", code, out.strip())
assert code == 0
amps = np.loadtxt(p("sim", "amplitudes.csv"), delimiter=",", skiprows=1,
                  usecols=3)
print("  amp range:", amps.min(), amps.max())
assert np.allclose(amps, 1.0, atol=1e-12)
with open(p("sim", "uv.csv")) as f:
    txt = f.read()
assert "GLT" not in txt, "GLT should be occluded for Sgr A*"
with open(p("sim", "sim_config.txt")) as f:
    assert "resolved_seed: 5" in f.read()

# micro config file shared by train-ish commands
cfgtxt = """# micro run
lam1: 0.005
lam2: 0.005
epochs: 2
trials: 2
dataset_size: 48
batch_size: 16
base_width: 3
levels: 2
hidden: 16
n_timestamps: 4
dataset: synthetic
target: sgra
array: ehtplus
eval_masks: 200
"""
with open(p("micro.cfg"), "w") as f:
    f.write(cfgtxt)

# 2. train + determinism of theta_trial_1.csv
code, out = run(["train", "--config", p("micro.cfg"), "--seed", "11",
                 "--out", p("runA")])
print("train:", code)
assert code == 0
files = sorted(os.listdir(p("runA")))
assert {"theta_trial_1.csv", "theta_trial_2.csv", "theta_mean.csv",
        "theta_std.csv", "loss_history.csv", "masks_sample.csv",
        "marginals.csv", "recon_mean.png", "recon_std.csv"} <= set(files)
code2, _ = run(["train", "--config", p("micro.cfg"), "--seed", "11",
                "--out", p("runA2")])
t1 = open(p("runA", "theta_trial_1.csv")).read()
t2 = open(p("runA2", "theta_trial_1.csv")).read()
print("  deterministic rerun bitwise:", t1 == t2)
assert t1 == t2

# seed omitted -> drawn and recorded
code3, _ = run(["train", "--config", p("micro.cfg"), "--out", p("runB")])
assert code3 == 0
meta = open(p("runB", "run_config.txt")).read()
assert "resolved_seed:" in meta
print("  entropy seed recorded ok")

# 3. sweep (tiny grid)
code, out = run(["sweep", "--config", p("micro.cfg"), "--seed", "3",
                 "--out", p("sw"), "--lam1-grid=-0.05,0.05",
                 "--lam2-grid=0.005", "--trials", "1"])
print("sweep:", code, out.strip().splitlines()[:2])
assert code == 0
rows = open(p("sw", "sweep.csv")).read().strip().splitlines()
assert len(rows) == 3  # header + 2 cells
print("  sweep rows ok")

# 4. resolution (two fractions)
code, out = run(["resolution", "--config", p("micro.cfg"), "--seed", "3",
                 "--out", p("res"), "--fractions", "1,0.5", "--trials", "1"])
print("resolution:", code)
assert code == 0
res = open(p("res", "resolution.csv")).read()
for site in ("ALMA", "APEX", "LMT", "SPT"):
    assert site in res
print("  resolution table lists key sites")

# 5. swap on two micro runs
code, out = run(["swap", "--runs", p("runA"), p("runA2"), "--seed", "9",
                 "--n-images", "16", "--out", p("swp")])
print("swap:", code, out.strip().splitlines()[0])
assert code == 0
sw = open(p("swp", "swap.csv")).read().strip().splitlines()
assert len(sw) == 3 and sw[0].count(",") == 3

# 6. cliques on a hand-made theta
theta = np.zeros((5, 5))
for (a, b), v in {(0, 1): 0.3, (0, 2): 0.2, (1, 2): 0.25, (2, 3): 0.5}.items():
    theta[a, b] = theta[b, a] = v
m = ising.IsingModel(theta, ["A", "B", "C", "D", "E"])
ising.theta_to_csv(m, p("theta.csv"))
code, out = run(["cliques", "--theta", p("theta.csv"), "--tau", "0.1",
                 "--out", p("cl.csv")])
print("cliques:", code, out.strip())
cl = open(p("cl.csv")).read().strip().splitlines()
assert cl[0] == "site_j,site_k,site_l,coupling_sum"
assert cl[1].startswith("A,B,C")
code, _ = run(["cliques", "--theta", p("theta.csv"), "--tau", "5.0",
               "--out", p("cl2.csv")])
assert open(p("cl2.csv")).read().strip() == "site_j,site_k,site_l,coupling_sum"
print("  empty clique file has header only")

# 7. conditional
code, out = run(["conditional", "--theta", p("theta.csv"), "--fix", "A,B",
                 "--out", p("cond.csv")])
print("conditional:", code, out.strip())
sub = ising.theta_from_csv(p("cond.csv"))
assert sub.n == 3 and sub.names == ["C", "D", "E"]
ref, rem = ising.conditional_model(m, {0: 1.0, 1: 1.0})
assert np.allclose(sub.theta, ref.theta)
code, out = run(["conditional", "--theta", p("theta.csv"),
                 "--fix", "A,B,C,D,E"])
assert code == 1
print("  all-sites-fixed rejected:", out.strip())

# 8. error paths
code, out = run(["train", "--config", p("missing.cfg")])
assert code == 1 and "error:" in out
with open(p("bad.cfg"), "w") as f:
    f.write("nonsense_key: 5\n")
code, out = run(["train", "--config", p("bad.cfg"), "--seed", "1"])
assert code == 1 and "unknown config keys" in out
print("error paths ok")

shutil.rmtree(root)
print("CLI SMOKE OK")
