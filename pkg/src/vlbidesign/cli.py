"""Command-line interface: simulate, train, sweep, resolution, swap,
cliques, conditional.

Every command is deterministic under --seed; when the seed is omitted one
is drawn from OS entropy and recorded in the output metadata.  Exit
status is 0 only when every requested output file was written and holds
finite values.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import gibbs, ising, recon, train, vlbi


class CliError(Exception):
    pass


def _read_config(path, overrides=None):
    if path is None:
        return train.config_from_text("", overrides)
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as f:
        return train.config_from_text(f.read(), overrides)


def _resolve_seed(seed):
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence().entropy % (2 ** 31))


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad numeric list: {text!r}") from None


def _ensure_out(out):
    os.makedirs(out, exist_ok=True)
    return out


def _check_finite(arrays, what):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=np.float64))):
            raise CliError(f"non-finite values in {what}")


def _write_meta(out, name, entries):
    with open(os.path.join(out, name), "w") as f:
        for k, v in entries:
            f.write(f"{k}: {v}\n")


# -- commands ------------------------------------------------------------

def cmd_simulate(args):
    overrides = {"target": args.target, "array": args.array,
                 "noise_case": args.noise_case,
                 "n_timestamps": args.timestamps}
    config, cfg_out = _read_config(args.config, overrides)
    out = _ensure_out(args.out or cfg_out or "sim")
    seed = _resolve_seed(args.seed if args.seed is not None else config.seed)
    rng = np.random.default_rng(seed)

    sites, site_file = train.resolve_sites(config.array)
    target = vlbi.target_preset(config.target)
    schedule = vlbi.default_schedule(config.n_timestamps,
                                     config.min_elevation_deg)
    geometry = vlbi.uv_coverage(sites, target, schedule)
    if args.image is not None:
        image = np.loadtxt(args.image, delimiter=",")
        vlbi.check_image(image)
    else:
        image = np.zeros((vlbi.IMAGE_SIZE, vlbi.IMAGE_SIZE))
        image[vlbi.IMAGE_SIZE // 2, vlbi.IMAGE_SIZE // 2] = 1.0
    noise, _mode = config.noise_and_mode()

    mset = vlbi.ideal_measurements(image, geometry)
    mset = vlbi.corrupt(mset, noise, rng)
    acset = vlbi.to_amp_closure(mset)
    vlbi.write_uv_csv(geometry, os.path.join(out, "uv.csv"))
    vlbi.write_visibility_csv(mset, os.path.join(out, "visibilities.csv"))
    vlbi.write_amp_csv(acset, os.path.join(out, "amplitudes.csv"))
    vlbi.write_closure_csv(acset, os.path.join(out, "closures.csv"))
    _check_finite([geometry.uv, mset.vis.real, mset.vis.imag, acset.amps,
                   acset.closures], "simulated measurements")
    _write_meta(out, "sim_config.txt", [
        ("target", config.target), ("array", config.array),
        ("site_file", site_file), ("noise_case", config.noise_case),
        ("n_timestamps", config.n_timestamps),
        ("min_elevation_deg", config.min_elevation_deg),
        ("resolved_seed", seed),
        ("image", args.image or "<point source>")])
    n_rows = int(geometry.pair_visible.sum())
    print(f"simulate: {n_rows} visible (epoch, pair) rows -> {out}")
    return 0


def _train_overrides(args):
    return {"seed": args.seed, "trials": args.trials, "lam1": args.lam1,
            "lam2": args.lam2, "resolution_fraction": args.fraction,
            "noise_case": args.noise_case, "target": args.target}


def cmd_train(args):
    config, cfg_out = _read_config(args.config, _train_overrides(args))
    out = _ensure_out(args.out or cfg_out or "run")
    if config.seed is None:
        config = train.TrainConfig(**{**config.to_dict(),
                                      "seed": _resolve_seed(None)})
    trainer, art = train.train_joint(config, out_dir=out)
    _check_finite([art.theta_mean, art.theta_std, art.recon_mean]
                  + art.theta_trials, "trained parameters")
    print(f"train: seed {art.seed}, {config.trials} trials -> {out}")
    order = np.argsort(np.diag(art.theta_mean))
    for i in order:
        print(f"  activity {art.site_names[i]:8s} "
              f"{art.theta_mean[i, i]:+.4f} +- {art.theta_std[i, i]:.4f}")
    return 0


def cmd_sweep(args):
    config, cfg_out = _read_config(args.config, _train_overrides(args))
    out = _ensure_out(args.out or cfg_out or "sweep")
    if config.seed is None:
        config = train.TrainConfig(**{**config.to_dict(),
                                      "seed": _resolve_seed(None)})
    lam1s = _float_list(args.lam1_grid)
    lam2s = _float_list(args.lam2_grid)
    rows = train.sweep_regularization(lam1s, lam2s, config,
                                      rng=np.random.default_rng(config.seed))
    k = rows[0]["histogram"].size - 1 if rows else 0
    path = os.path.join(out, "sweep.csv")
    with open(path, "w") as f:
        hist_cols = ",".join(f"count_{i}" for i in range(k + 1))
        f.write(f"lam1,lam2,mean_count,{hist_cols}\n")
        for r in rows:
            hist = ",".join(str(int(v)) for v in r["histogram"])
            f.write(f"{r['lam1']:.17g},{r['lam2']:.17g},"
                    f"{r['mean_count']:.17g},{hist}\n")
    _check_finite([[r["mean_count"] for r in rows]], "sweep results")
    _write_meta(out, "sweep_config.txt",
                sorted(config.to_dict().items())
                + [("lam1_grid", args.lam1_grid),
                   ("lam2_grid", args.lam2_grid),
                   ("resolved_seed", config.seed)])
    for r in rows:
        print(f"sweep: lam1={r['lam1']:+.4g} lam2={r['lam2']:.4g} "
              f"mean sites {r['mean_count']:.2f}")
    print(f"sweep table -> {path}")
    return 0


def cmd_resolution(args):
    config, cfg_out = _read_config(args.config, _train_overrides(args))
    out = _ensure_out(args.out or cfg_out or "resolution")
    if config.seed is None:
        config = train.TrainConfig(**{**config.to_dict(),
                                      "seed": _resolve_seed(None)})
    fractions = _float_list(args.fractions)
    rows = train.resolution_sweep(fractions, config)
    path = os.path.join(out, "resolution.csv")
    with open(path, "w") as f:
        f.write("fraction,site,activity_mean,activity_std\n")
        for r in rows:
            for name, am, sd in zip(r["site_names"], r["activity_mean"],
                                    r["activity_std"]):
                f.write(f"{r['fraction']:.17g},{name},{am:.17g},{sd:.17g}\n")
    _check_finite([r["activity_mean"] for r in rows], "resolution results")
    _write_meta(out, "resolution_config.txt",
                sorted(config.to_dict().items())
                + [("fractions", args.fractions),
                   ("resolved_seed", config.seed)])
    print(f"resolution table -> {path}")
    return 0


def cmd_swap(args):
    seed = _resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    test_images = train.synthetic_dataset(args.n_images,
                                          np.random.default_rng(seed + 1),
                                          augmented=False)
    runs = [train.load_run(d, images=test_images) for d in args.runs]
    matrix, counts = train.swap_eval(runs, test_images, rng,
                                     n_images=args.n_images,
                                     require_matched=args.require_matched)
    out = _ensure_out(args.out or "swap")
    path = os.path.join(out, "swap.csv")
    labels = [os.path.basename(os.path.normpath(d)) for d in args.runs]
    with open(path, "w") as f:
        f.write("decoder," + ",".join(f"masks_{l}" for l in labels)
                + ",mean_sites\n")
        for i, l in enumerate(labels):
            vals = ",".join(f"{v:.17g}" for v in matrix[i])
            f.write(f"{l},{vals},{counts[i]:.17g}\n")
    _check_finite([matrix], "swap matrix")
    _write_meta(out, "swap_config.txt",
                [("runs", " ".join(args.runs)), ("n_images", args.n_images),
                 ("resolved_seed", seed)])
    print("swap matrix (rows: decoder run, cols: mask source run):")
    for i, l in enumerate(labels):
        print(f"  {l:12s} " + " ".join(f"{v:.5f}" for v in matrix[i])
              + f"   mean sites {counts[i]:.2f}")
    print(f"swap table -> {path}")
    return 0


def cmd_cliques(args):
    model = ising.theta_from_csv(args.theta)
    report = ising.find_three_cliques(model, args.tau)
    names = model.names or [str(i) for i in range(model.n)]
    path = args.out or "cliques.csv"
    with open(path, "w") as f:
        f.write("site_j,site_k,site_l,coupling_sum\n")
        for (j, k, l), score in report:
            f.write(f"{names[j]},{names[k]},{names[l]},{score:.17g}\n")
    _check_finite([[score for _, score in report]], "clique scores")
    print(f"cliques: {len(report)} triples above tau={args.tau} -> {path}")
    return 0


def cmd_conditional(args):
    model = ising.theta_from_csv(args.theta)
    names = model.names or [str(i) for i in range(model.n)]
    fixed_names = [s.strip() for s in args.fix.split(",") if s.strip()]
    if not fixed_names:
        raise CliError("no sites given to condition on")
    values = ([float(v) for v in args.values.split(",")]
              if args.values else [1.0] * len(fixed_names))
    if len(values) != len(fixed_names):
        raise CliError("--values length must match --fix")
    index = {n: i for i, n in enumerate(names)}
    known = {}
    for name, val in zip(fixed_names, values):
        if name not in index:
            raise CliError(f"unknown site: {name}")
        known[index[name]] = val
    if len(known) >= model.n:
        raise CliError("cannot condition on every site")
    sub, remaining = ising.conditional_model(model, known)
    sub_named = ising.IsingModel(sub.theta, [names[i] for i in remaining])
    path = args.out or "conditional.csv"
    ising.theta_to_csv(sub_named, path)
    _check_finite([sub.theta], "conditional parameters")
    print(f"conditional: {model.n} sites -> {sub.n} remaining -> {path}")
    return 0


# -- argument parsing ----------------------------------------------------

def _add_common_train_flags(p):
    p.add_argument("--config", help="flat key: value config file")
    p.add_argument("--seed", type=int, help="master RNG seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--trials", type=int, help="independent trials")
    p.add_argument("--lam1", type=float, help="sparsity weight")
    p.add_argument("--lam2", type=float, help="diversity weight")
    p.add_argument("--fraction", type=float,
                   help="target resolution fraction of nominal")
    p.add_argument("--noise-case", type=int, dest="noise_case",
                   help="measurement noise case 1-6")
    p.add_argument("--target", help="sgra or m87")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="vlbidesign",
        description="Joint optimization of VLBI site selection and image "
                    "reconstruction.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write uv coverage and measurements")
    p.add_argument("--config", help="flat key: value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--target", help="sgra or m87")
    p.add_argument("--array", help="ehtplus, future, or a site file path")
    p.add_argument("--noise-case", type=int, dest="noise_case")
    p.add_argument("--timestamps", type=int, help="uniform GST epochs")
    p.add_argument("--image", help="32x32 CSV truth image (default: point source)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the joint optimization")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="regularization sweep over lam1 x lam2")
    _add_common_train_flags(p)
    p.add_argument("--lam1-grid", default="-0.05,-0.005,0.005,0.05")
    p.add_argument("--lam2-grid", default="0.005")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("resolution", help="sweep target resolution fractions")
    _add_common_train_flags(p)
    p.add_argument("--fractions", default="1,0.75,0.5,0.25")
    p.set_defaults(func=cmd_resolution)

    p = sub.add_parser("swap", help="cross-evaluate decoders and mask models")
    p.add_argument("--runs", nargs="+", required=True,
                   help="two or more completed run directories")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-images", type=int, default=1000, dest="n_images")
    p.add_argument("--require-matched", action="store_true",
                   dest="require_matched",
                   help="fail unless mean selected-site counts agree within 0.5")
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("cliques", help="rank strongly coupled site triples")
    p.add_argument("--theta", required=True, help="theta CSV file")
    p.add_argument("--tau", type=float, default=0.04)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cliques)

    p = sub.add_parser("conditional",
                       help="condition the site model on fixed selections")
    p.add_argument("--theta", required=True, help="theta CSV file")
    p.add_argument("--fix", required=True,
                   help="comma-separated site names to fix")
    p.add_argument("--values", help="comma-separated +-1 values (default +1)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_conditional)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, train.TrainError, ising.IsingError, vlbi.VlbiError,
            gibbs.GibbsError, recon.ReconError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
