"""Joint optimization of the site-selection model and the decoder.

One training step draws a soft mask per image from the relaxed Gibbs
sampler, scales a precomputed measurement vector by the mask products,
decodes, and minimizes

    similarity + lam1 * ||M||_1 - lam2 * H_theta(X)

averaged over the batch, end-to-end differentiable in the Ising
parameters theta and the decoder weights omega.  The similarity term is
the image-sum l1 distance for decoder A and the shift-invariant
correlation loss for decoder B; the sum scaling (rather than the
per-pixel mean exported by recon.l1_blurred_loss) keeps the lam1/lam2
operating range meaningful against unit-flux images.

Also here: synthetic dataset generation, IDX ingestion, augmentation,
repeated trials with per-trial Gibbs orderings, run artifacts, and the
sweep / resolution / swap experiment protocols.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import gibbs, ising, recon, vlbi


class TrainError(Exception):
    pass


# -- configuration -------------------------------------------------------

_DECODER_MODES = ("auto", "a", "b")


@dataclass
class TrainConfig:
    lam1: float = 0.005
    lam2: float = 0.005
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = None
    resolution_fraction: float = 0.75
    noise_case: int = 1
    target: str = "sgra"
    array: str = "ehtplus"
    decoder: str = "auto"
    trials: int = 5
    n_timestamps: int = 24
    min_elevation_deg: float = 10.0
    dataset: str = "synthetic"
    dataset_size: int = 2000
    augment: bool = True
    base_width: int = 16
    levels: int = 4
    hidden: int = 256
    eta: float = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_decoder: bool = False
    eval_masks: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainError("learning rate must be positive")
        if self.trials < 1:
            raise TrainError("need at least one trial")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch size must be positive")
        if self.resolution_fraction <= 0:
            raise TrainError("resolution fraction must be positive")
        if self.noise_case not in range(1, 7):
            raise TrainError("noise case must be 1..6")
        if self.decoder not in _DECODER_MODES:
            raise TrainError(f"decoder must be one of {_DECODER_MODES}")
        if self.dataset_size < self.batch_size:
            raise TrainError("dataset smaller than one batch")

    @classmethod
    def from_dict(cls, d):
        """Build from a flat mapping; unknown keys are rejected."""
        known = {f.name: f.type for f in dc_fields(cls)}
        bad = sorted(set(d) - set(known))
        if bad:
            raise TrainError(f"unknown config keys: {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    def noise_and_mode(self):
        noise, mode = vlbi.noise_case(self.noise_case, self.eta)
        if self.decoder != "auto":
            mode = self.decoder
        return noise, mode


_INT_FIELDS = {"epochs", "batch_size", "seed", "trials", "n_timestamps",
               "dataset_size", "base_width", "levels", "hidden",
               "eval_masks", "noise_case"}
_FLOAT_FIELDS = {"lam1", "lam2", "learning_rate", "resolution_fraction",
                 "min_elevation_deg", "eta", "adam_beta1", "adam_beta2",
                 "adam_eps"}
_BOOL_FIELDS = {"augment", "freeze_decoder"}


def parse_flat_text(text):
    """Parse 'key: value' lines (one per line, # comments) into a dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise TrainError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, _, val = line.partition(":")
        key = key.strip()
        if key in out:
            raise TrainError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def coerce_config_value(key, val):
    """Convert one string config value to its typed form."""
    if isinstance(val, str) and val.lower() in ("none", ""):
        return None
    try:
        if key in _INT_FIELDS:
            return int(val)
        if key in _FLOAT_FIELDS:
            return float(val)
    except ValueError:
        raise TrainError(f"config key {key!r}: bad number {val!r}") from None
    if key in _BOOL_FIELDS:
        if str(val).lower() in ("true", "1", "yes"):
            return True
        if str(val).lower() in ("false", "0", "no"):
            return False
        raise TrainError(f"config key {key!r}: bad boolean {val!r}")
    return val


def config_from_text(text, overrides=None):
    """TrainConfig from flat text plus override mapping; strict keys."""
    raw = parse_flat_text(text)
    known = {f.name for f in dc_fields(TrainConfig)}
    typed = {k: coerce_config_value(k, v) for k, v in raw.items()}
    extra = {k: typed.pop(k) for k in list(typed) if k not in known}
    bad = sorted(k for k in extra if k != "out")
    if bad:
        raise TrainError(f"unknown config keys: {', '.join(bad)}")
    if overrides:
        typed.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(typed), extra.get("out")


def bundled_site_file(array):
    """Path of a packaged site file ('ehtplus' or 'future')."""
    from importlib import resources
    key = array.lower().replace("+", "plus").replace("\"", "")
    fname = {"ehtplus": "sites_ehtplus.txt", "future": "sites_future.txt"}.get(key)
    if fname is None:
        return None
    return str(resources.files("vlbidesign") / "data" / fname)


def resolve_sites(array):
    """Site table for an array name or an explicit site-file path."""
    path = bundled_site_file(array)
    if path is None:
        if not os.path.exists(array):
            raise TrainError(f"array is neither a known name nor a file: {array}")
        path = array
    return vlbi.load_sites(path), path


# -- datasets ------------------------------------------------------------

def _grid():
    c = (np.arange(vlbi.IMAGE_SIZE) - vlbi.IMAGE_SIZE / 2 + 0.5) / (vlbi.IMAGE_SIZE / 2)
    return np.meshgrid(c, c)


def _normalize_flux(img):
    img = np.clip(img, 0.0, None)
    s = img.sum()
    if s <= 0:
        raise TrainError("image has no flux")
    return img / s


def synthetic_image(rng):
    """One random geometric source: ring, crescent, disk, or blobs."""
    xx, yy = _grid()
    kind = rng.integers(4)
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    d = np.hypot(xx - cx, yy - cy)
    if kind == 0:                                   # filled disk, soft edge
        r = rng.uniform(0.15, 0.5)
        w = rng.uniform(0.03, 0.1)
        img = 1.0 / (1.0 + np.exp((d - r) / w))
    elif kind == 1:                                 # ring
        r = rng.uniform(0.15, 0.45)
        t = rng.uniform(0.05, 0.18)
        img = np.exp(-0.5 * ((d - r) / t) ** 2)
    elif kind == 2:                                 # crescent-lit ring
        r = rng.uniform(0.15, 0.45)
        t = rng.uniform(0.05, 0.18)
        phi0 = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(0.4, 0.95)
        ang = np.arctan2(yy - cy, xx - cx)
        img = np.exp(-0.5 * ((d - r) / t) ** 2) * (1.0 + a * np.cos(ang - phi0))
    else:                                           # a few Gaussian blobs
        img = np.zeros_like(xx)
        for _ in range(rng.integers(1, 4)):
            bx, by = rng.uniform(-0.45, 0.45, size=2)
            s = rng.uniform(0.08, 0.3)
            amp = rng.uniform(0.3, 1.0)
            img += amp * np.exp(-0.5 * (((xx - bx) ** 2 + (yy - by) ** 2) / s ** 2))
    return _normalize_flux(img)


def rotate_image(img, angle_deg):
    """Rotate about the image center, bilinear, fixed frame."""
    return ndimage.rotate(img, angle_deg, reshape=False, order=1,
                          mode="constant", cval=0.0)


def elastic_deform(img, rng, amplitude=1.5, smoothness=4.0):
    """Warp by a smooth random displacement field (pixels)."""
    n = img.shape[0]
    disp = rng.normal(0.0, 1.0, size=(2, n, n))
    disp = np.stack([ndimage.gaussian_filter(disp[i], smoothness) for i in range(2)])
    peak = np.abs(disp).max()
    if peak > 0:
        disp *= amplitude / peak
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    coords = np.stack([rows + disp[0], cols + disp[1]])
    return ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=0.0)


def augment(img, rng, rotate=True, deform=True):
    """Random rotation plus local elastic deformation, flux renormalized."""
    out = np.asarray(img, dtype=np.float64)
    if rotate:
        out = rotate_image(out, rng.uniform(0.0, 360.0))
    if deform:
        out = elastic_deform(out, rng)
    return _normalize_flux(out)


def synthetic_dataset(n, rng, augmented=True):
    imgs = np.empty((n, vlbi.IMAGE_SIZE, vlbi.IMAGE_SIZE))
    for i in range(n):
        img = synthetic_image(rng)
        imgs[i] = augment(img, rng) if augmented else img
    return imgs


def load_idx_images(path, limit=None):
    """Read an IDX image archive (unsigned-byte, 3-D) as flux-1 images.

    28x28 inputs are zero-padded to 32x32; other sizes must already match.
    """
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise TrainError(f"{path}: not an IDX file")
        dtype_code, ndim = head[2], head[3]
        if dtype_code != 0x08 or ndim != 3:
            raise TrainError(f"{path}: expected unsigned-byte 3-D IDX data")
        n, h, w = struct.unpack(">III", f.read(12))
        if limit is not None:
            n = min(n, limit)
        raw = np.frombuffer(f.read(n * h * w), dtype=np.uint8)
    imgs = raw.reshape(n, h, w).astype(np.float64)
    if (h, w) == (28, 28):
        imgs = np.pad(imgs, ((0, 0), (2, 2), (2, 2)))
    elif (h, w) != (vlbi.IMAGE_SIZE, vlbi.IMAGE_SIZE):
        raise TrainError(f"{path}: image size {h}x{w} unsupported")
    sums = imgs.sum(axis=(1, 2))
    keep = sums > 0
    return imgs[keep] / sums[keep, None, None]


def build_dataset(config, rng):
    if config.dataset == "synthetic":
        return synthetic_dataset(config.dataset_size, rng, config.augment)
    imgs = load_idx_images(config.dataset, limit=config.dataset_size)
    if config.augment:
        out = np.empty_like(imgs)
        for i in range(len(imgs)):
            out[i] = augment(imgs[i], rng)
        return out
    return imgs


# -- forward model plumbing ---------------------------------------------

class ForwardModel:
    """Precomputed geometry constants for fast per-batch packing."""

    def __init__(self, geometry, noise_config, mode):
        self.geometry = geometry
        self.noise = noise_config
        self.mode_key = "complex" if mode == "a" else "ampclosure"
        self.decoder_mode = mode
        self.F = vlbi.dft_matrix(geometry)                 # (T*P, npix)
        self.vec_len = vlbi.vector_length(geometry, self.mode_key)
        self.indices = vlbi.packing_site_indices(geometry, self.mode_key)
        self.pair_valid = geometry.pair_visible.reshape(-1)     # (T*P,)
        self.tri_valid = geometry.tri_valid.reshape(-1)         # (T*R,)
        self.nu = vlbi.baseline_sigmas(geometry, noise_config)  # (P,)

    def ideal_vis(self, images):
        """(N, 32, 32) images -> (N, T*P) complex visibilities."""
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return flat @ self.F.T

    def corrupt_batch(self, vis, rng):
        """Apply the configured noise to (B, T*P) visibilities."""
        g = self.geometry
        out = vis
        if self.noise.atmospheric:
            phases = rng.uniform(0.0, 2.0 * np.pi, size=(len(vis), g.T, g.K))
            dphi = (phases[:, :, g.pairs[:, 0]]
                    - phases[:, :, g.pairs[:, 1]]).reshape(len(vis), -1)
            out = np.exp(-1j * dphi) * out
        if np.any(self.nu > 0):
            scale = np.tile(self.nu, g.T)[None, :] / np.sqrt(2.0)
            n = (rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape))
            out = out + scale * n
        return out

    def pack_unmasked(self, vis):
        """(B, T*P) visibilities -> (B, vec_len) unit-mask packed vectors."""
        b = len(vis)
        g = self.geometry
        if self.mode_key == "complex":
            v = np.where(self.pair_valid[None, :], vis, 0.0)
            out = np.empty((b, 2 * v.shape[1]))
            out[:, 0::2] = v.real
            out[:, 1::2] = v.imag
            return out
        amps = np.where(self.pair_valid[None, :], np.abs(vis), 0.0)
        triple = vlbi.closure_triple(vis.reshape(b, g.T, g.P), g)
        ang = np.angle(triple).reshape(b, -1)
        valid = self.tri_valid[None, :]
        phasor = np.empty((b, 2 * ang.shape[1]))
        phasor[:, 0::2] = np.where(valid, np.cos(ang), 0.0)
        phasor[:, 1::2] = np.where(valid, np.sin(ang), 0.0)
        return np.concatenate([amps, phasor], axis=1)

    def packed_batch(self, vis, rng):
        return self.pack_unmasked(self.corrupt_batch(vis, rng))


def theta_index_matrix(n):
    """(n, n) indices into the free vector (n activities, then couplings)."""
    idx = np.zeros((n, n), dtype=np.int64)
    idx[np.diag_indices(n)] = np.arange(n)
    iu = np.triu_indices(n, 1)
    codes = n + np.arange(len(iu[0]))
    idx[iu] = codes
    idx[(iu[1], iu[0])] = codes
    return idx


def expand_theta(theta_free, n):
    """Free-parameter Tensor -> symmetric (n, n) matrix Tensor."""
    return theta_free[theta_index_matrix(n)]


def hamiltonian_graph(theta_sym, states):
    """Per-sample Ising energy of (B, n) relaxed states, as a graph node."""
    n = theta_sym.data.shape[0]
    diag = theta_sym[(np.arange(n), np.arange(n))]
    couplings = theta_sym * ad.as_tensor(1.0 - np.eye(n))
    act = ad.tsum(states * diag, axis=1)
    pair = 0.5 * ad.tsum(states * (states @ couplings), axis=1)
    return -(act + pair)


def mask_weights(masks, indices):
    """Per-slot mask products M_p M_q (M_b) for the packed vector.

    ``masks`` is a (B, K) Tensor; ``indices`` the (ip, iq, ib) arrays from
    vlbi.packing_site_indices, which address a mask augmented with a
    constant 1 at position K.
    """
    b = masks.data.shape[0]
    ip, iq, ib = indices
    aug = ad.concat([masks, ad.as_tensor(np.ones((b, 1)))], axis=1)
    return aug[:, ip] * aug[:, iq] * aug[:, ib]


def total_loss(packed, indices, masks, states, theta_sym, decoder, targets,
               lam1, lam2, loss_kind):
    """The joint objective on one batch; returns (scalar Tensor, parts).

    ``packed`` is the (B, L) unit-mask measurement constant; ``targets``
    the blurred truth images matching ``loss_kind`` ('l1' expects
    zero-padded blur, 'shift' cyclic blur).  All reductions are batch
    means.  ``parts`` holds the float values of the three components.
    """
    masked = ad.as_tensor(packed) * mask_weights(masks, indices)
    rec = decoder(masked)
    if loss_kind == "l1":
        sim = recon.l1_loss_graph(rec, targets, reduction="sum")
    elif loss_kind == "shift":
        sim = recon.shift_invariant_loss_graph(rec, targets)
    else:
        raise TrainError(f"unknown loss kind: {loss_kind}")
    sparsity = ad.tmean(ad.tsum(masks, axis=1))
    diversity = ad.tmean(hamiltonian_graph(theta_sym, states))
    out = sim + lam1 * sparsity - lam2 * diversity
    parts = {"similarity": float(sim.data), "sparsity": float(sparsity.data),
             "diversity": float(diversity.data), "total": float(out.data)}
    return out, parts


# -- optimizer -----------------------------------------------------------

class Adam:
    """Adam with bias correction over a list of trainable tensors."""

    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.tensors):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- run artifacts -------------------------------------------------------

@dataclass
class RunArtifacts:
    config: dict
    seed: int
    site_names: list
    site_file: str
    theta_trials: list                  # (K, K) arrays
    theta_mean: np.ndarray
    theta_std: np.ndarray
    omegas: list                        # per-trial decoder state dicts
    orderings: list
    loss_history: list                  # rows (trial, epoch, step, parts...)
    best_trial: int
    masks_sample: np.ndarray
    marginals: np.ndarray
    recon_mean: np.ndarray
    recon_std: np.ndarray

    def theta_model(self, trial=None):
        theta = self.theta_mean if trial is None else self.theta_trials[trial]
        return ising.IsingModel(theta, self.site_names)


_RUN_README = """Run artifact files
==================
run_config.txt       key: value form of the training configuration (plus
                     resolved seed, site file, decoder mode, best_trial)
theta_trial_K.csv    learned Ising parameters of trial K (header row of
                     site names, then an n x n grid; diagonal = activity)
theta_mean.csv       elementwise mean of the trial matrices
theta_std.csv        elementwise standard deviation of the trial matrices
loss_history.csv     columns: trial, epoch, step, similarity, sparsity,
                     diversity, total
masks_sample.csv     sampled binary masks (header of site names, one mask
                     per row)
marginals.csv        columns: site, selection_frequency
recon_mean.csv/.png  pixelwise mean of sample reconstructions (32 x 32)
recon_std.csv/.png   pixelwise standard deviation of the same
omega_trial_K.npz    decoder weights of trial K
"""


def _write_grid_csv(path, names, grid):
    with open(path, "w") as f:
        f.write(",".join(names) + "\n")
        for row in np.atleast_2d(grid):
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _write_png(path, grid):
    from PIL import Image
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    scaled = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(path)


def save_run(artifacts, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    names = artifacts.site_names
    for k, theta in enumerate(artifacts.theta_trials, start=1):
        _write_grid_csv(os.path.join(out_dir, f"theta_trial_{k}.csv"), names, theta)
    _write_grid_csv(os.path.join(out_dir, "theta_mean.csv"), names,
                    artifacts.theta_mean)
    _write_grid_csv(os.path.join(out_dir, "theta_std.csv"), names,
                    artifacts.theta_std)
    with open(os.path.join(out_dir, "loss_history.csv"), "w") as f:
        f.write("trial,epoch,step,similarity,sparsity,diversity,total\n")
        for row in artifacts.loss_history:
            f.write(",".join(str(v) for v in row) + "\n")
    gibbs.masks_to_csv(artifacts.masks_sample, names,
                       os.path.join(out_dir, "masks_sample.csv"))
    with open(os.path.join(out_dir, "marginals.csv"), "w") as f:
        f.write("site,selection_frequency\n")
        for name, m in zip(names, artifacts.marginals):
            f.write(f"{name},{m:.17g}\n")
    for stem, grid in (("recon_mean", artifacts.recon_mean),
                       ("recon_std", artifacts.recon_std)):
        _write_grid_csv(os.path.join(out_dir, f"{stem}.csv"),
                        [f"c{i}" for i in range(grid.shape[1])], grid)
        _write_png(os.path.join(out_dir, f"{stem}.png"), grid)
    for k, omega in enumerate(artifacts.omegas, start=1):
        np.savez(os.path.join(out_dir, f"omega_trial_{k}.npz"), **omega)
    with open(os.path.join(out_dir, "run_config.txt"), "w") as f:
        for key, val in sorted(artifacts.config.items()):
            f.write(f"{key}: {val}\n")
        f.write(f"resolved_seed: {artifacts.seed}\n")
        f.write(f"site_file: {artifacts.site_file}\n")
        f.write(f"best_trial: {artifacts.best_trial}\n")
        for t, order in enumerate(artifacts.orderings, start=1):
            flat = np.asarray(order).ravel()
            f.write(f"ordering_trial_{t}: {' '.join(map(str, flat))}\n")
    with open(os.path.join(out_dir, "README.txt"), "w") as f:
        f.write(_RUN_README)


# -- the training loop ---------------------------------------------------

class Trainer:
    """Wires a TrainConfig into geometry, data, decoders, and trials."""

    def __init__(self, config, images=None, sites=None, site_file=None):
        self.config = config
        self.seed = (config.seed if config.seed is not None
                     else int(np.random.SeedSequence().entropy % (2 ** 31)))
        root = np.random.SeedSequence(self.seed)
        (self._data_ss, self._eval_ss, *self._trial_ss) = root.spawn(2 + config.trials)

        if sites is None:
            sites, site_file = resolve_sites(config.array)
        self.sites = sites
        self.site_file = site_file or "<in-memory>"
        self.K = len(sites)
        target = vlbi.target_preset(config.target)
        schedule = vlbi.default_schedule(config.n_timestamps,
                                         config.min_elevation_deg)
        self.geometry = vlbi.uv_coverage(sites, target, schedule)
        self.noise, self.mode = config.noise_and_mode()
        self.fm = ForwardModel(self.geometry, self.noise, self.mode)
        self.loss_kind = "l1" if self.mode == "a" else "shift"
        self.kernel = recon.make_kernel(config.resolution_fraction)
        self.gibbs_cfg = gibbs.GibbsConfig()

        data_rng = np.random.default_rng(self._data_ss)
        self.images = (np.asarray(images, dtype=np.float64) if images is not None
                       else build_dataset(config, data_rng))
        boundary = "zero" if self.loss_kind == "l1" else "wrap"
        self.targets = np.stack([recon.blur(z, self.kernel, boundary)
                                 for z in self.images])
        self.vis_cache = self.fm.ideal_vis(self.images)

    def _build_decoder(self, params, rng):
        return recon.build_decoder(self.mode, self.geometry, params, rng,
                                   image_size=vlbi.IMAGE_SIZE,
                                   levels=self.config.levels,
                                   base_width=self.config.base_width,
                                   hidden=self.config.hidden)

    def run_trial(self, trial, theta_init=None):
        """One optimization trial; returns (theta, omega, ordering, history)."""
        cfg = self.config
        ss = self._trial_ss[trial]
        omega_rng, order_rng, noise_rng, shuffle_rng, corrupt_rng = (
            np.random.default_rng(s) for s in ss.spawn(5))
        params = ad.ParameterSet()
        n_free = ising.IsingModel.free_size(self.K)
        theta0 = (np.zeros(n_free) if theta_init is None
                  else np.asarray(theta_init, dtype=np.float64).copy())
        theta_free = params.add("theta", theta0)
        decoder = self._build_decoder(params, omega_rng)
        trainable = [theta_free]
        if not cfg.freeze_decoder:
            trainable += [t for t in params.tensors() if t is not theta_free]
        adam = Adam(trainable, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        order = gibbs.fresh_orderings(order_rng, self.K,
                                      self.gibbs_cfg.n_layers)

        n = len(self.images)
        bsz = cfg.batch_size
        history = []
        step = 0
        for epoch in range(cfg.epochs):
            perm = shuffle_rng.permutation(n)
            for start in range(0, n - bsz + 1, bsz):
                idx = perm[start:start + bsz]
                packed = self.fm.packed_batch(self.vis_cache[idx], corrupt_rng)
                gnoise = gibbs.fresh_noise(noise_rng, self.K,
                                           self.gibbs_cfg.n_layers, batch=len(idx))
                theta_sym = expand_theta(theta_free, self.K)
                states, masks = gibbs.relaxed_chain_graph(
                    theta_sym, gnoise, order, self.gibbs_cfg)
                loss, parts = total_loss(
                    packed, self.fm.indices, masks, states, theta_sym,
                    decoder, self.targets[idx], cfg.lam1, cfg.lam2,
                    self.loss_kind)
                if not np.isfinite(parts["total"]):
                    raise TrainError(
                        f"trial {trial + 1} diverged at epoch {epoch + 1} "
                        f"step {step} (loss {parts['total']})")
                params.zero_grad()
                ad.backward(loss, trainable)
                adam.step()
                history.append((trial + 1, epoch + 1, step,
                                parts["similarity"], parts["sparsity"],
                                parts["diversity"], parts["total"]))
                step += 1
        theta = ising.IsingModel.from_free(theta_free.data, self.K,
                                           self.sites.names)
        omega = {k: v for k, v in params.state_arrays().items() if k != "theta"}
        return theta.theta, omega, order, history

    def run(self, theta_init=None):
        cfg = self.config
        thetas, omegas, orderings, history = [], [], [], []
        final_losses = []
        for trial in range(cfg.trials):
            theta, omega, order, h = self.run_trial(trial, theta_init)
            thetas.append(theta)
            omegas.append(omega)
            orderings.append(order)
            history.extend(h)
            tail = [row[-1] for row in h[-10:]]
            final_losses.append(float(np.mean(tail)))
        best = int(np.argmin(final_losses))
        stack = np.stack(thetas)
        theta_mean = stack.mean(axis=0)
        theta_std = stack.std(axis=0)

        eval_rng = np.random.default_rng(self._eval_ss)
        mean_model = ising.IsingModel(theta_mean, self.sites.names)
        masks = gibbs.sample_hard_masks(mean_model, eval_rng,
                                        min(200, cfg.eval_masks),
                                        self.gibbs_cfg)
        marginals = ising.estimate_marginals(masks)
        rec_mean, rec_std = self._sample_reconstructions(
            thetas[best], omegas[best], eval_rng)
        return RunArtifacts(
            config=cfg.to_dict(), seed=self.seed,
            site_names=list(self.sites.names), site_file=self.site_file,
            theta_trials=thetas, theta_mean=theta_mean, theta_std=theta_std,
            omegas=omegas, orderings=orderings, loss_history=history,
            best_trial=best, masks_sample=masks, marginals=marginals,
            recon_mean=rec_mean, recon_std=rec_std)

    def _sample_reconstructions(self, theta, omega, rng, n_eval=32):
        model = ising.IsingModel(theta, self.sites.names)
        idx = rng.choice(len(self.images), size=min(n_eval, len(self.images)),
                         replace=False)
        masks = gibbs.sample_hard_masks(model, rng, len(idx), self.gibbs_cfg)
        recs = self.decode_with(omega, self.vis_cache[idx], masks, rng)
        return recs.mean(axis=0), recs.std(axis=0)

    def decode_with(self, omega, vis, masks, rng, batch=64):
        """Decode visibility rows under given masks using stored weights."""
        params = ad.ParameterSet()
        decoder = self._build_decoder(params, np.random.default_rng(0))
        params.load_state_arrays(omega)
        ip, iq, ib = self.fm.indices
        outs = []
        for start in range(0, len(vis), batch):
            sl = slice(start, start + batch)
            packed = self.fm.packed_batch(vis[sl], rng)
            aug = np.concatenate([masks[sl], np.ones((len(packed), 1))], axis=1)
            weights = aug[:, ip] * aug[:, iq] * aug[:, ib]
            rec = decoder(ad.as_tensor(packed * weights))
            outs.append(rec.data)
        return np.concatenate(outs)


def train_joint(config, images=None, sites=None, site_file=None,
                out_dir=None, theta_init=None):
    """Run the full multi-trial joint optimization; optionally save files."""
    trainer = Trainer(config, images, sites, site_file)
    artifacts = trainer.run(theta_init)
    if out_dir is not None:
        save_run(artifacts, out_dir)
    return trainer, artifacts


def load_run(run_dir, images=None):
    """Rebuild (Trainer, RunArtifacts) from a saved run directory.

    ``images`` supplies the working image set for the reconstructed
    Trainer (e.g. a fresh test set for cross-evaluation); without it the
    configured dataset is regenerated.
    """
    def p(name):
        return os.path.join(run_dir, name)

    if not os.path.exists(p("run_config.txt")):
        raise TrainError(f"{run_dir}: no run_config.txt; not a run directory")
    with open(p("run_config.txt")) as f:
        meta = parse_flat_text(f.read())
    seed = int(meta.pop("resolved_seed"))
    site_file = meta.pop("site_file")
    best = int(meta.pop("best_trial"))
    order_keys = sorted((k for k in meta if k.startswith("ordering_trial_")),
                        key=lambda k: int(k.rsplit("_", 1)[1]))
    raw_orderings = [np.array(meta.pop(k).split(), dtype=np.int64)
                     for k in order_keys]
    known = {f.name for f in dc_fields(TrainConfig)}
    cfg_dict = {k: coerce_config_value(k, v) for k, v in meta.items()
                if k in known}
    cfg_dict["seed"] = seed
    config = TrainConfig.from_dict(cfg_dict)

    if site_file and site_file != "<in-memory>" and os.path.exists(site_file):
        trainer = Trainer(config, images=images,
                          sites=vlbi.load_sites(site_file),
                          site_file=site_file)
    else:
        trainer = Trainer(config, images=images)
    mean_model = ising.theta_from_csv(p("theta_mean.csv"))
    if mean_model.names != list(trainer.sites.names):
        raise TrainError(
            f"{run_dir}: saved sites {mean_model.names} do not match the "
            f"rebuilt geometry {list(trainer.sites.names)}; the original "
            f"site file ({site_file}) is unavailable")
    k_sites = len(trainer.sites.names)
    orderings = [o if o.size == k_sites else o.reshape(-1, k_sites)
                 for o in raw_orderings]
    theta_trials = []
    for k in range(1, config.trials + 1):
        theta_trials.append(ising.theta_from_csv(p(f"theta_trial_{k}.csv")).theta)
    theta_mean = mean_model.theta
    theta_std = ising.theta_from_csv(p("theta_std.csv")).theta
    omegas = [dict(np.load(p(f"omega_trial_{k}.npz")))
              for k in range(1, config.trials + 1)]
    _, masks_sample = gibbs.masks_from_csv(p("masks_sample.csv"))
    marginals = np.loadtxt(p("marginals.csv"), delimiter=",", skiprows=1,
                           usecols=1, ndmin=1)
    history = []
    with open(p("loss_history.csv")) as f:
        next(f)
        for line in f:
            t, e, s, *vals = line.strip().split(",")
            history.append((int(t), int(e), int(s), *map(float, vals)))
    recon_mean = np.loadtxt(p("recon_mean.csv"), delimiter=",", skiprows=1)
    recon_std = np.loadtxt(p("recon_std.csv"), delimiter=",", skiprows=1)
    artifacts = RunArtifacts(
        config=config.to_dict(), seed=seed,
        site_names=list(trainer.sites.names), site_file=site_file,
        theta_trials=theta_trials, theta_mean=theta_mean,
        theta_std=theta_std, omegas=omegas, orderings=orderings,
        loss_history=history, best_trial=best, masks_sample=masks_sample,
        marginals=marginals, recon_mean=recon_mean, recon_std=recon_std)
    return trainer, artifacts


# -- experiment protocols ------------------------------------------------

def selection_counts(model, rng, n_samples, gibbs_cfg=None):
    """Selected-site counts over hard mask draws; returns (counts, masks)."""
    masks = gibbs.sample_hard_masks(model, rng, n_samples,
                                    gibbs_cfg or gibbs.GibbsConfig())
    return masks.sum(axis=1), masks


def sweep_regularization(lam1_values, lam2_values, config, images=None,
                         rng=None, sites=None, site_file=None):
    """Train per (lam1, lam2) cell; report mean selected counts + histogram.

    Returns rows of dicts: lam1, lam2, mean_count, histogram (length K+1),
    theta (mean over trials).
    """
    rng = rng or np.random.default_rng(0)
    rows = []
    for lam2 in lam2_values:
        for lam1 in lam1_values:
            cfg = TrainConfig(**{**config.to_dict(), "lam1": float(lam1),
                                 "lam2": float(lam2)})
            trainer, art = train_joint(cfg, images=images, sites=sites,
                                       site_file=site_file)
            model = art.theta_model()
            counts, _ = selection_counts(model, rng, config.eval_masks)
            hist = np.bincount(counts.astype(np.int64),
                               minlength=len(model.theta) + 1)
            rows.append({"lam1": float(lam1), "lam2": float(lam2),
                         "mean_count": float(counts.mean()),
                         "histogram": hist, "theta": art.theta_mean})
    return rows


def resolution_sweep(fractions, config, images=None, sites=None,
                     site_file=None):
    """Train per blur fraction; returns rows with per-site activities."""
    rows = []
    for frac in fractions:
        cfg = TrainConfig(**{**config.to_dict(),
                             "resolution_fraction": float(frac)})
        trainer, art = train_joint(cfg, images=images, sites=sites,
                                   site_file=site_file)
        rows.append({"fraction": float(frac),
                     "site_names": art.site_names,
                     "activity_mean": np.diag(art.theta_mean).copy(),
                     "activity_std": np.diag(art.theta_std).copy(),
                     "theta": art.theta_mean})
    return rows


def swap_eval(runs, images, rng=None, n_images=1000, require_matched=False,
              count_tolerance=0.5):
    """Cross-evaluate decoders against sampling strategies.

    ``runs`` is a list of (Trainer, RunArtifacts) pairs.  Entry (i, j) of
    the returned matrix is the mean shift-invariant loss of run i's best
    decoder reconstructing ``images`` through run i's geometry, with masks
    drawn from run j's mean Ising model.  Also returns the mean
    selected-site count per run's model.
    """
    rng = rng or np.random.default_rng(0)
    n_runs = len(runs)
    imgs = np.asarray(images, dtype=np.float64)[:n_images]
    counts = []
    models = []
    for trainer, art in runs:
        model = art.theta_model()
        models.append(model)
        c, _ = selection_counts(model, rng, 1000)
        counts.append(float(c.mean()))
    if require_matched:
        spread = max(counts) - min(counts)
        if spread > count_tolerance:
            raise TrainError(
                f"expected selected-site counts differ by {spread:.2f} "
                f"(> {count_tolerance}); tune lam1 before swapping")
    matrix = np.zeros((n_runs, n_runs))
    for i, (trainer, art) in enumerate(runs):
        vis = trainer.fm.ideal_vis(imgs)
        omega = art.omegas[art.best_trial]
        wrap_targets = np.stack([recon.blur(z, trainer.kernel, "wrap")
                                 for z in imgs])
        for j, model in enumerate(models):
            masks = gibbs.sample_hard_masks(model, rng, len(imgs),
                                            trainer.gibbs_cfg)
            recs = trainer.decode_with(omega, vis, masks, rng)
            losses = []
            for r, bt in zip(recs, wrap_targets):
                rn = np.linalg.norm(r)
                bn = np.linalg.norm(bt)
                if rn == 0.0 or bn == 0.0:
                    losses.append(1.0)
                    continue
                c = recon._cyclic_correlation(r, bt).max()
                losses.append(1.0 - c / (rn * bn))
            matrix[i, j] = float(np.mean(losses))
    return matrix, counts
