"""Image reconstruction: blur kernels, similarity losses, and decoders.

Decoder A maps a packed complex-visibility vector through one dense layer
and a U-Net to an image.  Decoder B first routes amplitudes + closure-phase
phasors through three dense layers that estimate per-baseline phases,
recombines them with the amplitudes into modified complex visibilities,
and feeds those to the decoder-A trunk.  Both run on the autodiff engine
so training can differentiate through them.

Losses: an l1 distance to the blurred target (decoder A; the target is
blurred to the desired resolution), and a shift-invariant correlation
loss (decoder B, where absolute position is unrecoverable).
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from . import autodiff as ad


class ReconError(Exception):
    pass


# -- blur kernels --------------------------------------------------------

NOMINAL_FWHM_PX = 8.0   # nominal array resolution expressed in pixels


def make_kernel(fraction, nominal_fwhm_px=NOMINAL_FWHM_PX):
    """Gaussian kernel with FWHM = fraction x nominal resolution.

    Odd-sized, centered, truncated at ~3 sigma (at most 31x31), and
    normalized to unit sum.
    """
    if fraction <= 0:
        raise ReconError("fraction must be positive")
    fwhm = fraction * nominal_fwhm_px
    sigma = fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    radius = int(min(15, max(1, np.ceil(3.0 * sigma))))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def blur(image, kernel, boundary="zero"):
    """2-D convolution with the kernel; zero padding or cyclic wrap."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ReconError(f"blur expects a 2-D image, got shape {image.shape}")
    if boundary == "zero":
        return convolve2d(image, kernel, mode="same", boundary="fill")
    if boundary == "wrap":
        return convolve2d(image, kernel, mode="same", boundary="wrap")
    raise ReconError(f"unknown boundary: {boundary}")


# -- similarity losses (numpy evaluation forms) -------------------------

def l1_blurred_loss(recon, truth, kernel, reduction="mean"):
    """Absolute difference between recon and the blurred target.

    Reduction 'mean' gives a per-pixel average; 'sum' the image total.
    """
    recon = np.asarray(recon, dtype=np.float64)
    diff = np.abs(recon - blur(truth, kernel))
    if reduction == "mean":
        return float(diff.mean())
    if reduction == "sum":
        return float(diff.sum())
    raise ReconError(f"unknown reduction: {reduction}")


def _cyclic_correlation(a, b):
    """C[dy, dx] = sum_{r,c} a[r,c] * b[(r+dy) % n, (c+dx) % n]."""
    fa = np.fft.fft2(a)
    fb = np.fft.fft2(b)
    return np.real(np.fft.ifft2(np.conj(fa) * fb))


def best_cyclic_shift(recon, target):
    """Shift (dy, dx) maximizing the cyclic cross-correlation."""
    c = _cyclic_correlation(recon, target)
    k = int(np.argmax(c))
    return np.unravel_index(k, c.shape)


def shift_invariant_loss(recon, truth, kernel):
    """1 - max-shift normalized correlation with the blurred target.

    The target is blurred with cyclic boundary so the loss is exactly
    invariant to cyclic translations of the reconstruction.  Ranges over
    [0, 2]; 0 means a perfect match at some shift.
    """
    recon = np.asarray(recon, dtype=np.float64)
    bt = blur(truth, kernel, boundary="wrap")
    rn = np.linalg.norm(recon)
    bn = np.linalg.norm(bt)
    if rn == 0.0 or bn == 0.0:
        raise ReconError("shift_invariant_loss needs nonzero images")
    return float(1.0 - _cyclic_correlation(recon, bt).max() / (rn * bn))


# -- similarity losses (autodiff graph forms) ---------------------------

def l1_loss_graph(recon, blurred_truth, reduction="mean"):
    """Batch-mean l1 loss as a graph node.

    ``recon`` is a (B, S, S) Tensor, ``blurred_truth`` a constant array of
    the same shape (already blurred).  Per-image reduction is 'mean' or
    'sum' over pixels; images are averaged.
    """
    bt = np.asarray(blurred_truth, dtype=np.float64)
    if recon.shape != bt.shape:
        raise ReconError(f"shape mismatch: {recon.shape} vs {bt.shape}")
    diff = ad.absolute(recon - ad.as_tensor(bt))
    per_image = ad.tsum(diff, axis=(1, 2))
    if reduction == "mean":
        per_image = per_image * (1.0 / (bt.shape[1] * bt.shape[2]))
    elif reduction != "sum":
        raise ReconError(f"unknown reduction: {reduction}")
    return ad.tmean(per_image)


def shift_invariant_loss_graph(recon, blurred_truth_wrap):
    """Batch-mean shift-invariant loss as a graph node.

    The maximizing cyclic shift is located numerically per image (an
    argmax), then the correlation at that fixed shift is expressed
    differentiably, which is the standard max-with-index gradient.
    ``blurred_truth_wrap`` must already be blurred with cyclic boundary.
    """
    bt = np.asarray(blurred_truth_wrap, dtype=np.float64)
    if recon.shape != bt.shape:
        raise ReconError(f"shape mismatch: {recon.shape} vs {bt.shape}")
    b = bt.shape[0]
    rolled = np.empty_like(bt)
    for j in range(b):
        dy, dx = best_cyclic_shift(recon.data[j], bt[j])
        rolled[j] = np.roll(bt[j], (-dy, -dx), axis=(0, 1))
    bnorm = np.linalg.norm(bt.reshape(b, -1), axis=1)
    if np.any(bnorm == 0.0):
        raise ReconError("shift_invariant_loss needs nonzero targets")
    num = ad.tsum(recon * ad.as_tensor(rolled), axis=(1, 2))
    rnorm = ad.sqrt(ad.tsum(recon * recon, axis=(1, 2)))
    ratio = num / (rnorm * ad.as_tensor(bnorm))
    return ad.tmean(1.0 - ratio)


# -- decoder building blocks --------------------------------------------

def _dense_init(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _conv_init(rng, c_out, c_in, k):
    return rng.normal(0.0, 1.0 / np.sqrt(c_in * k * k), size=(c_out, c_in, k, k))


class _ConvLayer:
    def __init__(self, params, rng, name, c_in, c_out, k):
        self.w = params.add(f"{name}.w", _conv_init(rng, c_out, c_in, k))
        self.b = params.add(f"{name}.b", np.zeros(c_out))
        self.pad = (k - 1) // 2
        self.c_out = c_out

    def __call__(self, x, activation="relu"):
        out = ad.conv2d(x, self.w, stride=1, padding=self.pad)
        out = out + self.b.reshape((1, self.c_out, 1, 1))
        return ad.relu(out) if activation == "relu" else out


class _DenseLayer:
    def __init__(self, params, rng, name, d_in, d_out):
        self.w = params.add(f"{name}.w", _dense_init(rng, d_in, d_out))
        self.b = params.add(f"{name}.b", np.zeros(d_out))

    def __call__(self, x, activation=None):
        out = (x @ self.w) + self.b
        return ad.relu(out) if activation == "relu" else out


def _smooth_clamp(x, eps=1e-6):
    """Nonnegative smooth clamp 0.5 * (x + sqrt(x^2 + eps)).

    Unlike a hard relu its gradient never vanishes, so a decoder whose
    output pre-activations overshoot into the negative zone (where every
    image would clamp to exactly zero) can still recover.
    """
    return 0.5 * (x + ad.sqrt(x * x + eps))


class DecoderA:
    """Dense layer to an image-sized grid, then a symmetric U-Net.

    ``levels`` down-sampling stages halve the grid each time (the default
    4 takes 32 -> 2); the matching up path concatenates skip features.
    The final 1x1 convolution has a small positive bias and a relu clamp
    so outputs are nonnegative.
    """

    def __init__(self, input_len, params, rng, image_size=32, levels=4,
                 base_width=16, name="dec"):
        if image_size % (1 << levels) != 0 or image_size < (1 << levels):
            raise ReconError(
                f"image size {image_size} not divisible by 2^{levels}")
        self.input_len = int(input_len)
        self.image_size = image_size
        self.levels = levels
        self.params = params
        c = base_width
        self.dense = _DenseLayer(params, rng, f"{name}.dense",
                                 self.input_len, image_size * image_size)
        self.down = []
        widths = []
        c_in = 1
        for lv in range(levels):
            c_out = c * (1 << lv)
            self.down.append(_ConvLayer(params, rng, f"{name}.down{lv}",
                                        c_in, c_out, 3))
            widths.append(c_out)
            c_in = c_out
        self.bottom = _ConvLayer(params, rng, f"{name}.bottom", c_in, c_in, 3)
        self.up = []
        cur = c_in
        for lv in reversed(range(levels)):
            c_out = c if lv == 0 else c * (1 << (lv - 1))
            self.up.append(_ConvLayer(params, rng, f"{name}.up{lv}",
                                      cur + widths[lv], c_out, 3))
            cur = c_out
        self.final = _ConvLayer(params, rng, f"{name}.final", cur, 1, 1)
        self.final.b.data[:] = 1e-3

    def __call__(self, vec):
        """(B, input_len) measurement Tensor -> (B, S, S) image Tensor."""
        if vec.ndim != 2 or vec.shape[1] != self.input_len:
            raise ReconError(
                f"decoder expects (B, {self.input_len}) input, got {vec.shape}")
        b = vec.shape[0]
        s = self.image_size
        x = self.dense(vec).reshape((b, 1, s, s))
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
            x = ad.downsample2(x)
        x = self.bottom(x)
        for layer, skip in zip(self.up, reversed(skips)):
            x = ad.upsample2(x)
            x = ad.concat([x, skip], axis=1)
            x = layer(x)
        x = self.final(x, activation=None)
        x = _smooth_clamp(x)
        return x.reshape((b, s, s))


class DecoderB:
    """Phase-estimating dense head in front of the decoder-A trunk.

    The packed amplitude + closure-phasor vector passes through three
    dense layers producing one phase estimate per baseline slot; the
    amplitudes recombined with cos/sin of those estimates form modified
    complex visibilities, decoded by the same dense + U-Net trunk as
    decoder A.
    """

    def __init__(self, n_pair_slots, n_closure_slots, params, rng,
                 image_size=32, levels=4, base_width=16, hidden=256,
                 name="dec"):
        self.n_pair = int(n_pair_slots)
        self.input_len = self.n_pair + 2 * int(n_closure_slots)
        self.image_size = image_size
        self.params = params
        self.d1 = _DenseLayer(params, rng, f"{name}.phase1", self.input_len, hidden)
        self.d2 = _DenseLayer(params, rng, f"{name}.phase2", hidden, hidden)
        self.d3 = _DenseLayer(params, rng, f"{name}.phase3", hidden, self.n_pair)
        self.trunk = DecoderA(2 * self.n_pair, params, rng, image_size,
                              levels, base_width, name=f"{name}.trunk")

    def estimate_phases(self, vec):
        """Per-baseline phase estimates from the packed input."""
        h = self.d1(vec, activation="relu")
        h = self.d2(h, activation="relu")
        return self.d3(h)

    def __call__(self, vec):
        if vec.ndim != 2 or vec.shape[1] != self.input_len:
            raise ReconError(
                f"decoder expects (B, {self.input_len}) input, got {vec.shape}")
        b = vec.shape[0]
        amps = vec[:, 0:self.n_pair]
        phases = self.estimate_phases(vec)
        re = (amps * ad.cos(phases)).reshape((b, self.n_pair, 1))
        im = (amps * ad.sin(phases)).reshape((b, self.n_pair, 1))
        modified = ad.concat([re, im], axis=2).reshape((b, 2 * self.n_pair))
        return self.trunk(modified)


def build_decoder(mode, geometry, params, rng, image_size=32, levels=4,
                  base_width=16, hidden=256, name="dec"):
    """Decoder sized for a geometry's packing ('a' complex, 'b' amp+closure)."""
    n_pair = geometry.T * geometry.P
    if mode == "a":
        return DecoderA(2 * n_pair, params, rng, image_size, levels,
                        base_width, name)
    if mode == "b":
        return DecoderB(n_pair, geometry.T * geometry.n_triangles, params,
                        rng, image_size, levels, base_width, hidden, name)
    raise ReconError(f"unknown decoder mode: {mode}")
