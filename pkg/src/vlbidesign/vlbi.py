"""VLBI forward model: site geometry to masked measurement vectors.

Pipeline: site table -> (u, v) coverage for a target and schedule ->
discrete Fourier transform of a 32x32 sky image -> corruption with
per-site atmospheric phases and per-baseline thermal noise -> optional
conversion to amplitudes + closure phases -> soft masking by a
site-selection vector -> packing into a fixed-length real vector.

Angular conventions: images span a 100 micro-arcsecond field of view with
a pixel exactly on the origin; (u, v) are in wavelengths; visibilities of
a 1 Jy image satisfy V(0, 0) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

C_LIGHT = 299792458.0
DEFAULT_FREQUENCY = 230e9
MUAS_TO_RAD = np.pi / (180.0 * 3600.0 * 1e6)
IMAGE_SIZE = 32
FOV_MUAS = 100.0
PIXEL_MUAS = FOV_MUAS / IMAGE_SIZE

# WGS84 ellipsoid
_WGS84_A = 6378137.0
_WGS84_F = 1.0 / 298.257223563


class VlbiError(Exception):
    pass


# -- sites ---------------------------------------------------------------

class SiteTable:
    """Telescope names, Earth-fixed positions (meters), and SEFDs (Jy)."""

    def __init__(self, names, positions, sefds):
        self.names = [str(n) for n in names]
        self.positions = np.asarray(positions, dtype=np.float64)
        self.sefds = np.asarray(sefds, dtype=np.float64)
        if len(set(self.names)) != len(self.names):
            raise VlbiError("duplicate site names")
        if self.positions.shape != (len(self.names), 3):
            raise VlbiError("positions must be K x 3")
        if self.sefds.shape != (len(self.names),) or np.any(self.sefds <= 0):
            raise VlbiError("need one positive SEFD per site")

    def __len__(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise VlbiError(f"unknown site: {name}") from None

    @property
    def latitudes_rad(self):
        """Geocentric latitude of each site (used for elevation cuts)."""
        x, y, z = self.positions.T
        return np.arctan2(z, np.hypot(x, y))

    @property
    def longitudes_rad(self):
        x, y, _ = self.positions.T
        return np.arctan2(y, x)


def geodetic_to_ecef(lat_deg, lon_deg, height_m):
    """WGS84 geodetic coordinates to Earth-centered Cartesian meters."""
    lat = np.deg2rad(lat_deg)
    lon = np.deg2rad(lon_deg)
    e2 = _WGS84_F * (2.0 - _WGS84_F)
    n = _WGS84_A / np.sqrt(1.0 - e2 * np.sin(lat) ** 2)
    x = (n + height_m) * np.cos(lat) * np.cos(lon)
    y = (n + height_m) * np.cos(lat) * np.sin(lon)
    z = (n * (1.0 - e2) + height_m) * np.sin(lat)
    return np.array([x, y, z])


def load_sites(path):
    """Read a site file: ``NAME X_m Y_m Z_m SEFD`` per line.

    A leading ``#format: geodetic`` line switches the columns to
    ``NAME lat_deg lon_deg elev_m SEFD``.  ``#`` comments and blank lines
    are ignored.  Malformed lines are rejected with their line number.
    """
    geodetic = False
    names, positions, sefds = [], [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.lower().replace(" ", "") == "#format:geodetic":
                geodetic = True
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise VlbiError(
                    f"{path}:{lineno}: expected 5 fields (name + 4 numbers), got {len(parts)}"
                )
            name = parts[0]
            if name in names:
                raise VlbiError(f"{path}:{lineno}: duplicate site name {name!r}")
            try:
                a, b, c, sefd = (float(v) for v in parts[1:])
            except ValueError:
                raise VlbiError(f"{path}:{lineno}: malformed numeric field") from None
            if sefd <= 0:
                raise VlbiError(f"{path}:{lineno}: SEFD must be positive, got {sefd}")
            if geodetic:
                if not -90.0 <= a <= 90.0:
                    raise VlbiError(f"{path}:{lineno}: latitude {a} outside [-90, 90]")
                positions.append(geodetic_to_ecef(a, b, c))
            else:
                positions.append([a, b, c])
            names.append(name)
            sefds.append(sefd)
    if not names:
        raise VlbiError(f"{path}: no sites found")
    return SiteTable(names, positions, sefds)


# -- target & schedule ---------------------------------------------------

@dataclass(frozen=True)
class Target:
    """Sky position (right ascension hours, declination degrees)."""

    ra_hours: float
    dec_deg: float
    frequency_hz: float = DEFAULT_FREQUENCY

    def __post_init__(self):
        if not -90.0 <= self.dec_deg <= 90.0:
            raise VlbiError(f"declination {self.dec_deg} outside [-90, 90]")
        if self.frequency_hz <= 0:
            raise VlbiError("frequency must be positive")

    @property
    def wavelength_m(self):
        return C_LIGHT / self.frequency_hz


def target_preset(name):
    """Known science targets by name ('sgra' or 'm87')."""
    key = name.lower().replace("*", "").replace(" ", "")
    if key in ("sgra", "sgr"):
        return Target(ra_hours=17.7611, dec_deg=-29.24)
    if key == "m87":
        return Target(ra_hours=12.5137, dec_deg=12.39)
    raise VlbiError(f"unknown target preset: {name}")


@dataclass(frozen=True)
class Schedule:
    """Observation epochs as Greenwich sidereal times plus an elevation cut."""

    gst_hours: tuple
    min_elevation_deg: float = 10.0

    def __post_init__(self):
        gst = np.asarray(self.gst_hours, dtype=np.float64)
        if gst.size == 0:
            raise VlbiError("empty schedule")
        if np.any(np.diff(gst) <= 0):
            raise VlbiError("timestamps must be strictly increasing")
        object.__setattr__(self, "gst_hours", tuple(gst))

    def __len__(self):
        return len(self.gst_hours)


def default_schedule(n_times=24, min_elevation_deg=10.0):
    """n_times epochs uniformly covering one sidereal day."""
    gst = np.linspace(0.0, 24.0, n_times, endpoint=False)
    return Schedule(tuple(gst), min_elevation_deg)


# -- observation geometry ------------------------------------------------

class ObservationGeometry:
    """Per-epoch (u, v) points, visibility flags, and closure-triangle slots.

    Pair slots are ordered (p, q) with p < q, epochs major.  Triangle slots
    per epoch are anchored at the lowest-index site above the elevation cut
    ("anchor"); the slots enumerate pairs (q, b), q < b, over the remaining
    sites, so each epoch always exposes (K-1 choose 2) slots and a slot is
    valid only when all three members are above the cut.
    """

    def __init__(self, sites, target, schedule):
        self.sites = sites
        self.target = target
        self.schedule = schedule
        K = len(sites)
        T = len(schedule)
        self.K, self.T = K, T
        self.pairs = np.array(list(combinations(range(K), 2)), dtype=np.int64)
        self.P = len(self.pairs)

        gst_rad = np.deg2rad(np.asarray(schedule.gst_hours) * 15.0)  # (T,)
        ra_rad = np.deg2rad(target.ra_hours * 15.0)
        dec_rad = np.deg2rad(target.dec_deg)
        lat = sites.latitudes_rad                                    # (K,)
        lon = sites.longitudes_rad

        # elevation of the source at every site and epoch
        hour_angle = gst_rad[:, None] - ra_rad + lon[None, :]        # (T, K)
        sin_el = (np.sin(lat) * np.sin(dec_rad)
                  + np.cos(lat) * np.cos(dec_rad) * np.cos(hour_angle))
        self.site_elevation_deg = np.rad2deg(np.arcsin(np.clip(sin_el, -1.0, 1.0)))
        self.site_visible = self.site_elevation_deg > schedule.min_elevation_deg

        # baseline projection onto the (u, v) plane of the source
        bx, by, bz = (sites.positions[self.pairs[:, 0]]
                      - sites.positions[self.pairs[:, 1]]).T          # (P,)
        H = gst_rad[:, None] - ra_rad                                 # (T, 1)
        u_m = np.sin(H) * bx + np.cos(H) * by
        v_m = (-np.sin(dec_rad) * np.cos(H) * bx
               + np.sin(dec_rad) * np.sin(H) * by
               + np.cos(dec_rad) * bz)
        self.uv = np.stack([u_m, v_m], axis=-1) / target.wavelength_m  # (T, P, 2)
        self.pair_visible = (self.site_visible[:, self.pairs[:, 0]]
                             & self.site_visible[:, self.pairs[:, 1]])

        self._pair_index = {tuple(pq): i for i, pq in enumerate(map(tuple, self.pairs))}

        # closure-triangle slots, plus their pair-slot index grids so
        # closure phases can be computed with one vectorized gather
        self.n_triangles = (K - 1) * (K - 2) // 2 if K >= 3 else 0
        self.anchors = np.zeros(T, dtype=np.int64)
        self.tri_sites = np.zeros((T, self.n_triangles, 3), dtype=np.int64)
        self.tri_valid = np.zeros((T, self.n_triangles), dtype=bool)
        self.tri_pair_slots = np.zeros((T, self.n_triangles, 3), dtype=np.int64)
        for t in range(T):
            vis = np.flatnonzero(self.site_visible[t])
            anchor = int(vis[0]) if vis.size else 0
            self.anchors[t] = anchor
            others = [s for s in range(K) if s != anchor]
            for i, (q, b) in enumerate(combinations(others, 2)):
                self.tri_sites[t, i] = (anchor, q, b)
                self.tri_valid[t, i] = (self.site_visible[t, anchor]
                                        and self.site_visible[t, q]
                                        and self.site_visible[t, b])
                # valid triangles always have anchor < q < b (the anchor is
                # the lowest *visible* index); invalid slots may not, so
                # canonicalize the lookup -- their values are zeroed anyway
                self.tri_pair_slots[t, i] = (
                    self._pair_index[tuple(sorted((anchor, q)))],
                    self._pair_index[tuple(sorted((q, b)))],
                    self._pair_index[tuple(sorted((anchor, b)))])

    def pair_slot(self, p, q):
        """Slot index of the (p, q) baseline (order-insensitive)."""
        key = (p, q) if p < q else (q, p)
        if key not in self._pair_index:
            raise VlbiError(f"no such pair: {(p, q)}")
        return self._pair_index[key]


def uv_coverage(sites, target, schedule):
    return ObservationGeometry(sites, target, schedule)


# -- image & Fourier transform ------------------------------------------

def pixel_coords():
    """Angular offsets (radians) of the 32 pixel centers along one axis."""
    i = np.arange(IMAGE_SIZE)
    return (i - IMAGE_SIZE // 2) * PIXEL_MUAS * MUAS_TO_RAD


def check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise VlbiError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {image.shape}")
    if np.any(image < 0):
        raise VlbiError("image pixels must be nonnegative")
    return image


def dft_matrix(geometry):
    """Complex matrix mapping a flattened image to visibilities.

    Shape (T*P, IMAGE_SIZE**2); row order is epoch-major, pair-minor;
    columns follow row-major pixel order.  V = F @ image.ravel().
    """
    coords = pixel_coords()
    ll = np.tile(coords, IMAGE_SIZE)            # column coordinate per pixel
    mm = np.repeat(coords, IMAGE_SIZE)          # row coordinate per pixel
    uv = geometry.uv.reshape(-1, 2)
    phase = uv[:, 0:1] * ll[None, :] + uv[:, 1:2] * mm[None, :]
    return np.exp(-2j * np.pi * phase)


def dft_visibility(image, geometry, F=None):
    """Ideal visibilities of an image at every (epoch, pair) slot."""
    image = check_image(image)
    if F is None:
        F = dft_matrix(geometry)
    vis = F @ image.ravel()
    return vis.reshape(geometry.T, geometry.P)


# -- noise ---------------------------------------------------------------

_THERMAL_MODES = ("none", "equal", "site")


@dataclass(frozen=True)
class NoiseConfig:
    """Thermal mode, atmospheric-phase toggle, and thermal scale eta."""

    thermal: str = "none"
    atmospheric: bool = False
    eta: float = 0.0

    def __post_init__(self):
        if self.thermal not in _THERMAL_MODES:
            raise VlbiError(f"thermal mode must be one of {_THERMAL_MODES}")
        if self.eta < 0:
            raise VlbiError("eta must be nonnegative")


DEFAULT_ETA = 2e-6


def noise_case(case_id, eta=None):
    """The six experiment noise cases; returns (NoiseConfig, decoder mode).

    Cases 1-3 (no atmospheric error) use decoder mode 'a' on complex
    visibilities; cases 4-6 (atmospheric error) use decoder mode 'b' on
    amplitudes + closure phases.  ``eta`` defaults to DEFAULT_ETA whenever
    the case includes thermal noise.
    """
    table = {
        1: ("none", False), 2: ("equal", False), 3: ("site", False),
        4: ("none", True), 5: ("equal", True), 6: ("site", True),
    }
    if case_id not in table:
        raise VlbiError(f"noise case must be 1..6, got {case_id}")
    thermal, atmos = table[case_id]
    if eta is None:
        eta = DEFAULT_ETA if thermal != "none" else 0.0
    decoder = "b" if atmos else "a"
    return NoiseConfig(thermal=thermal, atmospheric=atmos, eta=eta), decoder


def thermal_sigma(sefd_p, sefd_q, eta):
    """Per-baseline thermal std: eta * sqrt(SEFD_p * SEFD_q)."""
    if sefd_p <= 0 or sefd_q <= 0:
        raise VlbiError("SEFDs must be positive")
    return eta * np.sqrt(sefd_p * sefd_q)


def baseline_sigmas(geometry, noise):
    """Thermal std per pair slot under the configured mode."""
    if noise.thermal == "none":
        return np.zeros(geometry.P)
    sefds = geometry.sites.sefds
    if noise.thermal == "equal":
        sefds = np.full(len(sefds), sefds.mean())
    sp = sefds[geometry.pairs[:, 0]]
    sq = sefds[geometry.pairs[:, 1]]
    return noise.eta * np.sqrt(sp * sq)


# -- measurement sets ----------------------------------------------------

@dataclass
class VisibilitySet:
    """Complex visibilities per (epoch, pair) slot with noise metadata."""

    geometry: ObservationGeometry
    vis: np.ndarray                      # (T, P) complex
    valid: np.ndarray                    # (T, P) bool
    nu: np.ndarray = None                # (P,) thermal std
    phases: np.ndarray = None            # (T, K) atmospheric site phases

    def __post_init__(self):
        if self.nu is None:
            self.nu = np.zeros(self.geometry.P)
        if self.phases is None:
            self.phases = np.zeros((self.geometry.T, self.geometry.K))


def ideal_measurements(image, geometry, F=None):
    vis = dft_visibility(image, geometry, F)
    return VisibilitySet(geometry, vis, geometry.pair_visible.copy())


def corrupt(mset, noise, rng):
    """Apply atmospheric phase and thermal noise: V' = e^{-i(phi_p-phi_q)} V + n.

    Gains are fixed at 1.  Atmospheric phases are i.i.d. uniform [0, 2pi)
    per site and epoch; thermal noise is complex circular Gaussian with
    per-component std nu/sqrt(2) so E|n|^2 = nu^2.
    """
    g = mset.geometry
    if noise.atmospheric:
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(g.T, g.K))
        dphi = phases[:, g.pairs[:, 0]] - phases[:, g.pairs[:, 1]]
        vis = np.exp(-1j * dphi) * mset.vis
    else:
        phases = np.zeros((g.T, g.K))
        vis = mset.vis.copy()
    nu = baseline_sigmas(g, noise)
    if np.any(nu > 0):
        scale = nu[None, :] / np.sqrt(2.0)
        n = (rng.standard_normal((g.T, g.P)) + 1j * rng.standard_normal((g.T, g.P)))
        vis = vis + scale * n
    return VisibilitySet(g, vis, mset.valid.copy(), nu, phases)


def wrap_phase(x):
    """Wrap angles to (-pi, pi]."""
    return np.angle(np.exp(1j * np.asarray(x, dtype=np.float64)))


@dataclass
class AmpClosureSet:
    """Visibility amplitudes plus closure phases on the triangle slots."""

    geometry: ObservationGeometry
    amps: np.ndarray                     # (T, P)
    amp_valid: np.ndarray                # (T, P) bool
    closures: np.ndarray                 # (T, n_triangles) angles in (-pi, pi]
    tri_valid: np.ndarray                # (T, n_triangles) bool


def closure_triple(vis, geometry):
    """Triple product V_rq * V_qb * conj(V_rb) on every triangle slot.

    ``vis`` is (..., T, P) complex; the result is (..., T, n_triangles).
    """
    slots = geometry.tri_pair_slots
    t_idx = np.arange(geometry.T)[:, None]
    v_rq = vis[..., t_idx, slots[:, :, 0]]
    v_qb = vis[..., t_idx, slots[:, :, 1]]
    v_rb = vis[..., t_idx, slots[:, :, 2]]
    return v_rq * v_qb * np.conj(v_rb)


def closure_phases(mset):
    """Closure phase per triangle slot: angle(V_rq * V_qb * conj(V_rb)).

    Slots whose members are not all visible are invalid (angle set to 0).
    """
    g = mset.geometry
    ang = np.angle(closure_triple(mset.vis, g))
    valid = g.tri_valid.copy()
    return np.where(valid, ang, 0.0), valid


def to_amp_closure(mset):
    closures, tri_valid = closure_phases(mset)
    return AmpClosureSet(mset.geometry, np.abs(mset.vis),
                         mset.valid.copy(), closures, tri_valid)


# -- masking -------------------------------------------------------------

@dataclass
class MaskedVisibilities:
    geometry: ObservationGeometry
    vis: np.ndarray                      # (T, P) complex, scaled by M_p M_q
    valid: np.ndarray


@dataclass
class MaskedAmpClosure:
    geometry: ObservationGeometry
    amps: np.ndarray                     # (T, P), scaled by M_p M_q
    amp_valid: np.ndarray
    closures: np.ndarray                 # (T, n_tri) original angles
    closure_weights: np.ndarray          # (T, n_tri) = M_r M_q M_b
    tri_valid: np.ndarray

    @property
    def scaled_closures(self):
        """Closure phases scaled by their triple mask weight."""
        return self.closure_weights * self.closures


def _mask_vector(mask, K):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (K,):
        raise VlbiError(f"mask length {mask.shape} != site count {K}")
    return mask


def apply_mask(mask, mset):
    """Scale measurements by the product of their sites' mask entries.

    Visibilities and amplitudes pick up M_p * M_q; closure phases pick up
    M_p * M_q * M_b (kept as a separate weight so the angle and its
    weighting stay individually accessible).  Differentiable in M.
    """
    g = mset.geometry
    m = _mask_vector(mask, g.K)
    w_pair = m[g.pairs[:, 0]] * m[g.pairs[:, 1]]
    if isinstance(mset, VisibilitySet):
        return MaskedVisibilities(g, mset.vis * w_pair[None, :], mset.valid.copy())
    if isinstance(mset, AmpClosureSet):
        w_tri = (m[g.tri_sites[:, :, 0]] * m[g.tri_sites[:, :, 1]]
                 * m[g.tri_sites[:, :, 2]])
        return MaskedAmpClosure(g, mset.amps * w_pair[None, :],
                                mset.amp_valid.copy(), mset.closures.copy(),
                                w_tri, mset.tri_valid.copy())
    raise VlbiError(f"cannot mask a {type(mset).__name__}")


# -- packing -------------------------------------------------------------

def vector_length(geometry, mode):
    if mode == "complex":
        return 2 * geometry.T * geometry.P
    if mode == "ampclosure":
        return geometry.T * geometry.P + 2 * geometry.T * geometry.n_triangles
    raise VlbiError(f"unknown packing mode: {mode}")


def measurement_vector(masked):
    """Flatten a masked set into the fixed-slot real vector.

    Complex mode: (Re, Im) per pair slot, epochs major.  Amplitude +
    closure mode: all amplitude slots, then (w cos C, w sin C) per
    triangle slot where w is the triple mask weight.  Slots invisible to
    the geometry are fixed zeros, so the length never varies.
    """
    if isinstance(masked, MaskedVisibilities):
        vis = np.where(masked.valid, masked.vis, 0.0)
        out = np.empty(2 * vis.size)
        out[0::2] = vis.real.ravel()
        out[1::2] = vis.imag.ravel()
        return out
    if isinstance(masked, MaskedAmpClosure):
        amps = np.where(masked.amp_valid, masked.amps, 0.0).ravel()
        w = np.where(masked.tri_valid, masked.closure_weights, 0.0)
        phasor = np.empty(2 * w.size)
        phasor[0::2] = (w * np.cos(masked.closures)).ravel()
        phasor[1::2] = (w * np.sin(masked.closures)).ravel()
        return np.concatenate([amps, phasor])
    raise VlbiError(f"cannot pack a {type(masked).__name__}")


def unpack_measurement_vector(vec, geometry, mode):
    """Inverse of measurement_vector (up to the fixed zero slots)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (vector_length(geometry, mode),):
        raise VlbiError(f"vector length {vec.shape} wrong for mode {mode!r}")
    T, P, R = geometry.T, geometry.P, geometry.n_triangles
    if mode == "complex":
        vis = (vec[0::2] + 1j * vec[1::2]).reshape(T, P)
        return MaskedVisibilities(geometry, vis, geometry.pair_visible.copy())
    amps = vec[:T * P].reshape(T, P)
    ph = vec[T * P:]
    cosw = ph[0::2].reshape(T, R)
    sinw = ph[1::2].reshape(T, R)
    w = np.hypot(cosw, sinw)
    ang = np.where(w > 0, np.arctan2(sinw, cosw), 0.0)
    return MaskedAmpClosure(geometry, amps, geometry.pair_visible.copy(),
                            ang, w, geometry.tri_valid.copy())


def packing_site_indices(geometry, mode):
    """Per-slot site indices (ip, iq, ib) into a mask extended with a 1.

    For every entry of the packed vector, the masked value equals the
    unmasked entry times ``m[ip] * m[iq] * m[ib]`` where ``m`` is the mask
    with a constant 1.0 appended (index K).  Slots with only two sites use
    ib = K.  This is what lets training scale a precomputed unmasked
    vector by mask products inside the autodiff graph.
    """
    K, T, P, R = geometry.K, geometry.T, geometry.P, geometry.n_triangles
    p = geometry.pairs[:, 0]
    q = geometry.pairs[:, 1]
    if mode == "complex":
        ip = np.repeat(np.tile(p, T), 2)
        iq = np.repeat(np.tile(q, T), 2)
        ib = np.full(ip.size, K, dtype=np.int64)
        return ip, iq, ib
    if mode == "ampclosure":
        ip_a = np.tile(p, T)
        iq_a = np.tile(q, T)
        ib_a = np.full(ip_a.size, K, dtype=np.int64)
        ip_c = np.repeat(geometry.tri_sites[:, :, 0].ravel(), 2)
        iq_c = np.repeat(geometry.tri_sites[:, :, 1].ravel(), 2)
        ib_c = np.repeat(geometry.tri_sites[:, :, 2].ravel(), 2)
        return (np.concatenate([ip_a, ip_c]), np.concatenate([iq_a, iq_c]),
                np.concatenate([ib_a, ib_c]))
    raise VlbiError(f"unknown packing mode: {mode}")


# -- CSV export ----------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def write_uv_csv(geometry, path):
    """Visible (epoch, pair) rows: gst_hours, site_p, site_q, u, v."""
    names = geometry.sites.names
    rows = []
    for t, gst in enumerate(geometry.schedule.gst_hours):
        for i, (p, q) in enumerate(geometry.pairs):
            if geometry.pair_visible[t, i]:
                u, v = geometry.uv[t, i]
                rows.append((f"{gst:.6f}", names[p], names[q],
                             f"{u:.17g}", f"{v:.17g}"))
    _write_rows(path, ("gst_hours", "site_p", "site_q",
                       "u_wavelengths", "v_wavelengths"), rows)


def write_visibility_csv(mset, path):
    """Visible rows of a VisibilitySet: gst_hours, site_p, site_q, re, im."""
    g = mset.geometry
    names = g.sites.names
    rows = []
    for t, gst in enumerate(g.schedule.gst_hours):
        for i, (p, q) in enumerate(g.pairs):
            if mset.valid[t, i]:
                rows.append((f"{gst:.6f}", names[p], names[q],
                             f"{mset.vis[t, i].real:.17g}",
                             f"{mset.vis[t, i].imag:.17g}"))
    _write_rows(path, ("gst_hours", "site_p", "site_q", "re_jy", "im_jy"), rows)


def write_amp_csv(acset, path):
    g = acset.geometry
    names = g.sites.names
    rows = []
    for t, gst in enumerate(g.schedule.gst_hours):
        for i, (p, q) in enumerate(g.pairs):
            if acset.amp_valid[t, i]:
                rows.append((f"{gst:.6f}", names[p], names[q],
                             f"{acset.amps[t, i]:.17g}"))
    _write_rows(path, ("gst_hours", "site_p", "site_q", "amplitude_jy"), rows)


def write_closure_csv(acset, path):
    g = acset.geometry
    names = g.sites.names
    rows = []
    for t, gst in enumerate(g.schedule.gst_hours):
        for i in range(g.n_triangles):
            if acset.tri_valid[t, i]:
                r, q, b = g.tri_sites[t, i]
                rows.append((f"{gst:.6f}", names[r], names[q], names[b],
                             f"{acset.closures[t, i]:.17g}"))
    _write_rows(path, ("gst_hours", "site_p", "site_q", "site_b",
                       "closure_phase_rad"), rows)
