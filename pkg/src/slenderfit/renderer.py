"""Differentiable scene rendering.

A scene is rendered by sampling each centerline spline at M parameters,
splatting a shared learned blob at every sample (scaled by the global
width times the local width profile), mixing the per-body images with a
sum/max blend, adding a planar background, and convolving with a learned
3x3 kernel. Every pixel of the output is a differentiable function of
every trainable scene parameter; the same taped graph computes both the
plain forward render and the gradients.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np
from scipy.special import expit, logit

from . import _kernels
from .autodiff import PARAM_GROUPS, Tape
from .errors import InvalidInputError
from .geometry import KnotChain, SplineCurve, natural_cubic_basis

BLOB_GRID_SIZE = 15      # odd; blob image spans [-3, 3] blob units
BLOB_PROFILE_KNOTS = 8   # control values of the 1D profile f over z in [0, 1]
BLOB_RADIUS = _kernels.BLOB_RADIUS
SAMPLES_PER_SPLINE = 128
SCALE_FLOOR = 0.05       # px; keeps splat scales strictly positive
_W_CLIP = 1e-4           # widths squeezed off {0,1} before the logit


@dataclasses.dataclass(frozen=True)
class BlobModel:
    """Radially symmetric blob: pixel value f(exp(-r)) with r in blob units.

    The profile f is a natural cubic spline through ``profile_knots`` placed
    uniformly over z in [0, 1]. The default profile f(z) = z gives the plain
    exponential-falloff blob.
    """

    profile_knots: np.ndarray = dataclasses.field(
        default_factory=lambda: np.linspace(0.0, 1.0, BLOB_PROFILE_KNOTS))
    grid_size: int = BLOB_GRID_SIZE

    def __post_init__(self):
        knots = np.atleast_1d(np.asarray(self.profile_knots, dtype=np.float64))
        if knots.ndim != 1 or knots.size < 2 or not np.isfinite(knots).all():
            raise InvalidInputError("blob profile knots must be a finite 1-D array")
        if self.grid_size % 2 == 0 or self.grid_size < 3:
            raise InvalidInputError("blob grid size must be odd and >= 3")
        object.__setattr__(self, "profile_knots", knots)


@dataclasses.dataclass(frozen=True)
class BackgroundModel:
    """Planar intensity ramp: base plus horizontal/vertical gradients."""

    base: float = 0.0
    gx: float = 0.0
    gy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.base, self.gx, self.gy], dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class CompositeParams:
    """Sum/max mixing weight, stored as a logit so alpha stays in (0, 1)."""

    mix_logit: float = 0.0

    @property
    def alpha(self) -> float:
        return float(expit(self.mix_logit))


@dataclasses.dataclass(frozen=True)
class ConvKernel:
    """Unconstrained 3x3 convolution weights."""

    weights: np.ndarray = dataclasses.field(
        default_factory=lambda: _identity_kernel())

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3, 3) or not np.isfinite(w).all():
            raise InvalidInputError("kernel must be a finite 3x3 array")
        object.__setattr__(self, "weights", w)


def _identity_kernel() -> np.ndarray:
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    return k


@dataclasses.dataclass(frozen=True)
class ParamLayout:
    """Index map for the flattened trainable parameter vector.

    ``block_slices`` locates each named block (chain0.x, ..., width, blob,
    background, kernel, mix); ``group_masks`` marks the members of each
    optimizer group. Groups are not contiguous (each chain interleaves
    position and width blocks), hence masks rather than slices.
    """

    block_slices: dict
    group_masks: dict
    size: int


class Scene:
    """All trainable state for one refinement job plus fixed geometry.

    Positive or bounded quantities are stored unconstrained: the global
    width W through a softplus and the per-knot width scales through a
    sigmoid. ``chains`` / ``global_width`` expose the constrained view.
    """

    def __init__(self, chain_x, chain_y, chain_w_raw, width_raw: float,
                 blob: BlobModel, background: BackgroundModel,
                 composite: CompositeParams, kernel: ConvKernel,
                 resolution: int = 64, samples: int = SAMPLES_PER_SPLINE):
        if len(chain_x) == 0:
            raise InvalidInputError("scene needs at least one chain")
        if not (len(chain_x) == len(chain_y) == len(chain_w_raw)):
            raise InvalidInputError("chain parameter lists must align")
        self.chain_x = [np.asarray(a, dtype=np.float64).copy() for a in chain_x]
        self.chain_y = [np.asarray(a, dtype=np.float64).copy() for a in chain_y]
        self.chain_w_raw = [np.asarray(a, dtype=np.float64).copy()
                            for a in chain_w_raw]
        for x, y, w in zip(self.chain_x, self.chain_y, self.chain_w_raw):
            if x.ndim != 1 or x.shape != y.shape or x.shape != w.shape or x.size < 2:
                raise InvalidInputError("chain arrays must be equal-length 1-D, >= 2 knots")
        self.width_raw = float(width_raw)
        self.blob = blob
        self.background = background
        self.composite = composite
        self.kernel = kernel
        self.resolution = int(resolution)
        self.samples = int(samples)
        if self.resolution < blob.grid_size:
            raise InvalidInputError("resolution must be >= blob grid size")
        if self.samples < 1:
            raise InvalidInputError("need at least one sample per spline")

    # ------------------------------------------------------------------
    # construction and views
    # ------------------------------------------------------------------

    @classmethod
    def from_chains(cls, chains, resolution: int = 64, *,
                    global_width: float = 2.0,
                    blob: BlobModel | None = None,
                    background: BackgroundModel | None = None,
                    composite: CompositeParams | None = None,
                    kernel: ConvKernel | None = None,
                    samples: int = SAMPLES_PER_SPLINE) -> "Scene":
        """Build a scene around initial knot chains.

        Knot widths are squeezed into (0, 1) before the logit so chains with
        saturated widths stay trainable.
        """
        chains = list(chains)
        if not chains:
            raise InvalidInputError("scene needs at least one chain")
        if global_width <= 0:
            raise InvalidInputError("global width must be positive")
        w_raw = [logit(np.clip(c.w, _W_CLIP, 1.0 - _W_CLIP)) for c in chains]
        return cls([c.x for c in chains], [c.y for c in chains], w_raw,
                   _softplus_inverse(global_width),
                   blob if blob is not None else BlobModel(),
                   background if background is not None else BackgroundModel(),
                   composite if composite is not None else CompositeParams(),
                   kernel if kernel is not None else ConvKernel(),
                   resolution, samples)

    @property
    def n_chains(self) -> int:
        return len(self.chain_x)

    @property
    def global_width(self) -> float:
        return float(np.logaddexp(0.0, self.width_raw))

    def chains(self) -> list[KnotChain]:
        """Constrained view of the spline parameters."""
        return [KnotChain(x, y, expit(w)) for x, y, w
                in zip(self.chain_x, self.chain_y, self.chain_w_raw)]

    def copy(self) -> "Scene":
        return Scene(self.chain_x, self.chain_y, self.chain_w_raw,
                     self.width_raw, self.blob, self.background,
                     self.composite, self.kernel, self.resolution, self.samples)

    def params_dict(self) -> dict:
        """JSON view of the non-spline parameters; together with the
        chains this is enough to re-render the scene elsewhere."""
        return {
            "width_raw": self.width_raw,
            "blob_profile": self.blob.profile_knots.tolist(),
            "blob_grid_size": self.blob.grid_size,
            "background": self.background.as_array().tolist(),
            "kernel": self.kernel.weights.tolist(),
            "mix_logit": self.composite.mix_logit,
            "resolution": self.resolution,
            "samples": self.samples,
        }

    # ------------------------------------------------------------------
    # flat parameter vector
    # ------------------------------------------------------------------

    def param_layout(self) -> ParamLayout:
        return _layout(tuple(x.size for x in self.chain_x),
                       self.blob.profile_knots.size)

    def to_vector(self) -> np.ndarray:
        """Flatten every trainable scalar, in layout order."""
        parts = []
        for x, y, w in zip(self.chain_x, self.chain_y, self.chain_w_raw):
            parts.extend((x, y, w))
        parts.append(np.array([self.width_raw]))
        parts.append(self.blob.profile_knots)
        parts.append(self.background.as_array())
        parts.append(self.kernel.weights.ravel())
        parts.append(np.array([self.composite.mix_logit]))
        return np.concatenate(parts)

    def with_vector(self, vec: np.ndarray) -> "Scene":
        """New scene with parameters replaced from a flat vector."""
        layout = self.param_layout()
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (layout.size,):
            raise InvalidInputError(
                f"parameter vector must have length {layout.size}")
        sl = layout.block_slices
        xs, ys, ws = [], [], []
        for i in range(self.n_chains):
            xs.append(vec[sl[f"chain{i}.x"]])
            ys.append(vec[sl[f"chain{i}.y"]])
            ws.append(vec[sl[f"chain{i}.w"]])
        return Scene(
            xs, ys, ws, float(vec[sl["width"]][0]),
            BlobModel(vec[sl["blob"]], self.blob.grid_size),
            BackgroundModel(*vec[sl["background"]]),
            CompositeParams(float(vec[sl["mix"]][0])),
            ConvKernel(vec[sl["kernel"]].reshape(3, 3)),
            self.resolution, self.samples)


@lru_cache(maxsize=64)
def _layout(chain_sizes: tuple, n_blob: int) -> ParamLayout:
    block_slices = {}
    group_of = {}
    pos = 0

    def block(name: str, n: int, group: str):
        nonlocal pos
        block_slices[name] = slice(pos, pos + n)
        group_of[name] = group
        pos += n

    for i, k in enumerate(chain_sizes):
        block(f"chain{i}.x", k, "splines")
        block(f"chain{i}.y", k, "splines")
        block(f"chain{i}.w", k, "width")
    block("width", 1, "width")
    block("blob", n_blob, "blob")
    block("background", 3, "background")
    block("kernel", 9, "kernel")
    block("mix", 1, "composite")

    masks = {g: np.zeros(pos, dtype=bool) for g in PARAM_GROUPS}
    for name, sl in block_slices.items():
        masks[group_of[name]][sl] = True
    for m in masks.values():
        m.setflags(write=False)
    return ParamLayout(block_slices, masks, pos)


def _softplus_inverse(v: float) -> float:
    # log(expm1(v)), stable for large v
    if v <= 0:
        raise InvalidInputError("softplus inverse needs a positive value")
    if v > 30.0:
        return float(v)
    return float(np.log(np.expm1(v)))


# ----------------------------------------------------------------------
# cached constant design matrices
# ----------------------------------------------------------------------


@lru_cache(maxsize=256)
def _sample_basis(n_knots: int, m: int) -> np.ndarray:
    """(m, K) natural-cubic design matrix on the uniform parameter grid."""
    a = natural_cubic_basis(n_knots, np.linspace(0.0, 1.0, m))
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def _blob_grid(grid_size: int) -> np.ndarray:
    """z = exp(-r) on the blob grid, flattened; r spans radius 3."""
    c = (grid_size - 1) / 2.0
    delta = 2.0 * BLOB_RADIUS / (grid_size - 1)
    off = (np.arange(grid_size) - c) * delta
    r = np.hypot(off[:, None], off[None, :])
    z = np.exp(-r).ravel()
    z.setflags(write=False)
    return z


@lru_cache(maxsize=16)
def _blob_basis(n_knots: int, grid_size: int) -> np.ndarray:
    """(G*G, P) design matrix evaluating the profile spline at the z grid."""
    a = natural_cubic_basis(n_knots, _blob_grid(grid_size))
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def _background_basis(resolution: int) -> np.ndarray:
    """(RES*RES, 3) design matrix for [base, gx, gy].

    Ramps are centered on (RES-1)/2, the pixel-grid centroid, so the pixel
    mean of the rendered background equals base exactly.
    """
    c = (resolution - 1) / 2.0
    idx = (np.arange(resolution) - c) / resolution
    cols = np.broadcast_to(idx[None, :], (resolution, resolution)).ravel()
    rows = np.broadcast_to(idx[:, None], (resolution, resolution)).ravel()
    a = np.stack([np.ones(resolution * resolution), cols, rows], axis=1)
    a.setflags(write=False)
    return a


# ----------------------------------------------------------------------
# plain array operations
# ----------------------------------------------------------------------


def blob_image(blob: BlobModel) -> np.ndarray:
    """Render the blob profile onto its G x G grid."""
    g = blob.grid_size
    basis = _blob_basis(blob.profile_knots.size, g)
    return (basis @ blob.profile_knots).reshape(g, g)


def splat(blob_img: np.ndarray, center, scale: float,
          canvas: np.ndarray) -> np.ndarray:
    """Add one scaled blob at ``center`` to a copy of ``canvas``."""
    blob_img = np.ascontiguousarray(blob_img, dtype=np.float64)
    if blob_img.ndim != 2 or blob_img.shape[0] != blob_img.shape[1]:
        raise InvalidInputError("blob image must be square")
    if scale <= 0:
        raise InvalidInputError("splat scale must be positive")
    out = np.array(canvas, dtype=np.float64)
    _kernels.splat_fwd(blob_img,
                       np.array([float(center[0])]),
                       np.array([float(center[1])]),
                       np.array([float(scale)]), out)
    return out


def render_spline(curve: SplineCurve, blob: BlobModel, width: float,
                  m: int = SAMPLES_PER_SPLINE, resolution: int = 64) -> np.ndarray:
    """Splat ``m`` samples of a 3-channel (x, y, w) curve into one image."""
    if curve.values.shape[1] != 3:
        raise InvalidInputError("render_spline expects an (x, y, w) curve")
    pts = curve.eval(np.linspace(0.0, 1.0, m))
    scales = np.maximum(width * pts[:, 2], SCALE_FLOOR)
    canvas = np.zeros((resolution, resolution))
    _kernels.splat_fwd(blob_image(blob), np.ascontiguousarray(pts[:, 0]),
                       np.ascontiguousarray(pts[:, 1]),
                       np.ascontiguousarray(scales), canvas)
    return canvas


def composite(spline_images, alpha: float) -> np.ndarray:
    """alpha * pixelwise sum + (1 - alpha) * pixelwise max."""
    images = [np.asarray(img, dtype=np.float64) for img in spline_images]
    if not images:
        raise InvalidInputError("composite needs at least one image")
    stack = np.stack(images)
    return alpha * stack.sum(axis=0) + (1.0 - alpha) * stack.max(axis=0)


def render_background(bg: BackgroundModel, resolution: int) -> np.ndarray:
    """Planar ramp; pixel mean equals ``bg.base``."""
    return (_background_basis(resolution) @ bg.as_array()).reshape(
        resolution, resolution)


def conv3x3(img: np.ndarray, kernel: ConvKernel | np.ndarray) -> np.ndarray:
    """3x3 correlation with replicate padding; identity kernel is exact."""
    weights = kernel.weights if isinstance(kernel, ConvKernel) else np.asarray(kernel)
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise InvalidInputError("image must be at least 3x3")
    if weights.shape != (3, 3):
        raise InvalidInputError("kernel must be 3x3")
    return _kernels.conv3x3_fwd(img, np.ascontiguousarray(weights, dtype=np.float64))


def render_scene(scene: Scene) -> np.ndarray:
    """Full forward render; identical code path to the gradient pass."""
    tape = Tape()
    yhat, _ = build_render(tape, scene)
    return yhat.value


# ----------------------------------------------------------------------
# taped graph
# ----------------------------------------------------------------------


def scene_leaves(tape: Tape, scene: Scene) -> dict:
    """Register every trainable block as a tape leaf, in layout order."""
    leaves = {}
    for i, (x, y, w) in enumerate(zip(scene.chain_x, scene.chain_y,
                                      scene.chain_w_raw)):
        leaves[f"chain{i}.x"] = tape.param(x, f"chain{i}.x")
        leaves[f"chain{i}.y"] = tape.param(y, f"chain{i}.y")
        leaves[f"chain{i}.w"] = tape.param(w, f"chain{i}.w")
    leaves["width"] = tape.param(scene.width_raw, "width")
    leaves["blob"] = tape.param(scene.blob.profile_knots, "blob")
    leaves["background"] = tape.param(scene.background.as_array(), "background")
    leaves["kernel"] = tape.param(scene.kernel.weights, "kernel")
    leaves["mix"] = tape.param(scene.composite.mix_logit, "mix")
    return leaves


def build_render(tape: Tape, scene: Scene, leaves: dict | None = None):
    """Record the full render onto ``tape``; returns (yhat, leaves)."""
    if leaves is None:
        leaves = scene_leaves(tape, scene)
    res = scene.resolution
    g = scene.blob.grid_size

    width = tape.softplus(leaves["width"])
    blob_flat = tape.matvec(_blob_basis(scene.blob.profile_knots.size, g),
                            leaves["blob"])
    blob_img = tape.reshape(blob_flat, (g, g))

    spline_images = []
    for i in range(scene.n_chains):
        basis = _sample_basis(scene.chain_x[i].size, scene.samples)
        xs = tape.matvec(basis, leaves[f"chain{i}.x"])
        ys = tape.matvec(basis, leaves[f"chain{i}.y"])
        w_knots = tape.sigmoid(leaves[f"chain{i}.w"])
        w_s = tape.matvec(basis, w_knots)
        scales = tape.clamp_min(tape.mul(width, w_s), SCALE_FLOOR)
        spline_images.append(tape.splat(blob_img, xs, ys, scales, (res, res)))

    alpha = tape.sigmoid(leaves["mix"])
    summed = tape.add_n(spline_images)
    peak = tape.max_stack(spline_images)
    one_minus = tape.add_const(tape.mul_const(alpha, -1.0), 1.0)
    bodies = tape.add(tape.mul(alpha, summed), tape.mul(one_minus, peak))

    bg_flat = tape.matvec(_background_basis(res), leaves["background"])
    pre_conv = tape.add(bodies, tape.reshape(bg_flat, (res, res)))
    yhat = tape.conv3x3(pre_conv, leaves["kernel"])
    return yhat, leaves


def scene_from_params(chains, params: dict) -> Scene:
    """Rebuild a renderable scene from knot chains plus a params_dict
    payload. Chain widths pass through a logit, so the round trip is exact
    only up to float noise; renders agree far inside 8-bit quantization."""
    w_raw = [logit(np.clip(c.w, _W_CLIP, 1.0 - _W_CLIP)) for c in chains]
    return Scene(
        [c.x for c in chains], [c.y for c in chains], w_raw,
        float(params["width_raw"]),
        BlobModel(np.asarray(params["blob_profile"], dtype=np.float64),
                  int(params["blob_grid_size"])),
        BackgroundModel(*params["background"]),
        CompositeParams(float(params["mix_logit"])),
        ConvKernel(np.asarray(params["kernel"], dtype=np.float64)),
        int(params["resolution"]), int(params["samples"]))


# ----------------------------------------------------------------------
# selection signature (for finite-difference tie exclusion in tests)
# ----------------------------------------------------------------------


def selection_signature(scene: Scene) -> bytes:
    """Fingerprint of every discrete branch the render and regularizer take.

    Finite-difference gradient checks are only valid where the loss is
    smooth; a parameter whose +h/-h probes land in different branches
    (bilinear cells, max/min winners, clamp state) is excluded by comparing
    these signatures.
    """
    parts = []
    g = scene.blob.grid_size
    c = (g - 1) / 2.0
    delta = 2.0 * BLOB_RADIUS / (g - 1)
    res = scene.resolution
    width = scene.global_width
    images = []
    for i in range(scene.n_chains):
        basis = _sample_basis(scene.chain_x[i].size, scene.samples)
        xs = basis @ scene.chain_x[i]
        ys = basis @ scene.chain_y[i]
        w_knots = expit(scene.chain_w_raw[i])
        scales = np.maximum(width * (basis @ w_knots), SCALE_FLOOR)
        parts.append((width * (basis @ w_knots) > SCALE_FLOOR).tobytes())
        parts.append(np.int64(np.argmin(w_knots)).tobytes())
        canvas = np.zeros((res, res))
        _kernels.splat_fwd(blob_image(scene.blob), xs, ys, scales, canvas)
        images.append(canvas)
        # per-sample bilinear cell floors over the support window
        for x0, y0, s in zip(xs, ys, scales):
            r = s * (BLOB_RADIUS + delta)
            j0, j1 = int(np.ceil(x0 - r)), int(np.floor(x0 + r))
            i0, i1 = int(np.ceil(y0 - r)), int(np.floor(y0 + r))
            cols = np.arange(max(j0, 0), min(j1, res - 1) + 1)
            rows = np.arange(max(i0, 0), min(i1, res - 1) + 1)
            gx = (cols - x0) / (s * delta) + c
            gy = (rows - y0) / (s * delta) + c
            fx = np.floor(gx).astype(np.int64)
            fy = np.floor(gy).astype(np.int64)
            fx[(gx <= -1.0) | (gx >= g)] = -999
            fy[(gy <= -1.0) | (gy >= g)] = -999
            parts.append(fx.tobytes())
            parts.append(fy.tobytes())
    parts.append(np.argmax(np.stack(images), axis=0).astype(np.int64).tobytes())
    return b"".join(parts)
