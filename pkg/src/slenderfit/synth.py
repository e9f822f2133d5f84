"""Synthetic benchmark generator: frames of overlapping slender bodies
with exact centerline and width ground truth.

Centerlines come from a mean-reverting random tangent-angle walk projected
onto a knot spline, so every label is exactly the centerline the renderer
draws. Bodies are rendered with a fixed Gaussian-bell blob whose half-max
radius matches the refiner's default exponential blob (for comparable
width scales) but whose shape differs from anything the refiner's blob
spline is initialized to, so fits cannot succeed by construction.

Frames are a pure function of (master seed, frame index).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np
from scipy.special import logit

from . import __version__
from .errors import GenerationError, InvalidInputError
from .geometry import KnotChain, fit_natural_cubic, resample_polyline, sample_uniform
from .imgio import load_image, save_image
from .renderer import (BackgroundModel, BlobModel, CompositeParams, Scene,
                       _sample_basis, render_scene)

LABEL_POINTS = 100


@dataclasses.dataclass(frozen=True)
class GenConfig:
    """Generator settings; defaults target 64x64 frames of worm-like bodies."""

    resolution: int = 64
    n_bodies: int = 1
    length_range: tuple = (45.0, 65.0)
    scale_range: tuple = (0.9, 1.5)       # mid-body splat scale, px
    contrast_range: tuple = (0.45, 0.8)   # ridge peak above background
    bg_base_range: tuple = (0.08, 0.22)
    bg_grad_max: float = 0.15
    noise_sigma: float = 0.02
    mix_alpha: float = 0.65
    knots: int = 8                        # control knots per body
    margin: float = 3.0
    width_wobble: float = 0.12            # width profile amplitude around 0.5
    angle_sigma: float = 0.35             # tangent-angle diffusion, rad/sqrt(px)
    angle_reversion: float = 0.06         # pull toward the initial heading
    max_turn: float = 0.25                # curvature cap, rad/px
    path_points: int = 160
    max_attempts: int = 200

    def __post_init__(self):
        if self.n_bodies < 1:
            raise InvalidInputError("need at least one body")
        for name in ("length_range", "scale_range", "contrast_range",
                     "bg_base_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 < lo <= hi):
                raise InvalidInputError(f"{name} must be a nonempty positive range")
        if self.resolution < 16:
            raise InvalidInputError("resolution must be >= 16")
        if self.knots < 4:
            raise InvalidInputError("need at least 4 control knots")


@dataclasses.dataclass
class LabeledFrame:
    """One synthetic frame with exact ground truth."""

    image: np.ndarray
    labels: list            # per body: (LABEL_POINTS, 2) centerline
    widths: list            # per body: (LABEL_POINTS,) true width W*w(s)
    meta: dict

    def label_payload(self) -> dict:
        return {
            "labels": [lbl.tolist() for lbl in self.labels],
            "widths": [w.tolist() for w in self.widths],
            "meta": self.meta,
        }


def synthetic_blob(grid_size: int = 15, profile_knots: int = 8) -> BlobModel:
    """Gaussian-bell profile with half maximum at radius ln 2.

    Expressed through the blob spline as f(z) = exp(-(ln z)^2 / ln 2): the
    same half-max radius as the default exponential blob f(z) = z, so
    generated widths and refined widths live on one scale, but a different
    radial shape.
    """
    z = np.linspace(0.0, 1.0, profile_knots)
    vals = np.zeros_like(z)
    pos = z > 0
    vals[pos] = np.exp(-np.log(z[pos]) ** 2 / np.log(2.0))
    return BlobModel(vals, grid_size)


def gen_centerline(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """One random centerline polyline inside the frame margin.

    Tangent angle follows a mean-reverting random walk with a per-step
    turn cap; the walk runs at constant speed so arc length is exact by
    construction. Curves whose bounding box cannot fit inside the margin
    are rejected and redrawn.
    """
    res = cfg.resolution
    lo = cfg.margin
    hi = res - 1.0 - cfg.margin
    if hi <= lo:
        raise InvalidInputError("margin leaves no room in the frame")
    for _ in range(cfg.max_attempts):
        length = rng.uniform(*cfg.length_range)
        n = cfg.path_points
        ds = length / (n - 1)
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        theta = theta0
        angles = np.empty(n - 1)
        for j in range(n - 1):
            drift = -cfg.angle_reversion * (theta - theta0) * ds
            step = drift + cfg.angle_sigma * np.sqrt(ds) * rng.standard_normal()
            step = np.clip(step, -cfg.max_turn * ds, cfg.max_turn * ds)
            theta = theta + step
            angles[j] = theta
        deltas = np.stack([np.cos(angles), np.sin(angles)], axis=1) * ds
        pts = np.concatenate([np.zeros((1, 2)), np.cumsum(deltas, axis=0)])
        span = pts.max(axis=0) - pts.min(axis=0)
        if span[0] > hi - lo or span[1] > hi - lo:
            continue
        ox = rng.uniform(lo - pts[:, 0].min(), hi - pts[:, 0].max())
        oy = rng.uniform(lo - pts[:, 1].min(), hi - pts[:, 1].max())
        shifted = pts + np.array([ox, oy])
        # the body rendered is the knot spline, which can overshoot the
        # polyline slightly; keep it inside the margin too
        knots = resample_polyline(shifted, cfg.knots)
        dense = resample_polyline(knots, LABEL_POINTS)
        if (dense.min() >= lo - 1.0 and dense[:, 0].max() <= hi + 1.0
                and dense[:, 1].max() <= hi + 1.0):
            return shifted
    raise GenerationError(
        f"no centerline fit the frame after {cfg.max_attempts} attempts")


def _width_profile(rng: np.random.Generator, cfg: GenConfig, k: int) -> np.ndarray:
    """Smooth per-knot width scales around 0.5."""
    s = np.linspace(0.0, 1.0, k)
    amp = rng.uniform(0.3, 1.0) * cfg.width_wobble
    freq = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return np.clip(0.5 + amp * np.sin(2.0 * np.pi * freq * s + phase),
                   0.2, 0.8)


def gen_frame(rng: np.random.Generator, cfg: GenConfig) -> LabeledFrame:
    """Render one labeled frame: bodies, ramp background, clipped noise."""
    res = cfg.resolution
    chains = []
    for _ in range(cfg.n_bodies):
        path = gen_centerline(rng, cfg)
        knots = resample_polyline(path, cfg.knots)
        w = _width_profile(rng, cfg, cfg.knots)
        chains.append(KnotChain(knots[:, 0], knots[:, 1], w))

    mid_scale = rng.uniform(*cfg.scale_range)
    global_width = mid_scale / 0.5  # width profiles center on 0.5
    base = rng.uniform(*cfg.bg_base_range)
    gx = rng.uniform(-cfg.bg_grad_max, cfg.bg_grad_max)
    gy = rng.uniform(-cfg.bg_grad_max, cfg.bg_grad_max)
    contrast = rng.uniform(*cfg.contrast_range)

    blob = synthetic_blob()
    bodies_scene = Scene.from_chains(
        chains, res, global_width=global_width, blob=blob,
        background=BackgroundModel(0.0, 0.0, 0.0),
        composite=CompositeParams(float(logit(cfg.mix_alpha))))
    peak = float(render_scene(bodies_scene).max())
    if peak <= 1e-9:
        raise GenerationError("degenerate frame: bodies rendered empty")
    blob = BlobModel(blob.profile_knots * (contrast / peak), blob.grid_size)

    scene = Scene.from_chains(
        chains, res, global_width=global_width, blob=blob,
        background=BackgroundModel(base, gx, gy),
        composite=CompositeParams(float(logit(cfg.mix_alpha))))
    clean = render_scene(scene)
    noisy = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)
    image = np.clip(noisy, 0.0, 1.0)

    labels = []
    widths = []
    basis = _sample_basis(cfg.knots, LABEL_POINTS)
    for chain in chains:
        curve = fit_natural_cubic(chain)
        labels.append(sample_uniform(curve, LABEL_POINTS)[:, :2])
        widths.append(global_width * (basis @ chain.w))

    meta = {
        "n_bodies": cfg.n_bodies,
        "resolution": res,
        "global_width": global_width,
        "contrast": contrast,
        "background": [base, gx, gy],
        "mix_alpha": cfg.mix_alpha,
        "noise_sigma": cfg.noise_sigma,
        "chains": [c.to_dict() for c in chains],
    }
    return LabeledFrame(image, labels, widths, meta)


def frame_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one frame."""
    return np.random.Generator(np.random.Philox(key=[master_seed, index]))


def gen_labeled_frame(cfg: GenConfig, master_seed: int, index: int) -> LabeledFrame:
    frame = gen_frame(frame_rng(master_seed, index), cfg)
    frame.meta["master_seed"] = master_seed
    frame.meta["index"] = index
    return frame


# ----------------------------------------------------------------------
# perturbation families
# ----------------------------------------------------------------------


def _centroid(pts: np.ndarray) -> np.ndarray:
    return pts.mean(axis=0)


def perturb(label, kind: str, magnitude, *, basis=None, direction=None):
    """Degrade a label into an initial guess.

    kinds: "rotation" (degrees about the centroid), "translation" (pixels
    along +x, or along ``direction``), "scaling" (factor about the
    centroid), "pca" (project onto the top ``magnitude`` components of
    ``basis``).
    """
    pts = np.asarray(label, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InvalidInputError("label must be an (N >= 2, 2) polyline")
    pts = pts[:, :2]
    if kind == "rotation":
        theta = np.deg2rad(float(magnitude))
        c = _centroid(pts)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        return c + (pts - c) @ rot.T
    if kind == "translation":
        d = np.array([1.0, 0.0]) if direction is None else \
            np.asarray(direction, dtype=np.float64)
        norm = np.hypot(d[0], d[1])
        if norm < 1e-12:
            raise InvalidInputError("translation direction must be nonzero")
        return pts + float(magnitude) * d / norm
    if kind == "scaling":
        c = _centroid(pts)
        return c + float(magnitude) * (pts - c)
    if kind == "pca":
        if basis is None:
            raise InvalidInputError("pca perturbation needs a basis")
        return basis.compress(pts, int(magnitude))
    raise InvalidInputError(f"unknown perturbation kind: {kind}")


@dataclasses.dataclass(frozen=True)
class TangentAngleBasis:
    """Principal components of corpus tangent-angle profiles.

    Profiles are the per-segment headings of labels resampled to a fixed
    point count, with each label's mean heading removed so the basis is
    orientation-free. Compression keeps a label's orientation, per-segment
    lengths, and centroid, and replaces only the shape.
    """

    mean: np.ndarray         # (LABEL_POINTS - 1,)
    components: np.ndarray   # (rank, LABEL_POINTS - 1), orthonormal rows

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    def compress(self, pts: np.ndarray, k: int) -> np.ndarray:
        if k > self.rank:
            raise InvalidInputError(
                f"k={k} exceeds basis rank {self.rank}")
        pts = resample_polyline(np.asarray(pts, dtype=np.float64),
                                LABEL_POINTS)
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        theta = np.unwrap(np.arctan2(seg[:, 1], seg[:, 0]))
        heading = theta.mean()
        profile = theta - heading
        dev = profile - self.mean
        coeffs = self.components[:k] @ dev
        approx = self.mean + coeffs @ self.components[:k]
        theta_hat = approx + heading
        deltas = np.stack([np.cos(theta_hat), np.sin(theta_hat)],
                          axis=1) * seg_len[:, None]
        rebuilt = np.concatenate([np.zeros((1, 2)), np.cumsum(deltas, axis=0)])
        return rebuilt + (_centroid(pts) - _centroid(rebuilt))


def pca_basis(corpus, k: int) -> TangentAngleBasis:
    """Top-k tangent-angle principal components of a label corpus."""
    corpus = list(corpus)
    if len(corpus) <= k:
        raise InvalidInputError("corpus must be larger than k")
    profiles = []
    for pts in corpus:
        pts = resample_polyline(np.asarray(pts, dtype=np.float64),
                                LABEL_POINTS)
        seg = np.diff(pts, axis=0)
        theta = np.unwrap(np.arctan2(seg[:, 1], seg[:, 0]))
        profiles.append(theta - theta.mean())
    mat = np.stack(profiles)
    mean = mat.mean(axis=0)
    _, _, vt = np.linalg.svd(mat - mean, full_matrices=False)
    return TangentAngleBasis(mean, vt[:k])


# ----------------------------------------------------------------------
# dataset on disk
# ----------------------------------------------------------------------


def frame_name(n_bodies: int, index: int) -> str:
    return f"frame_n{n_bodies}_{index:04d}"


def save_dataset(out_dir: str, cfg: GenConfig, n_frames: int,
                 master_seed: int, body_counts=None) -> dict:
    """Write frames + labels + manifest; returns the manifest dict.

    ``body_counts`` lists the n_bodies conditions (default: just the
    config's). Frame index streams are disjoint across conditions.
    """
    counts = list(body_counts) if body_counts else [cfg.n_bodies]
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for ci, n in enumerate(counts):
        sub = dataclasses.replace(cfg, n_bodies=n)
        for i in range(n_frames):
            index = ci * n_frames + i
            frame = gen_labeled_frame(sub, master_seed, index)
            name = frame_name(n, i)
            save_image(os.path.join(out_dir, name + ".png"), frame.image)
            with open(os.path.join(out_dir, name + ".json"), "w") as fh:
                json.dump(frame.label_payload(), fh)
            entries.append({"name": name, "n_bodies": n, "index": i,
                            "stream_index": index})
    manifest = {
        "version": __version__,
        "master_seed": master_seed,
        "frames_per_condition": n_frames,
        "body_counts": counts,
        "config": dataclasses.asdict(cfg),
        "frames": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(path: str):
    """Yield (entry, image, labels, widths, meta) from a dataset directory."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    for entry in manifest["frames"]:
        name = entry["name"]
        image = load_image(os.path.join(path, name + ".png"))
        with open(os.path.join(path, name + ".json")) as fh:
            payload = json.load(fh)
        labels = [np.asarray(lbl, dtype=np.float64)
                  for lbl in payload["labels"]]
        widths = [np.asarray(w, dtype=np.float64)
                  for w in payload["widths"]]
        yield entry, image, labels, widths, payload["meta"]


def dataset_digest(path: str) -> dict:
    """SHA-256 of every file in a dataset directory (determinism checks)."""
    out = {}
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            with open(full, "rb") as fh:
                out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out
