"""Three-phase refinement schedule.

Phase 1 fits the background alone. Phase 2 optimizes everything except the
blob profile and the conv kernel, under cosine-annealed Adam with decaying
gradient noise, independently for S seeds restarted from the phase-1
result; the seed with the lowest reconstruction loss wins. Phase 3
finetunes all parameters at a small learning rate and returns the best
parameters seen along that trajectory.

Seeds draw from counter-based Philox streams keyed by (master seed, seed
index), so runs are bit-reproducible and independent of scheduling order.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from .autodiff import Tape, freeze_mask, value_and_grad
from .errors import (InvalidInputError, NonFiniteGradientError,
                     RefinementError)
from .geometry import KnotChain
from .objective import (Priors, RegWeights, build_total_loss, derive_priors,
                        recon_loss)
from .renderer import (BackgroundModel, BlobModel, Scene,
                       _background_basis, _sample_basis, _softplus_inverse,
                       render_background, render_scene)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclasses.dataclass
class AdamState:
    """Per-parameter moments plus the active-parameter mask."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    mask: np.ndarray | None = None

    @classmethod
    def fresh(cls, n: int, mask: np.ndarray | None = None) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, mask)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: float):
    """One bias-corrected Adam update; masked parameters are untouched.

    Returns (new_params, state); the state is updated in place.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidInputError("parameter/gradient/moment sizes must match")
    if not np.isfinite(grads).all():
        raise NonFiniteGradientError(["unknown"])
    state.step += 1
    t = state.step
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads ** 2
    m_hat = state.m / (1.0 - ADAM_BETA1 ** t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if state.mask is not None:
        update = np.where(state.mask, update, 0.0)
    return params - update, state


def cosine_lr(lr0: float, t: int, total: int) -> float:
    """Cosine annealing from lr0 at t=0 to 0 at t=total."""
    if total < 1:
        raise InvalidInputError("schedule length must be >= 1")
    if not 0 <= t <= total:
        raise InvalidInputError("step must lie in [0, total]")
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * t / total))


def noisy_grad(grads: np.ndarray, t: int, sigma0: float, tau: float,
               rng: np.random.Generator, scale=None) -> np.ndarray:
    """Gradients plus Gaussian noise with std sigma0 * exp(-t / tau),
    optionally multiplied by a per-entry ``scale``."""
    if sigma0 < 0:
        raise InvalidInputError("noise amplitude must be >= 0")
    if sigma0 == 0.0:
        return grads
    sigma_t = sigma0 * np.exp(-t / tau)
    noise = rng.standard_normal(grads.shape) * sigma_t
    if scale is not None:
        noise = noise * scale
    return grads + noise


def _group_rms_scale(grads: np.ndarray, layout) -> np.ndarray:
    """Per-entry noise scale: the RMS gradient of the entry's group.

    Frozen groups have zero gradients, hence zero scale, so noise never
    leaks into inactive parameters.
    """
    scale = np.zeros_like(grads)
    for mask in layout.group_masks.values():
        if mask.any():
            scale[mask] = np.sqrt(np.mean(grads[mask] ** 2))
    return scale


@dataclasses.dataclass(frozen=True)
class RefineSettings:
    """Schedule, model-size, and objective settings for refine()."""

    t1: int = 100
    t2: int = 400
    t3: int = 200
    t_warm: int = 36             # width-fit evaluations before phase 1
    seeds: int = 4
    lr1: float = 1e-2
    lr2: float = 1e-2
    lr3: float = 1e-4
    sigma0: float = 1e-2
    tau: float | None = None     # noise decay; defaults to t2 / 4
    samples: int = 128           # spline sample count M
    grid_size: int = 15          # blob grid G
    profile_knots: int = 8       # blob spline control count P
    weights: RegWeights = dataclasses.field(default_factory=RegWeights)
    bar_w: float = 0.5
    bar_width: float | None = None  # None: estimate from the image
    capture_factor: float = 2.2  # max initial W inflation for capture range
    capture_lr_boost: float = 3.0   # max lr2 multiplier at full misfit
    capture_step_boost: float = 2.0  # max t2 multiplier at full misfit
    capture_ramp: float = 0.75  # misfit ratio at which boosts saturate
    master_seed: int = 0

    def __post_init__(self):
        if min(self.t1, self.t2, self.t3, self.t_warm) < 0:
            raise InvalidInputError("phase lengths must be >= 0")
        if self.seeds < 1:
            raise InvalidInputError("need at least one seed")
        if self.sigma0 < 0:
            raise InvalidInputError("noise amplitude must be >= 0")
        if self.tau is not None and self.tau <= 0:
            raise InvalidInputError("noise decay must be positive")
        if self.capture_factor <= 0:
            raise InvalidInputError("capture factor must be positive")
        if min(self.capture_lr_boost, self.capture_step_boost) < 1.0:
            raise InvalidInputError("capture boosts must be >= 1")
        if self.capture_ramp <= 0:
            raise InvalidInputError("capture ramp must be positive")

    @property
    def noise_tau(self) -> float:
        return self.tau if self.tau is not None else max(self.t2 / 4.0, 1.0)


@dataclasses.dataclass
class RefinementReport:
    """Outcome of one refinement job."""

    scene: Scene
    chains: list
    priors: Priors
    loss_curves: dict
    best_seed: int
    final_total_loss: float
    final_recon_loss: float
    background_recon_loss: float
    global_width: float
    width_samples: list
    width_s: np.ndarray
    capture_level: float = 0.0

    def to_dict(self) -> dict:
        return {
            "chains": [c.to_dict() for c in self.chains],
            "best_seed": self.best_seed,
            "capture_level": self.capture_level,
            "final_total_loss": self.final_total_loss,
            "final_recon_loss": self.final_recon_loss,
            "background_recon_loss": self.background_recon_loss,
            "global_width": self.global_width,
            "width_s": self.width_s.tolist(),
            "width_samples": [w.tolist() for w in self.width_samples],
            "loss_curves": {k: list(map(float, v))
                            for k, v in self.loss_curves.items()},
            "priors": {
                "bar_lengths": self.priors.bar_lengths.tolist(),
                "bar_w": self.priors.bar_w,
                "bar_width": self.priors.bar_width,
            },
        }


def build_initial_scene(y: np.ndarray, chains, settings: RefineSettings,
                        priors: Priors) -> Scene:
    """Scene construction and amplitude calibration before optimization.

    The background starts at the image median; the global width starts at
    the prior; if every input knot carries the JSON-default width 1.0 the
    profile is re-seeded at bar_w so the product W*w starts at the probed
    ridge scale. The blob profile (frozen until phase 3) is scaled once so
    the first render's ridge amplitude matches the image's.
    """
    y = np.asarray(y, dtype=np.float64)
    res = y.shape[0]
    chains = list(chains)
    if all(np.all(c.w == 1.0) for c in chains):
        chains = [KnotChain(c.x, c.y, np.full(c.n_knots, settings.bar_w))
                  for c in chains]
    base = float(np.median(y))
    scene = Scene.from_chains(
        chains, res,
        global_width=priors.bar_width,
        blob=BlobModel(np.linspace(0.0, 1.0, settings.profile_knots),
                       settings.grid_size),
        background=BackgroundModel(base, 0.0, 0.0),
        samples=settings.samples)

    rendered = render_scene(scene)
    body_obs = float(np.percentile(y, 99.5)) - base
    body_ren = float(np.percentile(rendered, 99.5)) - base
    if body_ren > 1e-6 and abs(body_obs) > 1e-3:
        gain = float(np.clip(body_obs / body_ren, 0.05, 20.0))
        scene = Scene(scene.chain_x, scene.chain_y, scene.chain_w_raw,
                      scene.width_raw,
                      BlobModel(scene.blob.profile_knots * gain,
                                settings.grid_size),
                      scene.background, scene.composite, scene.kernel,
                      res, settings.samples)
    return scene


def _warm_width_fit(y, scene_template, vec, layout, evals):
    """Exact joint fit of global width, blob amplitude, and background,
    with the splines frozen.

    For fixed centerlines and blob shape the render is linear in the blob
    amplitude and the background plane, so for each candidate W the best
    amplitude and background are one least-squares solve; W itself is
    found by a coarse-to-fine grid search. Deterministic, and the splines
    cannot drift because they never move.

    Returns (vec, recon_curve).
    """
    res = scene_template.resolution
    n = res * res
    bg_basis = _background_basis(res)
    w_slice = layout.block_slices["width"]
    yv = y.ravel()

    def eval_width(wv):
        v = vec.copy()
        v[w_slice] = _softplus_inverse(wv)
        scene = scene_template.with_vector(v)
        body = (render_scene(scene) -
                render_background(scene.background, res)).ravel()
        a = np.empty((n, 4))
        a[:, 0] = body
        a[:, 1:] = bg_basis
        coef, _, _, _ = np.linalg.lstsq(a, yv, rcond=None)
        if not np.isfinite(coef).all() or coef[0] < 0.05:
            bgc, _, _, _ = np.linalg.lstsq(bg_basis, yv - body, rcond=None)
            coef = np.array([1.0, *bgc])
        resid = yv - a @ coef
        return float(resid @ resid) / n, coef

    # absolute coarse range: the probe that seeded the scene can be off
    # by several x on coiled or overlapping bodies, so never anchor the
    # search to it
    w0 = scene_template.with_vector(vec).global_width
    per_round = max(evals // 3, 6)
    lo, hi = 0.3, max(res / 4.0, 1.5 * w0)
    best = (np.inf, None, w0)
    curve = []
    for _ in range(3):
        grid = np.geomspace(max(lo, 0.15), hi, per_round)
        for wv in grid:
            r, coef = eval_width(float(wv))
            curve.append(r)
            if r < best[0]:
                best = (r, coef, float(wv))
        step = grid[1] / grid[0]
        lo, hi = best[2] / step, best[2] * step
    _, coef, w_star = best
    out = vec.copy()
    out[w_slice] = _softplus_inverse(w_star)
    out[layout.block_slices["blob"]] *= coef[0]
    out[layout.block_slices["background"]] = coef[1:]
    return out, curve


def _loss_and_grads(y, scene_template, vec, priors, weights, mask):
    scene = scene_template.with_vector(vec)
    loss, grads, aux = value_and_grad(y, scene, priors, weights,
                                      mask=mask, want_aux=True)
    return loss, grads, aux


def _run_phase(y, scene_template, vec, priors, weights, mask, steps, lr0,
               *, cosine=False, sigma0=0.0, tau=1.0, rng=None, layout=None,
               track_best=False, track_recon=False, callback=None, phase=0):
    """Adam loop over one phase.

    Returns (vec, curve, best_vec, best_metric, aux_last). With
    ``track_best`` the best vector is the trajectory argmin of the total
    loss; with ``track_recon`` it is the argmin of the reconstruction
    term alone. Both include the starting point, so a phase can never
    hand back something worse than what it was given.
    """
    state = AdamState.fresh(vec.size, mask)
    curve = []
    best_vec = vec.copy()
    best_metric = np.inf
    aux = None
    for t in range(steps):
        loss, grads, aux = _loss_and_grads(y, scene_template, vec, priors,
                                           weights, mask)
        curve.append(loss)
        if not np.isfinite(loss):
            raise RefinementError(f"loss diverged in phase {phase}")
        metric = aux["recon"] if track_recon else loss
        if (track_best or track_recon) and metric < best_metric:
            best_metric = metric
            best_vec = vec.copy()
        if sigma0 > 0.0:
            grads = noisy_grad(grads, t, sigma0, tau, rng,
                               scale=_group_rms_scale(grads, layout))
        lr = cosine_lr(lr0, t, steps) if cosine else lr0
        vec, state = adam_step(state, vec, grads, lr)
        if callback is not None:
            callback(phase, t, loss, vec)
    return vec, curve, best_vec, best_metric, aux


def refine(y: np.ndarray, initial_chains, settings: RefineSettings | None = None,
           *, callback=None) -> RefinementReport:
    """Refine rough centerline chains against an image.

    Runs the background-only phase once, branches S noisy seeds for the
    main phase, keeps the seed with the lowest reconstruction loss, and
    finetunes it. Diverged seeds are discarded; if every seed diverges a
    RefinementError is raised.
    """
    settings = settings if settings is not None else RefineSettings()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise InvalidInputError("expected a square 2-D image")
    chains = list(initial_chains)
    if not chains:
        raise InvalidInputError("need at least one initial chain")

    priors = derive_priors(y, chains, bar_w=settings.bar_w,
                           bar_width=settings.bar_width)
    scene0 = build_initial_scene(y, chains, settings, priors)
    layout = scene0.param_layout()
    weights = settings.weights
    vec = scene0.to_vector()
    curves = {}

    # width warmup before the first gradient phase: the probe only
    # estimates the global width, and a biased width target makes the
    # splines drift to compensate, so pin down width, amplitude, and
    # background against the image while the splines are frozen, then make
    # the fitted width the prior target for the later phases. Running it
    # here (not between phases) keeps the blob untouched from the first
    # phase-1 step until phase 3 unfreezes it.
    if settings.t_warm > 0:
        vec, curve_w = _warm_width_fit(y, scene0, vec, layout,
                                       settings.t_warm)
        curves["warmup"] = curve_w
        priors = dataclasses.replace(
            priors, bar_width=scene0.with_vector(vec).global_width)

    # phase 1: background only
    mask1 = freeze_mask(scene0, {"background"})
    vec, curve1, _, _, _ = _run_phase(
        y, scene0, vec, priors, weights, mask1, settings.t1, settings.lr1,
        callback=callback, phase=1)
    curves["phase1"] = curve1
    scene_bg = scene0.with_vector(vec)
    background_recon = recon_loss(
        y, render_background(scene_bg.background, scene_bg.resolution))

    # effort scales with how poorly the initial chains explain the image:
    # a near-perfect initialization gets the gentle base schedule, a far-off
    # one gets an inflated capture width, a larger main-phase learning rate,
    # and more main-phase steps
    r_init = recon_loss(y, render_scene(scene0.with_vector(vec)))
    misfit = float(np.clip(
        r_init / max(background_recon, 1e-12) / settings.capture_ramp,
        0.0, 1.0))
    factor = 1.0 + (settings.capture_factor - 1.0) * misfit
    lr2 = settings.lr2 * (1.0 + (settings.capture_lr_boost - 1.0) * misfit)
    t2 = int(round(settings.t2 *
                   (1.0 + (settings.capture_step_boost - 1.0) * misfit)))
    tau = settings.tau if settings.tau is not None else max(t2 / 4.0, 1.0)
    if factor != 1.0:
        w_cap = min(priors.bar_width * factor, y.shape[0] / 2.0)
        vec = vec.copy()
        vec[layout.block_slices["width"]] = _softplus_inverse(w_cap)

    # phase 2: everything but blob and kernel, S noisy seeds; each seed is
    # represented by its trajectory argmin of the reconstruction term
    mask2 = freeze_mask(scene0, {"splines", "width", "background", "composite"})
    results = []
    for seed in range(settings.seeds):
        rng = np.random.Generator(
            np.random.Philox(key=[settings.master_seed, seed]))
        try:
            svec, scurve, bvec, brecon, _ = _run_phase(
                y, scene0, vec.copy(), priors, weights, mask2, t2,
                lr2, cosine=True, sigma0=settings.sigma0,
                tau=tau, rng=rng, layout=layout,
                track_recon=True, callback=callback, phase=2)
        except (RefinementError, NonFiniteGradientError):
            continue
        final_recon = recon_loss(y, render_scene(scene0.with_vector(svec)))
        if np.isfinite(final_recon) and final_recon < brecon:
            bvec, brecon = svec, final_recon
        if not np.isfinite(brecon):
            continue
        results.append((brecon, seed, bvec, scurve))
    if not results:
        raise RefinementError("all phase-2 seeds diverged")
    results.sort(key=lambda r: (r[0], r[1]))
    _, best_seed, vec, curve2 = results[0]
    curves["phase2"] = curve2

    # phase 3: all parameters, small lr, keep the best total loss seen
    mask3 = freeze_mask(scene0, set(layout.group_masks.keys()))
    vec3, curve3, best_vec, best_loss, _ = _run_phase(
        y, scene0, vec, priors, weights, mask3, settings.t3, settings.lr3,
        track_best=True, callback=callback, phase=3)
    curves["phase3"] = curve3
    # the loop tracks the best pre-update loss; check the final point too
    tape = Tape()
    final_loss_t, _, final_aux = build_total_loss(
        tape, y, scene0.with_vector(vec3), priors, weights)
    if float(final_loss_t.value) < best_loss:
        best_vec = vec3
        best_loss = float(final_loss_t.value)

    final_scene = scene0.with_vector(best_vec)
    tape = Tape()
    loss_t, _, aux = build_total_loss(tape, y, final_scene, priors, weights)
    final_total = float(loss_t.value)
    final_recon = aux["recon"]

    s_grid = np.linspace(0.0, 1.0, 100)
    width = final_scene.global_width
    width_samples = []
    for i in range(final_scene.n_chains):
        basis = _sample_basis(final_scene.chain_x[i].size, 100)
        w_s = basis @ expit(final_scene.chain_w_raw[i])
        width_samples.append(width * w_s)

    return RefinementReport(
        scene=final_scene,
        chains=final_scene.chains(),
        priors=priors,
        loss_curves=curves,
        best_seed=best_seed,
        final_total_loss=final_total,
        final_recon_loss=final_recon,
        background_recon_loss=float(background_recon),
        global_width=width,
        width_samples=width_samples,
        width_s=s_grid,
        capture_level=misfit,
    )
