"""Optimization: loss, SSIM, Adam with per-group schedules, positional noise,
and the training loop.

The loss combines L1 and structural dissimilarity on the rendered image with
two direct regularizers: an L1 penalty on opacities (which keeps the
densification math in its accurate small-opacity regime) and a penalty on
the summed covariance eigenvalue roots, which for ``Sigma = R S S^T R^T``
equal the per-axis scales exactly.

Positions additionally receive per-step exploration noise shaped by each
primitive's covariance and gated by its opacity through the bounded kernel
``(1 - o)^100``, so nearly-opaque primitives stay put while transparent ones
wander.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import correlate1d

from . import mcmc
from .kernel import beta_eval
from .primitive import PARAM_NAMES, covariance_many
from .rasterizer import render_backward, render_tiled

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
NOISE_SHAPE = float(np.log(25.0))  # kernel exponent 100: noise ~ (1 - o)^100
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


_WINDOW = _gaussian_window()


def _blur(img):
    # separable 11x11 Gaussian, zero padding ('same'); self-adjoint
    out = correlate1d(img, _WINDOW, axis=0, mode="constant")
    return correlate1d(out, _WINDOW, axis=1, mode="constant")


def ssim(a, b):
    """Mean SSIM over pixels and channels, plus the gradient w.r.t. ``a``.

    11x11 Gaussian window (sigma 1.5), C1 = 0.01^2 and C2 = 0.03^2 on a
    [0, 1] dynamic range.  Inputs are (H, W) or (H, W, C) with matching
    shapes, at least 11x11.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("images must be at least 11x11")

    mu_a = _blur(a)
    mu_b = _blur(b)
    qa = _blur(a * a)
    qab = _blur(a * b)
    var_b = _blur(b * b) - mu_b**2

    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * (qab - mu_a * mu_b) + SSIM_C2
    b1 = mu_a**2 + mu_b**2 + SSIM_C1
    b2 = (qa - mu_a**2) + var_b + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())

    n = s.size
    d_mu = (2.0 * mu_b * (a2 - a1)) / (b1 * b2) - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2)
    d_qa = -s / b2
    d_qab = 2.0 * a1 / (b1 * b2)
    grad = (_blur(d_mu) + 2.0 * a * _blur(d_qa) + b * _blur(d_qab)) / n
    return value, grad


def psnr(a, b):
    """``10 log10(1 / MSE)`` on [0, 1] images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


def loss(rendered, target, prims, cfg, return_parts=False):
    """Training loss, its image gradient, and direct parameter gradients.

    Returns ``(value, d_image, direct)`` where ``direct`` holds gradients
    for the opacity and log-scale regularizer terms; with ``return_parts``
    a dict of the individual loss terms is appended.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("rendered/target shapes differ")

    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    ssim_value, ssim_grad = ssim(rendered, target)

    opac = prims.opacities
    scales = prims.scales
    value = (
        (1.0 - cfg.lambda_ssim) * l1
        + cfg.lambda_ssim * (1.0 - ssim_value)
        + cfg.lambda_opacity * float(opac.sum())
        + cfg.lambda_scale * float(scales.sum())
    )
    d_image = (1.0 - cfg.lambda_ssim) * np.sign(diff) / diff.size \
        - cfg.lambda_ssim * ssim_grad
    direct = {
        "opacity_raw": cfg.lambda_opacity * opac * (1.0 - opac),
        "log_scales": cfg.lambda_scale * scales,
    }
    if return_parts:
        parts = {"l1": l1, "ssim_term": 1.0 - ssim_value}
        return value, d_image, direct, parts
    return value, d_image, direct


def exponential_lr(step, lr_init, lr_final, max_steps, delay_steps=0, delay_mult=0.01):
    """Log-linear interpolation from init to final over ``max_steps``.

    With ``delay_steps > 0`` the rate is additionally ramped in with a
    sine ease starting from ``delay_mult``.
    """
    t = np.clip(step / max_steps, 0.0, 1.0)
    lr = float(np.exp((1.0 - t) * np.log(lr_init) + t * np.log(lr_final)))
    if delay_steps > 0:
        u = np.clip(step / delay_steps, 0.0, 1.0)
        lr *= delay_mult + (1.0 - delay_mult) * np.sin(0.5 * np.pi * u)
    return lr


@dataclass
class TrainConfig:
    """Hyperparameters; field names double as config-file keys."""

    lambda_ssim: float = 0.2
    lambda_opacity: float = 0.01
    lambda_scale: float = 0.01
    noise_lr: float = 5e4
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_position_delay_steps: int = 0
    lr_position_delay_mult: float = 0.01
    lr_position_max_steps: int = 30_000
    lr_base_color: float = 2.5e-3
    lr_lobes: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_shape: float = 1e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 25_000
    dead_threshold: float = 0.005
    growth_rate: float = 0.05
    max_primitives: int = 1_000_000
    total_steps: int = 30_000
    patience: int = 10_000
    mode: str = "30k"  # "30k" (fixed budget) or "full" (patience stopping)
    sb_lobes: int = 2
    init_opacity: float = 0.1
    init_count: int = 2000
    init_mode: str = "auto"  # sfm | random | auto
    scene_scale: float = 0.0  # 0: derive from camera spread
    background: str = "white"
    holdout: int = 8
    eval_interval: int = 250
    max_steps_cap: int = 300_000

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lr_") and f.name not in (
                "lr_position_delay_steps",
                "lr_position_delay_mult",
                "lr_position_max_steps",
            ):
                if getattr(self, f.name) <= 0:
                    raise ValueError(f"{f.name} must be positive")
        if self.densify_start >= self.densify_end:
            raise ValueError("densify_start must be below densify_end")
        if self.mode not in ("30k", "full"):
            raise ValueError("mode must be '30k' or 'full'")

    def background_rgb(self):
        if self.background == "white":
            return np.ones(3)
        if self.background == "black":
            return np.zeros(3)
        return np.array([float(v) for v in self.background.split(",")], dtype=np.float64)

    def position_lr(self, step, scene_scale=1.0):
        return scene_scale * exponential_lr(
            step,
            self.lr_position_init,
            self.lr_position_final,
            self.lr_position_max_steps,
            self.lr_position_delay_steps,
            self.lr_position_delay_mult,
        )

    def group_lrs(self, step, scene_scale=1.0):
        return {
            "positions": self.position_lr(step, scene_scale),
            "opacity_raw": self.lr_opacity,
            "rotations": self.lr_rotation,
            "log_scales": self.lr_scale,
            "shapes": self.lr_shape,
            "base_colors": self.lr_base_color,
            "lobe_axes": self.lr_lobes,
            "lobe_colors": self.lr_lobes,
        }


@dataclass
class AdamState:
    """First/second moment buffers tracking a growing primitive set."""

    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0

    @classmethod
    def zeros_for(cls, prims):
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in prims.parameters().items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in prims.parameters().items()},
        )

    def zero_rows(self, indices):
        for buf in (self.exp_avg, self.exp_avg_sq):
            for arr in buf.values():
                arr[indices] = 0.0

    def append_rows(self, count):
        for buf_name in ("exp_avg", "exp_avg_sq"):
            buf = getattr(self, buf_name)
            for key, arr in buf.items():
                pad = np.zeros((count,) + arr.shape[1:])
                buf[key] = np.concatenate([arr, pad], axis=0)


def adam_step(prims, grads, state, lrs):
    """One Adam update over every parameter group (in place)."""
    state.step += 1
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    params = prims.parameters()
    for name in PARAM_NAMES:
        g = grads[name] if isinstance(grads, dict) else getattr(grads, name)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params[name] -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return prims


def inject_noise(prims, cfg, position_lr, rng):
    """Perturb positions with covariance-shaped, opacity-gated noise.

    The scale is ``noise_lr * position_lr * (1 - o)^100`` per primitive;
    fully opaque primitives receive none.  Only positions change.
    """
    n = len(prims)
    if n == 0:
        return prims.positions
    eta = rng.standard_normal((n, 3))
    gate = beta_eval(prims.opacities, NOISE_SHAPE)
    cov = covariance_many(prims.rotations, prims.scales)
    prims.positions += (
        cfg.noise_lr * position_lr * np.atleast_1d(gate)[:, None]
        * np.einsum("nij,nj->ni", cov, eta)
    )
    return prims.positions


@dataclass
class TrainResult:
    primitives: object
    metrics: list = field(default_factory=list)
    best_psnr: float = -np.inf
    best_step: int = 0
    steps_run: int = 0
    diverged: bool = False
    abort_reason: str = ""


def scene_scale_from_cameras(cameras):
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - centroid, axis=1)))
    return max(radius, 1e-6)


def train(dataset, cfg, rng, initial=None, progress=None, on_eval=None):
    """Optimize a primitive set against a dataset's training views.

    ``initial`` overrides the built-in initialization (SfM points when
    available, otherwise random-in-box).  In ``full`` mode training runs
    past the step budget until validation PSNR has not improved for
    ``cfg.patience`` steps; at this scale the train split doubles as the
    validation set.  ``on_eval(step, prims)`` fires at every evaluation
    point.  Deterministic for a fixed rng seed and thread count.
    """
    from . import sceneio

    if len(dataset.cameras) < 2:
        raise ValueError("training needs at least 2 views")
    train_ids = dataset.train_indices()
    if not train_ids:
        raise ValueError("dataset has no training views")
    val_ids = train_ids

    prims = initial.copy() if initial is not None else sceneio.initialize_scene(
        dataset, cfg, rng
    )
    scale = cfg.scene_scale or scene_scale_from_cameras(dataset.cameras)
    background = cfg.background_rgb()
    state = AdamState.zeros_for(prims)
    result = TrainResult(primitives=prims)

    order = []
    step = 0
    while True:
        if cfg.mode == "30k":
            if step >= cfg.total_steps:
                break
        else:
            plateaued = step - result.best_step >= cfg.patience
            if (step >= cfg.total_steps and plateaued) or step >= cfg.max_steps_cap:
                break
        step += 1
        if not order:
            order = [int(i) for i in rng.permutation(train_ids)]
        view = order.pop()
        cam = dataset.cameras[view]
        target = dataset.images[view]

        out = render_tiled(prims, cam, background)
        value, d_image, direct, parts = loss(
            out.color, target, prims, cfg, return_parts=True
        )
        grads = render_backward(prims, cam, background, d_image, forward_out=out)
        grads.opacity_raw += direct["opacity_raw"]
        grads.log_scales += direct["log_scales"]

        lrs = cfg.group_lrs(step, scale)
        adam_step(prims, grads, state, lrs)
        inject_noise(prims, cfg, lrs["positions"], rng)

        if (
            cfg.densify_start <= step <= cfg.densify_end
            and step % cfg.densify_interval == 0
        ):
            try:
                prims = _densify(prims, state, cfg, rng)
            except mcmc.AllDeadError as exc:
                # divergence: stop and hand back the terminal state
                result.diverged = True
                result.abort_reason = str(exc)
                break
            result.primitives = prims

        row = {
            "step": step,
            "loss": value,
            "l1": parts["l1"],
            "ssim_term": parts["ssim_term"],
            "mean_opacity": float(prims.opacities.mean()),
            "count": len(prims),
            "psnr": "",
        }

        if step % cfg.eval_interval == 0 or step == 1:
            val_psnr = evaluate_psnr(prims, dataset, val_ids, background)
            row["psnr"] = val_psnr
            if val_psnr > result.best_psnr:
                result.best_psnr = val_psnr
                result.best_step = step
            if on_eval is not None:
                on_eval(step, prims)
        result.metrics.append(row)
        if progress is not None:
            progress(row)

    result.steps_run = step
    result.primitives = prims
    return result


def evaluate_psnr(prims, dataset, view_ids, background):
    values = []
    for i in view_ids:
        out = render_tiled(prims, dataset.cameras[i], background)
        values.append(
            psnr(np.clip(out.color, 0.0, 1.0), np.clip(dataset.images[i], 0.0, 1.0))
        )
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else np.inf


def _densify(prims, state, cfg, rng):
    dead = mcmc.find_dead(prims, cfg.dead_threshold)
    if dead.size:
        plan = mcmc.plan_relocation(prims, dead, rng, threshold=cfg.dead_threshold)
        mcmc.apply_relocation(prims, plan, state, floor=cfg.dead_threshold)
    return mcmc.grow(
        prims, cfg.max_primitives, rng, state,
        rate=cfg.growth_rate, dead_threshold=cfg.dead_threshold,
    )
