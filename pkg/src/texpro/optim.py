"""Four-term inverse-rendering objective and the two-stage Adam loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from texpro import tensor as T
from texpro.features import FeatureExtractor
from texpro.maskops import bbox
from texpro.matgraph import MaterialGraph, ParamLayout, evaluate, flatten_params, unflatten_params
from texpro.render.scene import N_LIGHTS
from texpro.render.shading import ShadingSetup, shade
from texpro.tensor import Tensor

log = logging.getLogger(__name__)

TERMS = ("resized", "pixel", "stat", "gram")
TRACE_COLUMNS = ("iteration", "stage", "total", *TERMS)
RESIZE_FACTOR = 8
SATURATION_KNEE = 0.9
LIGHT_RANGE = 4.0  # lights live in [0, LIGHT_RANGE x initial]


class TermError(ValueError):
    def __init__(self, term: str, cause: Exception):
        super().__init__(f"{term}: {cause}")
        self.term = term


def _guard(term: str, fn, *args):
    """Run one term, attributing inf / nan (raised or returned) to ``term``."""
    try:
        out = fn(*args)
    except T.NonFiniteError as exc:
        raise TermError(term, exc) from exc
    values = [out] if isinstance(out, Tensor) else out
    if any(not np.isfinite(v.data).all() for v in values):
        raise TermError(term, ValueError("non-finite value"))
    return out


class NumericError(RuntimeError):
    def __init__(self, iteration: int, term: str, trace=None):
        super().__init__(f"non-finite loss at iteration {iteration} (term: {term})")
        self.iteration = iteration
        self.term = term
        self.trace = trace or []


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.1

    def __post_init__(self):
        for v in self.as_tuple():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and >= 0, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


def soft_saturate(x: Tensor, knee: float = SATURATION_KNEE) -> Tensor:
    """Identity below ``knee``, smooth roll-off to an asymptote of 1 above it."""
    over = T.relu(x - knee)
    return x - over + (1.0 - knee) * T.tanh(over / (1.0 - knee))


def _img(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float64), _check=False)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"image dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_resized(rendered, reference, factor: int = RESIZE_FACTOR) -> Tensor:
    """Mean |box_f(R) - box_f(I)|; trailing rows/cols beyond a multiple of f are dropped."""
    r, i = _img(rendered), _img(reference)
    _same_shape(r, i)
    C, H, W = r.shape
    h, w = (H // factor) * factor, (W // factor) * factor
    if h == 0 or w == 0:
        raise ValueError(f"image {H}x{W} smaller than the {factor}x downsampling block")
    if (h, w) != (H, W):
        r, i = r[:, :h, :w], i[:, :h, :w]
    return T.mean(T.abs(T.box_downsample(r, factor) - T.box_downsample(i, factor)))


def _pairs(rendered, reference, masks):
    """Normalize to a list of (R, I, mask) with per-view images."""
    single = isinstance(rendered, (Tensor, np.ndarray))
    rs = [rendered] if single else list(rendered)
    is_ = [reference] if single else list(reference)
    if len(rs) != len(is_):
        raise ValueError("rendered and reference view counts differ")
    rs, is_ = [_img(r) for r in rs], [_img(i) for i in is_]
    for r, i in zip(rs, is_):
        _same_shape(r, i)
    out = []
    for entry in masks:
        if single and not isinstance(entry, tuple):
            v, m = 0, entry
        else:
            v, m = entry
        m = np.asarray(getattr(m, "bits", m), dtype=bool)
        if m.shape != tuple(rs[v].shape[1:]):
            raise ValueError(f"mask {m.shape} does not match image {rs[v].shape}")
        out.append((rs[v], is_[v], m))
    return out


def loss_pixel(rendered, reference, masks) -> Tensor:
    """Average over masks of the in-mask mean absolute difference.

    ``rendered`` / ``reference`` are one image each, or lists per view; then
    ``masks`` holds ``(view index, mask)`` pairs.
    """
    pairs = [p for p in _pairs(rendered, reference, masks) if p[2].any()]
    if not pairs:
        raise ValueError("all masks are empty")
    terms = []
    for r, i, m in pairs:
        w = Tensor(m.astype(np.float64), _check=False)
        terms.append(T.sum(T.abs(r - i) * w) / (m.sum() * r.shape[0]))
    return T.sum(T.stack(terms)) / len(terms)


def loss_stat(rendered, reference, masks) -> Tensor:
    """Average over parts of |mu_R - mu_I| + |var_R - var_I| (per channel, channel mean)."""
    terms = []
    for k, (r, i, m) in enumerate(_pairs(rendered, reference, masks)):
        if m.sum() < 2:
            log.warning("mask %d has fewer than 2 pixels; skipped in statistics loss", k)
            continue
        w = m.astype(np.float64)
        dmu = T.abs(T.spatial_mean(r, w) - T.spatial_mean(i, w))
        dvar = T.abs(T.spatial_variance(r, w) - T.spatial_variance(i, w))
        terms.append(T.mean(dmu + dvar))
    if not terms:
        return Tensor(0.0)
    return T.sum(T.stack(terms)) / len(terms)


def gram_descriptors(image: Tensor, extractor: FeatureExtractor) -> list[Tensor]:
    return [T.gram(f) for f in extractor.features(image)]


def loss_gram(rendered, reference, masks, extractor: FeatureExtractor,
              ref_cache: dict | None = None) -> Tensor:
    """Average over parts of mean |T_g(R) - T_g(I)|, Gram over masked bbox crops.

    ``ref_cache`` (keyed by mask index) memoizes reference descriptors, which
    do not depend on the parameters.
    """
    terms = []
    for k, (r, i, m) in enumerate(_pairs(rendered, reference, masks)):
        if not m.any():
            continue
        r0, c0, r1, c1 = bbox(m)
        if min(r1 - r0, c1 - c0) < extractor.min_size:
            log.warning("mask %d bbox %dx%d below extractor minimum; skipped in Gram loss",
                        k, r1 - r0, c1 - c0)
            continue
        w = Tensor(m[r0:r1, c0:c1].astype(np.float64), _check=False)
        gr = gram_descriptors(r[:, r0:r1, c0:c1] * w, extractor)
        if ref_cache is not None and k in ref_cache:
            gi = ref_cache[k]
        else:
            gi = [g.detach() for g in gram_descriptors(i[:, r0:r1, c0:c1] * w, extractor)]
            if ref_cache is not None:
                ref_cache[k] = gi
        per_layer = [T.mean(T.abs(a - b)) for a, b in zip(gr, gi)]
        terms.append(T.sum(T.stack(per_layer)) / len(per_layer))
    if not terms:
        return Tensor(0.0)
    return T.sum(T.stack(terms)) / len(terms)


@dataclass
class ViewBundle:
    view: int
    reference: np.ndarray                 # (3, H, W) in [0, 1]
    setup: ShadingSetup
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # part -> aligned mask


def check_assignment(bundles, n_parts: int | None = None):
    seen = {}
    for b in bundles:
        for p in b.masks:
            if p in seen:
                raise ValueError(f"part {p} assigned to views {seen[p]} and {b.view}")
            seen[p] = b.view
    if n_parts is not None:
        missing = sorted(set(range(n_parts)) - set(seen))
        if missing:
            log.warning("parts %s have no aligned mask in any view", missing)
    return seen


def total_loss(renders, bundles, weights: LossWeights = LossWeights(),
               extractor: FeatureExtractor | None = None,
               ref_cache: dict | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """lambda1 sum_views L_resized + lambda2 L_pixel + lambda3 L_stat + lambda4 L_gram."""
    l1, l2, l3, l4 = weights.as_tuple()
    refs = [b.reference for b in bundles]
    masks = [(k, m) for k, b in enumerate(bundles) for _, m in sorted(b.masks.items())]
    zero = Tensor(0.0)
    terms = {}
    resized = lambda: T.sum(T.stack([loss_resized(r, i) for r, i in zip(renders, refs)]))
    terms["resized"] = _guard("resized", resized) if l1 > 0 else zero
    terms["pixel"] = _guard("pixel", loss_pixel, renders, refs, masks) if l2 > 0 else zero
    terms["stat"] = _guard("stat", loss_stat, renders, refs, masks) if l3 > 0 else zero
    if l4 > 0:
        if extractor is None:
            raise ValueError("Gram loss needs a feature extractor")
        terms["gram"] = _guard("gram", loss_gram, renders, refs, masks, extractor, ref_cache)
    else:
        terms["gram"] = zero
    total = l1 * terms["resized"] + l2 * terms["pixel"] + l3 * terms["stat"] + l4 * terms["gram"]
    return total, terms


# ---------------------------------------------------------------------------
# problem and optimizer
# ---------------------------------------------------------------------------


class Problem:
    """Material graphs per part, light parametrization and the views to match."""

    def __init__(self, graphs: dict[int, MaterialGraph], bundles: list[ViewBundle],
                 intensities, weights: LossWeights = LossWeights(),
                 extractor: FeatureExtractor | None = None, resolution: int = 128,
                 seed: int = 0, bounces: int = 2):
        self.parts = sorted(graphs)
        self.graphs = graphs
        self.bundles = bundles
        self.weights = weights
        self.extractor = extractor
        self.resolution = resolution
        self.seed = seed
        self.bounces = bounces
        check_assignment(bundles)
        self.layouts: dict[int, ParamLayout] = {}
        self.offsets: dict[int, int] = {}
        chunks, off = [], 0
        for p in self.parts:
            th, lay = flatten_params(graphs[p])
            self.layouts[p], self.offsets[p] = lay, off
            chunks.append(th.data)
            off += lay.size
        self.theta0 = np.concatenate(chunks) if chunks else np.zeros(0)
        I0 = np.asarray(intensities, np.float64)
        if I0.shape != (N_LIGHTS, 3) or np.any(I0 < 0):
            raise ValueError("initial intensities must be a nonnegative (5, 3) array")
        self.light_hi = LIGHT_RANGE * I0
        self.phi0 = T.inverse_soft_clamp(np.where(I0 > 0, I0, 0.0), 0.0,
                                         np.where(I0 > 0, self.light_hi, 1.0))
        self._ref_cache: dict = {}

    def lights(self, phi) -> Tensor:
        return T.soft_clamp(T.as_tensor(phi).reshape(N_LIGHTS, 3), lo=0.0, hi=self.light_hi)

    def maps(self, theta) -> dict:
        theta = T.as_tensor(theta)
        return {p: evaluate(self.graphs[p], self.resolution, self.seed,
                            self.layouts[p].param_tensors(theta, self.offsets[p]))
                for p in self.parts}

    def render(self, theta, phi) -> list[Tensor]:
        maps, I = self.maps(theta), self.lights(phi)
        return [soft_saturate(shade(b.setup, maps, I, self.bounces)) for b in self.bundles]

    def loss(self, theta, phi) -> tuple[Tensor, dict[str, Tensor]]:
        renders = _guard("render", self.render, theta, phi)
        return total_loss(renders, self.bundles, self.weights, self.extractor, self._ref_cache)

    def final_graphs(self, theta) -> dict[int, MaterialGraph]:
        theta = np.asarray(getattr(theta, "data", theta))
        return {p: unflatten_params(self.layouts[p],
                                    theta[self.offsets[p]:self.offsets[p] + self.layouts[p].size])
                for p in self.parts}


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class OptimConfig:
    stage1: int = 200
    stage2: int = 300
    lr_theta: float = 0.01
    lr_light: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage1 < 0 or self.stage2 < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.lr_theta < 0 or self.lr_light < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class OptimResult:
    theta: np.ndarray
    phi: np.ndarray
    graphs: dict[int, MaterialGraph]
    intensities: np.ndarray
    trace: list[dict]

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row["iteration"], row["stage"]] +
                   [f"{row[c]:.9g}" for c in TRACE_COLUMNS[2:]])
    return buf.getvalue()


def _check_finite(total, terms, it, trace):
    for name in TERMS:
        if not np.isfinite(terms[name].data).all():
            raise NumericError(it, name, trace)
    if not np.isfinite(total.data).all():
        raise NumericError(it, "total", trace)


def run_two_stage(problem: Problem, config: OptimConfig = OptimConfig(),
                  theta0=None, phi0=None, callback=None) -> OptimResult:
    """Stage 1: materials only, lights frozen. Stage 2: materials and lights jointly.

    Each trace row holds the loss evaluated at the parameters before that
    iteration's update.
    """
    theta = np.array(problem.theta0 if theta0 is None else theta0, np.float64)
    phi = np.array(problem.phi0 if phi0 is None else phi0, np.float64).reshape(-1)
    opt_t = Adam(theta.size, config.lr_theta, config.betas, config.eps)
    opt_l = Adam(phi.size, config.lr_light, config.betas, config.eps)
    trace = []
    it = 0
    for stage, n in ((1, config.stage1), (2, config.stage2)):
        for _ in range(n):
            th = Tensor(theta, requires_grad=True)
            ph = Tensor(phi, requires_grad=stage == 2)
            try:
                total, terms = problem.loss(th, ph)
            except TermError as exc:
                raise NumericError(it, exc.term, trace) from exc
            _check_finite(total, terms, it, trace)
            trace.append({"iteration": it, "stage": stage, "total": total.item(),
                          **{k: float(terms[k].data) for k in TERMS}})
            T.backward(total)
            g = th.grad if th.grad is not None else np.zeros_like(theta)
            if not np.isfinite(g).all():
                raise NumericError(it, "gradient", trace)
            theta = opt_t.step(theta, g)
            if stage == 2:
                gl = ph.grad if ph.grad is not None else np.zeros_like(phi)
                if not np.isfinite(gl).all():
                    raise NumericError(it, "light gradient", trace)
                phi = opt_l.step(phi, gl)
            if callback is not None:
                callback(it, stage, trace[-1])
            it += 1
    return OptimResult(theta, phi, problem.final_graphs(theta),
                       problem.lights(phi).data.copy(), trace)
