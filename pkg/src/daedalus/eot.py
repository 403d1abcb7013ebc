"""Digitally simulated physical attack: a standalone poster optimized under
random placement (expectation over transformation) with a sub-sampled
non-printability penalty.

Each transform zooms and rotates the poster about its center, pastes it at a
random top-left position, adds uniform camera noise to the whole frame and
clips to [0, 1].  Warping is bilinear through the ``gather`` primitive, so the
composite frame is differentiable with respect to the poster pixels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, ImageObjective
from .autodiff import Tape, TapeBuilder
from .imageio import array_sha256, save_json, save_png

log = logging.getLogger(__name__)

ROTATION_LIMIT = math.pi / 10
NOISE_LIMIT = 0.01
ZOOM_RANGE = (0.1, 0.7)
PALETTE_SIZE = 32
PALETTE_SEED = 20190817


def printable_palette(n: int = PALETTE_SIZE, seed: int = PALETTE_SEED) -> np.ndarray:
    """``n`` printable stand-in colors drawn uniformly from the RGB cube."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 3))


@dataclass
class Poster:
    pixels: np.ndarray  # (h_p, w_p, 3) in [0, 1]
    beta: float = 0.01
    palette: np.ndarray = field(default_factory=printable_palette)
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.palette = np.asarray(self.palette, dtype=np.float64).reshape(-1, 3)
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if len(self.palette) == 0:
            raise ValueError("palette must be non-empty")

    @property
    def dims(self) -> tuple[int, int]:
        """(w_p, h_p)."""
        return self.pixels.shape[1], self.pixels.shape[0]


@dataclass(frozen=True)
class TransformSample:
    zoom: float
    rotation: float
    position: tuple[float, float]  # top-left (x, y) of the unrotated pasted poster
    aspect_ratio: tuple[float, float] = (1.0, 1.0)
    noise: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def identity(cls, position=(0.0, 0.0)) -> "TransformSample":
        return cls(1.0, 0.0, tuple(map(float, position)))


def zoom_range(frame_dims, poster_dims) -> tuple[float, float]:
    (wv, hv), (wp, hp) = frame_dims, poster_dims
    base = min(wv / wp, hv / hp)
    return ZOOM_RANGE[0] * base, ZOOM_RANGE[1] * base


def sample_transform(rng: np.random.Generator, frame_dims, poster_dims,
                     input_side: int | None = None) -> TransformSample:
    """Draw one transform.

    ``frame_dims`` and ``poster_dims`` are (width, height).  Frames are
    resized to the square model input, so the aspect ratio is
    ``(side / w_v, side / h_v)``; position bounds keep the unrotated poster
    inside the frame.
    """
    (wv, hv), (wp, hp) = frame_dims, poster_dims
    if min(wv, hv, wp, hp) <= 0:
        raise ValueError("frame and poster dimensions must be positive")
    side = input_side or wv
    ax, ay = side / wv, side / hv
    zlo, zhi = zoom_range(frame_dims, poster_dims)
    z = rng.uniform(zlo, zhi)
    if ax * z * wp > side or ay * z * hp > side:
        raise ValueError("poster does not fit the frame at the sampled zoom")
    theta = rng.uniform(-ROTATION_LIMIT, ROTATION_LIMIT)
    x = rng.uniform(0.0, side - ax * z * wp)
    y = rng.uniform(0.0, side - ay * z * hp)
    noise = rng.uniform(0.0, NOISE_LIMIT, size=(side, side, 3))
    return TransformSample(float(z), float(theta), (float(x), float(y)), (ax, ay), noise)


def warp_indices(frame_shape, poster_dims, t: TransformSample):
    """Bilinear gather table mapping frame pixels to poster pixels.

    Returns ``(index, weights, mask)`` with ``index``/``weights`` of shape
    ``(H*W, 4)`` into the flattened poster and ``mask`` (H, W) marking frame
    pixels covered by the poster.
    """
    h, w = frame_shape[:2]
    wp, hp = poster_dims
    ax, ay = t.aspect_ratio
    sx, sy = ax * t.zoom, ay * t.zoom
    cx = t.position[0] + 0.5 * sx * wp
    cy = t.position[1] + 0.5 * sy * hp
    v, u = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    du, dv = u - cx, v - cy
    cos, sin = math.cos(t.rotation), math.sin(t.rotation)
    # inverse rotation, then inverse scale, into poster pixel units
    px = (cos * du + sin * dv) / sx + 0.5 * wp
    py = (-sin * du + cos * dv) / sy + 0.5 * hp
    mask = (px >= 0) & (px < wp) & (py >= 0) & (py < hp)
    gx, gy = px - 0.5, py - 0.5
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = (np.clip(x0, 0, wp - 1), np.clip(x0 + 1, 0, wp - 1))
    ys = (np.clip(y0, 0, hp - 1), np.clip(y0 + 1, 0, hp - 1))
    index = np.stack([ys[0] * wp + xs[0], ys[0] * wp + xs[1], ys[1] * wp + xs[0], ys[1] * wp + xs[1]], -1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], -1)
    weights = weights * mask[..., None]
    index = np.where(mask[..., None], index, 0)
    return index.reshape(-1, 4), weights.reshape(-1, 4), mask


_COMPOSITE_TAPES: dict = {}


def composite_tape(side: int, poster_dims, batch: int) -> Tape:
    """Tape: poster (h_p, w_p, 3) -> ``frames`` (batch, side, side, 3)."""
    key = (side, tuple(poster_dims), batch)
    tape = _COMPOSITE_TAPES.get(key)
    if tape is None:
        wp, hp = poster_dims
        tb = TapeBuilder()
        poster = tb.input("poster", (hp, wp, 3))
        index = tb.input("index", (batch, side * side, 4), dtype=np.int64)
        weights = tb.input("weights", (batch, side * side, 4))
        backdrop = tb.input("backdrop", (batch, side, side, 3))
        noise = tb.input("noise", (batch, side, side, 3))
        src = tb.reshape(poster, (hp * wp, 3))
        pasted = tb.reshape(tb.gather(src, index, weights), (batch, side, side, 3))
        frames = tb.clip(backdrop + pasted + noise, 0.0, 1.0)
        tape = tb.build(frames=frames)
        _COMPOSITE_TAPES[key] = tape
    return tape


def _composite_inputs(frames, poster_dims, samples):
    idx, wts, back, noise = [], [], [], []
    for frame, t in zip(frames, samples):
        index, weights, mask = warp_indices(frame.shape, poster_dims, t)
        idx.append(index)
        wts.append(weights)
        back.append(frame * ~mask[..., None])
        noise.append(np.zeros_like(frame) if t.noise is None else t.noise)
    return {"index": np.stack(idx), "weights": np.stack(wts),
            "backdrop": np.stack(back), "noise": np.stack(noise)}


def apply_transform(frame: np.ndarray, poster, t: TransformSample) -> np.ndarray:
    """Paste the transformed poster into ``frame``; returns the new frame."""
    pixels = poster.pixels if isinstance(poster, Poster) else np.asarray(poster, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    dims = (pixels.shape[1], pixels.shape[0])
    if frame.shape[0] != frame.shape[1]:
        raise ValueError("frames must be square (resized to the model input)")
    inputs = _composite_inputs([frame], dims, [t])
    inputs["poster"] = pixels
    return composite_tape(frame.shape[0], dims, 1).eval(inputs)["frames"][0]


def rotate_image(image: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a square image about its center with the same bilinear kernel."""
    image = np.asarray(image, dtype=np.float64)
    backdrop = np.zeros_like(image)
    t = TransformSample(1.0, theta, (0.0, 0.0))
    return apply_transform(backdrop, image, t)


# -- printability -------------------------------------------------------------


def _nps(pixels: np.ndarray, palette: np.ndarray):
    """Per-pixel product of distances to every palette color, and its gradient."""
    diff = pixels[:, None, :] - palette[None, :, :]  # (S, P, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))  # (S, P)
    # products excluding each factor, via prefix/suffix products (zero-safe)
    ones = np.ones((dist.shape[0], 1))
    prefix = np.cumprod(np.concatenate([ones, dist[:, :-1]], axis=1), axis=1)
    suffix = np.cumprod(np.concatenate([ones, dist[:, :0:-1]], axis=1), axis=1)[:, ::-1]
    others = prefix * suffix
    value = prefix[:, -1] * dist[:, -1]
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    grad = np.sum(others[..., None] * unit, axis=1)
    return value, grad


def snps_sample(poster: Poster, rng: np.random.Generator) -> np.ndarray:
    wp, hp = poster.dims
    count = min(wp * hp, int(math.ceil(poster.beta * wp * hp - 1e-9)))
    return rng.choice(wp * hp, size=count, replace=False)


def snps(poster: Poster, seed: int = 0, rows: np.ndarray | None = None) -> float:
    """Sum of non-printability over ``ceil(beta * w_p * h_p)`` seeded pixel samples."""
    if rows is None:
        rows = snps_sample(poster, np.random.default_rng(seed))
    flat = poster.pixels.reshape(-1, 3)[rows]
    return float(np.sum(_nps(flat, poster.palette)[0]))


def snps_grad(poster: Poster, rows: np.ndarray) -> tuple[float, np.ndarray]:
    flat = poster.pixels.reshape(-1, 3)
    value, g = _nps(flat[rows], poster.palette)
    grad = np.zeros_like(flat)
    np.add.at(grad, rows, g)
    return float(np.sum(value)), grad.reshape(poster.pixels.shape)


# -- optimization --------------------------------------------------------------


def eot_objective(poster: Poster, frames, samples, objective: ImageObjective,
                  snps_rows=None, need_grad: bool = True):
    """Monte-Carlo loss over (frame, transform) pairs plus the SNPS term.

    Returns ``(value, grad)`` where ``grad`` is w.r.t. poster pixels.
    """
    dims = poster.dims
    inputs = _composite_inputs(frames, dims, samples)
    inputs["poster"] = poster.pixels
    tape = composite_tape(objective.side, dims, len(frames))
    fwd = tape.eval(inputs)
    value, g_frames = objective(fwd["frames"], need_grad)
    total = value.total
    grad = None
    if need_grad:
        grad = fwd.vjp({"frames": g_frames}, "poster")
    if snps_rows is not None:
        s, gs = snps_grad(poster, snps_rows)
        total += s
        if need_grad:
            grad = grad + gs
    return total, grad


def optimize_poster(
    scenes,
    models,
    cfg: AttackConfig,
    poster_dims=(32, 32),
    beta: float = 0.01,
    samples_per_step: int = 8,
    use_snps: bool = True,
    palette: np.ndarray | None = None,
    progress=None,
) -> Poster:
    """Gradient descent on the poster in tanh space.

    ``cfg`` supplies the step size ``eta``, the step count ``max_iteration``,
    the seed, target categories and loss kind.  Each step draws
    ``samples_per_step`` (frame, transform) pairs from a seeded stream.
    """
    frames = [np.asarray(getattr(s, "image", s), dtype=np.float64) for s in scenes]
    if not frames:
        raise ValueError("need at least one scene")
    objective = ImageObjective(models, cfg.loss_kind, cfg.targets)
    side = objective.side
    for f in frames:
        if f.shape != (side, side, 3):
            raise ValueError(f"scene shape {f.shape} does not match model input side {side}")
    rng = np.random.default_rng(cfg.seed)
    wp, hp = poster_dims
    init = rng.uniform(0.25, 0.75, size=(hp, wp, 3))
    omega = np.arctanh(2.0 * init - 1.0)
    poster = Poster(init, beta, printable_palette() if palette is None else palette)
    history = []
    for step in range(cfg.max_iteration):
        poster.pixels = 0.5 * (np.tanh(omega) + 1.0)
        picks = rng.integers(0, len(frames), size=samples_per_step)
        batch = [frames[i] for i in picks]
        samples = [sample_transform(rng, (side, side), (wp, hp)) for _ in picks]
        rows = snps_sample(poster, rng) if use_snps else None
        value, grad = eot_objective(poster, batch, samples, objective, rows)
        if not np.isfinite(value):
            raise FloatingPointError(f"poster objective became {value} at step {step}")
        history.append(float(value))
        if progress is not None:
            progress(step, value)
        omega = omega - cfg.eta * grad * 0.5 * (1.0 - np.tanh(omega) ** 2)
    poster.pixels = 0.5 * (np.tanh(omega) + 1.0)
    poster.history = history
    return poster


def evaluate_poster(poster: Poster, scenes, model, samples: int = 100, seed: int = 1,
                    iou_match: float = 0.5, objectness_threshold: float = 0.5, nt: float = 0.5,
                    nms_kind: str = "hard") -> dict:
    """FP rate of pasted frames over fresh transform samples."""
    from .detector import detect
    from .evaluation import NO_DETECTIONS, fp_rate

    rng = np.random.default_rng(seed)
    side = model.input_side
    rates = []
    for k in range(samples):
        sc = scenes[k % len(scenes)]
        t = sample_transform(rng, (side, side), poster.dims)
        frame = apply_transform(sc.image, poster, t)
        dets = detect(frame, model, objectness_threshold, nt, nms_kind)
        rates.append(fp_rate(dets, sc.truths, iou_match))
    defined = [r for r in rates if r is not NO_DETECTIONS]
    return {
        "fp_rate": float(np.mean(defined)) if defined else NO_DETECTIONS,
        "n_undefined": len(rates) - len(defined),
        "rates": rates,
    }


def save_poster(poster: Poster, png_path, seed: int, scenes=None, extra: dict | None = None):
    save_png(png_path, poster.pixels)
    meta = {
        "seed": int(seed),
        "beta": float(poster.beta),
        "size": list(poster.dims),
        "palette_sha256": array_sha256(poster.palette),
        "scenes_sha256": array_sha256(*[getattr(s, "image", s) for s in scenes]) if scenes else None,
    }
    if extra:
        meta.update(extra)
    sidecar = str(png_path).rsplit(".", 1)[0] + ".json"
    save_json(sidecar, meta)
    return sidecar
