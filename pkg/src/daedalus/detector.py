"""Single-scale YOLO-style micro detector built on the autodiff tape.

Raw head output per cell and anchor is ``(t_x, t_y, t_w, t_h, t_0, logits...)``;
:func:`decode_graph` turns it into pixel boxes:

    b_x = (c_x + sigmoid(t_x)) * stride      b_w = p_w * exp(t_w)
    b_y = (c_y + sigmoid(t_y)) * stride      b_h = p_h * exp(t_h)
    p   = softmax(logits)                    b_0 = sigmoid(t_0) * max(p)
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, TapeBuilder, Var
from .geometry import DetectionSet, dimension_floor_filter, nms, soft_nms

log = logging.getLogger(__name__)

MAGIC = b"DAEDMODL"
FORMAT_VERSION = 1
DEFAULT_ANCHORS = ((12.0, 12.0), (24.0, 24.0))  # pixels at a 64-px input
LEAKY_SLOPE = 0.1
NMS_KINDS = ("hard", "soft-linear", "soft-gaussian")

# (kernel, stride, out_channels, activation); the head layer is appended.
VARIANTS = {
    "A": [(5, 2, 16, "relu"), (3, 2, 32, "relu"), (3, 2, 32, "relu")],
    "B": [(3, 1, 8, "leaky"), (3, 2, 16, "leaky"), (3, 2, 32, "leaky"), (3, 2, 32, "leaky")],
    "C": [(5, 2, 24, "relu"), (3, 2, 24, "relu"), (5, 2, 48, "relu")],
}
HEAD_KERNEL = {"A": 3, "B": 3, "C": 1}


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class AnchorGrid:
    grid_s: int
    stride: int
    anchors: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if any(pw <= 0 or ph <= 0 for pw, ph in self.anchors):
            raise ValueError("anchor priors must be positive")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def input_side(self) -> int:
        return self.grid_s * self.stride

    @property
    def num_boxes(self) -> int:
        return self.grid_s * self.grid_s * self.num_anchors

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell column/row offsets broadcast to ``(S, S, A)``."""
        s, a = self.grid_s, self.num_anchors
        cy, cx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
        return np.repeat(cx[:, :, None], a, axis=2), np.repeat(cy[:, :, None], a, axis=2)


@dataclass
class DecodedBoxes:
    """Numpy view of every raw box, flattened in (row, col, anchor) order."""

    bx: np.ndarray
    by: np.ndarray
    bw: np.ndarray
    bh: np.ndarray
    objectness: np.ndarray
    probs: np.ndarray
    conf: np.ndarray

    def __len__(self):
        return self.conf.shape[-1]

    def take_image(self, k: int) -> "DecodedBoxes":
        return DecodedBoxes(*(getattr(self, f)[k] for f in
                              ("bx", "by", "bw", "bh", "objectness", "probs", "conf")))


@dataclass
class DetectorModel:
    id: str
    variant: str
    architecture: list[dict]
    weights: dict[str, np.ndarray]
    anchor_grid: AnchorGrid
    num_classes: int
    input_side: int
    seed: int = 0
    train_log: dict = field(default_factory=dict)
    _tapes: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_boxes(self) -> int:
        return self.anchor_grid.num_boxes

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.id, self.variant, copy.deepcopy(self.architecture),
                             {k: v.copy() for k, v in self.weights.items()}, self.anchor_grid,
                             self.num_classes, self.input_side, self.seed, dict(self.train_log))

    # -- graph construction ------------------------------------------------
    def raw_graph(self, tb: TapeBuilder, image: Var) -> Var:
        """Append the conv stack; weights become inputs named like ``conv0.w``."""
        x = image - 0.5
        for i, layer in enumerate(self.architecture):
            k, cin, cout = layer["kernel"], layer["in"], layer["out"]
            w = tb.input(f"conv{i}.w", (k, k, cin, cout))
            b = tb.input(f"conv{i}.b", (cout,))
            x = tb.conv2d(x, w, stride=layer["stride"], pad=k // 2) + b
            if layer["act"] == "relu":
                x = tb.relu(x)
            elif layer["act"] == "leaky":
                x = tb.leaky_relu(x, LEAKY_SLOPE)
        return x

    def raw_shape(self, batch: int = 1) -> tuple[int, ...]:
        s = self.anchor_grid.grid_s
        return (batch, s, s, self.anchor_grid.num_anchors * (5 + self.num_classes))

    def tape(self, purpose: str, batch: int = 1) -> Tape:
        """Cached tape for ``purpose`` in {'decode', 'train'}."""
        key = (purpose, batch)
        tape = self._tapes.get(key)
        if tape is None:
            if purpose == "decode":
                tb = TapeBuilder()
                img = tb.input("image", (batch, self.input_side, self.input_side, 3))
                raw = self.raw_graph(tb, img)
                outs = decode_graph(tb, raw, self.anchor_grid, self.num_classes)
                tape = tb.build(raw=raw, **outs)
            elif purpose == "train":
                tape = _train_tape(self, batch)
            else:
                raise ValueError(purpose)
            self._tapes[key] = tape
        return tape

    def bind(self, images: np.ndarray) -> dict:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (self.input_side, self.input_side, 3):
            raise ValueError(
                f"image shape {images.shape[1:]} does not match model input "
                f"({self.input_side}, {self.input_side}, 3)"
            )
        return {"image": images, **self.weights}

    def forward(self, images: np.ndarray):
        """Evaluate the decode tape; returns the :class:`Forward` record."""
        inputs = self.bind(images)
        return self.tape("decode", inputs["image"].shape[0]).eval(inputs)

    def predict(self, images: np.ndarray) -> DecodedBoxes:
        fwd = self.forward(images)
        return DecodedBoxes(*(fwd[k] for k in ("bx", "by", "bw", "bh", "objectness", "probs", "conf")))


def decode_graph(tb: TapeBuilder, raw: Var, grid: AnchorGrid, num_classes: int) -> dict[str, Var]:
    """Differentiable decode of a raw map ``(N, S, S, A*(5+K))``; outputs are ``(N, S*S*A)``."""
    n, s, _, depth = raw.shape
    a = grid.num_anchors
    if depth != a * (5 + num_classes) or s != grid.grid_s:
        raise ValueError(f"raw map shape {raw.shape} inconsistent with grid and K={num_classes}")
    r = tb.reshape(raw, (n, s, s, a, 5 + num_classes))
    cx, cy = grid.offsets()
    pw = np.array([p[0] for p in grid.anchors])
    ph = np.array([p[1] for p in grid.anchors])
    bx = (tb.sigmoid(r[..., 0]) + cx) * float(grid.stride)
    by = (tb.sigmoid(r[..., 1]) + cy) * float(grid.stride)
    bw = tb.exp(r[..., 2]) * pw
    bh = tb.exp(r[..., 3]) * ph
    obj = tb.sigmoid(r[..., 4])
    probs = tb.softmax(r[..., 5:], axis=-1)
    conf = obj * tb.max(probs, axis=-1)
    nb = s * s * a
    flat = lambda v: tb.reshape(v, (n, nb))  # noqa: E731
    return {
        "bx": flat(bx), "by": flat(by), "bw": flat(bw), "bh": flat(bh),
        "objectness": flat(obj), "conf": flat(conf),
        "probs": tb.reshape(probs, (n, nb, num_classes)),
    }


def decode(raw: np.ndarray, grid: AnchorGrid) -> DecodedBoxes:
    """Decode a raw feature map ``(S, S, A*(5+K))`` or ``(N, S, S, A*(5+K))``."""
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 3
    if single:
        raw = raw[None]
    k = raw.shape[-1] // grid.num_anchors - 5
    tb = TapeBuilder()
    r = tb.input("raw", raw.shape)
    outs = decode_graph(tb, r, grid, k)
    fwd = tb.build(**outs).eval({"raw": raw})
    boxes = DecodedBoxes(*(fwd[key] for key in ("bx", "by", "bw", "bh", "objectness", "probs", "conf")))
    return boxes.take_image(0) if single else boxes


def boxes_to_detections(boxes: DecodedBoxes, image_id="", source_model="") -> DetectionSet:
    """All raw boxes of one image as a :class:`DetectionSet` (class = argmax p)."""
    xywh = np.stack([boxes.bx, boxes.by, boxes.bw, boxes.bh], axis=1)
    return DetectionSet(xywh, boxes.conf, np.argmax(boxes.probs, axis=1),
                        image_id=image_id, source_model=source_model, class_probs=boxes.probs)


def postprocess(
    boxes: DecodedBoxes,
    input_side: int,
    objectness_threshold: float = 0.5,
    nt: float = 0.5,
    nms_kind: str = "hard",
    defence_min_area: float = 0.0,
    sigma: float = 0.5,
    score_floor: float = 0.001,
    image_id: str = "",
    source_model: str = "",
) -> DetectionSet:
    """Threshold, clip, optional dimension floor, then the chosen NMS variant."""
    if nms_kind not in NMS_KINDS:
        raise ValueError(f"nms_kind must be one of {NMS_KINDS}")
    dets = boxes_to_detections(boxes, image_id, source_model)
    dets = dets.take(np.flatnonzero(dets.scores >= objectness_threshold))
    dets = dets.clipped(input_side, input_side)
    dets = dimension_floor_filter(dets, defence_min_area)
    if nms_kind == "hard":
        return nms(dets, nt)
    method = "linear" if nms_kind == "soft-linear" else "gaussian"
    return soft_nms(dets, nt, method, sigma, score_floor)


def detect(
    image: np.ndarray,
    model: DetectorModel,
    objectness_threshold: float = 0.5,
    nt: float = 0.5,
    nms_kind: str = "hard",
    defence_min_area: float = 0.0,
    **kwargs,
) -> DetectionSet:
    """Full pipeline on one ``(H, W, 3)`` image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (model.input_side, model.input_side, 3):
        raise ValueError(f"image shape {image.shape} does not match model input side {model.input_side}")
    boxes = model.predict(image).take_image(0)
    return postprocess(boxes, model.input_side, objectness_threshold, nt, nms_kind,
                       defence_min_area, source_model=model.id, **kwargs)


def build_micro(seed: int = 0, variant: str = "A", num_classes: int = 4, input_side: int = 64,
                anchors=None) -> DetectorModel:
    """Deterministic seeded micro detector; variants differ in depth, width and activation."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    layers = VARIANTS[variant]
    stride = int(np.prod([lay[1] for lay in layers]))
    if input_side % stride:
        raise ValueError(f"input_side {input_side} not divisible by total stride {stride}")
    if anchors is None:
        anchors = tuple((pw * input_side / 64, ph * input_side / 64) for pw, ph in DEFAULT_ANCHORS)
    grid = AnchorGrid(input_side // stride, stride, tuple(tuple(map(float, a)) for a in anchors))
    depth = grid.num_anchors * (5 + num_classes)
    arch = []
    cin = 3
    for k, s, cout, act in layers:
        arch.append({"kernel": k, "stride": s, "in": cin, "out": cout, "act": act})
        cin = cout
    arch.append({"kernel": HEAD_KERNEL[variant], "stride": 1, "in": cin, "out": depth, "act": "linear"})

    rng = np.random.default_rng([seed, ord(variant)])
    weights = {}
    for i, layer in enumerate(arch):
        fan_in = layer["kernel"] ** 2 * layer["in"]
        scale = np.sqrt(2.0 / fan_in) if layer["act"] != "linear" else 0.1 / np.sqrt(fan_in)
        weights[f"conv{i}.w"] = rng.normal(0, scale, (layer["kernel"], layer["kernel"], layer["in"], layer["out"]))
        weights[f"conv{i}.b"] = np.zeros(layer["out"])
    head_b = weights[f"conv{len(arch) - 1}.b"].reshape(grid.num_anchors, 5 + num_classes)
    head_b[:, 4] = -4.0  # start with low objectness everywhere
    return DetectorModel(f"micro-{variant}-s{seed}", variant, arch, weights, grid, num_classes,
                         input_side, seed)


# -- training ------------------------------------------------------------------

NOOBJ_WEIGHT = 0.5
COORD_WEIGHT = 2.0
OBJ_SMOOTHING = 0.01  # objectness targets become 0.01 / 0.99


def _train_tape(model: DetectorModel, batch: int) -> Tape:
    g, k = model.anchor_grid, model.num_classes
    s, a = g.grid_s, g.num_anchors
    tb = TapeBuilder()
    img = tb.input("image", (batch, model.input_side, model.input_side, 3))
    obj = tb.input("obj", (batch, s, s, a))
    noobj = tb.input("noobj", (batch, s, s, a))
    txy = tb.input("txy", (batch, s, s, a, 2))
    twh = tb.input("twh", (batch, s, s, a, 2))
    onehot = tb.input("onehot", (batch, s, s, a, k))
    raw = model.raw_graph(tb, img)
    r = tb.reshape(raw, (batch, s, s, a, 5 + k))
    obj5 = tb.reshape(obj, (batch, s, s, a, 1))
    coord = tb.sum(obj5 * tb.square(tb.sigmoid(r[..., 0:2]) - txy))
    coord = coord + tb.sum(obj5 * tb.square(r[..., 2:4] - twh))
    t0 = r[..., 4]
    # binary cross-entropy on logits with smoothed targets:
    # bce(z, y) = relu(z) + log(1 + exp(-|z|)) - y z
    softplus = tb.relu(t0) + tb.log(tb.exp(-(tb.relu(t0) + tb.relu(-t0))) + 1.0)
    eps = OBJ_SMOOTHING
    objness = tb.sum(obj * (softplus - (1.0 - eps) * t0)) \
        + NOOBJ_WEIGHT * tb.sum(noobj * (softplus - eps * t0))
    logp = tb.log(tb.softmax(r[..., 5:], axis=-1) + 1e-12)
    cls = -tb.sum(onehot * logp)
    total = (COORD_WEIGHT * coord + objness + cls) / float(batch)
    return tb.build(loss=total)


def _anchor_iou(w, h, anchors):
    inter = np.minimum(w, anchors[:, 0]) * np.minimum(h, anchors[:, 1])
    return inter / (w * h + anchors[:, 0] * anchors[:, 1] - inter)


def build_targets(model: DetectorModel, truths_list) -> dict[str, np.ndarray]:
    """Responsible-anchor targets: the object's center cell, best-IoU anchor prior."""
    g, k = model.anchor_grid, model.num_classes
    s, a = g.grid_s, g.num_anchors
    n = len(truths_list)
    anchors = np.array(g.anchors)
    t = {
        "obj": np.zeros((n, s, s, a)),
        "txy": np.zeros((n, s, s, a, 2)),
        "twh": np.zeros((n, s, s, a, 2)),
        "onehot": np.zeros((n, s, s, a, k)),
    }
    for b, truths in enumerate(truths_list):
        for (cx, cy, w, h), c in zip(truths.xywh, truths.class_ids):
            col = min(int(cx // g.stride), s - 1)
            row = min(int(cy // g.stride), s - 1)
            best = int(np.argmax(_anchor_iou(w, h, anchors)))
            t["obj"][b, row, col, best] = 1.0
            t["txy"][b, row, col, best] = (cx / g.stride - col, cy / g.stride - row)
            t["twh"][b, row, col, best] = (np.log(w / anchors[best, 0]), np.log(h / anchors[best, 1]))
            t["onehot"][b, row, col, best] = 0.0
            t["onehot"][b, row, col, best, c] = 1.0
    t["noobj"] = 1.0 - t["obj"]
    return t


def _flip(images, truths_list, flags):
    out_imgs = images.copy()
    out_truths = []
    side = images.shape[2]
    for i, (tr, f) in enumerate(zip(truths_list, flags)):
        if f:
            out_imgs[i] = images[i, :, ::-1]
            xywh = tr.xywh.copy()
            xywh[:, 0] = side - xywh[:, 0]
            tr = type(tr)(xywh, tr.class_ids)
        out_truths.append(tr)
    return out_imgs, out_truths


def train_micro(
    model: DetectorModel,
    scenes,
    epochs: int = 60,
    learning_rate: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
    augment: bool = True,
    progress=None,
    weight_decay: float = 0.0,
) -> DetectorModel:
    """Adam on the YOLO-style loss; returns a trained copy (input model untouched).

    ``weight_decay`` is applied decoupled from the adaptive step (AdamW).

    ``progress`` is an optional callable ``(epoch, mean_loss)``.
    """
    trained = model.copy()
    trained._tapes = {}
    history: list[float] = []
    trained.train_log = {"epochs": epochs, "learning_rate": learning_rate, "seed": seed,
                         "batch_size": batch_size, "weight_decay": weight_decay,
                         "history": history}
    if epochs <= 0:
        trained.train_log["final_loss"] = None
        return trained
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not scenes:
        raise ValueError("need at least one training scene")
    images = np.stack([sc.image for sc in scenes])
    truths = [sc.truths for sc in scenes]
    batch_size = min(batch_size, len(images))
    rng = np.random.default_rng(seed)
    params = trained.weights
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(w) for k, w in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(images)
    names = list(params)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            imgs = images[idx]
            trs = [truths[i] for i in idx]
            if augment:
                imgs, trs = _flip(imgs, trs, rng.random(len(idx)) < 0.5)
            targets = build_targets(trained, trs)
            tape = trained.tape("train", len(idx))
            fwd = tape.eval({"image": imgs, **targets, **params})
            loss = float(fwd["loss"])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", history)
            grads = fwd.gradient("loss", names)
            step += 1
            for k in names:
                m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
                v[k] = beta2 * v[k] + (1 - beta2) * grads[k] ** 2
                mhat = m[k] / (1 - beta1**step)
                vhat = v[k] / (1 - beta2**step)
                params[k] = params[k] - learning_rate * (mhat / (np.sqrt(vhat) + eps)
                                                         + weight_decay * params[k])
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
        if progress is not None:
            progress(epoch + 1, history[-1])
    trained.train_log["final_loss"] = history[-1]
    return trained


# -- serialization -------------------------------------------------------------


def save_model(model: DetectorModel, path) -> None:
    """Versioned little-endian binary: header, JSON descriptor, f64 blobs, anchors."""
    names = sorted(model.weights)
    desc = {
        "id": model.id,
        "variant": model.variant,
        "architecture": model.architecture,
        "num_classes": model.num_classes,
        "input_side": model.input_side,
        "seed": model.seed,
        "grid_s": model.anchor_grid.grid_s,
        "stride": model.anchor_grid.stride,
        "weights": [[k, list(model.weights[k].shape)] for k in names],
        "train_log": {k: v for k, v in model.train_log.items() if k != "history"},
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.weights[k], dtype="<f8").tobytes())
        anchors = np.array(model.anchor_grid.anchors, dtype="<f8")
        fh.write(struct.pack("<I", len(anchors)))
        fh.write(anchors.tobytes())


def load_model(path) -> DetectorModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    version, dlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    off = 16
    desc = json.loads(data[off : off + dlen])
    off += dlen
    weights = {}
    for name, shape in desc["weights"]:
        count = int(np.prod(shape))
        weights[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    (na,) = struct.unpack_from("<I", data, off)
    off += 4
    anchors = np.frombuffer(data, dtype="<f8", count=2 * na, offset=off).reshape(na, 2)
    grid = AnchorGrid(desc["grid_s"], desc["stride"], tuple((float(a), float(b)) for a, b in anchors))
    return DetectorModel(desc["id"], desc["variant"], desc["architecture"], weights, grid,
                         desc["num_classes"], desc["input_side"], desc["seed"], desc.get("train_log", {}))
