"""A small two-branch segmentation network with a hand-written backward pass.

Pixel values in [0, 1] are centered by ``input_shift`` first. The global
branch average-pools the image by ``pool``, runs two 3x3
convolutions with ReLU and upsamples back (nearest) to full resolution.
The local branch runs two 3x3 convolutions with ReLU at full resolution.
Both feature maps are concatenated and mapped to per-leaf logits by a
1x1 convolution. Arrays are channels-last: images ``(B, H, W, C)``.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hierseg.hierarchy import ClassHierarchy
from hierseg.io import write_bytes
from hierseg.loss import DEFAULT_CONFIG, LossConfig, combined_loss_and_grad

MAGIC = b"HSEGWTS\x00"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    num_leaves: int = 3
    global_channels: int = 16
    local_channels: int = 8
    pool: int = 4
    # subtracted from [0, 1] pixel values before the first layers
    input_shift: float = 0.5


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution. ``w`` is ``(out, in, 3, 3)``; returns (out, cols)."""
    bsz, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (B, H, W, C, 3, 3) windows flattened to rows of C*9
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(bsz * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(bsz, h, wd, w.shape[0]), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    bsz, h, wd, c = x_shape
    d2 = dout.reshape(-1, w.shape[0])
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(w.shape[0], -1)).reshape(bsz, h, wd, c, 3, 3)
    dxp = np.zeros((bsz, h + 2, wd + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    b, h, w, c = x.shape
    return x.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))


def avg_pool_backward(d: np.ndarray, k: int) -> np.ndarray:
    return upsample(d, k) / (k * k)


def upsample(x: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(x, k, axis=1), k, axis=2)


def upsample_backward(d: np.ndarray, k: int) -> np.ndarray:
    b, h, w, c = d.shape
    return d.reshape(b, h // k, k, w // k, k, c).sum(axis=(2, 4))


class DualBranchNet:
    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, params=None):
        self.config = config
        self.params: OrderedDict[str, np.ndarray] = (
            OrderedDict((k, np.array(v, dtype=np.float64)) for k, v in params.items())
            if params is not None else self._init_params(np.random.default_rng(seed))
        )
        expected = self.param_shapes(config)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match config {expected}")

    @staticmethod
    def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
        g, f, c = cfg.global_channels, cfg.local_channels, cfg.in_channels
        return {
            "global1.w": (g, c, 3, 3), "global1.b": (g,),
            "global2.w": (g, g, 3, 3), "global2.b": (g,),
            "local1.w": (f, c, 3, 3), "local1.b": (f,),
            "local2.w": (f, f, 3, 3), "local2.b": (f,),
            "head.w": (cfg.num_leaves, g + f), "head.b": (cfg.num_leaves,),
        }

    def _init_params(self, rng: np.random.Generator) -> OrderedDict:
        params = OrderedDict()
        for name, shape in self.param_shapes(self.config).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    def copy(self) -> "DualBranchNet":
        return DualBranchNet(self.config, params=self.params)

    def forward(self, images: np.ndarray, keep: bool = False):
        """Logits ``(B, H, W, num_leaves)``; with ``keep`` also the backward cache."""
        x = np.asarray(images, dtype=np.float64) - self.config.input_shift
        single = x.ndim == 3
        if single:
            x = x[None]
        b, h, w, c = x.shape
        k = self.config.pool
        if h % k or w % k:
            raise ValueError(f"image size {h}x{w} is not divisible by the pool factor {k}")
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        p = self.params

        pooled = avg_pool(x, k)
        g1, g1_cols = conv3x3_forward(pooled, p["global1.w"], p["global1.b"])
        g1r = np.maximum(g1, 0)
        g2, g2_cols = conv3x3_forward(g1r, p["global2.w"], p["global2.b"])
        g2r = np.maximum(g2, 0)
        gup = upsample(g2r, k)

        l1, l1_cols = conv3x3_forward(x, p["local1.w"], p["local1.b"])
        l1r = np.maximum(l1, 0)
        l2, l2_cols = conv3x3_forward(l1r, p["local2.w"], p["local2.b"])
        l2r = np.maximum(l2, 0)

        feats = np.concatenate([gup, l2r], axis=-1)
        logits = feats @ p["head.w"].T + p["head.b"]
        if single:
            logits = logits[0]
        if not keep:
            return logits
        cache = dict(x=x, pooled=pooled, g1=g1, g1_cols=g1_cols, g1r=g1r, g2=g2, g2_cols=g2_cols,
                     l1=l1, l1_cols=l1_cols, l1r=l1r, l2=l2, l2_cols=l2_cols, feats=feats)
        return logits, cache

    def backward_from_logits(self, dlogits: np.ndarray, cache: dict) -> OrderedDict:
        """Parameter gradients given the gradient of the loss w.r.t. the logits."""
        p = self.params
        k = self.config.pool
        g = self.config.global_channels
        d = np.asarray(dlogits, dtype=np.float64)
        if d.ndim == 3:
            d = d[None]
        grads = OrderedDict()
        feats = cache["feats"]
        grads["head.w"] = d.reshape(-1, d.shape[-1]).T @ feats.reshape(-1, feats.shape[-1])
        grads["head.b"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        dfeats = d @ p["head.w"]

        dl2 = dfeats[..., g:] * (cache["l2"] > 0)
        dl1r, grads["local2.w"], grads["local2.b"] = conv3x3_backward(
            dl2, cache["l2_cols"], p["local2.w"], cache["l1r"].shape)
        dl1 = dl1r * (cache["l1"] > 0)
        _, grads["local1.w"], grads["local1.b"] = conv3x3_backward(
            dl1, cache["l1_cols"], p["local1.w"], cache["x"].shape)

        dg2 = upsample_backward(dfeats[..., :g], k) * (cache["g2"] > 0)
        dg1r, grads["global2.w"], grads["global2.b"] = conv3x3_backward(
            dg2, cache["g2_cols"], p["global2.w"], cache["g1r"].shape)
        dg1 = dg1r * (cache["g1"] > 0)
        _, grads["global1.w"], grads["global1.b"] = conv3x3_backward(
            dg1, cache["g1_cols"], p["global1.w"], cache["pooled"].shape)
        return OrderedDict((name, grads[name]) for name in p)


def forward(net: DualBranchNet, image: np.ndarray) -> np.ndarray:
    return net.forward(image)


def batch_loss(net: DualBranchNet, images, targets, hierarchy: ClassHierarchy,
               cfg: LossConfig = DEFAULT_CONFIG) -> float:
    logits = net.forward(np.asarray(images)[None] if np.ndim(images) == 3 else images)
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets[None]
    return sum(combined_loss_and_grad(lg, t, hierarchy, cfg)[0] for lg, t in zip(logits, targets))


def backward(net: DualBranchNet, images, targets, hierarchy: ClassHierarchy,
             cfg: LossConfig = DEFAULT_CONFIG) -> tuple[OrderedDict, float]:
    """Gradients of the combined loss, summed over the images of the batch."""
    images = np.asarray(images)
    targets = np.asarray(targets)
    if images.ndim == 3:
        images, targets = images[None], targets[None]
    logits, cache = net.forward(images, keep=True)
    total = 0.0
    dlogits = np.empty_like(logits)
    for i in range(len(logits)):
        value, dlogits[i] = combined_loss_and_grad(logits[i], targets[i], hierarchy, cfg)
        total += value
    return net.backward_from_logits(dlogits, cache), total


def predict(net: DualBranchNet, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax label mask; ties go to the lowest class index."""
    return np.argmax(net.forward(image), axis=-1).astype(np.uint8)


def weights_to_bytes(net: DualBranchNet) -> bytes:
    manifest = {
        "version": FORMAT_VERSION,
        "config": asdict(net.config),
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()],
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    for v in net.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def weights_from_bytes(data: bytes, num_leaves: int | None = None) -> DualBranchNet:
    head = len(MAGIC) + 8
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise WeightFormatError("not a weight file (bad magic bytes)")
    version, hlen = struct.unpack("<II", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    if len(data) < head + hlen:
        raise WeightFormatError("truncated weight file header")
    try:
        manifest = json.loads(data[head:head + hlen])
        cfg = NetConfig(**manifest["config"])
        layers = [(entry["name"], tuple(entry["shape"])) for entry in manifest["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"corrupt weight manifest: {exc}") from None
    if num_leaves is not None and cfg.num_leaves != num_leaves:
        raise WeightFormatError(f"weights predict {cfg.num_leaves} classes, expected {num_leaves}")
    if dict(layers) != DualBranchNet.param_shapes(cfg) or len(layers) != len(dict(layers)):
        raise WeightFormatError("layer manifest does not match the network configuration")

    offset = head + hlen
    params = OrderedDict()
    for name, shape in layers:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise WeightFormatError(f"truncated weight file while reading {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise WeightFormatError(f"{len(data) - offset} trailing bytes after the last layer")
    return DualBranchNet(cfg, params=params)


def save_weights(net: DualBranchNet, path: str | Path) -> None:
    write_bytes(path, weights_to_bytes(net))


def load_weights(path: str | Path, num_leaves: int | None = None) -> DualBranchNet:
    return weights_from_bytes(Path(path).read_bytes(), num_leaves)
