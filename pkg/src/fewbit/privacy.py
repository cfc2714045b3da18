"""Feature-inversion attack on the face net and k-anonymity accounting for stored codes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._pgm import write_pgm
from ._rng import child_rng
from .diffcore import Tensor, functional as F, precision
from .featcomp import to_signs
from .validation import check_bits

TARGET_LAYERS = ("pre_final_linear", "post_binarizer")
INITS = ("gray", "uniform")
GATE_ACCURACY = 0.975


class GateError(RuntimeError):
    """Raised when an attack is requested on an insufficiently trained net."""


@dataclass(frozen=True)
class InversionConfig:
    target_layer: str = "pre_final_linear"
    steps: int = 300
    step_size: float = 0.05
    init: str = "gray"
    bounds: tuple = (0.0, 1.0)
    tv_weight: float = 0.0
    max_halvings: int = 30
    stop_on_match: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.target_layer not in TARGET_LAYERS:
            raise ValueError(f"target_layer must be one of {TARGET_LAYERS}, got {self.target_layer!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("bounds must satisfy lo < hi")


@dataclass
class InversionResult:
    image: np.ndarray
    feature_mse: float
    trace: list = field(default_factory=list)
    mse: float | None = None
    psnr: float | None = None

    def summary(self) -> dict:
        return {"feature_mse": self.feature_mse, "mse": self.mse, "psnr": self.psnr,
                "steps": len(self.trace) - 1, "trace": list(self.trace)}

    def save(self, stem) -> None:
        """``<stem>.json`` (summary) and ``<stem>.pgm`` (image)."""
        with open(f"{stem}.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_pgm(f"{stem}.pgm", self.image)


def psnr(mse: float, peak: float = 1.0) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def _net(model):
    net = getattr(model, "net_", model)
    if not hasattr(net, "hidden") or not hasattr(net, "fc2"):
        raise TypeError("model must be a FaceNetClassifier or FaceNet")
    return net


def check_gate(model, threshold: float = GATE_ACCURACY) -> None:
    acc = getattr(model, "train_accuracy_", None)
    if acc is None:
        raise GateError("model has no recorded train accuracy; fit it first")
    if acc < threshold:
        raise GateError(f"face net train accuracy {acc:.4f} is below the {threshold:.3f} gate")


def feature(model, images, target_layer: str = "pre_final_linear") -> Tensor:
    """Differentiable attack feature (eval mode).

    ``pre_final_linear``: the input of the last linear layer, with the hard
    binarizer replaced by identity on bottleneck nets.  ``post_binarizer``:
    the tanh activation feeding the binarizer.
    """
    net = _net(model)
    net.eval()
    h = net.hidden(images)
    fc = net.bottleneck
    if fc is None:
        if target_layer == "post_binarizer":
            raise ValueError("post_binarizer target needs a bottleneck net")
        return h
    a = fc.activate(fc.encode(h))
    return a if target_layer == "post_binarizer" else fc.decode(fc.binarize(a, "identity", None)[0])


def attack_target(model, image, target_layer: str = "pre_final_linear") -> np.ndarray:
    """The stored feature an attacker would hold for ``image``.

    Floats for nets without a bottleneck; for bottleneck nets the stored
    bits, mapped to +-1 (``post_binarizer``) or decoded (``pre_final_linear``).
    """
    net = _net(model)
    net.eval()
    x = np.asarray(image, dtype=np.float64)[None]
    with precision("float64"):
        h = net.hidden(x)
        if net.bottleneck is None:
            return h.data[0]
        bits = net.bottleneck.compress(h.data)
        if target_layer == "post_binarizer":
            return to_signs(bits)[0].astype(np.float64)
        return net.bottleneck.decode(Tensor(to_signs(bits))).data[0]


def _tv(z: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared neighbour difference and its gradient."""
    dx = np.diff(z, axis=1)
    dy = np.diff(z, axis=0)
    scale = dx.size + dy.size
    g = np.zeros_like(z)
    g[:, 1:] += 2 * dx
    g[:, :-1] -= 2 * dx
    g[1:, :] += 2 * dy
    g[:-1, :] -= 2 * dy
    return float((dx ** 2).sum() + (dy ** 2).sum()) / scale, g / scale


def _objective(model, z, target, cfg, need_grad=True):
    zt = Tensor(z[None], requires_grad=need_grad)
    loss_t = F.mse(feature(model, zt, cfg.target_layer), Tensor(target[None]))
    loss = float(loss_t.data)
    grad = None
    if need_grad:
        loss_t.backward()
        grad = zt.grad[0].copy()
    if cfg.tv_weight:
        tv, tv_grad = _tv(z)
        loss += cfg.tv_weight * tv
        if need_grad:
            grad += cfg.tv_weight * tv_grad
    return loss, grad


def _sign_matcher(model, target):
    want = target > 0

    def matched(z) -> bool:
        return bool(np.array_equal(feature(model, z[None], "post_binarizer").data[0] >= 0, want))

    return matched


def invert_features(target, model, cfg: InversionConfig | None = None, reference=None,
                    init_image=None) -> InversionResult:
    """Projected gradient descent on the input image to match ``target``.

    Each step moves the steepest pixel by ``step_size`` (the gradient is
    scaled by its max-abs entry).  The step size is halved whenever a proposed step would increase the
    loss, so the recorded trace never goes up.  ``reference`` (the
    noise-free source image) is used only to score the result.
    """
    cfg = cfg or InversionConfig()
    net = _net(model)
    size = net.image_size
    lo, hi = cfg.bounds
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if init_image is not None:
        z = np.clip(np.asarray(init_image, dtype=np.float64).reshape(size, size), lo, hi)
    elif cfg.init == "gray":
        z = np.full((size, size), 0.5 * (lo + hi))
    else:
        z = child_rng(cfg.seed, "attack").uniform(lo, hi, size=(size, size))
    was_grad = [p.requires_grad for p in net.parameters()]
    net.requires_grad_(False)
    try:
        with precision("float64"):
            matched = _sign_matcher(model, target) if (
                cfg.stop_on_match and cfg.target_layer == "post_binarizer") else None
            loss, grad = _objective(model, z, target, cfg)
            trace = [loss]
            eta = float(cfg.step_size)
            for step in range(int(cfg.steps)):
                if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                    raise FloatingPointError(f"non-finite attack loss at step {step}; trace tail {trace[-5:]}")
                if loss == 0.0 or (matched is not None and matched(z)):
                    break
                # normalized so step_size is in pixel units
                direction = grad / (np.abs(grad).max() + 1e-300)
                for _ in range(cfg.max_halvings + 1):
                    proposal = np.clip(z - eta * direction, lo, hi)
                    new_loss, _ = _objective(model, proposal, target, cfg, need_grad=False)
                    if new_loss <= loss:
                        break
                    eta *= 0.5
                else:
                    proposal, new_loss = z, loss
                if new_loss < loss:
                    z = proposal
                    loss, grad = _objective(model, z, target, cfg)
                trace.append(loss)
    finally:
        for p, g in zip(net.parameters(), was_grad):
            p.requires_grad = g
    result = InversionResult(image=z, feature_mse=loss, trace=trace)
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64).reshape(size, size)
        result.mse = float(np.mean((z - ref) ** 2))
        result.psnr = psnr(result.mse, hi - lo)
    return result


def attack_identities(model, faces, cfg: InversionConfig | None = None, identities: int | None = None,
                      quantize: float | None = None) -> list[InversionResult]:
    """Attack the first image of each identity, scored against its noise-free base pattern.

    ``quantize`` rounds float targets (nets without a bottleneck) before the attack.
    """
    cfg = cfg or InversionConfig()
    count = len(faces.base) if identities is None else min(int(identities), len(faces.base))
    results = []
    for ident in range(count):
        image = faces.images[np.flatnonzero(faces.labels == ident)[0]]
        target = attack_target(model, image, cfg.target_layer)
        if quantize and _net(model).bottleneck is None:
            target = quantize_floats(target, quantize)
        results.append(invert_features(target, model, cfg, reference=faces.base[ident]))
    return results


def quantize_floats(features, granularity: float = 0.01) -> np.ndarray:
    """Round to the nearest multiple of ``granularity``."""
    if not granularity > 0:
        raise ValueError("granularity must be > 0")
    values = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    return np.round(values / granularity) * granularity


# -- k-anonymity ------------------------------------------------------------------


def kanon_expected(n_users, bits) -> float:
    """Expected bucket size n / 2^bits under uniformly distributed codes."""
    if bits < 0:
        raise ValueError("bits must be >= 0")
    return n_users / 2.0 ** bits


def bucket_sizes(codes, prefix: int | None = None) -> np.ndarray:
    """Bucket sizes of distinct (prefix-truncated) codes, sorted by code."""
    codes = check_bits(codes)
    n, width = codes.shape
    prefix = width if prefix is None else int(prefix)
    if not 0 <= prefix <= width:
        raise ValueError(f"prefix length must lie in [0, {width}]")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if prefix == 0:
        return np.array([n], dtype=np.int64)
    _, counts = np.unique(codes[:, :prefix], axis=0, return_counts=True)
    return counts.astype(np.int64)


@dataclass(frozen=True)
class AnonymityReport:
    n_users: int
    bits: int
    expected_k: float
    n_buckets: int
    min_bucket: int
    median_bucket: float
    max_bucket: int
    prefix_length: int
    k_min: int | None = None
    below_k_min: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def kanon_empirical(codes, k_min: int | None = None, prefix: int | None = None) -> AnonymityReport:
    codes = check_bits(codes)
    n, width = codes.shape
    if n == 0:
        raise ValueError("need at least one code")
    prefix = width if prefix is None else prefix
    sizes = bucket_sizes(codes, prefix)
    assert sizes.sum() == n
    low = None if k_min is None else bool(sizes.min() < k_min)
    return AnonymityReport(n, int(prefix), kanon_expected(n, prefix), int(sizes.size), int(sizes.min()),
                           float(np.median(sizes)), int(sizes.max()), int(prefix), k_min, low)


def kanon_truncate(codes, k_min: int) -> tuple[int, np.ndarray]:
    """Longest prefix length L whose every bucket holds >= k_min users.

    Bucket sizes can only shrink as the prefix grows, so the first failing
    length bounds the answer.
    """
    codes = check_bits(codes)
    n, width = codes.shape
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    if k_min > n:
        raise ValueError(f"k_min={k_min} exceeds the number of users ({n}); no prefix length qualifies")
    length = 0
    while length < width and bucket_sizes(codes, length + 1).min() >= k_min:
        length += 1
    return length, codes[:, :length].copy()
