"""Test-time optimisation of the matching networks on a single image pair."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, NonFiniteError
from .features import BackboneConfig, FeatureNet, adapt, preprocess
from .formats import read_weights, write_weights
from .loss import LossConfig, data_loss, sample_rng
from .matcher import FlowField, Matcher, MatcherConfig, MatchResult, resize_flow
from .metrics import aee
from .optim import Adam, OptimSchedule
from .transforms import flow_from_transform, random_transform, warp_image

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    """Per-iteration random warp of the target (A-DMP)."""

    kind: str = "mixed"
    magnitude: float = 8.0
    seed: int = 0
    force_identity: bool = False
    # how the two gradients are combined; Adam is scale invariant up to its eps,
    # and only "mean" makes an identity augmentation reproduce plain DMP exactly
    combine: str = "mean"  # or "sum"

    def __post_init__(self):
        if self.kind not in ("mixed", "homography", "affine", "tps"):
            raise ConfigurationError(f"unknown augmentation kind {self.kind!r}")
        if self.combine not in ("sum", "mean"):
            raise ConfigurationError("combine must be 'sum' or 'mean'")


@dataclass
class RunTrace:
    losses: list = field(default_factory=list)
    augmented_losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (iteration, aee)
    wall_clock: list = field(default_factory=list)  # seconds since start, per iteration
    skipped: list = field(default_factory=list)
    final_aee: float | None = None
    final_flow: FlowField | None = None
    config: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "losses": [None if x is None else float(x) for x in self.losses],
            "augmented_losses": [None if x is None else float(x) for x in self.augmented_losses],
            "lrs": [float(x) for x in self.lrs],
            "snapshots": [{"iteration": int(i), "aee": float(a)} for i, a in self.snapshots],
            "wall_clock": [float(x) for x in self.wall_clock],
            "skipped": [int(i) for i in self.skipped],
            "final_aee": None if self.final_aee is None else float(self.final_aee),
            "config": self.config,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(config: dict) -> int:
    """64-bit hash of a canonical JSON rendering of ``config``."""
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


class DMPModel:
    """Feature extraction and matching networks for one pair."""

    def __init__(self, backbone: BackboneConfig | None = None, matcher: MatcherConfig | None = None,
                 backbone_weights: dict | None = None):
        self.features = FeatureNet(backbone or BackboneConfig(), backbone_weights)
        self.matcher = Matcher(matcher or MatcherConfig(), self.features.config)

    @property
    def backbone_config(self) -> BackboneConfig:
        return self.features.config

    @property
    def matcher_config(self) -> MatcherConfig:
        return self.matcher.config

    def architecture(self) -> dict:
        # the backbone seed fixes the frozen random weights, so it is part of the model
        b = asdict(self.backbone_config)
        m = asdict(self.matcher_config)
        m.pop("seed")
        return {"backbone": b, "matcher": m}

    def config_hash(self) -> int:
        return config_hash(self.architecture())

    def parameters(self) -> dict:
        out = dict(self.features.parameters())
        out.update(self.matcher.parameters())
        return out

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def check_state(self, state: dict):
        """Raise naming the first parameter whose name or shape disagrees with ``state``."""
        params = self.parameters()
        for name, p in params.items():
            if name not in state:
                raise ConfigurationError(f"parameter '{name}' missing from weights")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"parameter '{name}': weights shape {arr.shape} != model shape {p.shape}")
        extra = [k for k in state if k not in params]
        if extra:
            raise ConfigurationError(f"weights contain unknown parameter '{extra[0]}'")

    def load_state(self, state: dict):
        self.check_state(state)
        params = self.parameters()
        for name, p in params.items():
            p.data = np.asarray(state[name], dtype=np.float32).copy()


def save_weights(path, model: DMPModel) -> None:
    """Write the trainable parameters of ``model`` as a DMPW file."""
    write_weights(path, model.state(), model.config_hash())


def load_pretrained(path, model: DMPModel) -> DMPModel:
    """Load DMPW weights into ``model``.

    Parameters are checked by name and shape first, so a channel mismatch
    names the offending parameter; a file whose config hash differs from the
    model's is refused even when all shapes agree.  Use
    :meth:`OptimSchedule.pretrained` for the matching schedule.
    """
    weights, chash = read_weights(path)
    model.check_state(weights)
    if chash != model.config_hash():
        raise ConfigurationError(
            f"{path}: weights were written for config hash {chash:016x}, model is {model.config_hash():016x}")
    model.load_state(weights)
    return model


def padded_size(h: int, w: int) -> tuple[int, int]:
    return -(-h // 16) * 16, -(-w // 16) * 16


def prepare_image(image: np.ndarray) -> T.Tensor:
    """Preprocess, resizing up to the next multiple of 16 when needed."""
    x = preprocess(image)
    h, w = x.shape[1:]
    ph, pw = padded_size(h, w)
    if (ph, pw) != (h, w):
        x = T.upsample_bilinear(x, (ph, pw))
    return x


class PairSession:
    """Cached frozen-backbone features of one (source, target) pair."""

    def __init__(self, model: DMPModel, src: np.ndarray, tgt: np.ndarray, loss: LossConfig):
        self.model = model
        self.loss_config = loss
        self.size = np.asarray(src).shape[:2]
        if np.asarray(tgt).shape[:2] != tuple(self.size):
            raise ConfigurationError("source and target must have the same size")
        self.src = prepare_image(src)
        self.tgt = prepare_image(tgt)
        self.src_raw = model.features.backbone_pyramid(self.src)
        self.tgt_raw = model.features.backbone_pyramid(self.tgt)

    def forward(self, tgt_raw=None) -> tuple[MatchResult, object]:
        feats = self.model.features
        ps = adapt(self.src_raw, feats.adaptation)
        pt = adapt(self.tgt_raw if tgt_raw is None else tgt_raw, feats.adaptation)
        return self.model.matcher(ps, pt), pt

    def loss(self, result: MatchResult, pt, rng, src=None) -> T.Tensor:
        n = len(pt)
        levels = self.loss_config.levels
        tf = {lv: pt[lv % n] for lv in levels}
        return data_loss(self.src if src is None else src, result.flow, None, self.model.features,
                         self.loss_config, rng, target_features=tf)

    def full_resolution(self, flow: T.Tensor) -> np.ndarray:
        with T.no_grad():
            return resize_flow(flow, tuple(self.size)).data


def _flow_aee(est: np.ndarray, gt: FlowField) -> float:
    return aee(FlowField(est), gt, gt.mask)


def estimate_flow(model: DMPModel, src: np.ndarray, tgt: np.ndarray, loss: LossConfig | None = None) -> FlowField:
    """Forward pass only: the flow for the model's current weights, at input resolution."""
    session = PairSession(model, src, tgt, loss or LossConfig())
    with T.no_grad():
        result, _ = session.forward()
    return FlowField(session.full_resolution(result.flow))


def optimize_pair(src: np.ndarray, tgt: np.ndarray, backbone: BackboneConfig | None = None,
                  matcher: MatcherConfig | None = None, loss: LossConfig | None = None,
                  schedule: OptimSchedule | None = None, gt_flow: FlowField | None = None,
                  model: DMPModel | None = None, augment: AugmentConfig | None = None,
                  callback=None) -> tuple[FlowField, RunTrace]:
    """Fit the adaptation layers and inference modules to one pair.

    Returns the flow at the input resolution and the run trace.  ``gt_flow``
    is only used for AEE snapshots in the trace.  With ``augment`` set, each
    iteration adds the loss against a randomly warped copy of the target.
    """
    loss = loss or LossConfig()
    schedule = schedule or OptimSchedule()
    model = model or DMPModel(backbone, matcher)
    session = PairSession(model, src, tgt, loss)
    params = model.parameters()
    opt = Adam(params.values(), schedule.beta1, schedule.beta2, schedule.eps)
    trace = RunTrace(config=_jsonable({
        "backbone": asdict(model.backbone_config), "matcher": asdict(model.matcher_config),
        "loss": asdict(loss), "schedule": asdict(schedule),
        "augment": asdict(augment) if augment else None,
    }))
    tgt_img = np.asarray(tgt, dtype=np.float32)
    backbone_before = {k: p.data.copy() for k, p in model.features.backbone.params.items()} if __debug__ else None

    best, since_best = np.inf, 0
    start = time.perf_counter()
    for t in range(schedule.max_iters):
        lr = schedule.lr(t)
        try:
            result, pt = session.forward()
            if gt_flow is not None and t % schedule.snapshot_every == 0:
                trace.snapshots.append((t, _flow_aee(session.full_resolution(result.flow), gt_flow)))
            main = session.loss(result, pt, sample_rng(loss.rng_seed, t))
        except DegenerateInputError as exc:
            # warn once; a run stuck out of bounds would otherwise log every iteration
            (log.debug if trace.skipped else log.warning)("iteration %d skipped: %s", t, exc)
            trace.skipped.append(t)
            trace.losses.append(None)
            trace.augmented_losses.append(None)
            trace.lrs.append(lr)
            trace.wall_clock.append(time.perf_counter() - start)
            continue
        opt.zero_grad()
        _backward(main, t)
        aug_value = None
        if augment is not None:
            aug_value = _augmented_step(session, tgt_img, augment, loss, t, params)
        opt.step(lr)
        value = main.item()
        trace.losses.append(value)
        trace.augmented_losses.append(aug_value)
        trace.lrs.append(lr)
        trace.wall_clock.append(time.perf_counter() - start)
        if callback is not None:
            callback(t, value)
        if schedule.patience:
            if value < best - schedule.min_improvement:
                best, since_best = value, 0
            else:
                since_best += 1
                if since_best >= schedule.patience:
                    log.info("plateau after %d iterations, stopping", t + 1)
                    break

    with T.no_grad():
        result, _ = session.forward()
    flow = FlowField(session.full_resolution(result.flow))
    if gt_flow is not None:
        trace.final_aee = _flow_aee(flow.uv, gt_flow)
    trace.final_flow = flow
    if backbone_before is not None:
        for k, p in model.features.backbone.params.items():
            assert np.array_equal(p.data, backbone_before[k]), f"backbone parameter {k} changed"
    return flow, trace


def _backward(total: T.Tensor, t: int) -> None:
    try:
        T.backward(total)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"iteration {t} (backward)") from exc


def _augmented_step(session: PairSession, tgt_img: np.ndarray, augment: AugmentConfig, loss: LossConfig, t: int,
                    params: dict) -> float | None:
    """Add the augmented-target loss gradient to the main loss gradient already in ``params``.

    The two backward passes run separately and their gradients are summed
    afterwards, so an identity augmentation doubles the main gradient exactly.
    """
    main_grads = {k: p.grad for k, p in params.items()}
    try:
        aug_loss = _augmented_loss(session, tgt_img, augment, loss, t)
    except DegenerateInputError as exc:
        log.debug("iteration %d: augmented target skipped: %s", t, exc)
        return None
    for p in params.values():
        p.grad = None
    _backward(aug_loss, t)
    for k, p in params.items():
        g, a = main_grads[k], p.grad
        total = a if g is None else g if a is None else g + a
        if total is not None and augment.combine == "mean":
            total = total * 0.5
        p.grad = total
    return aug_loss.item()


def _augmented_loss(session: PairSession, tgt_img: np.ndarray, augment: AugmentConfig, loss: LossConfig,
                    t: int) -> T.Tensor:
    h, w = tgt_img.shape[:2]
    rng = sample_rng(augment.seed, t, 1)
    magnitude = 0.0 if augment.force_identity else augment.magnitude
    spec = random_transform(augment.kind, magnitude, rng, (h, w))
    warped, _ = warp_image(tgt_img, flow_from_transform(spec, h, w).uv)
    raw = session.model.features.backbone_pyramid(prepare_image(warped))
    result, pt = session.forward(tgt_raw=raw)
    return session.loss(result, pt, sample_rng(loss.rng_seed, t))


def optimize_pair_admp(src, tgt, augment: AugmentConfig | None = None, **kwargs):
    """A-DMP: :func:`optimize_pair` with a randomly warped extra target each iteration."""
    return optimize_pair(src, tgt, augment=augment or AugmentConfig(), **kwargs)
