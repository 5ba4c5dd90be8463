"""Shared finite-difference instances for the unit tests and the acceptance gate."""

import numpy as np

from dmp import tensor as T
from dmp.correlation import global_correlation, local_correlation, soft_argmax
from dmp.engine import DMPModel, PairSession
from dmp.features import BackboneConfig
from dmp.loss import LossConfig, sample_rng
from dmp.matcher import MatcherConfig, resize_flow, warp_features
from dmp.tensor import Tensor
from dmp.transforms import random_transform, synth_pair, textured_image


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64)


def op_cases(rng):
    """(name, builder) pairs; each builder returns (scalar fn, leaves) in float64."""
    cases = []

    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    cases.append(("add_broadcast", lambda: T.tsum(T.add(a, b) * T.add(a, b)), [a, b]))
    a2, b2 = leaf(rng, 2, 3), leaf(rng, 2, 1)
    cases.append(("sub_mul", lambda: T.tsum(T.mul(T.sub(a2, b2), a2)), [a2, b2]))
    a3, b3 = leaf(rng, 3, 3), leaf(rng, 3, 3, low=0.5, high=2.0)
    cases.append(("div", lambda: T.tsum(T.div(a3, b3)), [a3, b3]))
    n1 = leaf(rng, 4)
    cases.append(("neg_exp", lambda: T.tsum(T.exp(T.neg(n1))), [n1]))
    l1 = leaf(rng, 5, low=0.2, high=3.0)
    cases.append(("log", lambda: T.tsum(T.log(l1)), [l1]))
    r1 = Tensor(rng.choice([-1, 1], 8) * rng.uniform(0.1, 1.0, 8), requires_grad=True)
    cases.append(("relu", lambda: T.tsum(T.relu(r1) * T.relu(r1)), [r1]))
    wa, wb = leaf(rng, 3, 3), leaf(rng, 3, 3)
    cond = rng.uniform(size=(3, 3)) > 0.5
    cases.append(("where", lambda: T.tsum(T.where(cond, wa, wb) * wa), [wa, wb]))
    m1 = leaf(rng, 3, 4, 2)
    cases.append(("sum_mean_axes", lambda: T.tsum(T.mean(m1 * m1, axis=1) * T.tsum(m1, axis=(0, 2)).mean()), [m1]))
    rs = leaf(rng, 2, 6)
    cases.append(("reshape_transpose", lambda: T.tsum(T.transpose(T.reshape(rs, (3, 4))) * T.reshape(rs, (4, 3))),
                  [rs]))
    c1, c2 = leaf(rng, 2, 3, 3), leaf(rng, 1, 3, 3)
    cases.append(("concat_channels", lambda: T.tsum(T.concat_channels([c1, c2]) * T.concat_channels([c2, c1])),
                  [c1, c2]))
    tk = leaf(rng, 4, 5)
    idx = np.array([0, 3, 3, 1])
    cases.append(("take_repeated", lambda: T.tsum(T.take(tk, idx, axis=1) * T.take(tk, idx, axis=1)), [tk]))
    dg = leaf(rng, 4, 4)
    cases.append(("diagonal", lambda: T.tsum(T.exp(T.diagonal(dg))), [dg]))
    ma, mb = leaf(rng, 3, 4), leaf(rng, 4, 2)
    cases.append(("matmul", lambda: T.tsum(T.matmul(ma, mb) * T.matmul(ma, mb)), [ma, mb]))
    sm = leaf(rng, 3, 5)
    wsm = rng.standard_normal((3, 5))
    cases.append(("softmax", lambda: T.tsum(T.softmax(sm, temperature=0.3, axis=1) * wsm), [sm]))
    ls = leaf(rng, 4, 6)
    wls = rng.standard_normal((4, 6))
    cases.append(("log_softmax", lambda: T.tsum(T.log_softmax(ls, axis=0) * wls), [ls]))
    cx, cw, cb = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    wco = rng.standard_normal((2, 3, 5, 5))
    cases.append(("conv2d_pad1", lambda: T.tsum(T.conv2d(cx, cw, cb, 1, 1) * wco), [cx, cw, cb]))
    sx, sw = leaf(rng, 1, 2, 6, 6), leaf(rng, 2, 2, 4, 4)
    wso = rng.standard_normal((1, 2, 3, 3))
    cases.append(("conv2d_stride2", lambda: T.tsum(T.conv2d(sx, sw, None, 2, 1) * wso), [sx, sw]))
    nx = leaf(rng, 4, 3, 3)
    wn = rng.standard_normal((4, 3, 3))
    cases.append(("l2_normalize", lambda: T.tsum(T.l2_normalize(nx) * wn), [nx]))
    bm = leaf(rng, 2, 5, 6)
    # keep coordinates away from integer kinks
    bc = Tensor(np.stack([rng.integers(-1, 6, (3, 4)) + rng.uniform(0.1, 0.9, (3, 4)),
                          rng.integers(-1, 5, (3, 4)) + rng.uniform(0.1, 0.9, (3, 4))]), requires_grad=True)
    wb_ = rng.standard_normal((2, 3, 4))
    cases.append(("bilinear_sample", lambda: T.tsum(T.bilinear_sample(bm, bc)[0] * wb_), [bm, bc]))
    ux = leaf(rng, 2, 3, 4)
    wu = rng.standard_normal((2, 7, 5))
    cases.append(("upsample_bilinear", lambda: T.tsum(T.upsample_bilinear(ux, (7, 5)) * wu), [ux]))
    px = leaf(rng, 1, 2, 5, 5)
    pw = leaf(rng, 3, 2, 3, 3)
    cases.append(("conv_relu_softmax_neglog",
                  lambda: -T.tsum(T.log(T.softmax(T.relu(T.conv2d(px, pw, None, 1, 1)).reshape(3, 25), axis=0)
                                        + 1e-3)), [px, pw]))
    return cases


def end_to_end_case(seed: int):
    """Scalar loss of the full match-and-loss pipeline and its trainable leaves, in float64.

    The zero-initialised layers are perturbed first so every path carries gradient.
    """
    rng = np.random.default_rng(seed)
    img = textured_image((32, 32), seed)
    src, tgt, _ = synth_pair(img, random_transform("homography", 2.0, rng, (32, 32)))
    model = DMPModel(BackboneConfig(channels=(8, 8, 8, 8), chain_channels=(4, 4, 8, 8), reference_size=32),
                     MatcherConfig(radius=1, hidden_channels=(6, 6, 6, 6, 6), softargmax_temperature=0.5))
    for p in model.features.backbone.params.values():
        p.data = p.data.astype(np.float64)
    params = list(model.parameters().values())
    for p in params:
        p.data = (p.data + rng.uniform(-0.05, 0.05, p.shape)).astype(np.float64)
    session = PairSession(model, src, tgt, LossConfig(sample_count=16, confidence=0.0))
    for name in ("src", "tgt"):
        setattr(session, name, Tensor(getattr(session, name).data, dtype=np.float64))
    session.src_raw = model.features.backbone_pyramid(session.src)
    session.tgt_raw = model.features.backbone_pyramid(session.tgt)

    def fn():
        result, pt = session.forward()
        return session.loss(result, pt, sample_rng(seed, 0))

    return fn, params


def cascade_oracle(src, tgt, radius=4, temp=0.02):
    """The pure soft-argmax cascade, assembled from the primitives."""
    prev = None
    for lvl, (ds, dt) in enumerate(zip(src, tgt)):
        if lvl == 0:
            flow = soft_argmax(global_correlation(ds, dt), temp)
        else:
            guide = resize_flow(prev, dt.shape[1:])
            warped, _ = warp_features(ds, guide)
            flow = soft_argmax(local_correlation(warped, dt, radius), temp) + guide
        prev = flow
    return prev
