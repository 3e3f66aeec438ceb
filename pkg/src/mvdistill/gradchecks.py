"""Finite-difference verification of every differentiable operation.

Each check builds a deterministic scalar function of one input tensor and
compares tape gradients against central differences. The end-to-end check
differentiates the complete training objective of a miniature two-view
model with respect to every parameter tensor; the stop-gradient constants
(fusion weights, softened teachers) are captured once and frozen so the
probed function is exactly the one the tape differentiated.
"""

from __future__ import annotations

import numpy as np

from . import tensorkit as tk
from .combinator import predict_all
from .distill import DistillTopology, ScheduleParams, kd_loss, total_loss
from .encoder import Encoder, EncoderConfig
from .seeding import substream
from .tensorkit import Tensor, grad_check

TOLERANCE = 1e-4

# Miniature architecture for the end-to-end objective check: two views,
# two classes, one transformer block. Small enough that per-coordinate
# central differences over every parameter stay fast.
TOY_CONFIG = EncoderConfig(
    in_channels=1,
    image_size=12,
    conv_channels=(2, 3),
    dim=8,
    depth=1,
    heads=1,
    ffn=12,
    num_classes=2,
)


def _away_from_zero(rng, shape, low=0.2, high=1.0):
    """Random values bounded away from 0 so relu/clamp kinks are not probed."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def op_checks(seed: int) -> list[tuple[str, float]]:
    """Gradient errors for each primitive (and composed) operation.

    Every random constant is drawn up front; the probed functions must be
    deterministic or central differences are meaningless.
    """
    rng = substream(seed, "gradcheck")
    out: list[tuple[str, float]] = []

    def check(name, f, x_data):
        out.append((name, grad_check(f, Tensor(np.asarray(x_data, dtype=float)))))

    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    weight = Tensor(rng.normal(size=(4, 3)))
    bias = Tensor(rng.normal(size=3))
    x_rows = Tensor(rng.normal(size=(5, 4)))
    probe_26 = Tensor(rng.normal(size=(2, 6)))
    probe_43 = Tensor(rng.normal(size=(4, 3)))
    probe_64 = Tensor(rng.normal(size=(6, 4)))
    probe_46 = Tensor(rng.normal(size=(4, 6)))
    probe_3 = Tensor(rng.normal(size=3))
    ln_x = Tensor(rng.normal(size=(4, 6)))
    gain = Tensor(rng.uniform(0.5, 1.5, size=6))
    shift = Tensor(rng.normal(size=6))

    check("add", lambda x: tk.mean(tk.add(x, b)), rng.normal(size=(4, 2)))
    check("mul", lambda x: tk.mean(tk.mul(x, b)), rng.normal(size=(4, 2)))
    check("scale", lambda x: tk.mean(tk.scale(x, 1.7)), rng.normal(size=(3, 3)))
    check("relu", lambda x: tk.mean(tk.relu(x)), _away_from_zero(rng, (4, 4)))
    check("log", lambda x: tk.mean(tk.log(x)), rng.uniform(0.3, 2.0, size=(5,)))
    check("clamp_min", lambda x: tk.mean(tk.clamp_min(x, 0.1)),
          _away_from_zero(rng, (6,), low=0.3))
    check("reshape", lambda x: tk.mean(tk.mul(tk.reshape(x, (2, 6)), probe_26)),
          rng.normal(size=(3, 4)))
    check("transpose", lambda x: tk.mean(tk.mul(tk.transpose(x), probe_43)),
          rng.normal(size=(3, 4)))
    check("concat/rows", lambda x: tk.mean(tk.mul(tk.concat([x, a], axis=0), probe_64)),
          rng.normal(size=(3, 4)))
    check("concat/cols", lambda x: tk.mean(tk.mul(tk.concat([x, probe_43], axis=1), probe_46)),
          rng.normal(size=(4, 3)))
    check("slice_rows", lambda x: tk.mean(tk.slice_rows(x, 1, 3)), rng.normal(size=(4, 3)))
    check("slice_cols", lambda x: tk.mean(tk.slice_cols(x, 0, 2)), rng.normal(size=(4, 3)))
    check("mean", lambda x: tk.mean(x), rng.normal(size=(3, 5)))
    check("sum_all", lambda x: tk.sum_all(x), rng.normal(size=(2, 3)))
    check("matmul/a", lambda x: tk.mean(tk.matmul(x, b)), rng.normal(size=(3, 4)))
    check("matmul/b", lambda x: tk.mean(tk.matmul(a, x)), rng.normal(size=(4, 2)))
    check("linear/x", lambda x: tk.mean(tk.linear(x, weight, bias)), rng.normal(size=(5, 4)))
    check("linear/weight", lambda x: tk.mean(tk.linear(x_rows, x, bias)), rng.normal(size=(4, 3)))
    check("linear/bias", lambda x: tk.mean(tk.linear(x_rows, weight, x)), rng.normal(size=3))
    check("linear/vector", lambda x: tk.mean(tk.linear(x, weight, bias)), rng.normal(size=4))

    image = Tensor(rng.normal(size=(2, 8, 8)))
    kernel = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.5)
    check("conv2d/x", lambda x: tk.mean(tk.conv2d(x, kernel, 2)), image.data.copy())
    check("conv2d/kernel", lambda x: tk.mean(tk.conv2d(image, x, 2)), kernel.data.copy())
    check("bias_add_channels", lambda x: tk.mean(tk.bias_add_channels(image, x)),
          rng.normal(size=2))

    check("layer_norm/x", lambda x: tk.mean(tk.mul(tk.layer_norm(x, gain, shift), probe_46)),
          rng.normal(size=(4, 6)))
    check("layer_norm/gain", lambda x: tk.mean(tk.layer_norm(ln_x, x, shift)),
          gain.data.copy())
    check("layer_norm/bias", lambda x: tk.mean(tk.layer_norm(ln_x, gain, x)),
          shift.data.copy())

    for tau in (0.5, 1.0, 4.0):
        check(f"softmax_tempered/tau={tau}",
              lambda x, t=tau: tk.mean(tk.mul(tk.softmax_tempered(x, t), probe_3)),
              rng.normal(size=3))

    q_fixed = Tensor(np.full(4, 0.25))
    p_fixed = Tensor(np.array([0.4, 0.3, 0.2, 0.1]))
    check("kl_div/p", lambda x: tk.kl_div(tk.softmax_tempered(x, 1.0), q_fixed),
          rng.normal(size=4))
    check("kl_div/q", lambda x: tk.kl_div(p_fixed, tk.softmax_tempered(x, 1.0)),
          rng.normal(size=4))
    check("cross_entropy", lambda x: tk.cross_entropy(tk.softmax_tempered(x, 1.0), 1),
          rng.normal(size=5))
    check("entropy", lambda x: tk.entropy(tk.softmax_tempered(x, 1.0)), rng.normal(size=5))

    d = 6
    wq, wk, wv, wo = (Tensor(rng.normal(size=(d, d)) * 0.4) for _ in range(4))
    bo = Tensor(rng.normal(size=d) * 0.1)
    attn_probe = Tensor(rng.normal(size=(5, d)))

    def attn_scalar(x):
        return tk.mean(tk.mul(tk.self_attention(x, wq, wk, wv, wo, bo, 2), attn_probe))

    check("self_attention/x", attn_scalar, rng.normal(size=(5, d)) * 0.5)
    check("self_attention/wq",
          lambda w: tk.mean(tk.mul(tk.self_attention(Tensor(attn_probe.data * 0.3), w, wk, wv, wo, bo, 2),
                                   attn_probe)),
          rng.normal(size=(d, d)) * 0.4)

    teacher = Tensor(rng.normal(size=4))
    check("kd_loss/student", lambda x: kd_loss(teacher, x, 2.0), rng.normal(size=4))

    return out


def end_to_end_check(seed: int, config: EncoderConfig = TOY_CONFIG) -> list[tuple[str, float]]:
    """Gradient errors of the full objective w.r.t. every parameter tensor."""
    rng = substream(seed, "gradcheck", "end_to_end")
    encoder = Encoder(config, seed=seed)
    n = 2
    views = [rng.uniform(0.0, 1.0, size=(config.in_channels, config.image_size, config.image_size))
             for _ in range(n)]
    label = int(rng.integers(config.num_classes))
    topology = DistillTopology("b")
    schedule = ScheduleParams()

    def objective(stops):
        sets = predict_all(views, encoder)
        return total_loss(sets, label, topology, schedule, stops=stops)

    stops = objective(None).stops

    results = []
    for name, param in encoder.parameters().items():
        err = grad_check(lambda _p: objective(stops).total, param)
        results.append((f"objective/{name}", err))
    return results


def run_suite(seeds: int = 20, base_seed: int = 0,
              end_to_end_seeds: int | None = None) -> list[tuple[str, float]]:
    """All checks over ``seeds`` seeds; returns (name, worst error) pairs."""
    worst: dict[str, float] = {}
    for s in range(base_seed, base_seed + seeds):
        for name, err in op_checks(s):
            worst[name] = max(worst.get(name, 0.0), err)
    e2e = seeds if end_to_end_seeds is None else end_to_end_seeds
    for s in range(base_seed, base_seed + e2e):
        for name, err in end_to_end_check(s):
            worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())
