"""Registry of finite-difference checks covering every differentiable op, loss and network.

Inputs for non-smooth ops are drawn away from their kinks (|x| >= 0.05 for
abs and LeakyReLU, distinct values for maxpool) so central differences with
step 1e-4 never straddle one. Whole networks have thousands of hidden
activations, some of which sit near a kink or a pooling tie, so they use a
1e-6 step and compare a seeded sample of coordinates per tensor.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import GradCase, Tensor
from .config import ModelConfig
from .networks import Critic, Generator, SegNet
from .nn import Module, Parameter
from .style import TRAIN, MappingNetwork, StyleAffine, adain, inject_noise, normalize_instances, style_factors


def _away(rng, shape, margin=0.05):
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.002, n)).reshape(shape)


def _normal(*shape):
    return lambda rng: [rng.standard_normal(shape)]


def _param_slots(module: Module):
    """(container, key) for every parameter, in ``named_parameters`` order."""
    slots = []
    for key, value in vars(module).items():
        if isinstance(value, Parameter):
            slots.append((module, key))
        elif isinstance(value, Module):
            slots.extend(_param_slots(value))
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if isinstance(item, Parameter):
                    slots.append((value, i))
                elif isinstance(item, Module):
                    slots.extend(_param_slots(item))
    return slots


def _get(slot):
    c, k = slot
    return c[k] if isinstance(c, list) else getattr(c, k)


def _set(slot, value):
    c, k = slot
    if isinstance(c, list):
        c[k] = value
    else:
        setattr(c, k, value)


def module_case(name: str, module: Module, make_input, forward, tol: float = 1e-4,
                eps: float = 1e-6, max_coords: int | None = 12) -> GradCase:
    """Check ``forward(module, x)`` w.r.t. the input and every parameter in 64-bit."""
    slots = _param_slots(module)
    originals = [_get(s) for s in slots]

    def fn(x, *params):
        for s, p in zip(slots, params):
            _set(s, p)
        try:
            return forward(module, x)
        finally:
            for s, p in zip(slots, originals):
                _set(s, p)

    def inputs(rng):
        return [make_input(rng)] + [p.data.astype(np.float64) + 0.0 for p in originals]

    return GradCase(name, fn, inputs, eps=eps, tol=tol, max_coords=max_coords)


def _tiny_model(**over) -> ModelConfig:
    base = dict(growth=2, dense_layers=2, stem_channels=2, unet_channels=(2, 2, 2), style_dim=4,
                mapping_channels=(2, 2, 2, 2), critic_channels=(2, 2, 2, 2), seg_channels=(2, 2, 2))
    base.update(over)
    return ModelConfig(**base)


def _prob(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _mask(rng, shape):
    return (rng.random(shape) < 0.4).astype(np.float64)


def build_suite() -> list[GradCase]:
    cases = [
        GradCase("add", lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        GradCase("sub", lambda a, b: a - b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        GradCase("mul", lambda a, b: a * b, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
        GradCase("div", lambda a, b: a / b, lambda r: [r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (2, 3))]),
        GradCase("neg", lambda a: -a, _normal(5)),
        GradCase("square", ad.square, _normal(2, 3)),
        GradCase("sqrt", ad.sqrt, lambda r: [r.uniform(0.2, 2.0, (2, 3))]),
        GradCase("log", ad.log, lambda r: [r.uniform(0.2, 2.0, (2, 3))]),
        GradCase("exp", ad.exp, _normal(2, 3)),
        GradCase("abs", ad.tabs, lambda r: [_away(r, (3, 4))]),
        GradCase("sigmoid", ad.sigmoid, lambda r: [3 * r.standard_normal((3, 4))]),
        GradCase("leaky_relu", lambda a: ad.leaky_relu(a, 0.2), lambda r: [_away(r, (3, 4))]),
        GradCase("leaky_relu_fine", lambda a: ad.leaky_relu(a, 0.2), lambda r: [_away(r, (3, 4))], eps=1e-5,
                 tol=1e-6),
        GradCase("maximum", lambda a: ad.maximum(a, 0.1), lambda r: [_away(r, (3, 4)) + 0.1]),
        GradCase("clamp", lambda a: ad.clamp(a, -0.5, 0.5), lambda r: [_away(r, (4, 4)) * 0.45 + 0.0]),
        GradCase("sum", lambda a: ad.tsum(a, axis=(1, 2)), _normal(2, 3, 4)),
        GradCase("mean", lambda a: ad.mean(a, axis=0), _normal(3, 4)),
        GradCase("reshape", lambda a: ad.reshape(a, (4, 3)), _normal(2, 6)),
        GradCase("flatten", ad.flatten, _normal(2, 2, 3)),
        GradCase("getitem", lambda a: a[:, 1:3], _normal(2, 4)),
        GradCase("concat", lambda a, b: ad.concat([a, b], axis=1),
                 lambda r: [r.standard_normal((2, 2, 3)), r.standard_normal((2, 3, 3))]),
        GradCase("matmul", ad.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        GradCase("linear", ad.linear,
                 lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 4)), r.standard_normal(4)], tol=1e-5),
        GradCase("nearest_upsample3d", ad.nearest_upsample3d, _normal(1, 2, 2, 2, 2)),
        GradCase("maxpool3d", ad.maxpool3d, lambda r: [_distinct(r, (1, 2, 4, 4, 4))]),
        GradCase("pad3d", lambda a: ad.pad3d(a, ((1, 0), (0, 2), (1, 1))), _normal(1, 2, 2, 3, 2)),
        GradCase("channel_stats.mu", lambda a: ad.channel_stats(a)[0], _normal(2, 3, 3, 3, 3)),
        GradCase("channel_stats.sigma", lambda a: ad.channel_stats(a)[1], _normal(2, 3, 3, 3, 3)),
        GradCase("broadcast_channels", lambda v: ad.broadcast_channels(v) * 1.0, _normal(2, 3)),
    ]
    conv_configs = [
        ("conv3d.k3s1p1", 2, 3, 3, 1, 1, (4, 4, 4)),
        ("conv3d.k3s1p0", 2, 2, 3, 1, 0, (4, 5, 4)),
        ("conv3d.k3s1p1.wide", 5, 3, 3, 1, 1, (4, 4, 4)),
        ("conv3d.k4s2p1", 2, 3, 4, 2, 1, (4, 4, 4)),
        ("conv3d.k3s2p1", 3, 2, 3, 2, 1, (5, 5, 5)),
        ("conv3d.k2s1.asym", 4, 2, 2, 1, ((1, 0),) * 3, (3, 3, 3)),
        ("conv3d.k1", 3, 2, 1, 1, 0, (3, 3, 3)),
    ]
    for name, c, co, k, s, p, sp in conv_configs:
        cases.append(GradCase(
            name,
            (lambda s_, p_: lambda x, w, b: ad.conv3d(x, w, b, s_, p_))(s, p),
            (lambda c_, co_, k_, sp_: lambda r: [r.standard_normal((1, c_) + sp_),
                                                 r.standard_normal((co_, c_, k_, k_, k_)) * 0.5,
                                                 r.standard_normal(co_)])(c, co, k, sp),
        ))

    # style stack
    cases += [
        GradCase("normalize_instances", normalize_instances, _normal(2, 2, 3, 3, 3)),
        GradCase("adain", adain, lambda r: [r.standard_normal((2, 3, 3, 3, 3)), r.standard_normal((2, 3)),
                                            r.standard_normal((2, 3))]),
        GradCase("inject_noise",
                 lambda f, p: inject_noise(f, p, TRAIN, np.random.default_rng(5), 0.5),
                 lambda r: [r.standard_normal((2, 3, 2, 2, 2)), r.standard_normal(3)]),
    ]
    affine = StyleAffine(4, 3, np.random.default_rng(0))
    cases.append(module_case("style_factors", affine, lambda r: r.standard_normal((2, 4)),
                             lambda m, w: ad.concat(list(style_factors(w, m)), axis=1), eps=1e-4, max_coords=None))
    mapping = MappingNetwork(16, np.random.default_rng(1), (2, 2, 2, 2), 4)
    cases.append(module_case("mapping_network", mapping, lambda r: r.standard_normal((1, 1, 16, 16, 16)),
                             lambda m, x: m(x)))

    # losses
    cases += [
        GradCase("adv_loss_critic", L.adv_loss_critic, lambda r: [r.standard_normal(3), r.standard_normal(3)]),
        GradCase("adv_loss_generator", L.adv_loss_generator, _normal(4)),
        GradCase("content_l1", lambda a: L.content_l1(a, np.zeros((2, 1, 3, 3, 3))),
                 lambda r: [_away(r, (2, 1, 3, 3, 3))]),
        GradCase("bce_loss", lambda p: L.bce_loss(p, _mask(np.random.default_rng(3), (2, 1, 3, 3, 3))),
                 lambda r: [_prob(r, (2, 1, 3, 3, 3))]),
        GradCase("dice_loss", lambda p: L.dice_loss(p, _mask(np.random.default_rng(4), (1, 1, 3, 3, 3))),
                 lambda r: [_prob(r, (1, 1, 3, 3, 3))]),
        GradCase("seg_loss", lambda p: L.seg_loss(p, _mask(np.random.default_rng(6), (2, 3, 3, 3, 3)), (0, 2)),
                 lambda r: [_prob(r, (2, 3, 3, 3, 3))]),
        GradCase("total_generator_loss", lambda a, c, s: L.total_generator_loss(a, c, s, 100.0, 1.0),
                 lambda r: [r.standard_normal(()), r.standard_normal(()), r.standard_normal(())]),
    ]

    # networks
    crit = Critic((2, 2, 2, 2), np.random.default_rng(7))
    cases.append(module_case("critic", crit, lambda r: r.standard_normal((1, 1, 16, 16, 16)), lambda m, v: m(v)))
    seg = SegNet(2, (2, 2, 2), np.random.default_rng(8))
    cases.append(module_case("segnet", seg, lambda r: r.standard_normal((1, 1, 4, 4, 4)), lambda m, v: m(v)))
    gen = Generator(_tiny_model(use_noise=True, use_adain=True), 16, np.random.default_rng(9))
    for mod in gen.backbone.stem_mod, *gen.backbone.dense_mod:
        mod.noise.scale.data[:] = 0.3
    cases.append(module_case("generator.dcitn", gen, lambda r: r.standard_normal((1, 1, 16, 16, 16)),
                             lambda m, x: m(x, TRAIN, np.random.default_rng(11))))
    ugen = Generator(_tiny_model(backbone="unet", use_noise=False), 16, np.random.default_rng(10))
    cases.append(module_case("generator.unet", ugen, lambda r: r.standard_normal((1, 1, 16, 16, 16)),
                             lambda m, x: m(x)))
    return cases


def run_suite(seed: int = 0, names=None, log=None):
    cases = build_suite()
    if names:
        cases = [c for c in cases if c.name in set(names)]
    results = []
    for i, case in enumerate(cases):
        result = ad.run_cases([case], seed=seed + i)[0]
        results.append(result)
        if log is not None:
            log(f"{'ok  ' if result.passed else 'FAIL'} {case.name:24s} max_rel_err={result.error:.3e} tol={case.tol:g}")
    return results
