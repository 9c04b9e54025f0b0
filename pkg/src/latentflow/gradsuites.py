"""Finite-difference gradient suites, grouped by module.

Every check runs in float64 and compares ``backward`` with central
differences (h = 1e-4). Used by ``latentflow gradcheck`` and the test suite.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from latentflow import ndtensor as nt
from latentflow.ndtensor import Parameter, Tensor, precision
from latentflow.ndtensor.gradcheck import check_gradients

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    max_rel_error: float
    tol: float
    n_points: int
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}.{self.name}: max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tol:.0e}, {self.n_points} pts, {self.skipped} kink-straddling skipped, "
                f"{self.seconds:.1f}s)")


def _leaf(rng, *shape, low=None, high=None, avoid_zero=False):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    if avoid_zero:
        data = np.where(np.abs(data) < 0.05, 0.05 * np.sign(data) + 0.05 * (data == 0), data)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalar ``sum(out * r)`` with a fixed random ``r`` so every output entry matters."""
    r = np.random.default_rng(int(rng.integers(1 << 31))).standard_normal(out.shape)
    return (out * r).sum()


def _check(suite, name, fn, tensors, tol=PRIMITIVE_TOL, n_points=100, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    res = check_gradients(fn, tensors, h=1e-4, n_points=n_points, rng=np.random.default_rng(seed))
    return CheckResult(suite, name, res.max_rel_error, tol, len(res.errors), time.perf_counter() - t0,
                       res.skipped)


# -- primitives -----------------------------------------------------------------------

def primitive_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    R = rng
    out = []

    def add(name, build, tensors):
        out.append(lambda: _check("ndtensor", name, lambda: _weighted(build(), np.random.default_rng(7)), tensors))

    # every leaf set holds >= 100 entries so each check samples 100 distinct points
    a, b = _leaf(R, 20, 10), _leaf(R, 10)
    add("add_broadcast", lambda: a + b, [a, b])
    c, d = _leaf(R, 5, 1, 20), _leaf(R, 6, 20)
    add("sub_broadcast", lambda: c - d, [c, d])
    e, f = _leaf(R, 20, 10), _leaf(R, 20, 1)
    add("mul_broadcast", lambda: e * f, [e, f])
    g, h = _leaf(R, 20, 10), _leaf(R, 10, low=0.5, high=2.0)
    add("div_broadcast", lambda: g / h, [g, h])
    x = _leaf(R, 12, 12)
    add("exp", lambda: nt.exp(x * 0.5), [x])
    xp = _leaf(R, 12, 12, low=0.3, high=3.0)
    add("log", lambda: nt.log(xp), [xp])
    add("sqrt", lambda: nt.sqrt(xp), [xp])
    add("pow", lambda: xp ** 1.7, [xp])
    xr = _leaf(R, 12, 12, avoid_zero=True)
    add("relu", lambda: nt.relu(xr), [xr])
    add("abs", lambda: nt.abs(xr), [xr])
    add("sigmoid", lambda: nt.sigmoid(x * 3.0), [x])
    add("tanh", lambda: nt.tanh(x), [x])
    add("sin", lambda: nt.sin(x), [x])
    add("cos", lambda: nt.cos(x), [x])
    cond = R.random((12, 12)) > 0.5
    y = _leaf(R, 12, 12)
    add("where", lambda: nt.where(cond, x, y), [x, y])
    m1, m2 = _leaf(R, 3, 5, 6), _leaf(R, 6, 7)
    add("matmul_batched", lambda: nt.matmul(m1, m2), [m1, m2])
    m3, m4 = _leaf(R, 2, 1, 5, 6), _leaf(R, 3, 6, 4)
    add("matmul_broadcast", lambda: nt.matmul(m3, m4), [m3, m4])
    s = _leaf(R, 4, 5, 6)
    add("sum_axis", lambda: s.sum(axis=1), [s])
    add("mean_axis", lambda: s.mean(axis=(0, 2), keepdims=True), [s])
    add("reshape", lambda: s.reshape(20, 6) * np.arange(120.0).reshape(20, 6), [s])
    add("transpose", lambda: s.transpose(2, 0, 1), [s])
    bb = _leaf(R, 1, 20, 6)
    add("broadcast_to", lambda: nt.broadcast_to(bb, (3, 20, 6)), [bb])
    add("slice", lambda: s[1:, ::2, 2:], [s])
    add("fancy_index", lambda: s[np.array([0, 2, 2, 3]), np.array([1, 1, 3, 4])], [s])
    add("pad", lambda: nt.pad(s, ((0, 1), (2, 0), (1, 1))), [s])
    t1, t2 = _leaf(R, 10, 4), _leaf(R, 10, 8)
    add("concat", lambda: nt.concat([t1, t2], axis=1), [t1, t2])
    t3 = _leaf(R, 10, 6)
    t4 = _leaf(R, 10, 6)
    add("stack", lambda: nt.stack([t3, t4], axis=1), [t3, t4])
    sm = _leaf(R, 10, 12)
    add("softmax", lambda: nt.softmax_lastdim(sm * 2.0), [sm])
    ln = _leaf(R, 10, 12)
    add("layer_norm", lambda: nt.layer_norm(ln), [ln])
    ci, cw, cb = _leaf(R, 2, 5, 5), _leaf(R, 3, 2, 3, 3), _leaf(R, 3)
    add("conv2d_pad1", lambda: nt.conv2d(ci, cw, cb, stride=1, padding=1), [ci, cw, cb])
    bi, bw_ = _leaf(R, 2, 2, 8, 8), _leaf(R, 4, 2, 2, 2)
    add("conv2d_stride2", lambda: nt.conv2d(bi, bw_, None, stride=2, padding=0), [bi, bw_])
    ri, rw = _leaf(R, 2, 7, 6), _leaf(R, 3, 2, 3, 3)
    add("conv2d_stride2_pad1", lambda: nt.conv2d(ri, rw, None, stride=2, padding=1), [ri, rw])
    bm = _leaf(R, 2, 5, 6)
    pts_data = R.uniform(-1.5, 6.5, size=(20, 2))
    pts_data = np.floor(pts_data) + R.uniform(0.1, 0.9, size=pts_data.shape)  # stay off the grid lines
    pts = Tensor(pts_data, requires_grad=True, dtype=np.float64)
    add("bilinear_sample", lambda: nt.bilinear_sample(bm, pts), [bm, pts])
    return out


# -- module-level checks ------------------------------------------------------------------

def _model(cfg_overrides=None):
    from latentflow.config import desk_config
    from latentflow.model import FlowModel

    m = FlowModel(desk_config(**(cfg_overrides or {})))
    m.astype(np.float64)
    return m


def _images(size, seed=0):
    from latentflow.harness.synthetic import synth_pair

    s = synth_pair(size, size, np.random.default_rng(seed), "smooth", 8.0)
    return s


def costvolume_checks(seed: int = 0) -> list:
    from latentflow.costvolume import build_cost_volume, crop_cost_patch

    rng = np.random.default_rng(seed)
    fs, ft = _leaf(rng, 8, 4, 4), _leaf(rng, 8, 4, 4)
    mp = _leaf(rng, 12, 12)
    center = Tensor(np.array([5.3, 6.6]), requires_grad=True, dtype=np.float64)
    return [
        lambda: _check("costvolume", "build_cost_volume",
                       lambda: _weighted(build_cost_volume(fs, ft).data, np.random.default_rng(3)), [fs, ft]),
        lambda: _check("costvolume", "crop_center",
                       lambda: crop_cost_patch(mp, center, 9).values.sum(), [mp, center]),
    ]


def costencoder_checks(seed: int = 0) -> list:
    from latentflow.costencoder import positional_encoding
    from latentflow.costvolume import build_cost_volume

    def patchify_kernels():
        m = _model()
        rng = np.random.default_rng(seed)
        maps = rng.standard_normal((3, 16, 16))
        convs = m.cost_encoder.patchify.convs
        return _check("costencoder", "patchify_kernels",
                      lambda: _weighted(m.cost_encoder.patchify(maps), np.random.default_rng(1)),
                      [p for c in convs for p in (c.weight, c.bias)])

    def summarizer():
        m = _model()
        rng = np.random.default_rng(seed)
        feats = _leaf(rng, 3, 4, 16)
        pe = positional_encoding(np.stack(np.meshgrid(np.arange(2), np.arange(2)), -1).reshape(4, 2), 16)
        s = m.cost_encoder.summarizer
        # sharpen attention so key gradients are not vanishingly small
        s.codewords.data = rng.standard_normal(s.codewords.shape)
        s.key.weight.data = s.key.weight.data * 8.0
        return _check("costencoder", "latent_summarize",
                      lambda: _weighted(s(feats, pe), np.random.default_rng(1)),
                      [feats, s.codewords, s.key.weight, s.value.weight])

    def agt():
        m = _model()
        rng = np.random.default_rng(seed)
        tokens = _leaf(rng, 3, 3, 4, 32)
        ctx = rng.standard_normal((64, 3, 3))
        layer = m.cost_encoder.layers[0]
        params = [tokens] + [p for _, p in layer.named_parameters()]
        return _check("costencoder", "agt_layer",
                      lambda: _weighted(m.cost_encoder.encode(tokens, ctx), np.random.default_rng(1)),
                      params, n_points=100)

    def end_to_end():
        m = _model()
        s = _images(32, seed)
        img1 = Tensor(s.image1, requires_grad=True, dtype=np.float64)
        img2 = Tensor(s.image2, requires_grad=True, dtype=np.float64)

        def fn():
            cv, ctx = m.encode(img1, img2)
            return _weighted(m.cost_encoder(cv, ctx).tokens, np.random.default_rng(2))

        return _check("costencoder", "memory_to_images", fn, [img1, img2], n_points=60)

    return [patchify_kernels, summarizer, agt, end_to_end]


def decoder_checks(seed: int = 0) -> list:
    from latentflow.decoder import build_cost_query, convex_upsample

    def query_position():
        m = _model()
        rng = np.random.default_rng(seed)
        cmap = rng.standard_normal((12, 12))
        p = Tensor(np.array([4.37, 7.61]), requires_grad=True, dtype=np.float64)
        return _check("decoder", "query_position",
                      lambda: _weighted(build_cost_query(m.decoder, cmap, p)[0], np.random.default_rng(1)), [p])

    def gru():
        m = _model()
        rng = np.random.default_rng(seed)
        d = m.decoder
        c = _leaf(rng, 32, 2, 2)
        q = _leaf(rng, 81, 2, 2)
        inp = _leaf(rng, 64, 2, 2)
        f = _leaf(rng, 2, 2, 2)
        h = _leaf(rng, 96, 2, 2, low=-0.9, high=0.9)

        def fn():
            delta, h_new = d.gru_update(c, q, inp, f, h)
            r = np.random.default_rng(4)
            return _weighted(delta, r) + _weighted(h_new, r)

        params = [c, q, f, h, d.gate_conv.weight, d.cand_conv.weight, d.gate_conv.bias]
        return _check("decoder", "gru_update", fn, params, n_points=120)

    def upsample():
        rng = np.random.default_rng(seed)
        f = _leaf(rng, 2, 3, 4)
        logits = _leaf(rng, 576, 3, 4)
        return _check("decoder", "convex_upsample",
                      lambda: _weighted(convex_upsample(f, logits), np.random.default_rng(1)), [f, logits])

    def final_aepe():
        from latentflow.harness.losses import sequence_loss  # noqa: F401 - same import path as training
        m = _model()
        s = _images(32, seed)
        params = m.parameters()

        def fn():
            final = m(s.image1, s.image2).final
            diff = final - s.flow.astype(np.float64)
            return nt.sqrt((diff * diff).sum(axis=0) + 1e-12).mean()

        total = sum(p.size for p in params)
        return _check("decoder", "final_aepe_1pct", fn, params, tol=MODEL_TOL,
                      n_points=max(1, total // 100), seed=seed)

    return [query_position, gru, upsample, final_aepe]


def mcva_checks(seed: int = 0) -> list:
    def head_to_codewords():
        from latentflow.mcva import MCVAConfig, ReconstructionHead, generate_block_masks, pretext_forward

        m = _model()
        m.set_frozen(True, True)
        head = ReconstructionHead(32, np.random.default_rng(5)).astype(np.float64)
        s = _images(96, seed)
        cv, ctx = m.encode(s.image1, s.image2)
        h, w = cv.grid
        masks = generate_block_masks(h, w, 0.5, None, np.random.default_rng(seed))
        centers = np.random.default_rng(seed + 1).uniform(0, 11, size=(h * w, 2))
        params = [m.cost_encoder.summarizer.codewords, head.layers[0].weight,
                  m.decoder.query_embed.layers[0].weight]

        def fn():
            return pretext_forward(m, head, cv, ctx, np.random.default_rng(0), MCVAConfig(),
                                   masks=masks, centers=centers).loss

        return _check("mcva", "head_to_codewords", fn, params, n_points=100)

    return [head_to_codewords]


def model_checks(seed: int = 0, n_points: int = 60) -> list:
    def full_model():
        from latentflow.harness.losses import sequence_loss

        m = _model()
        s = _images(96, seed)
        params = m.parameters()

        def fn():
            return sequence_loss(m(s.image1, s.image2).flows, s.flow, s.valid, 0.8)

        return _check("model", "sequence_loss_96px", fn, params, tol=MODEL_TOL, n_points=n_points, seed=seed)

    return [full_model]


SUITES: dict = {
    "ndtensor": primitive_checks,
    "costvolume": costvolume_checks,
    "costencoder": costencoder_checks,
    "decoder": decoder_checks,
    "mcva": mcva_checks,
    "model": model_checks,
}


def run_suites(names: Optional[list] = None, seed: int = 0,
               report: Optional[Callable[[CheckResult], None]] = None) -> list:
    """Run the named suites (all by default) in float64; returns every ``CheckResult``."""
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        from latentflow.errors import ConfigError

        raise ConfigError(f"unknown gradcheck suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    with precision(np.float64):
        for name in names:
            for check in SUITES[name](seed):
                res = check()
                results.append(res)
                if report is not None:
                    report(res)
    return results
