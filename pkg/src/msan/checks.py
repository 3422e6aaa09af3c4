"""Finite-difference gradient checks for every differentiable op and the full model."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .datamodel import GeneratorConfig, generate_synthetic, max_token_id
from .encoder import birnn_encode, init_birnn, masked_mean
from .hrn import build_ham, init_heads, predict_logits
from .model import ModelConfig, build_params, forward, prepare
from .mpn import MODES, cmr_loss, init_mim_gate, mim_alpha, modulate_moment_scores
from .tensorcore import GradCheckReport, ParamStore, Tensor


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _weights(rng, shape):
    # fixed random projection so every output element contributes to the scalar loss
    return rng.normal(size=shape)


def _op_cases(seed: int) -> dict[str, Callable[[], tuple[ParamStore, Callable[[ParamStore], Tensor]]]]:
    def case(build):
        def make():
            rng = np.random.default_rng([seed, zlib.crc32(build.__name__.encode())])
            return build(rng)

        return make

    cases = {}

    def register(fn):
        cases[fn.__name__.removeprefix("case_")] = case(fn)
        return fn

    def store(rng, **arrays):
        p = ParamStore(rng_seed=seed)
        for name, shape in arrays.items():
            p.add(name, rng.normal(size=shape))
        return p

    @register
    def case_matmul(rng):
        p = store(rng, a=(3, 4), b=(4, 2))
        w = _weights(rng, (3, 2))
        return p, lambda p: tc.sum(tc.mul(tc.matmul(p["a"], p["b"]), w))

    @register
    def case_matmul_batched(rng):
        p = store(rng, a=(2, 3, 4), b=(2, 4, 5), c=(5, 2))
        w = _weights(rng, (2, 3, 2))
        return p, lambda p: tc.sum(tc.mul(tc.matmul(tc.matmul(p["a"], p["b"]), p["c"]), w))

    @register
    def case_add_sub_mul_broadcast(rng):
        p = store(rng, a=(3, 4), b=(4,), c=(3, 1))
        w = _weights(rng, (3, 4))
        return p, lambda p: tc.sum(tc.mul(tc.sub(tc.mul(tc.add(p["a"], p["b"]), p["c"]), 0.5), w))

    @register
    def case_relu(rng):
        p = ParamStore(rng_seed=seed)
        p.add("x", _away_from_zero(rng, (4, 5)))
        w = _weights(rng, (4, 5))
        return p, lambda p: tc.sum(tc.mul(tc.relu(p["x"]), w))

    @register
    def case_sigmoid_tanh(rng):
        p = store(rng, x=(4, 5))
        w = _weights(rng, (4, 5))
        return p, lambda p: tc.sum(tc.mul(tc.tanh(tc.sigmoid(p["x"])), w))

    @register
    def case_mean_reshape_transpose(rng):
        p = store(rng, x=(2, 3, 4))
        w = _weights(rng, (4, 3))
        return p, lambda p: tc.sum(tc.mul(tc.transpose(tc.mean(p["x"], axis=0)), w))

    @register
    def case_take(rng):
        p = store(rng, x=(6, 3))
        idx = np.array([[0, 2, 2], [5, 1, 0]])
        mask = np.array([[True, True, False], [True, True, True]])
        w = _weights(rng, (2, 3, 3))
        return p, lambda p: tc.sum(tc.mul(tc.take(p["x"], idx, mask=mask), w))

    @register
    def case_softmax_masked(rng):
        p = store(rng, x=(3, 5))
        mask = np.ones((3, 5), dtype=bool)
        mask[1, 3:] = False
        w = _weights(rng, (3, 5))
        return p, lambda p: tc.sum(tc.mul(tc.softmax(p["x"], mask=mask), w))

    @register
    def case_log_softmax(rng):
        p = store(rng, x=(3, 5))
        w = _weights(rng, (3, 5))
        return p, lambda p: tc.sum(tc.mul(tc.log_softmax(p["x"]), w))

    @register
    def case_concat(rng):
        p = store(rng, a=(2, 3, 2), b=(2, 3, 4))
        w = _weights(rng, (2, 3, 6))
        return p, lambda p: tc.sum(tc.mul(tc.concat_feature([p["a"], p["b"]]), w))

    @register
    def case_maxpool_time(rng):
        p = ParamStore(rng_seed=seed)
        # distinct values keep the argmax away from ties
        p.add("x", rng.permutation(2 * 5 * 3).reshape(2, 5, 3) * 0.1 + rng.uniform(0, 0.01, (2, 5, 3)))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        w = _weights(rng, (2, 3))
        return p, lambda p: tc.sum(tc.mul(tc.maxpool_time(p["x"], mask), w))

    @register
    def case_cross_entropy(rng):
        p = store(rng, x=(4, 5))
        return p, lambda p: tc.cross_entropy(p["x"], np.array([0, 3, 4, 1]))

    @register
    def case_lstm(rng):
        p = ParamStore(rng_seed=seed)
        p.add("x", rng.normal(size=(2, 4, 3)))
        p.uniform("w_in", (3, 8), 0.5)
        p.uniform("w_rec", (2, 8), 0.5)
        p.uniform("bias", (8,), 0.5)
        w = _weights(rng, (2, 4, 2))
        return p, lambda p: tc.sum(tc.mul(tc.lstm(p["x"], p["w_in"], p["w_rec"], p["bias"]), w))

    @register
    def case_birnn_masked_mean(rng):
        p = ParamStore(rng_seed=seed)
        p.add("x", rng.normal(size=(2, 5, 3)))
        init_birnn(p, "enc", 3, 4)
        lengths = np.array([5, 3])
        mask = np.arange(5)[None, :] < lengths[:, None]
        w = _weights(rng, (2, 4))
        return p, lambda p: tc.sum(tc.mul(masked_mean(birnn_encode(p["x"], p, "enc", lengths), mask), w))

    @register
    def case_ham_heads(rng):
        p = store(rng, V=(2, 4, 4), S=(2, 3, 4), H=(10, 3, 4))
        init_heads(p, 4)
        v_mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        s_mask = np.ones((2, 3), dtype=bool)
        h_mask = np.ones((10, 3), dtype=bool)
        h_mask[::3, 2] = False
        w = _weights(rng, (2, 5))

        def f(p):
            ctx = build_ham(p["V"], p["S"], p["H"], v_mask, s_mask, h_mask, group=5)
            lv, ls = predict_logits(ctx, p)
            return tc.sum(tc.mul(tc.add(lv, tc.mul(ls, 0.5)), w))

        return p, f

    for mode in MODES:

        def case_mim(rng, mode=mode):
            p = store(rng, q=(3, 4), mv=(3,), ms=(3,))
            init_mim_gate(p, "mim", 4)
            w = _weights(rng, (2, 3))

            def f(p):
                a = mim_alpha(p["q"], p, "mim")
                mv, ms = modulate_moment_scores(tc.sigmoid(p["mv"]), tc.sigmoid(p["ms"]), a, mode)
                return tc.add(tc.sum(tc.mul(mv, w[0])), tc.sum(tc.mul(ms, w[1])))

            return p, f

        case_mim.__name__ = f"case_mim_{mode}"
        register(case_mim)

    @register
    def case_cmr(rng):
        p = ParamStore(rng_seed=seed)
        # hinge arguments kept away from the kink
        p.add("pos", np.array([0.9, 0.5, 0.7]))
        p.add("neg", np.array([0.2, 0.6, 0.1]))
        return p, lambda p: cmr_loss(p["pos"], p["neg"], margin=0.2)

    return cases


def full_model_case(seed: int):
    """Tiny MSAN on two synthetic records; loss = CE + cross-modal ranking."""
    gcfg = GeneratorConfig(n_clips=2, n_frames=8, n_sentences=4, words_per_sentence=2)
    recs = generate_synthetic(gcfg, seed=seed)
    mcfg = ModelConfig(vocab_size=max_token_id(recs) + 1, d=6, d_emb=4)
    params = build_params(mcfg, seed)
    batch = [prepare(r, mcfg) for r in recs]

    def f(p):
        return forward(p, mcfg, batch, train=True, rng=np.random.default_rng(seed)).loss

    return params, f


def run_gradchecks(seed: int = 0, tol: float = 1e-4, samples: int = 20) -> dict[str, GradCheckReport]:
    """Gradient check each op and the full model; returns reports keyed by case name."""
    reports = {}
    for name, make in _op_cases(seed).items():
        params, f = make()
        reports[name] = tc.grad_check(f, params, tol=tol, samples=samples, seed=seed)
    params, f = full_model_case(seed)
    reports["msan_full"] = tc.grad_check(f, params, tol=tol, samples=samples, seed=seed)
    return reports
