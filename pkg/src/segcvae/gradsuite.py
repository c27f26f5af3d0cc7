"""Finite-difference verification sweep over primitives and loss terms.

Each case builds a fresh random configuration, runs the reverse-mode
gradients against central differences, and reports the worst relative
error.  Loss cases that involve branch selection are only generated when
the per-example selection gaps are wide enough that an h-perturbation
cannot flip the argmax.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as mod
from .autodiff import Rng, Tensor

TOLERANCE = 1e-4


def _t(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def primitive_cases(seed: int):
    """One (name, f, inputs) triple per primitive, shapes drawn from seed."""
    r = np.random.default_rng(seed)

    def rand(*shape, shift=0.0):
        return _t(r.normal(size=shape) + shift)

    w_soft = Tensor(r.normal(size=(2, 4)))
    w_logsoft = Tensor(r.normal(size=(2, 4)))
    ids = np.array([0, 2, 1])
    gather_ids = np.array([3, 0])
    mask = (r.uniform(0, 1, size=(2, 3)) > 0.3).astype(np.int64)
    mask[:, 0] = 1

    gru = ad.gru_params(3, 4, Rng(seed * 7 + 1))
    gru_steps = [rand(2, 3) for _ in range(3)]

    def gru_case(wx, wh, bx, bh, *steps):
        p = ad.GruParams(wx=wx, wh=wh, bx=bx, bh=bh)
        return ad.tsum(ad.power(ad.gru_encode(p, list(steps), mask=mask), 2.0))

    out_w, out_b = ad.glorot((4, 5), Rng(seed * 7 + 2)), _t(np.zeros(5))
    dec_state, dec_x = rand(2, 4), rand(2, 3)

    def decode_case(wx, wh, bx, bh, ow, ob, st, x):
        p = ad.GruParams(wx=wx, wh=wh, bx=bx, bh=bh)
        logits, nxt = ad.gru_decode_step(p, ow, ob, st, x)
        return ad.add(ad.tsum(ad.power(logits, 2.0)), ad.tsum(ad.power(nxt, 2.0)))

    return [
        ("add", lambda a, b: ad.tsum(ad.add(a, b)), [rand(3, 4), rand(4)]),
        ("sub", lambda a, b: ad.tsum(ad.sub(a, b)), [rand(2, 3), rand(2, 3)]),
        ("mul", lambda a, b: ad.tsum(ad.mul(a, b)), [rand(2, 3), rand(2, 3)]),
        ("div", lambda a, b: ad.tsum(ad.div(a, b)), [rand(2, 3), rand(2, 3, shift=3.0)]),
        ("power", lambda a: ad.tsum(ad.power(a, 3.0)), [rand(4, shift=2.0)]),
        ("exp", lambda a: ad.tsum(ad.exp(a)), [rand(2, 3)]),
        ("log", lambda a: ad.tsum(ad.log(a)), [rand(2, 3, shift=4.0)]),
        ("sqrt", lambda a: ad.tsum(ad.sqrt(a)), [rand(5, shift=4.0)]),
        ("tanh", lambda a: ad.tsum(ad.tanh(a)), [rand(2, 4)]),
        ("sigmoid", lambda a: ad.tsum(ad.sigmoid(a)), [rand(2, 4)]),
        ("abs", lambda a: ad.tsum(ad.absolute(a)), [rand(3, 3, shift=2.0)]),
        ("clamp", lambda a: ad.tsum(ad.power(ad.clamp(a, -0.8, 0.8), 2.0)), [rand(6)]),
        ("sum", lambda a: ad.tsum(ad.power(ad.tsum(a, axis=1), 2.0)), [rand(3, 4)]),
        ("mean", lambda a: ad.tmean(ad.power(a, 2.0)), [rand(3, 4)]),
        ("reshape", lambda a: ad.tsum(ad.power(ad.reshape(a, (2, 6)), 2.0)), [rand(3, 4)]),
        ("transpose", lambda a: ad.tsum(ad.power(ad.transpose(a, (1, 0)), 2.0)), [rand(3, 4)]),
        ("concat", lambda a, b: ad.tsum(ad.power(ad.concat([a, b], axis=1), 2.0)),
         [rand(2, 3), rand(2, 2)]),
        ("take", lambda a: ad.tsum(ad.power(a[1:, :2], 2.0)), [rand(3, 4)]),
        ("take_rows", lambda a: ad.tsum(ad.power(ad.take_rows(a, ids), 2.0)), [rand(4, 3)]),
        ("gather_last", lambda a: ad.tsum(ad.power(ad.gather_last(a, gather_ids), 2.0)),
         [rand(2, 4)]),
        ("matmul", lambda a, b: ad.tsum(ad.matmul(a, b)), [rand(3, 4), rand(4, 2)]),
        ("matmul_batched", lambda a, b: ad.tsum(ad.matmul(a, b)),
         [rand(2, 3, 4), rand(4, 3)]),
        ("softmax_rows", lambda a: ad.tsum(ad.mul(ad.softmax_rows(a), w_soft)), [rand(2, 4)]),
        ("log_softmax", lambda a: ad.tsum(ad.mul(ad.log_softmax(a), w_logsoft)), [rand(2, 4)]),
        ("gumbel_softmax", lambda a: ad.tsum(ad.power(
            ad.gumbel_softmax(a, tau=0.7, noise=False), 2.0)), [rand(2, 4)]),
        ("conv_seq", lambda c, k: ad.tsum(ad.power(ad.conv_seq(c, k), 2.0)),
         [rand(2, 6, 3), rand(2, 3, 1, 2)]),
        ("gru_encode", gru_case, [gru.wx, gru.wh, gru.bx, gru.bh] + gru_steps),
        ("gru_decode_step", decode_case,
         [gru.wx, gru.wh, gru.bx, gru.bh, out_w, out_b, dec_state, dec_x]),
        ("gaussian_kl", lambda *a: ad.tsum(ad.gaussian_kl(*a)),
         [rand(2, 3) for _ in range(4)]),
        ("reparameterize", lambda mu, lv: ad.tsum(ad.power(
            ad.reparameterize(mu, lv, Rng(seed)), 2.0)), [rand(2, 3), rand(2, 3)]),
        ("cosine", lambda u, v: ad.tsum(ad.cosine(u, v)),
         [rand(2, 4, shift=1.0), rand(2, 4, shift=1.0)]),
    ]


def _tiny_model(seed: int, num_triggers: int = 2):
    r = np.random.default_rng(seed)
    config = mod.ModelConfig(
        vocab_size=9, max_len=5, emb_dim=4, hidden_dim=8, latent_dim=3,
        kernel_width=2, conv_channels=2, num_triggers=num_triggers, tau=0.5)
    net = mod.SegCVAE(config, r.normal(size=(9, 4)) * 0.5, Rng(seed))
    batch = 3
    ctx = r.integers(4, 9, size=(batch, 5)).astype(np.int64)
    ctx[:, -1] = 0  # one padded tail position
    resp = np.zeros((batch, 5), dtype=np.int64)
    resp[:, 0] = 2
    resp[:, 1:3] = r.integers(4, 9, size=(batch, 2))
    resp[:, 3] = 3
    return net, ctx, resp


def _selection_gap(net, ctx, resp, noise_seed: int) -> float:
    """Smallest per-example gap between the best and second-best branch,
    with the noise stream consumed exactly as in forward_losses."""
    if net.config.num_triggers < 2:
        return np.inf  # a single branch cannot flip
    rng = Rng(noise_seed)
    with ad.no_grad():
        r_e = net.encode_ids(resp)
        xs = net.prominent_semantics(ctx, rng, noise=True)
        values = np.stack([
            net.elbo(resp, x, r_e, 0.5, rng, want_generated=True)["elbo"].values
            for x in xs])
    top2 = np.sort(values, axis=0)[-2:]
    return float((top2[1] - top2[0]).min())


def loss_cases(seed: int):
    """(name, f, inputs) triples for every loss term.

    ``elbo`` and ``total`` differentiate through the whole network with the
    model parameters as the checked inputs; the three norms are checked on
    raw representation tensors as well.
    """
    r = np.random.default_rng(seed ^ 0x5EED)
    r_gt = Tensor(r.normal(size=(3, 4)))
    cases = [
        ("loss_san", lambda x: mod.san(x), [_t(r.normal(size=(3, 5)))]),
        ("loss_scn", lambda c, a, b: mod.scn(c, [a, b]),
         [_t(r.normal(size=(2, 5)) + 1.0), _t(r.normal(size=(2, 5))),
          _t(r.normal(size=(2, 5)))]),
        ("loss_sdn", lambda g: mod.sdn(r_gt, g), [_t(r.normal(size=(3, 4)))]),
    ]

    net, ctx, resp = _tiny_model(seed, num_triggers=1 + seed % 3)
    names = sorted(net.params)
    tensors = [net.params[k] for k in names]

    def elbo_case(*params):
        rng = Rng(seed + 3)
        r_e = net.encode_ids(resp)
        x = net.prominent_semantics(ctx, rng, noise=True)[0]
        return ad.tmean(net.elbo(resp, x, r_e, 0.5, rng)["elbo"])

    cases.append(("loss_elbo", elbo_case, tensors))

    # pick a noise seed whose branch selection cannot flip under +-h
    total_net, total_ctx, total_resp = _tiny_model(seed + 101,
                                                   num_triggers=2 + seed % 2)
    noise_seed = seed + 11
    for _ in range(20):
        if _selection_gap(total_net, total_ctx, total_resp, noise_seed) > 1e-3:
            break
        noise_seed += 1

    total_names = sorted(total_net.params)
    total_tensors = [total_net.params[k] for k in total_names]
    batch = total_ctx.shape[0]
    # the distillation target is stop-gradiented, so the difference quotient
    # must hold it fixed while the parameters move
    with ad.no_grad():
        frozen_rgt = total_net.encode_ids(total_resp).values.copy()

    def total_case(*params):
        rng = Rng(noise_seed)
        r_e = total_net.encode_ids(total_resp)
        xs = total_net.prominent_semantics(total_ctx, rng, noise=True)
        branches = [total_net.elbo(total_resp, x, r_e, 0.5, rng, want_generated=True)
                    for x in xs]
        positive = np.atleast_1d(mod.select_positive([b["elbo"] for b in branches]))
        one_hot = np.zeros((len(xs), batch))
        one_hot[positive, np.arange(batch)] = 1.0
        elbo_plus = Tensor(np.zeros(batch))
        generated = Tensor(np.zeros((batch, total_net.config.hidden_dim)))
        for i, b in enumerate(branches):
            elbo_plus = ad.add(elbo_plus, ad.mul(b["elbo"], Tensor(one_hot[i])))
            generated = ad.add(generated, ad.mul(b["generated"], Tensor(one_hot[i][:, None])))
        san_v = mod.san(ad.stack_rows(xs))
        scn_v = mod.scn(total_net.encode_ids(total_ctx), xs)
        sdn_v = mod.sdn(Tensor(frozen_rgt), generated)
        return mod.total_loss(ad.tmean(elbo_plus), san_v, scn_v, sdn_v, lambda_w=1.0)

    cases.append(("loss_total", total_case, total_tensors))
    return cases


def run_suite(primitive_rounds: int = 4, loss_rounds: int = 2,
              sample_coords: int = 8, base_seed: int = 0) -> list[tuple[str, float, int]]:
    """Run the whole sweep; returns (name, worst error, configurations)."""
    results = []
    picker = Rng(base_seed + 999)
    worst: dict[str, float] = {}
    count: dict[str, int] = {}
    for round_idx in range(primitive_rounds):
        for name, f, tensors in primitive_cases(base_seed + round_idx):
            err = ad.grad_check(f, tensors)
            worst[name] = max(worst.get(name, 0.0), err)
            count[name] = count.get(name, 0) + 1
    for round_idx in range(loss_rounds):
        for name, f, tensors in loss_cases(base_seed + 31 * (round_idx + 1)):
            # the wider step keeps cancellation noise below tolerance on
            # coordinates whose true gradient is itself near zero
            err = ad.grad_check(f, tensors, h=1e-4,
                                max_coords=sample_coords, rng=picker)
            worst[name] = max(worst.get(name, 0.0), err)
            count[name] = count.get(name, 0) + 1
    for name in sorted(worst):
        results.append((name, worst[name], count[name]))
    return results
