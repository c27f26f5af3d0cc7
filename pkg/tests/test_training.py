"""Unit tests for schedules, the optimizer, and the training loop."""

import numpy as np
import pytest

from segcvae import autodiff as ad
from segcvae import training as tr
from segcvae.autodiff import Rng, Tensor
from segcvae.corpus import DialoguePair, build_vocab, encode_pairs
from segcvae.errors import DomainError, EmptyCorpus, NonFiniteLoss


def _toy_corpus(n=16):
    """n distinct pairs with tiny vocabulary overlap."""
    pairs = []
    for i in range(n):
        pairs.append(DialoguePair((f"q{i}", "do", "you"), (f"a{i}", "yes", f"b{i}")))
    return pairs


def _desk_config(**overrides):
    cfg = dict(learning_rate=0.003, batch_size=8, epochs=2, snorm_step=200,
               kl_anneal_steps=400, seed=123456, vocab_cap=64, max_len=8,
               emb_dim=8, hidden_dim=8, latent_dim=4, kernel_width=2,
               conv_channels=2, num_triggers=2, tau=0.1)
    cfg.update(overrides)
    return tr.TrainingConfig(**cfg)


def _setup(n=16, **overrides):
    cfg = _desk_config(**overrides)
    pairs = _toy_corpus(n)
    vocab = build_vocab(pairs, max_size=cfg.vocab_cap, emb_dim=cfg.emb_dim,
                        seed=cfg.seed)
    data = encode_pairs(pairs, vocab, cfg.max_len)
    return cfg, pairs, vocab, data


class TestSchedules:
    def test_lambda_ramp(self):
        cfg = _desk_config(snorm_step=1000)
        assert tr.lambda_schedule(0, cfg) == 0.0
        assert tr.lambda_schedule(500, cfg) == 0.5
        assert tr.lambda_schedule(1000, cfg) == 1.0
        assert tr.lambda_schedule(5000, cfg) == 1.0

    def test_lambda_constant_override(self):
        cfg = _desk_config(lambda_constant=1.0)
        for step in (0, 3, 10 ** 6):
            assert tr.lambda_schedule(step, cfg) == 1.0

    def test_kl_ramp(self):
        cfg = _desk_config(kl_anneal_steps=10000)
        assert tr.kl_anneal(0, cfg) == 0.0
        assert tr.kl_anneal(5000, cfg) == 0.5
        assert tr.kl_anneal(10000, cfg) == 1.0
        assert tr.kl_anneal(20000, cfg) == 1.0

    def test_monotone_nondecreasing(self):
        cfg = _desk_config(snorm_step=77, kl_anneal_steps=131)
        lam = [tr.lambda_schedule(s, cfg) for s in range(300)]
        klw = [tr.kl_anneal(s, cfg) for s in range(300)]
        assert all(b >= a for a, b in zip(lam, lam[1:]))
        assert all(b >= a for a, b in zip(klw, klw[1:]))
        assert lam[-1] == klw[-1] == 1.0

    def test_negative_step_rejected(self):
        with pytest.raises(DomainError):
            tr.lambda_schedule(-1, _desk_config())


class TestAdam:
    def test_minimizes_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        w = Tensor(np.zeros(3), requires_grad=True)
        opt = tr.Adam({"w": w}, lr=0.05)
        for _ in range(400):
            w.grad = None
            loss = ad.tsum(ad.power(ad.sub(w, Tensor(target)), 2.0))
            loss.backward()
            opt.step()
        np.testing.assert_allclose(w.values, target, atol=1e-3)

    def test_clip_rescales_global_norm(self):
        w = Tensor(np.zeros(4), requires_grad=True)
        opt = tr.Adam({"w": w}, lr=0.01)
        g = np.array([30.0, 0.0, 40.0, 0.0])  # norm 50
        w.grad = g.copy()
        opt.step(clip=5.0)
        np.testing.assert_allclose(opt.m["w"], 0.1 * g * (5.0 / 50.0))

    def test_skips_parameters_without_gradient(self):
        w = Tensor(np.ones(2), requires_grad=True)
        u = Tensor(np.ones(2), requires_grad=True)
        opt = tr.Adam({"w": w, "u": u}, lr=0.1)
        w.grad = np.ones(2)
        opt.step()
        assert np.all(u.values == 1.0)
        assert np.all(opt.m["u"] == 0.0)
        assert np.any(w.values != 1.0)


class TestTrainStep:
    def test_bitwise_deterministic(self):
        def run():
            cfg, pairs, vocab, data = _setup()
            state = tr.init_state(cfg, vocab)
            lines = []
            for _ in range(3):
                stats = tr.train_step(data, state, cfg)
                lines.append(tr.format_stats(stats))
            return "\n".join(lines)

        assert run() == run()

    def test_reduces_to_plain_cvae(self):
        flags = dict(num_triggers=1, no_is=True, no_eg=True, no_san=True,
                     no_scn=True, no_sdn=True)
        cfg, pairs, vocab, data = _setup(**flags)
        state = tr.init_state(cfg, vocab)
        stats = tr.train_step(data, state, cfg)

        # independent single-branch bound with the same seeds
        clone = tr.init_state(cfg, vocab)
        with ad.no_grad():
            r_e = clone.model.encode_ids(data[1])
            x = clone.model.encode_ids(data[0])
            out = clone.model.elbo(data[1], x, r_e, kl_weight=0.0, rng=clone.rng)
        assert stats["loss"] == -float(out["elbo"].values.mean())
        assert stats["san"] == stats["scn"] == stats["sdn"] == 0.0

    def test_loss_improves_on_toy_corpus(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        losses = []
        for _ in range(120):
            index = state.data_rng.permutation(len(pairs))[:cfg.batch_size]
            stats = tr.train_step((data[0][index], data[1][index]), state, cfg)
            losses.append(stats["loss"])
        quarter = len(losses) // 4
        assert np.mean(losses[-quarter:]) < np.mean(losses[:quarter])

    def test_non_finite_loss_aborts_with_batch_id(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        state.step = 41
        state.model.params["out.b"].values[:] = np.nan
        with pytest.raises(NonFiniteLoss) as err:
            tr.train_step(data, state, cfg)
        assert err.value.batch_id == 41

    def test_log_line_format(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        line = tr.format_stats(tr.train_step(data, state, cfg))
        keys = [part.split("=")[0] for part in line.split(" ")]
        assert keys == ["step", "elbo", "recon", "kl", "san", "scn", "sdn", "loss"]


class TestPerplexity:
    def test_uniform_model_gives_vocab_size(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        for name in ("dec.wx", "dec.wh", "dec.bx", "dec.bh",
                     "out.w", "out.b", "init.w", "init.b", "pri.w", "pri.b"):
            state.model.params[name].values[:] = 0.0
        assert tr.perplexity(state.model, data) == pytest.approx(vocab.size, rel=1e-9)

    def test_perfect_predictor_gives_one(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        token = vocab.id_of("yes")
        for name in ("dec.wx", "dec.wh", "dec.bx", "dec.bh", "out.w", "init.w", "init.b"):
            state.model.params[name].values[:] = 0.0
        state.model.params["out.b"].values[:] = 0.0
        state.model.params["out.b"].values[token] = 1000.0
        resp = np.full((4, 6), 0, dtype=np.int64)
        resp[:, 0] = 2  # leading marker
        resp[:, 1:4] = token
        ctx = data[0][:4]
        assert tr.perplexity(state.model, (ctx, resp)) == 1.0

    def test_empty_dataset_rejected(self):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        empty = (np.zeros((0, cfg.max_len), dtype=np.int64),) * 2
        with pytest.raises(EmptyCorpus):
            tr.perplexity(state.model, empty)

    def test_sharded_evaluation_matches_single_thread(self, monkeypatch):
        cfg, pairs, vocab, data = _setup()
        state = tr.init_state(cfg, vocab)
        base = tr.perplexity(state.model, data)
        monkeypatch.setenv("SEGCVAE_THREADS", "3")
        assert tr.perplexity(state.model, data) == pytest.approx(base, rel=1e-12)


class TestResumability:
    def test_stats_identical_after_reload(self, tmp_path):
        cfg, pairs, vocab, data = _setup()
        batches = [(data[0][i::4], data[1][i::4]) for i in range(4)]

        state = tr.init_state(cfg, vocab)
        for b in batches[:2]:
            tr.train_step(b, state, cfg)
        tr.save_state(state, cfg, tmp_path / "mid.ckpt")
        tail_direct = [tr.format_stats(tr.train_step(b, state, cfg)) for b in batches[2:]]

        resumed = tr.load_state(tmp_path / "mid.ckpt", cfg)
        tail_resumed = [tr.format_stats(tr.train_step(b, resumed, cfg)) for b in batches[2:]]
        assert tail_direct == tail_resumed


class TestFit:
    def test_checkpoint_tracks_minimum_validation_ppl(self, tmp_path):
        cfg, pairs, vocab, _ = _setup(epochs=3)
        splits = {"train": pairs, "valid": pairs[:8]}
        result = tr.fit(splits, vocab, cfg, tmp_path / "run")
        assert len(result.val_ppl) == 3
        best = min(result.val_ppl)
        loaded = tr.load_state(result.checkpoint_path, cfg)
        valid_data = encode_pairs(pairs[:8], vocab, cfg.max_len)
        assert tr.perplexity(loaded.model, valid_data,
                             batch_size=cfg.batch_size) == pytest.approx(best, rel=1e-12)
        assert loaded.best_ppl == pytest.approx(best, rel=1e-12)

    def test_zero_epochs_rejected(self, tmp_path):
        cfg, pairs, vocab, _ = _setup(epochs=0)
        with pytest.raises(DomainError):
            tr.fit({"train": pairs, "valid": pairs}, vocab, cfg, tmp_path)

    def test_empty_corpus_rejected(self, tmp_path):
        cfg, pairs, vocab, _ = _setup()
        with pytest.raises(EmptyCorpus):
            tr.fit({"train": [], "valid": []}, vocab, cfg, tmp_path)

    def test_runs_are_byte_identical(self, tmp_path):
        cfg, pairs, vocab, _ = _setup(epochs=2, batch_size=8)
        splits = {"train": pairs, "valid": pairs[:8]}
        r1 = tr.fit(splits, vocab, cfg, tmp_path / "a")
        r2 = tr.fit(splits, vocab, cfg, tmp_path / "b")
        assert r1.log_path.read_bytes() == r2.log_path.read_bytes()
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
