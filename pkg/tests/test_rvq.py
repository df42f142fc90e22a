import numpy as np
import pytest

from core.errors import ConfigError, DecodeError, DimensionError
from core.tensor import Tape, Tensor
from modules.rvq import (
    RvqConfig,
    RvqTokenizer,
    codebook_utilization,
    dequantize,
    ema_codebook_update,
    from_vocab_ids,
    lookup,
    nearest_entry,
    quantize_rvq,
    restart_dead_codes,
    straight_through,
    to_vocab_ids,
    train_tokenizer,
    training_step,
)


def small_config(**overrides):
    base = dict(T_a=8, d=14, n=2, C=4, m=2, K=8, hidden=8, restart_period=10)
    base.update(overrides)
    return RvqConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture
def chunks(rng):
    t = np.linspace(0.0, 1.0, 8)
    phase = rng.uniform(0, np.pi, size=(64, 1, 14))
    return np.sin(2 * np.pi * t[None, :, None] + phase)


def brute_force_rvq(z, books):
    """Per-depth exhaustive nearest neighbour, one latent at a time."""
    out = []
    for row in z:
        r = row.copy()
        picks = []
        for cb in books:
            dists = [float(np.sum((r - e) ** 2)) for e in cb]
            k = int(np.argmin(dists))
            picks.append(k)
            r = r - cb[k]
        out.append(picks)
    return np.array(out)


class TestConfig:
    def test_defaults_fill_reserved_block(self):
        cfg = RvqConfig()
        assert cfg.m * cfg.K == 1024
        assert cfg.downsample == 4 and cfg.n_down == 2
        assert cfg.tokens_per_chunk == 32

    @pytest.mark.parametrize("bad", [dict(n=5), dict(n=32 // 3), dict(T_a=24, n=8), dict(K=512, m=4),
                                     dict(distance="manhattan"), dict(ema_decay=1.0), dict(vocab_offset=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            RvqConfig(**bad)


class TestQuantize:
    def test_worked_example(self):
        books = [np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([[-0.1, 0.2], [0.0, 0.0]])]
        res = quantize_rvq(np.array([[0.9, 0.2]]), books)
        assert res.indices.tolist() == [[0, 0]]
        np.testing.assert_allclose(res.residual_norms[0, -1], 0.0, atol=1e-12)
        np.testing.assert_allclose(res.z_hat, [[0.9, 0.2]])

    @pytest.mark.parametrize("C,K,m", [(2, 3, 1), (3, 8, 2), (5, 16, 3), (8, 4, 3)])
    def test_matches_exhaustive_oracle(self, rng, C, K, m):
        books = [rng.standard_normal((K, C)) for _ in range(m)]
        z = rng.standard_normal((250, C))
        res = quantize_rvq(z, books)
        np.testing.assert_array_equal(res.indices, brute_force_rvq(z, books))

    def test_residuals_never_grow_with_zero_entry(self, rng):
        books = [np.vstack([np.zeros(4), rng.standard_normal((7, 4))]) for _ in range(3)]
        res = quantize_rvq(rng.standard_normal((500, 4)), books)
        assert np.all(np.diff(res.residual_norms, axis=-1) <= 1e-12)

    def test_lowest_index_wins_ties(self):
        entries = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert nearest_entry(np.zeros((1, 2)), entries).tolist() == [0]

    def test_cosine_uses_raw_entry_for_residual(self):
        books = [np.array([[10.0, 0.0], [0.0, 0.5]])]
        res = quantize_rvq(np.array([[1.0, 0.1]]), books, distance="cosine")
        assert res.indices.tolist() == [[0]]
        np.testing.assert_allclose(res.z_hat, [[10.0, 0.0]])

    def test_depth_prefix(self, rng):
        books = [rng.standard_normal((4, 3)) for _ in range(3)]
        z = rng.standard_normal((10, 3))
        full = quantize_rvq(z, books)
        part = quantize_rvq(z, books, depth=2)
        np.testing.assert_array_equal(part.indices, full.indices[:, :2])
        with pytest.raises(ConfigError):
            quantize_rvq(z, books, depth=4)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            quantize_rvq(np.zeros((1, 3)), [np.zeros((2, 4))])

    def test_lookup_sums_depths(self):
        books = [np.array([[1.0], [2.0]]), np.array([[10.0], [20.0]])]
        np.testing.assert_allclose(lookup(np.array([[1, 0]]), books), [[12.0]])
        with pytest.raises(DecodeError):
            lookup(np.array([[2, 0]]), books)


class TestVocabulary:
    def test_depth_blocks(self):
        ids = to_vocab_ids(np.array([3, 5, 0, 255]), K=256, m=2)
        assert ids.tolist() == [3, 256 + 5, 0, 256 + 255]
        np.testing.assert_array_equal(from_vocab_ids(ids, 256, 2), [3, 5, 0, 255])

    def test_offset(self):
        ids = to_vocab_ids(np.array([1, 1, 1, 1]), K=256, m=4, offset=151_000)
        assert ids.tolist() == [151_001, 151_257, 151_513, 151_769]

    def test_errors(self):
        with pytest.raises(DecodeError):
            to_vocab_ids(np.array([1, 2, 3]), K=8, m=2)
        with pytest.raises(DecodeError):
            to_vocab_ids(np.array([8, 0]), K=8, m=2)
        with pytest.raises(DecodeError):
            from_vocab_ids(np.array([20, 0]), K=8, m=2)
        with pytest.raises(DecodeError):
            from_vocab_ids(np.array([9, 1]), K=8, m=2)


class TestTokenizer:
    def test_identity_encoder(self, rng):
        cfg = RvqConfig(T_a=4, d=3, n=4, C=3, m=1, K=4, init="random")
        tok = RvqTokenizer(cfg, rng)
        tok.encoder.out.weight.data = np.eye(3)[None]
        tok.encoder.out.bias.data = np.zeros(3)
        x = rng.standard_normal((2, 4, 3))
        np.testing.assert_allclose(tok.encode_latents(x).data, x)

    def test_zero_entries_decode_zero_latent(self, rng):
        tok = RvqTokenizer(small_config(init="random"), rng)
        for cb in tok.codebooks:
            cb.data = np.zeros_like(cb.data)
        out = tok.dequantize(np.array([[3, 1, 7, 0]]))
        np.testing.assert_allclose(out, tok.decode(np.zeros((1, 2, 4))))

    def test_token_shapes_and_dequantize(self, rng, chunks):
        tok = RvqTokenizer(small_config(init="random"), rng)
        tokens = tok.tokenize(chunks[:5])
        assert tokens.shape == (5, 4)
        np.testing.assert_allclose(tok.dequantize(tokens), tok.quantize_chunks(chunks[:5]).recon)
        assert tok.tokenize(chunks[:5], depth=1).shape == (5, 2)
        np.testing.assert_array_equal(tok.tokens_from_vocab(tok.vocab_ids(tokens)), tokens)

    def test_functional_dequantize_matches_method(self, rng, chunks):
        tok = RvqTokenizer(small_config(init="random"), rng)
        tokens = tok.tokenize(chunks[:3])
        np.testing.assert_allclose(dequantize(tokens, tok.codebook_arrays(), tok.decoder, 2), tok.dequantize(tokens))

    def test_rejects_wrong_chunk_shape(self, rng):
        tok = RvqTokenizer(small_config(), rng)
        with pytest.raises(DimensionError):
            tok.encode_latents(np.zeros((1, 9, 14)))
        with pytest.raises(DecodeError):
            tok.dequantize(np.zeros((1, 3), dtype=int))

    def test_straight_through(self, rng):
        latents = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        z_hat = rng.standard_normal((2, 3))
        w = rng.standard_normal((2, 3))
        with Tape() as tape:
            out = straight_through(latents, z_hat)
            loss = (out * Tensor(w)).sum()
        np.testing.assert_allclose(out.data, z_hat)
        (g,) = tape.backward(loss, [latents])
        np.testing.assert_allclose(g, w)

    def test_ema_mode_gives_codebooks_no_gradient(self, rng, chunks):
        tok = RvqTokenizer(small_config(), rng)
        losses, _, tape = training_step(tok, chunks[:16], rng)
        grads = tape.backward(losses["loss"], tok.codebooks)
        assert all(np.all(g == 0.0) for g in grads)
        assert losses["codebook"].item() > 0.0

    def test_codebook_gradient_without_ema(self, rng, chunks):
        tok = RvqTokenizer(small_config(ema=False), rng)
        losses, _, tape = training_step(tok, chunks[:16], rng)
        grads = tape.backward(losses["loss"], tok.codebooks)
        assert any(np.any(g != 0.0) for g in grads)

    def test_ema_size_mass_is_conserved(self, rng, chunks):
        tok = RvqTokenizer(small_config(), rng)
        _, result, _ = training_step(tok, chunks[:16], rng)
        before = tok.ema_size.sum(axis=1)
        ema_codebook_update(tok, result, decay=0.9)
        n_latents = 16 * tok.cfg.n
        np.testing.assert_allclose(tok.ema_size.sum(axis=1), 0.9 * before + 0.1 * n_latents)

    def test_dead_code_restart(self, rng, chunks):
        tok = RvqTokenizer(small_config(), rng)
        _, result, _ = training_step(tok, chunks[:16], rng)
        tok.usage[:] = 5
        tok.usage[0, :3] = 0
        restarted = restart_dead_codes(tok, result, rng)
        assert restarted == [3, 0]
        assert tok.usage.sum() == 0
        pool = result.depth_inputs[0]
        for k in range(3):
            assert np.any(np.all(np.isclose(pool, tok.codebooks[0].data[k]), axis=1))

    def test_training_reduces_reconstruction(self, rng, chunks):
        tok = RvqTokenizer(small_config(), rng)
        log = train_tokenizer(tok, chunks, steps=80, batch_size=16, rng=rng, lr=3e-3, warmup_steps=5)
        assert list(log.columns) == ["step", "loss", "recon", "codebook", "commit", "restarts"]
        assert log["recon"].tail(10).mean() < log["recon"].head(5).mean()
        util = codebook_utilization(tok, chunks)
        assert util.shape == (2,)
        assert np.all((util > 0) & (util <= 1))

    def test_save_load_preserves_tokens(self, rng, chunks, tmp_path):
        tok = RvqTokenizer(small_config(), rng)
        training_step(tok, chunks[:16], rng)
        tok.save(tmp_path / "tok.ckpt", {"steps": 1})
        again = RvqTokenizer.load(tmp_path / "tok.ckpt")
        assert again.cfg == tok.cfg
        np.testing.assert_array_equal(again.tokenize(chunks), tok.tokenize(chunks))
        np.testing.assert_array_equal(again.ema_sum, tok.ema_sum)
