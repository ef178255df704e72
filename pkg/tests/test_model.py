import numpy as np
import pytest
import torch

from eegsr.model import (
    AdaRMSNorm,
    Attention,
    FlowAutoencoder,
    ModelConfig,
    ModelError,
    decode,
    encode,
    load_checkpoint,
    param_store,
    rope4d,
    save_checkpoint,
)
from eegsr.pipeline import Epoch
from eegsr.tokenizer import (
    TokenGrid,
    concat_sequences,
    interleave_registers,
    pack_samples,
    raster_serialize,
    visibility_mask,
    window_tokens,
)

from conftest import TINY_CFG, make_epoch, make_geometry

GRADCHECK_CFG = ModelConfig(
    d_model=32, n_heads=4, head_dim=8, n_layers_enc=2, n_layers_dec=2
)


def small_sequences(rng, n_channels=3, n_windows=4, stride=1, sample_id=0):
    grid = TokenGrid(
        rng.standard_normal((n_channels, n_windows, 32)) * 0.1,
        rng.uniform(-0.1, 0.1, size=(n_channels, 3)),
        np.zeros(n_channels, dtype=bool),
    )
    seq = raster_serialize(grid, sample_id=sample_id)
    return seq, interleave_registers(seq, stride)


def forward_pair(model, seq, inter, t=0.4):
    latent = encode(model, inter)
    return latent, decode(model, seq, t, latent)


class TestTokenEncoder:
    def test_zero_windows_share_constant_embedding(self, tiny_model):
        out = tiny_model.token_encoder(torch.zeros(3, 32))
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    def test_output_dim(self, tiny_model):
        out = tiny_model.token_encoder(torch.randn(5, 32))
        assert out.shape == (5, TINY_CFG.d_model)

    def test_jacobian_matches_finite_differences(self):
        model = FlowAutoencoder(GRADCHECK_CFG, seed=3).double()
        model.randomize_parameters(11)
        x = torch.randn(32, dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(model.token_encoder, x)
        h = 1e-5
        for j in (0, 7, 19, 31):
            xp, xm = x.clone(), x.clone()
            xp[j] += h
            xm[j] -= h
            fd = (model.token_encoder(xp) - model.token_encoder(xm)) / (2 * h)
            denom = fd.abs().max().clamp(min=1e-8)
            assert ((jac[:, j] - fd).abs().max() / denom) < 1e-4


class TestRope4d:
    def test_zero_coords_identity(self):
        q = torch.randn(2, 5, 16)
        k = torch.randn(2, 5, 16)
        coords = torch.zeros(2, 5, 4, dtype=torch.long)
        rq, rk = rope4d(q, k, coords)
        assert torch.allclose(rq, q, atol=1e-7)
        assert torch.allclose((rq * rk).sum(-1), (q * k).sum(-1), atol=1e-6)

    def test_isometry(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = torch.tensor(rng.standard_normal((1, 6, 32)))
            k = torch.tensor(rng.standard_normal((1, 6, 32)))
            coords = torch.tensor(rng.integers(0, 50, size=(1, 6, 4)))
            rq, rk = rope4d(q, k, coords)
            assert (rq.norm(dim=-1) - q.norm(dim=-1)).abs().max() < 1e-6
            assert (rk.norm(dim=-1) - k.norm(dim=-1)).abs().max() < 1e-6

    def test_relative_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = torch.tensor(rng.standard_normal((1, 1, 32)))
            k = torch.tensor(rng.standard_normal((1, 1, 32)))
            pi = torch.tensor(rng.integers(0, 30, size=(1, 1, 4)))
            pj = torch.tensor(rng.integers(0, 30, size=(1, 1, 4)))
            delta = torch.tensor(rng.integers(-10, 10, size=(1, 1, 4)))
            rq, rk = rope4d(q, k, pi), rope4d(q, k, pj)
            base = (rq[0] * rk[1]).sum()
            rq2, rk2 = rope4d(q, k, pi + delta), rope4d(q, k, pj + delta)
            shifted = (rq2[0] * rk2[1]).sum()
            assert abs(base - shifted) < 1e-5

    def test_head_dim_validation(self):
        with pytest.raises(ModelError):
            rope4d(torch.zeros(1, 2, 12), torch.zeros(1, 2, 12), torch.zeros(1, 2, 4))


class TestAttention:
    def test_single_token_is_value_projection(self):
        attn = Attention(TINY_CFG).double()
        torch.manual_seed(0)
        for p in attn.parameters():
            p.data.normal_(0, 0.1)
        x = torch.randn(1, 1, 32, dtype=torch.float64)
        coords = torch.zeros(1, 1, 4, dtype=torch.long)
        from eegsr.model import rope_tables

        rope = rope_tables(coords, TINY_CFG.head_dim, TINY_CFG.rope_base, x.dtype)
        out = attn(x, rope)
        _, _, v = attn.qkv(x).chunk(3, dim=-1)
        assert torch.allclose(out, attn.out(v), atol=1e-12)


class TestAdaRMSNorm:
    def test_zero_init_equals_plain_rms_norm(self):
        norm = AdaRMSNorm(16, 8)
        x = torch.randn(4, 16)
        cond = torch.randn(4, 8)
        expected = x / torch.sqrt(x.pow(2).mean(-1, keepdim=True) + 1e-6)
        assert torch.allclose(norm(x, cond), expected, atol=1e-7)

    def test_zero_input_stays_small(self):
        norm = AdaRMSNorm(16, 8)
        out = norm(torch.zeros(2, 16), torch.randn(2, 8))
        assert out.abs().max() < 1e-3

    def test_cond_gradient_matches_finite_differences(self):
        norm = AdaRMSNorm(8, 6).double()
        torch.manual_seed(1)
        norm.gamma.weight.data.normal_(0, 0.5)
        norm.gamma.bias.data.normal_(0, 0.5)
        x = torch.randn(8, dtype=torch.float64)
        cond = torch.randn(6, dtype=torch.float64, requires_grad=True)
        loss = norm(x, cond).pow(2).sum()
        (grad,) = torch.autograd.grad(loss, cond)
        h = 1e-6
        for j in range(6):
            cp, cm = cond.detach().clone(), cond.detach().clone()
            cp[j] += h
            cm[j] -= h
            fd = (norm(x, cp).pow(2).sum() - norm(x, cm).pow(2).sum()) / (2 * h)
            assert abs(grad[j] - fd) / max(abs(fd), 1e-8) < 1e-4


class TestEncodeDecode:
    def test_latent_length_matches_interleaved_input(self, tiny_model, rng):
        seq, inter = small_sequences(rng, stride=2)
        latent = encode(tiny_model, inter)
        assert len(latent) == len(inter)
        assert latent.n_data_tokens == len(seq)

    def test_zeroed_dropped_channel_data_is_ignored(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        epoch = make_epoch(4, rng, scale=0.1)
        mask = np.array([False, False, True, False])
        grid_a = window_tokens(epoch, dropout=mask)
        epoch_b = Epoch(epoch.samples.copy(), epoch.geometry, epoch.bad_channels)
        epoch_b.samples[2] = 123.0  # different data under the mask
        grid_b = window_tokens(epoch_b, dropout=mask)
        la = encode(model, interleave_registers(raster_serialize(grid_a), 1))
        lb = encode(model, interleave_registers(raster_serialize(grid_b), 1))
        assert np.array_equal(la.vectors, lb.vectors)

    def test_dropped_channel_coordinates_still_matter(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        model.randomize_parameters(5)
        epoch = make_epoch(4, rng, scale=0.1)
        mask = np.array([False, False, True, False])
        grid_a = window_tokens(epoch, dropout=mask)
        grid_b = window_tokens(epoch, dropout=mask)
        grid_b.coords = grid_b.coords.copy()
        grid_b.coords[2] = grid_b.coords[2] + 0.05
        la = encode(model, interleave_registers(raster_serialize(grid_a), 1))
        lb = encode(model, interleave_registers(raster_serialize(grid_b), 1))
        assert np.abs(la.vectors - lb.vectors).max() > 1e-6

    def test_decode_shape_matches_input(self, tiny_model, rng):
        seq, inter = small_sequences(rng)
        _, v = forward_pair(tiny_model, seq, inter)
        assert v.shape == seq.tokens.shape

    def test_decode_rejects_bad_time(self, tiny_model, rng):
        seq, inter = small_sequences(rng)
        latent = encode(tiny_model, inter)
        for t in (-0.1, 1.5):
            with pytest.raises(ModelError):
                decode(tiny_model, seq, t, latent)

    def test_decode_rejects_misaligned_latent(self, tiny_model, rng):
        seq, inter = small_sequences(rng)
        latent = encode(tiny_model, inter)
        short = raster_serialize(
            TokenGrid(
                seq.tokens[: len(seq) - 3].reshape(1, -1, 32),
                np.zeros((1, 3)),
                np.zeros(1, dtype=bool),
            )
        )
        with pytest.raises(ModelError, match="latent"):
            decode(tiny_model, short, 0.5, latent)

    def test_different_latents_give_different_outputs(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        model.randomize_parameters(9)
        seq, inter = small_sequences(rng)
        latent_a = encode(model, inter)
        seq2, inter2 = small_sequences(np.random.default_rng(99))
        latent_b = encode(model, inter2)
        va = decode(model, seq, 0.5, latent_a)
        vb = decode(model, seq, 0.5, latent_b)
        assert np.linalg.norm(va - vb) > 0

    def test_forward_deterministic(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        seq, inter = small_sequences(rng)
        l1, v1 = forward_pair(model, seq, inter)
        l2, v2 = forward_pair(model, seq, inter)
        assert np.array_equal(l1.vectors, l2.vectors)
        assert np.array_equal(v1, v2)

    def test_nan_parameters_surface_layer_index(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        with torch.no_grad():
            model.enc_blocks[1].attn.out.weight.fill_(float("nan"))
        seq, inter = small_sequences(rng)
        with pytest.raises(ModelError, match="encoder layer 1"):
            encode(model, inter)


class TestChannelOrderEquivariance:
    def test_full_forward_permutation(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0).double()
        model.randomize_parameters(21)
        c, m = 5, 4
        grid = TokenGrid(
            rng.standard_normal((c, m, 32)) * 0.1,
            rng.uniform(-0.1, 0.1, size=(c, 3)),
            np.zeros(c, dtype=bool),
        )
        xt = rng.standard_normal((c, m, 32)) * 0.1
        perm = rng.permutation(c)

        def run(g, x):
            seq = raster_serialize(g)
            inter = interleave_registers(seq, 1)
            latent = encode(model, inter)
            xt_seq = raster_serialize(
                TokenGrid(x, g.coords, np.zeros(c, dtype=bool))
            )
            return decode(model, xt_seq, 0.3, latent).reshape(m, c, 32)

        base = run(grid, xt)
        permuted = run(
            TokenGrid(grid.windows[perm], grid.coords[perm], grid.dropout_mask[perm]),
            xt[perm],
        )
        # permuting channels permutes outputs identically
        assert np.abs(permuted - base[:, perm, :]).max() < 1e-5


class TestPackingIsolation:
    def _packed_forward(self, model, pack, xt_tokens, t=0.7):
        p = next(model.parameters())
        vis = torch.as_tensor(visibility_mask(pack)).unsqueeze(0)
        tokens = torch.as_tensor(pack.tokens, dtype=p.dtype).unsqueeze(0)
        coords = torch.as_tensor(pack.coords).unsqueeze(0)
        is_reg = torch.as_tensor(pack.is_register)
        with torch.no_grad():
            latent = model.encode_tokens(tokens, coords, is_reg, vis)
            data = pack.sample_id[~pack.is_register]
            dec_vis = torch.as_tensor(data[:, None] == data[None, :]).unsqueeze(0)
            dec_coords = torch.as_tensor(pack.coords[~pack.is_register]).unsqueeze(0)
            xt = torch.as_tensor(xt_tokens, dtype=p.dtype).unsqueeze(0)
            tt = torch.full((1,), t, dtype=p.dtype)
            v = model.decode_tokens(xt, tt, latent, dec_coords, is_reg, dec_vis)
        return latent.squeeze(0).numpy(), v.squeeze(0).numpy()

    def test_perturbing_sample_a_leaves_b_bit_identical(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        model.randomize_parameters(4)
        seq_a, inter_a = small_sequences(rng, sample_id=0)
        seq_b, inter_b = small_sequences(np.random.default_rng(5), sample_id=1)
        pack = concat_sequences([inter_a, inter_b])
        xt = np.concatenate([seq_a.tokens, seq_b.tokens])

        latent1, v1 = self._packed_forward(model, pack, xt)
        pack2 = concat_sequences([inter_a, inter_b])
        pack2.tokens = pack2.tokens.copy()
        pack2.tokens[: len(inter_a)] += rng.standard_normal(
            (len(inter_a), 32)
        )  # perturb sample A everywhere, registers included
        xt2 = xt.copy()
        xt2[: len(seq_a)] -= 3.0
        latent2, v2 = self._packed_forward(model, pack2, xt2)

        b_lat = slice(len(inter_a), len(pack))
        b_dat = slice(len(seq_a), len(seq_a) + len(seq_b))
        assert np.array_equal(latent1[b_lat], latent2[b_lat])
        assert np.array_equal(v1[b_dat], v2[b_dat])
        # and sample A did actually change
        assert not np.array_equal(v1[: len(seq_a)], v2[: len(seq_a)])

    def test_pack_samples_roundtrip_through_model(self, rng):
        model = FlowAutoencoder(TINY_CFG, seed=0)
        _, inter_a = small_sequences(rng, sample_id=0)
        _, inter_b = small_sequences(np.random.default_rng(5), sample_id=1)
        batch = pack_samples([inter_a, inter_b], max_tokens=100)
        pack = batch.packs[0]
        p = next(model.parameters())
        vis = torch.as_tensor(visibility_mask(pack)).unsqueeze(0)
        with torch.no_grad():
            packed = model.encode_tokens(
                torch.as_tensor(pack.tokens, dtype=p.dtype).unsqueeze(0),
                torch.as_tensor(pack.coords).unsqueeze(0),
                torch.as_tensor(pack.is_register),
                vis,
            ).squeeze(0)
            solo = model.encode_tokens(
                torch.as_tensor(inter_a.tokens, dtype=p.dtype).unsqueeze(0),
                torch.as_tensor(inter_a.coords).unsqueeze(0),
                torch.as_tensor(inter_a.is_register),
            ).squeeze(0)
        assert torch.allclose(packed[: len(inter_a)], solo, atol=1e-5)


def flow_loss_fn(model, rng_seed=0):
    """Deterministic full-model loss closure for gradient checking."""
    from eegsr.training import mmd_loss

    r = np.random.default_rng(rng_seed)
    c, m = 2, 2
    grid = TokenGrid(
        r.standard_normal((c, m, 32)) * 0.1,
        r.uniform(-0.1, 0.1, size=(c, 3)),
        np.zeros(c, dtype=bool),
    )
    seq = raster_serialize(grid)
    inter = interleave_registers(seq, 1)
    x0 = torch.tensor(seq.tokens, dtype=torch.float64).unsqueeze(0)
    eps = torch.tensor(r.standard_normal(x0.shape) * 0.1, dtype=torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)
    xt = (1 - t) * x0 + t * eps
    enc_tokens = torch.zeros(1, len(inter), 32, dtype=torch.float64)
    enc_tokens[0, ~inter.is_register] = x0[0]
    enc_coords = torch.as_tensor(inter.coords)
    dec_coords = torch.as_tensor(seq.coords)
    is_reg = torch.as_tensor(inter.is_register)

    def loss():
        latent = model.encode_tokens(enc_tokens, enc_coords, is_reg)
        v = model.decode_tokens(xt, t, latent, dec_coords, is_reg)
        flow = (v - (eps - x0)).pow(2).sum(-1).mean()
        mmd = mmd_loss(latent.reshape(-1, latent.shape[-1]), np.random.default_rng(7))
        return flow + 0.1 * mmd

    return loss


def run_gradient_check(model, loss_fn, n_coords=10, tol=1e-3, h=1e-5, seed=0):
    """Central finite differences against autograd on sampled coordinates."""
    model.zero_grad()
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    r = np.random.default_rng(seed)
    failures = []
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        idx = r.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for j in idx:
            with torch.no_grad():
                orig = flat[j].item()
                flat[j] = orig + h
                up = loss_fn().item()
                flat[j] = orig - h
                down = loss_fn().item()
                flat[j] = orig
            fd = (up - down) / (2 * h)
            an = grads[name].view(-1)[j].item()
            denom = max(abs(fd), abs(an), 1e-6)
            if abs(fd - an) / denom > tol:
                failures.append((name, int(j), an, fd))
    return failures


class TestGradients:
    def test_full_model_matches_finite_differences(self):
        model = FlowAutoencoder(GRADCHECK_CFG, seed=0).double()
        model.randomize_parameters(13)
        failures = run_gradient_check(model, flow_loss_fn(model))
        assert failures == [], failures[:5]


class TestCheckpoint:
    def test_round_trip_preserves_parameters(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_model, step=17, loss_history=[1.0, 0.5])
        loaded, manifest = load_checkpoint(path)
        assert manifest["step"] == 17
        assert manifest["loss_history"] == [1.0, 0.5]
        for (n1, p1), (n2, p2) in zip(
            tiny_model.named_parameters(), loaded.named_parameters()
        ):
            assert n1 == n2
            expected = p1.detach().numpy().astype("<f4")
            assert np.array_equal(p2.detach().numpy().astype("<f4"), expected)

    def test_round_trip_preserves_forward(self, tiny_model, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_model)
        loaded, _ = load_checkpoint(path)
        seq, inter = small_sequences(rng)
        _, v1 = forward_pair(tiny_model, seq, inter)
        _, v2 = forward_pair(loaded, seq, inter)
        assert np.allclose(v1, v2, atol=1e-6)

    def test_unknown_format_rejected(self, tmp_path):
        import json
        import zipfile

        path = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", json.dumps({"format": "other"}))
        with pytest.raises(ModelError, match="format"):
            load_checkpoint(path)

    def test_not_an_archive_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a zip")
        with pytest.raises(ModelError):
            load_checkpoint(path)

    def test_param_store_rejects_nonfinite(self, tiny_model):
        store = param_store(tiny_model)
        assert store.seed == 7
        with torch.no_grad():
            tiny_model.register.fill_(float("inf"))
        with pytest.raises(ModelError):
            param_store(tiny_model)


class TestModelConfig:
    def test_head_dim_divisibility(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=24, n_heads=2, head_dim=12)

    def test_dim_consistency(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=64, n_heads=2, head_dim=16)
