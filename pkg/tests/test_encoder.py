import numpy as np
import pytest

from celltyper.data import GeneExpressionMatrix
from celltyper.encoder import (
    EncoderConfig,
    EncoderParams,
    SslConfig,
    backward_base,
    encode_matrix,
    forward,
    forward_cache,
    init_encoder,
    load_encoder,
    pretrain_ssl,
    save_encoder,
)
from celltyper.errors import FrozenParamsError, ShapeError


def _hand_net() -> EncoderParams:
    """2 -> relu(2) -> 1 with fixed small-integer weights."""
    cfg = EncoderConfig(input_dim=2, hidden_dims=(2,), embedding_dim=1)
    w0 = np.array([[1.0, 2.0], [0.0, -1.0]], dtype=np.float64)
    b0 = np.array([0.5, 0.5], dtype=np.float64)
    w1 = np.array([[1.0, -1.0]], dtype=np.float64)
    b1 = np.array([0.25], dtype=np.float64)
    return EncoderParams(cfg, [w0, w1], [b0, b1], frozen=False, seed=0)


def test_config_layer_dims():
    cfg = EncoderConfig(100, (256, 256), 64)
    assert cfg.layer_dims() == [(256, 100), (256, 256), (64, 256)]
    assert cfg.adapted_layer_shapes() == [(256, 100), (256, 256)]


def test_init_bounds_biases_and_determinism():
    cfg = EncoderConfig(30, (16, 8), 4)
    p = init_encoder(cfg, seed=5)
    q = init_encoder(cfg, seed=5)
    r = init_encoder(cfg, seed=6)
    assert p.dtype == np.float32
    for w, (out_dim, in_dim) in zip(p.weights, cfg.layer_dims()):
        assert w.shape == (out_dim, in_dim)
        assert np.all(np.abs(w) <= 1.0 / np.sqrt(in_dim))
    assert all(np.all(b == 0) for b in p.biases)
    assert p.digest() == q.digest()
    assert p.digest() != r.digest()


def test_forward_matches_hand_computation():
    p = _hand_net()
    # z = [1+2+0.5, 0-1+0.5] = [3.5, -0.5]; relu -> [3.5, 0]; out = 3.5+0.25
    out = forward(p, np.array([1.0, 1.0]))
    assert np.allclose(out, [3.75], atol=1e-12)
    batch = forward(p, np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert batch.shape == (2, 1)
    assert np.allclose(batch[1], [0.25], atol=1e-12)  # z=[0.5,0.5], out=0.5-0.5+0.25


def test_forward_rejects_wrong_width():
    p = _hand_net()
    with pytest.raises(ShapeError):
        forward(p, np.ones(3))


def test_backward_base_matches_finite_differences():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(4, (3,), 2)
    p = init_encoder(cfg, seed=1)
    p = EncoderParams(cfg, [w.astype(np.float64) for w in p.weights],
                      [b.astype(np.float64) for b in p.biases], False, 1)
    x = rng.normal(size=(5, 4))
    d_emb = rng.normal(size=(5, 2))

    def loss():
        emb, _ = forward_cache(p, x)
        return float(np.sum(emb * d_emb))

    _, grads = backward_base(p, forward_cache(p, x)[1], d_emb)
    eps = 1e-6
    for li, w in enumerate(p.weights):
        g = grads[f"w{li}"]
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            keep = w[ij]
            w[ij] = keep + eps
            up = loss()
            w[ij] = keep - eps
            dn = loss()
            w[ij] = keep
            num = (up - dn) / (2 * eps)
            assert abs(num - g[ij]) < 1e-4 * max(1.0, abs(num))


def test_ssl_zero_epochs_is_identity_and_frozen_rejected():
    cfg = EncoderConfig(6, (5,), 3)
    p = init_encoder(cfg, seed=2)
    out, losses = pretrain_ssl(p, np.random.default_rng(1).gamma(1.0, size=(10, 6)),
                               SslConfig(epochs=0))
    assert losses == []
    assert out.digest() == p.digest()
    assert out is not p
    p.frozen = True
    with pytest.raises(FrozenParamsError):
        pretrain_ssl(p, np.ones((4, 6)), SslConfig(epochs=1))


def test_ssl_reduces_reconstruction_loss_deterministically():
    rng = np.random.default_rng(3)
    x = rng.gamma(2.0, size=(64, 12)).astype(np.float32)
    cfg = EncoderConfig(12, (10,), 6)
    p = init_encoder(cfg, seed=4)
    scfg = SslConfig(mask_fraction=0.2, epochs=8, lr=1e-2, batch_size=16, seed=9)
    a, la = pretrain_ssl(p, x, scfg)
    b, lb = pretrain_ssl(p, x, scfg)
    assert la == lb
    assert a.digest() == b.digest()
    assert la[-1] < la[0]
    # input params untouched
    assert p.digest() == init_encoder(cfg, seed=4).digest()


def test_encode_matrix_accepts_matrix_objects(mini_base):
    x = np.random.default_rng(5).gamma(1.0, size=(3, mini_base.config.input_dim))
    m = GeneExpressionMatrix(x, [f"g{j}" for j in range(x.shape[1])], ["a", "b", "c"])
    assert np.array_equal(encode_matrix(mini_base, m),
                          encode_matrix(mini_base, x.astype(np.float64)))


def test_save_load_roundtrip_and_tamper_detection(tmp_path):
    p = init_encoder(EncoderConfig(7, (6, 5), 3), seed=8)
    p.frozen = True
    path = tmp_path / "enc.bin"
    save_encoder(p, path)
    q = load_encoder(path)
    assert q.frozen is True
    assert q.digest() == p.digest()
    assert q.config == p.config
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ShapeError, match="manifest"):
        load_encoder(path)
