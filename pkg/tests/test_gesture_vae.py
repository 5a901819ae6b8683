"""Sequence VAE tests: posterior shape, sampling, losses, training.

Monte-Carlo oracles are recomputed inline with plain numpy so they stay
independent of the graph code under test.
"""

import itertools

import numpy as np
import pytest

from gesturekit.gesture_vae import (
    ElboParts,
    GestureVae,
    LatentCode,
    VaeConfig,
    elbo_loss,
    kl_standard_normal,
    reparameterize,
    train_vae,
)

from gradcheck import check_gradients

TINY = VaeConfig(in_dim=4, hidden=3, z_dim=2)
SMALL = VaeConfig(in_dim=24, hidden=16, z_dim=4)


def random_sequence(rng, config, n=None):
    n = n or int(rng.integers(config.min_len, config.max_len + 1))
    return rng.normal(0.0, 0.3, (n, config.in_dim))


# ---------------------------------------------------------------------------
# encode / decode

def test_sigma_positive_everywhere():
    vae = GestureVae(TINY, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        code = vae.encode(random_sequence(rng, TINY))
        assert np.all(code.sigma > 0.0)
        assert np.all(np.isfinite(code.mu))


def test_encode_deterministic():
    vae = GestureVae(TINY, seed=0)
    mat = random_sequence(np.random.default_rng(2), TINY, n=6)
    a, b = vae.encode(mat), vae.encode(mat)
    assert np.array_equal(a.mu, b.mu)
    assert np.array_equal(a.sigma, b.sigma)


@pytest.mark.parametrize("n", [4, 13])
def test_encode_rejects_bad_lengths(n):
    vae = GestureVae(TINY, seed=0)
    with pytest.raises(ValueError):
        vae.encode(np.zeros((n, TINY.in_dim)))


def test_encode_rejects_wrong_width():
    vae = GestureVae(TINY, seed=0)
    with pytest.raises(ValueError):
        vae.encode(np.zeros((6, TINY.in_dim + 1)))


def test_reverse_sequence_changes_mu():
    # the encoder must be order-sensitive for non-palindromic input
    vae = GestureVae(TINY, seed=0)
    mat = random_sequence(np.random.default_rng(3), TINY, n=7)
    mu_fwd = vae.encode(mat).mu
    mu_rev = vae.encode(mat[::-1].copy()).mu
    assert np.abs(mu_fwd - mu_rev).max() > 1e-8


def test_decode_shapes_and_determinism():
    vae = GestureVae(TINY, seed=0)
    z = np.array([0.3, -0.2])
    for n in range(TINY.min_len, TINY.max_len + 1):
        out = vae.decode(z, n)
        assert out.shape == (n, TINY.in_dim)
    assert np.array_equal(vae.decode(z, 6), vae.decode(z, 6))


def test_decode_rejects_bad_inputs():
    vae = GestureVae(TINY, seed=0)
    with pytest.raises(ValueError):
        vae.decode(np.zeros(TINY.z_dim), 4)
    with pytest.raises(ValueError):
        vae.decode(np.zeros(TINY.z_dim + 1), 6)


# ---------------------------------------------------------------------------
# reparameterization

def test_reparameterize_small_sigma_limit():
    code = LatentCode(mu=np.arange(4.0), sigma=np.full(4, 1e-12), z=np.zeros(4))
    z = reparameterize(code, 0)
    assert np.abs(z - code.mu).max() < 1e-10


def test_reparameterize_seeded():
    code = LatentCode(mu=np.zeros(4), sigma=np.ones(4), z=np.zeros(4))
    assert np.array_equal(reparameterize(code, 7), reparameterize(code, 7))
    assert not np.array_equal(reparameterize(code, 7), reparameterize(code, 8))


def test_reparameterize_sample_mean_matches_mu():
    """Mean of 1e5 draws stays within 3 sigma / sqrt(N) per coordinate."""
    d = 8
    rng_code = np.random.default_rng(9)
    code = LatentCode(
        mu=rng_code.normal(0, 1, d),
        sigma=rng_code.uniform(0.5, 1.5, d),
        z=np.zeros(d),
    )
    n = 100_000
    rng = np.random.default_rng(0)
    acc = np.zeros(d)
    for _ in range(n):
        acc += reparameterize(code, rng)
    mean = acc / n
    bound = 3.0 * code.sigma / np.sqrt(n)
    assert np.all(np.abs(mean - code.mu) < bound)


def test_latent_code_validation():
    with pytest.raises(ValueError):
        LatentCode(mu=np.zeros(2), sigma=np.array([1.0, 0.0]), z=np.zeros(2))
    with pytest.raises(ValueError):
        LatentCode(mu=np.array([np.nan, 0.0]), sigma=np.ones(2), z=np.zeros(2))


# ---------------------------------------------------------------------------
# losses

def test_kl_zero_at_standard_normal():
    assert kl_standard_normal(np.zeros(32), np.ones(32)) == 0.0


def test_kl_unit_mean_shift():
    mu = np.zeros(32)
    mu[0] = 1.0
    assert kl_standard_normal(mu, np.ones(32)) == pytest.approx(0.5)


def test_kl_nonnegative_fuzz():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 40))
        mu = rng.normal(0, 2, d)
        sigma = np.exp(rng.uniform(-2, 2, d))
        assert kl_standard_normal(mu, sigma) >= 0.0
    # strictly positive off the optimum
    assert kl_standard_normal(np.full(4, 0.01), np.ones(4)) > 0.0


def test_kl_matches_monte_carlo():
    """Closed form vs E[log q - log p] over 1e6 samples, within 1%."""
    d = 16
    rng = np.random.default_rng(4)
    mu = rng.normal(0, 1, d)
    sigma = rng.uniform(0.5, 1.5, d)
    n = 1_000_000
    eps = rng.standard_normal((n, d))
    z = mu + sigma * eps
    log_q = -0.5 * np.sum(eps**2, axis=1) - np.sum(np.log(sigma))
    log_p = -0.5 * np.sum(z**2, axis=1)
    mc = float(np.mean(log_q - log_p))
    closed = kl_standard_normal(mu, sigma)
    assert mc == pytest.approx(closed, rel=0.01)


def test_elbo_parts_sum():
    rng = np.random.default_rng(5)
    target = rng.normal(0, 0.3, (6, 4))
    recon = rng.normal(0, 0.3, (6, 4))
    code = LatentCode(mu=rng.normal(0, 1, 2), sigma=np.ones(2) * 0.8,
                      z=np.zeros(2))
    parts = elbo_loss(target, recon, code)
    assert isinstance(parts, ElboParts)
    assert parts.total == pytest.approx(parts.recon + parts.kl)
    assert parts.recon == pytest.approx(float(np.sum((target - recon) ** 2)))
    with pytest.raises(ValueError):
        elbo_loss(target, recon[:-1], code)


def test_elbo_gradients_end_to_end():
    vae = GestureVae(TINY, seed=3)
    rng = np.random.default_rng(6)
    mat = random_sequence(rng, TINY, n=5)
    eps = rng.standard_normal(TINY.z_dim)
    check_gradients(
        lambda: vae._loss_graph(mat, eps)[0],
        vae.params.tensors(),
        tol=1e-4,
    )


# ---------------------------------------------------------------------------
# training

def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train_vae([], epochs=1)


def test_train_memorizes_single_sequence():
    rng = np.random.default_rng(0)
    mat = rng.normal(0, 0.3, (5, 24)).clip(-1, 1)
    vae, trace = train_vae([mat], epochs=1000, seed=0, config=SMALL, lr=1e-2)
    code = vae.encode(mat)
    parts = elbo_loss(mat, vae.decode(code.mu, 5), code)
    assert parts.recon < 0.05
    assert trace[-1] < 0.1 * trace[0]


def test_train_seed_determinism():
    rng = np.random.default_rng(1)
    seqs = [random_sequence(rng, TINY) for _ in range(6)]
    a, _ = train_vae(seqs, epochs=3, seed=5, config=TINY)
    b, _ = train_vae(seqs, epochs=3, seed=5, config=TINY)
    c, _ = train_vae(seqs, epochs=3, seed=6, config=TINY)
    sa, sb, sc = a.params.state_arrays(), b.params.state_arrays(), c.params.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_train_separates_two_families():
    """Loss halves on a toy set and family means separate in latent space."""
    def family_seq(rng, center):
        n = int(rng.integers(5, 13))
        drift = rng.normal(0, 0.02, (n, 24))
        return np.cumsum(drift, axis=0) + center + rng.normal(0, 0.05, 24)

    rng = np.random.default_rng(42)
    centers = [rng.normal(0, 0.4, 24).clip(-1, 1) for _ in range(2)]
    seqs = []
    labels = []
    for _ in range(16):
        for g, c in enumerate(centers):
            seqs.append(family_seq(rng, c))
            labels.append(g)
    cfg = VaeConfig(in_dim=24, hidden=32, z_dim=8)
    vae, trace = train_vae(seqs, epochs=20, seed=0, config=cfg, lr=3e-3)
    assert trace[-1] < 0.5 * trace[0]

    mus = np.stack([vae.encode(s).mu for s in seqs])
    lab = np.array(labels)
    within = np.mean([
        np.linalg.norm(a - b)
        for g in (0, 1)
        for a, b in itertools.combinations(mus[lab == g], 2)
    ])
    between = np.mean([
        np.linalg.norm(a - b)
        for a in mus[lab == 0]
        for b in mus[lab == 1]
    ])
    assert between > 2.0 * within


# ---------------------------------------------------------------------------
# persistence

def test_params_round_trip_bit_exact(tmp_path):
    vae = GestureVae(SMALL, seed=9)
    path = tmp_path / "vae.json"
    vae.save(path)
    loaded = GestureVae.load(path)
    assert loaded.config == vae.config
    a, b = vae.params.state_arrays(), loaded.params.state_arrays()
    assert set(a) == set(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    # loaded model behaves identically
    mat = random_sequence(np.random.default_rng(3), SMALL, n=8)
    assert np.array_equal(vae.encode(mat).mu, loaded.encode(mat).mu)


def test_load_rejects_unknown_format():
    with pytest.raises(ValueError):
        GestureVae.from_doc({"format": "something-else", "config": {}, "params": {}})
