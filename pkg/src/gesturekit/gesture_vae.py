"""Variational autoencoder over pose-vector sequences.

A bidirectional recurrent encoder maps a sequence of pose vectors to a
Gaussian latent (mu, sigma); a recurrent decoder conditioned on the
sampled z at every step reconstructs the sequence. Minimized loss is
the negative evidence lower bound: squared reconstruction error plus
the closed-form KL divergence to the standard normal prior.

The same module serves two configurations: the default one over key-pose
sequences (5 to 12 poses, 32-d latent) and a wider one used as a feature
extractor for distribution metrics.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .motion import COORDS
from .ndcore import Tape, backward, constant, exp, mul, square, sub, sum_
from .ndcore.nn import Linear, LstmCell, ParamGroup, bilstm_final
from .ndcore.optim import Adam

FORMAT_TAG = "gesturekit-vae-v1"


@dataclass(frozen=True)
class VaeConfig:
    in_dim: int = COORDS
    hidden: int = 64
    z_dim: int = 32
    min_len: int = 5
    max_len: int = 12


@dataclass(frozen=True)
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma", "z"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"latent {name} has non-finite values")
            object.__setattr__(self, name, arr)
        if np.any(self.sigma <= 0.0):
            raise ValueError("latent sigma must be strictly positive")


@dataclass(frozen=True)
class ElboParts:
    total: float
    recon: float
    kl: float


def kl_standard_normal(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)) in closed form, >= 0."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))


def _as_matrix(seq, config):
    vec = seq.vectors() if hasattr(seq, "vectors") else np.asarray(seq, dtype=np.float64)
    if vec.ndim != 2 or vec.shape[1] != config.in_dim:
        raise ValueError(
            f"expected (n, {config.in_dim}) pose vectors, got {vec.shape}"
        )
    n = vec.shape[0]
    if not (config.min_len <= n <= config.max_len):
        raise ValueError(
            f"sequence length {n} outside [{config.min_len}, {config.max_len}]"
        )
    return vec


class GestureVae:
    """Encoder/decoder pair with a ParamGroup the optimizer can walk."""

    config_hash = ""

    def __init__(self, config=None, seed=0):
        c = config or VaeConfig()
        rng = np.random.default_rng(seed)
        self.config = c
        self.params = ParamGroup()
        reg = self.params.register_layer
        self.enc_fwd = reg("enc_fwd", LstmCell(c.in_dim, c.hidden, rng))
        self.enc_bwd = reg("enc_bwd", LstmCell(c.in_dim, c.hidden, rng))
        self.mu_head = reg("mu_head", Linear(2 * c.hidden, c.z_dim, rng))
        self.logsigma_head = reg(
            "logsigma_head", Linear(2 * c.hidden, c.z_dim, rng)
        )
        self.dec_cell = reg("dec_cell", LstmCell(c.z_dim, c.hidden, rng))
        self.out_head = reg("out_head", Linear(c.hidden, c.in_dim, rng))

    # -- graph builders (usable with or without an active tape) --

    def _encode_graph(self, rows):
        final = bilstm_final(self.enc_fwd, self.enc_bwd, rows)
        return self.mu_head(final), self.logsigma_head(final)

    def _decode_graph(self, z_t, n):
        h, c = self.dec_cell.init_state()
        out = []
        for _ in range(n):
            h, c = self.dec_cell.step(z_t, h, c)
            out.append(self.out_head(h))
        return out

    def _loss_graph(self, mat, eps):
        """Negative ELBO for one sequence; eps is the fixed noise draw."""
        rows = [constant(r) for r in mat]
        mu_t, logsig_t = self._encode_graph(rows)
        sigma_t = exp(logsig_t)
        z_t = mu_t + mul(sigma_t, constant(eps))
        recon_rows = self._decode_graph(z_t, len(rows))
        recon = sum_(square(sub(recon_rows[0], rows[0])))
        for r_hat, r in zip(recon_rows[1:], rows[1:]):
            recon = recon + sum_(square(sub(r_hat, r)))
        kl = (
            sum_(square(mu_t))
            + sum_(square(sigma_t))
            - 2.0 * sum_(logsig_t)
            - float(self.config.z_dim)
        ) * 0.5
        return recon + kl, recon, kl

    # -- array-level API --

    def encode(self, seq):
        """Deterministic posterior parameters; z is set to mu."""
        mat = _as_matrix(seq, self.config)
        rows = [constant(r) for r in mat]
        mu_t, logsig_t = self._encode_graph(rows)
        mu = mu_t.values.copy()
        sigma = np.exp(logsig_t.values)
        return LatentCode(mu=mu, sigma=sigma, z=mu.copy())

    def decode(self, z, n):
        if not (self.config.min_len <= n <= self.config.max_len):
            raise ValueError(
                f"length {n} outside [{self.config.min_len}, {self.config.max_len}]"
            )
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.config.z_dim,):
            raise ValueError(f"z must be ({self.config.z_dim},), got {z.shape}")
        rows = self._decode_graph(constant(z), n)
        return np.stack([r.values for r in rows])

    # -- persistence --

    def to_doc(self):
        doc = {
            "format": FORMAT_TAG,
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.state_arrays().items()
            },
        }
        if self.config_hash:
            doc["config_hash"] = self.config_hash
        return doc

    def save(self, path):
        with open(path, "wb") as f:
            f.write(dump_doc(self.to_doc()))

    @classmethod
    def from_doc(cls, doc):
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported params format {doc.get('format')!r}")
        vae = cls(config=VaeConfig(**doc["config"]), seed=0)
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        vae.params.load_arrays(arrays)
        vae.config_hash = doc.get("config_hash", "")
        return vae

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_doc(json.loads(f.read().decode()))


def dump_doc(doc):
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def reparameterize(code, rng):
    """z = mu + sigma * eps with eps ~ N(0, I) from the given seed or rng."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal(code.mu.shape[0])
    return code.mu + code.sigma * eps


def elbo_loss(target, reconstructed, code):
    """Negative ELBO parts for logging: squared error sum plus closed-form KL."""
    target = np.asarray(target, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if target.shape != reconstructed.shape:
        raise ValueError(
            f"shape mismatch: {target.shape} vs {reconstructed.shape}"
        )
    recon = float(np.sum((target - reconstructed) ** 2))
    kl = kl_standard_normal(code.mu, code.sigma)
    return ElboParts(total=recon + kl, recon=recon, kl=kl)


def train_vae(sequences, epochs=40, seed=0, config=None, lr=1e-3,
              batch_size=16, log=None):
    """Fit on a list of sequences; returns (model, per-epoch mean loss).

    Sequences are unrolled one by one (lengths vary, nothing is padded);
    losses inside a mini-batch share one tape and one optimizer step.
    """
    if not sequences:
        raise ValueError("empty dataset")
    vae = GestureVae(config=config, seed=seed)
    mats = [_as_matrix(s, vae.config) for s in sequences]
    rng = np.random.default_rng(seed)
    opt = Adam(vae.params.tensors(), lr=lr)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(mats))
        epoch_total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                total = None
                for i in idx:
                    eps = rng.standard_normal(vae.config.z_dim)
                    loss, _, _ = vae._loss_graph(mats[i], eps)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(idx))
                grads = backward(tape, total)
            opt.step(grads)
            epoch_total += total.item() * len(idx)
        trace.append(epoch_total / len(mats))
        if log:
            log(epoch, trace[-1])
    return vae, trace
