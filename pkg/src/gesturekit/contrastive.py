"""Joint text/gesture embedding with a margin contrastive loss.

A bidirectional recurrent gesture encoder maps key-pose sequences to
32-d features f_g living in the same space as the text features f_t.
Training pulls positive text/gesture pairs (same gesture cluster)
together and pushes negative pairs beyond a margin, while a decoder
reconstructs the key-poses from f_g and the attention head keeps its
BCE supervision.
"""

import json
from dataclasses import dataclass

import numpy as np

from .motion import COORDS, KEYPOSE_MAX, KEYPOSE_MIN
from .ndcore import (
    Tape,
    backward,
    concat,
    constant,
    div,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_,
    sqrt,
    square,
    sub,
    sum_,
)
from .ndcore.nn import Linear, LstmCell, ParamGroup, bilstm_final
from .ndcore.optim import Adam
from .clustering import positive_matrix
from .text_encoder import PAD_RAW, T_SLOTS, TextEncoder, embed

FEATURE_DIM = 32
MARGIN = 20.0
ALPHA = 10.0      # reconstruction weight
BETA = 2.0        # contrastive weight

FORMAT_TAG = "gesturekit-joint-v1"


class GestureEncoder:
    """Bidirectional recurrent encoder to f_g plus a recurrent decoder
    that rebuilds the key-poses from f_g."""

    def __init__(self, hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.params = ParamGroup()
        reg = self.params.register_layer
        self.enc_fwd = reg("enc_fwd", LstmCell(COORDS, hidden, rng))
        self.enc_bwd = reg("enc_bwd", LstmCell(COORDS, hidden, rng))
        self.head = reg("head", Linear(2 * hidden, FEATURE_DIM, rng))
        self.dec_cell = reg("dec_cell", LstmCell(FEATURE_DIM, hidden, rng))
        self.out_head = reg("out_head", Linear(hidden, COORDS, rng))

    def feature_graph(self, mat):
        rows = [constant(r) for r in np.asarray(mat, dtype=np.float64)]
        final = bilstm_final(self.enc_fwd, self.enc_bwd, rows)
        return self.head(final)

    def decode_graph(self, fg_t, n):
        h, c = self.dec_cell.init_state()
        out = []
        for _ in range(n):
            h, c = self.dec_cell.step(fg_t, h, c)
            out.append(self.out_head(h))
        return out

    def encode(self, seq):
        """f_g for one key-pose sequence (array or KeyPoseSequence)."""
        mat = seq.vectors() if hasattr(seq, "vectors") else np.asarray(seq, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != COORDS:
            raise ValueError(f"expected (n, {COORDS}) pose vectors, got {mat.shape}")
        if not KEYPOSE_MIN <= mat.shape[0] <= KEYPOSE_MAX:
            raise ValueError(
                f"key-pose count {mat.shape[0]} outside "
                f"[{KEYPOSE_MIN}, {KEYPOSE_MAX}]"
            )
        return self.feature_graph(mat).values.copy()

    def decode(self, fg, n):
        fg = np.asarray(fg, dtype=np.float64)
        if fg.shape != (FEATURE_DIM,):
            raise ValueError(f"f_g must be ({FEATURE_DIM},), got {fg.shape}")
        rows = self.decode_graph(constant(fg), n)
        return np.stack([r.values for r in rows])

    def to_doc(self):
        return {
            "hidden": self.hidden,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.state_arrays().items()
            },
        }

    @classmethod
    def from_doc(cls, doc):
        enc = cls(hidden=int(doc["hidden"]), seed=0)
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        enc.params.load_arrays(arrays)
        return enc


# ---------------------------------------------------------------------------
# losses

def distance_matrix(f_t, f_g):
    """D[i, j] = L2 distance between text feature i and gesture feature j."""
    f_t = np.asarray(f_t, dtype=np.float64)
    f_g = np.asarray(f_g, dtype=np.float64)
    if f_t.ndim != 2 or f_g.ndim != 2 or f_t.shape != f_g.shape:
        raise ValueError(f"feature shapes differ: {f_t.shape} vs {f_g.shape}")
    sq = (
        np.sum(f_t**2, axis=1)[:, None]
        - 2.0 * f_t @ f_g.T
        + np.sum(f_g**2, axis=1)[None, :]
    )
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass(frozen=True)
class ContrastiveParts:
    total: float
    positive: float
    negative: float


def contrastive_loss(p_matrix, d_matrix, margin=MARGIN):
    """Margin loss over a batch: (1/B) times the sum of half squared
    positive distances and half squared hinge slacks on negative pairs."""
    P = np.asarray(p_matrix, dtype=np.float64)
    D = np.asarray(d_matrix, dtype=np.float64)
    if P.shape != D.shape or P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"P/D must be equal square matrices, got {P.shape} vs {D.shape}")
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    b = P.shape[0]
    positive = float(np.sum(0.5 * (P * D) ** 2) / b)
    hinge = np.maximum(0.0, margin - D)
    negative = float(np.sum(0.5 * ((1.0 - P) * hinge) ** 2) / b)
    return ContrastiveParts(
        total=positive + negative, positive=positive, negative=negative
    )


def reconstruction_loss(reconstructed, targets):
    """Batch mean of per-sequence mean squared error over coordinates."""
    if len(reconstructed) != len(targets):
        raise ValueError(
            f"batch sizes differ: {len(reconstructed)} vs {len(targets)}"
        )
    if not targets:
        raise ValueError("empty batch")
    per_sample = []
    for p_hat, p in zip(reconstructed, targets):
        p_hat = np.asarray(p_hat, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if p_hat.shape != p.shape:
            raise ValueError(f"shape mismatch: {p_hat.shape} vs {p.shape}")
        per_sample.append(float(np.mean((p_hat - p) ** 2)))
    return float(np.mean(per_sample))


def total_loss(attn, reconst, contrastive, alpha=ALPHA, beta=BETA):
    """Weighted objective; works on floats and on graph tensors alike."""
    return attn + alpha * reconst + beta * contrastive


@dataclass(frozen=True)
class BatchLossReport:
    attention: float
    reconstruction: float
    contrastive: float
    total: float
    d_matrix: np.ndarray
    p_matrix: np.ndarray


# ---------------------------------------------------------------------------
# graph-side batch machinery

def _batch_text_graph(text_enc, w_stack, n_reals):
    """Features for a batch of texts through one stacked word transform.

    w_stack is the (B*T, 768) vertical stack of embedding matrices.
    Returns (raw list, att list, f_t row list).
    """
    b = len(n_reals)
    scores_all = reshape(text_enc.score_head(w_stack), (b * T_SLOTS,))
    wprime_all = text_enc.word_transform(w_stack)
    raws, atts, features = [], [], []
    for i, n_real in enumerate(n_reals):
        scores = slice_(scores_all, i * T_SLOTS, (i + 1) * T_SLOTS)
        raw_real = sigmoid(slice_(scores, 0, n_real))
        if n_real < T_SLOTS:
            pad = constant(np.full(T_SLOTS - n_real, PAD_RAW))
            raw = concat(raw_real, pad)
        else:
            raw = raw_real
        att = div(raw, sum_(raw))
        wprime = slice_(wprime_all, i * T_SLOTS, (i + 1) * T_SLOTS)
        weights = matmul(reshape(att, (T_SLOTS, 1)), text_enc._ones_row)
        flat = reshape(mul(wprime, weights), (T_SLOTS * 768,))
        f_t = text_enc.concat_out(relu(text_enc.concat_hidden(flat)))
        raws.append(raw)
        atts.append(att)
        features.append(f_t)
    return raws, atts, features


def _distance_rows_graph(ft_rows, fg_rows):
    """Graph distance matrix, one row tensor per text feature."""
    b = len(ft_rows)
    fg_mat = reshape(concat(*fg_rows), (b, FEATURE_DIM))
    fg_sq = sum_(square(fg_mat), axis=1)
    rows = []
    for f_t in ft_rows:
        ft_sq = sum_(square(f_t))
        cross = matmul(fg_mat, f_t)
        d2 = relu(ft_sq + fg_sq - 2.0 * cross)
        rows.append(sqrt(d2))
    return rows


def _contrastive_graph(d_rows, p_matrix, margin=MARGIN):
    b = len(d_rows)
    loss = None
    for i, d_row in enumerate(d_rows):
        p_row = constant(p_matrix[i])
        n_row = constant(1.0 - p_matrix[i])
        pos = sum_(square(mul(p_row, d_row)))
        hinge = relu(margin - d_row)
        neg = sum_(square(mul(n_row, hinge)))
        term = 0.5 * (pos + neg)
        loss = term if loss is None else loss + term
    return loss * (1.0 / b)


def batch_loss_graph(text_enc, gest_enc, batch, p_matrix, margin=MARGIN,
                     alpha=ALPHA, beta=BETA):
    """Eq-by-eq assembly of the joint objective for one prepared batch.

    batch items: (w_embed (T,768), n_real, labels (T,), keypose matrix).
    Returns (total, attn, recon, contr, d_rows).
    """
    b = len(batch)
    w_stack = constant(np.concatenate([item[0] for item in batch], axis=0))
    n_reals = [item[1] for item in batch]
    raws, atts, ft_rows = _batch_text_graph(text_enc, w_stack, n_reals)

    attn = None
    for raw, item in zip(raws, batch):
        term = text_enc.bce_graph(raw, item[2], item[1])
        attn = term if attn is None else attn + term
    attn = attn * (1.0 / b)

    fg_rows = [gest_enc.feature_graph(item[3]) for item in batch]

    recon = None
    for fg, item in zip(fg_rows, batch):
        target = np.asarray(item[3], dtype=np.float64)
        rows = gest_enc.decode_graph(fg, target.shape[0])
        flat = reshape(concat(*rows), (target.size,))
        term = mean(square(sub(flat, constant(target.ravel()))))
        recon = term if recon is None else recon + term
    recon = recon * (1.0 / b)

    d_rows = _distance_rows_graph(ft_rows, fg_rows)
    contr = _contrastive_graph(d_rows, p_matrix, margin)
    total = total_loss(attn, recon, contr, alpha, beta)
    return total, attn, recon, contr, d_rows


# ---------------------------------------------------------------------------
# training and evaluation

def _prepare(samples, provider):
    prepared = []
    for s in samples:
        labels = np.asarray(s.labels, dtype=np.float64)
        if labels.shape != (T_SLOTS,):
            raise ValueError(f"labels must be ({T_SLOTS},), got {labels.shape}")
        mat = (
            s.keyposes.vectors()
            if hasattr(s.keyposes, "vectors")
            else np.asarray(s.keyposes, dtype=np.float64)
        )
        prepared.append((embed(s.text, provider), s.text.n_real, labels, mat))
    return prepared


def train_joint(samples, cluster_model, provider, epochs=10, batch_size=16,
                seed=0, lr=1e-3, margin=MARGIN, alpha=ALPHA, beta=BETA,
                text_encoder=None, gesture_encoder=None, log=None):
    """Fit both encoders on paired samples; returns (text encoder,
    gesture encoder, per-epoch traces keyed by loss name).

    Samples need .clip_id, .text (TokenizedText), .labels, .keyposes.
    The text encoder may arrive pre-trained; pass it to continue from
    its attention head.
    """
    if not samples:
        raise ValueError("empty dataset")
    if batch_size > len(samples):
        raise ValueError(
            f"batch size {batch_size} exceeds dataset size {len(samples)}"
        )
    text_enc = text_encoder or TextEncoder(seed=seed)
    gest_enc = gesture_encoder or GestureEncoder(seed=seed + 1)
    prepared = _prepare(samples, provider)
    ids = [s.clip_id for s in samples]

    rng = np.random.default_rng(seed)
    opt = Adam(text_enc.params.tensors() + gest_enc.params.tensors(), lr=lr)
    traces = {"total": [], "attention": [], "reconstruction": [], "contrastive": []}
    for epoch in range(epochs):
        order = rng.permutation(len(prepared))
        sums = dict.fromkeys(traces, 0.0)
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = [prepared[i] for i in idx]
            p = positive_matrix(cluster_model, [ids[i] for i in idx]).matrix
            with Tape() as tape:
                total, attn, recon, contr, _ = batch_loss_graph(
                    text_enc, gest_enc, batch, p, margin, alpha, beta
                )
                grads = backward(tape, total)
            opt.step(grads)
            sums["total"] += total.item()
            sums["attention"] += attn.item()
            sums["reconstruction"] += recon.item()
            sums["contrastive"] += contr.item()
            n_batches += 1
        for key in traces:
            traces[key].append(sums[key] / n_batches)
        if log:
            log(epoch, traces["total"][-1])
    return text_enc, gest_enc, traces


def evaluate_batch(text_enc, gest_enc, samples, cluster_model, provider,
                   margin=MARGIN, alpha=ALPHA, beta=BETA):
    """Losses plus D/P snapshots on a sample set, without training."""
    prepared = _prepare(samples, provider)
    ids = [s.clip_id for s in samples]
    p = positive_matrix(cluster_model, ids).matrix
    total, attn, recon, contr, d_rows = batch_loss_graph(
        text_enc, gest_enc, prepared, p, margin, alpha, beta
    )
    return BatchLossReport(
        attention=attn.item(),
        reconstruction=recon.item(),
        contrastive=contr.item(),
        total=total.item(),
        d_matrix=np.stack([r.values for r in d_rows]),
        p_matrix=p,
    )


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, text_enc, gest_enc, config_hash=""):
    doc = {
        "format": FORMAT_TAG,
        "config_hash": config_hash,
        "text": text_enc.to_doc(),
        "gesture": gest_enc.to_doc(),
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as f:
        f.write(payload.encode())


def load_checkpoint(path):
    with open(path, "rb") as f:
        doc = json.loads(f.read().decode())
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    text_enc = TextEncoder.from_doc(doc["text"])
    gest_enc = GestureEncoder.from_doc(doc["gesture"])
    return text_enc, gest_enc, doc.get("config_hash", "")
