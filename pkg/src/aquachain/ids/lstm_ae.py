"""Sequence autoencoder built on hand-rolled LSTM cells.

An encoder LSTM consumes the N-step feature window and its final hidden
state becomes the latent code; the decoder LSTM receives that code at every
step and a linear readout reconstructs the window in input order. The
reconstruction loss for a window is the mean over time steps of the squared
L2 distance between input and reconstruction; windows whose loss exceeds a
calibrated quantile threshold are flagged as anomalous.

Training is full-batch gradient descent with global-norm clipping, in
float64 throughout so analytic gradients can be validated against central
finite differences. Everything is seeded: the same inputs always yield the
same weights, thresholds and scores.

Gate layout: the four gate blocks are stacked row-wise in the order
input, forget, candidate, output (i, f, g, o).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from aquachain.ids.features import Normalizer


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmCell:
    """One recurrent cell: stacked gate weights over input and hidden state."""

    Wx: np.ndarray  # (4H, F_in)
    Wh: np.ndarray  # (4H, H)
    b: np.ndarray   # (4H,)

    @classmethod
    def init(cls, input_size: int, hidden_size: int,
             rng: np.random.Generator) -> "LstmCell":
        k = 1.0 / np.sqrt(hidden_size)
        Wx = rng.uniform(-k, k, size=(4 * hidden_size, input_size))
        Wh = rng.uniform(-k, k, size=(4 * hidden_size, hidden_size))
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0  # forget-gate bias
        return cls(Wx=Wx, Wh=Wh, b=b)

    @property
    def hidden_size(self) -> int:
        return self.Wh.shape[1]

    def forward(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        """One step over a batch; returns (h', c', cache for backprop)."""
        H = self.hidden_size
        a = x @ self.Wx.T + h @ self.Wh.T + self.b
        i = _sigmoid(a[:, 0 * H:1 * H])
        f = _sigmoid(a[:, 1 * H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:4 * H])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        cache = (x, h, c, i, f, g, o, tanh_c)
        return h_new, c_new, cache

    def backward(self, dh: np.ndarray, dc: np.ndarray, cache, grads: "CellGrads"):
        """Backprop one step; returns (dx, dh_prev, dc_prev)."""
        x, h_prev, c_prev, i, f, g, o, tanh_c = cache
        H = self.hidden_size
        do = dh * tanh_c
        dc_total = dc + dh * o * (1.0 - tanh_c ** 2)
        di = dc_total * g
        df = dc_total * c_prev
        dg = dc_total * i
        dc_prev = dc_total * f

        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        grads.Wx += da.T @ x
        grads.Wh += da.T @ h_prev
        grads.b += da.sum(axis=0)
        dx = da @ self.Wx
        dh_prev = da @ self.Wh
        return dx, dh_prev, dc_prev


@dataclass
class CellGrads:
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros_like(cls, cell: LstmCell) -> "CellGrads":
        return cls(Wx=np.zeros_like(cell.Wx), Wh=np.zeros_like(cell.Wh),
                   b=np.zeros_like(cell.b))


@dataclass
class LstmAutoencoder:
    encoder: LstmCell
    decoder: LstmCell
    W_out: np.ndarray  # (F, H)
    b_out: np.ndarray  # (F,)
    hidden_size: int
    latent_size: int
    sequence_length: int
    tau: float
    normalization: Normalizer
    loss_history: list[float] = field(default_factory=list)

    # -- forward -------------------------------------------------------------

    def encode(self, X: np.ndarray):
        """X: (B, N, F) normalized. Returns (latent (B, H), caches)."""
        B = X.shape[0]
        H = self.hidden_size
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        caches = []
        for t in range(X.shape[1]):
            h, c, cache = self.encoder.forward(X[:, t, :], h, c)
            caches.append(cache)
        return h, caches

    def decode(self, z: np.ndarray, n_steps: int):
        """Latent code repeated as decoder input; returns (X_hat, caches, h_steps)."""
        B = z.shape[0]
        H = self.hidden_size
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        caches = []
        outputs = []
        for _ in range(n_steps):
            h, c, cache = self.decoder.forward(z, h, c)
            caches.append(cache)
            outputs.append(h @ self.W_out.T + self.b_out)
        return np.stack(outputs, axis=1), caches

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        z, _ = self.encode(X)
        X_hat, _ = self.decode(z, X.shape[1])
        return X_hat

    def sequence_losses(self, X: np.ndarray) -> np.ndarray:
        """Per-sequence reconstruction loss on normalized windows (B, N, F).

        Mean over the N steps of the squared L2 distance over features.
        """
        X_hat = self.reconstruct(X)
        return ((X - X_hat) ** 2).sum(axis=2).mean(axis=1)

    def window_loss(self, window_raw: np.ndarray) -> float:
        """Reconstruction loss of one raw (N, F) window."""
        window_raw = np.asarray(window_raw, dtype=np.float64)
        if window_raw.ndim != 2 or window_raw.shape[0] != self.sequence_length:
            raise ValueError(
                f"window must have exactly {self.sequence_length} steps")
        Z = self.normalization.transform(window_raw)[None, :, :]
        return float(self.sequence_losses(Z)[0])

    # -- training ------------------------------------------------------------

    def loss_and_gradients(self, X: np.ndarray):
        """Full-batch loss plus gradients for every parameter tensor."""
        B, N, _ = X.shape
        z, enc_caches = self.encode(X)
        X_hat, dec_caches = self.decode(z, N)
        diff = X_hat - X
        loss = float(((diff ** 2).sum(axis=2).mean(axis=1)).mean())

        d_out = 2.0 * diff / (N * B)  # d loss / d X_hat
        enc_grads = CellGrads.zeros_like(self.encoder)
        dec_grads = CellGrads.zeros_like(self.decoder)
        dW_out = np.zeros_like(self.W_out)
        db_out = np.zeros_like(self.b_out)

        H = self.hidden_size
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dz = np.zeros((B, H))
        for t in range(N - 1, -1, -1):
            d_step = d_out[:, t, :]
            h_t = dec_caches[t][6] * dec_caches[t][7]  # o * tanh(c)
            dW_out += d_step.T @ h_t
            db_out += d_step.sum(axis=0)
            dh = dh + d_step @ self.W_out
            dx, dh, dc = self.decoder.backward(dh, dc, dec_caches[t], dec_grads)
            dz += dx

        dh = dz
        dc = np.zeros((B, H))
        for t in range(N - 1, -1, -1):
            _, dh, dc = self.encoder.backward(dh, dc, enc_caches[t], enc_grads)

        grads = {
            "encoder.Wx": enc_grads.Wx, "encoder.Wh": enc_grads.Wh,
            "encoder.b": enc_grads.b,
            "decoder.Wx": dec_grads.Wx, "decoder.Wh": dec_grads.Wh,
            "decoder.b": dec_grads.b,
            "W_out": dW_out, "b_out": db_out,
        }
        return loss, grads

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "encoder.Wx": self.encoder.Wx, "encoder.Wh": self.encoder.Wh,
            "encoder.b": self.encoder.b,
            "decoder.Wx": self.decoder.Wx, "decoder.Wh": self.decoder.Wh,
            "decoder.b": self.decoder.b,
            "W_out": self.W_out, "b_out": self.b_out,
        }

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": "lstm_autoencoder",
            "hidden_size": self.hidden_size,
            "latent_size": self.latent_size,
            "sequence_length": self.sequence_length,
            "tau": self.tau,
            "normalization": self.normalization.to_dict(),
            "loss_history": self.loss_history,
            "weights": {name: arr.tolist() for name, arr in self.parameters().items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LstmAutoencoder":
        w = {name: np.array(vals, dtype=np.float64)
             for name, vals in doc["weights"].items()}
        return cls(
            encoder=LstmCell(Wx=w["encoder.Wx"], Wh=w["encoder.Wh"], b=w["encoder.b"]),
            decoder=LstmCell(Wx=w["decoder.Wx"], Wh=w["decoder.Wh"], b=w["decoder.b"]),
            W_out=w["W_out"], b_out=w["b_out"],
            hidden_size=doc["hidden_size"], latent_size=doc["latent_size"],
            sequence_length=doc["sequence_length"], tau=doc["tau"],
            normalization=Normalizer.from_dict(doc["normalization"]),
            loss_history=list(doc.get("loss_history", [])),
        )


def build_autoencoder(n_features: int, hidden_size: int, sequence_length: int,
                      normalization: Normalizer, seed: int = 0) -> LstmAutoencoder:
    rng = np.random.default_rng([seed, 0x157A])
    k = 1.0 / np.sqrt(hidden_size)
    return LstmAutoencoder(
        encoder=LstmCell.init(n_features, hidden_size, rng),
        decoder=LstmCell.init(hidden_size, hidden_size, rng),
        W_out=rng.uniform(-k, k, size=(n_features, hidden_size)),
        b_out=np.zeros(n_features),
        hidden_size=hidden_size,
        latent_size=hidden_size,
        sequence_length=sequence_length,
        tau=float("inf"),
        normalization=normalization,
    )


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if total > max_norm > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def train_autoencoder(sequences: Sequence[np.ndarray] | np.ndarray,
                      hidden_size: int = 16, epochs: int = 200,
                      learning_rate: float = 0.05, quantile: float = 0.99,
                      seed: int = 0, clip_norm: float = 1.0,
                      normalization: Normalizer | None = None) -> LstmAutoencoder:
    """Fit the autoencoder on clean raw windows and calibrate tau.

    ``sequences`` must all share the same (N, F) shape. Normalization
    statistics are fitted on the pooled vectors unless supplied (a caller
    may fit them over a broader corpus than it trains on); tau is the
    ``quantile`` of the per-window training losses after the final epoch.
    """
    seq_list = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not seq_list:
        raise ValueError("training set must be nonempty")
    shape = seq_list[0].shape
    if len(shape) != 2:
        raise ValueError("each sequence must be a (N, F) array")
    if any(s.shape != shape for s in seq_list):
        raise ValueError("all sequences must have identical length and width")
    X_raw = np.stack(seq_list)  # (B, N, F)
    n_steps, n_features = shape

    if normalization is None:
        normalization = Normalizer.fit(X_raw.reshape(-1, n_features))
    X = (X_raw - np.array(normalization.mean)) / np.array(normalization.scale)

    model = build_autoencoder(n_features, hidden_size, n_steps,
                              normalization, seed=seed)
    params = model.parameters()
    for _ in range(epochs):
        loss, grads = model.loss_and_gradients(X)
        model.loss_history.append(loss)
        clip_gradients(grads, clip_norm)
        for name, p in params.items():
            p -= learning_rate * grads[name]

    losses = model.sequence_losses(X)
    model.tau = float(np.quantile(losses, quantile))
    return model


def reconstruction_loss(model: LstmAutoencoder, window_raw: np.ndarray) -> float:
    return model.window_loss(window_raw)
