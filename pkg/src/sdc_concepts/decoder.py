"""Brain-to-embedding decoders (contrastive MLP and ridge) and retrieval accuracy."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericsError, ShapeError, SolverError, TrainingDiverged, ValidationError, ZeroVectorError

log = logging.getLogger(__name__)

RIDGE_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0)


# --- contrastive loss -------------------------------------------------------

def infonce_loss(queries, keys, tau=1.0):
    """One-directional InfoNCE with in-batch negatives.

    Row i of ``keys`` is the positive for row i of ``queries``. Returns the
    mean loss and its gradients with respect to queries and keys.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 2:
        raise ShapeError(f"queries {q.shape} and keys {k.shape} must be equal 2-D shapes")
    m = q.shape[0]
    if m < 2:
        raise ValidationError("InfoNCE needs at least two rows")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise NumericsError("non-finite input to infonce_loss")
    logits = (q @ k.T) / tau
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=1, keepdims=True)
    lse = np.log(z[:, 0]) + shift[:, 0]
    loss = float(np.mean(lse - np.diag(logits)))
    g = e / z
    g[np.diag_indices(m)] -= 1.0
    g /= m * tau
    return loss, g @ k, g.T @ q


def l2_normalize(x):
    """Row-normalise; returns (normalised rows, norms)."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVectorError("cannot normalise a zero row", row=int(np.flatnonzero(norms[:, 0] == 0)[0]))
    return x / norms, norms


def l2_normalize_backward(unit, norms, grad):
    return (grad - unit * np.sum(grad * unit, axis=1, keepdims=True)) / norms


# --- MLP --------------------------------------------------------------------

def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x >= 0, 1.0, slope)


@dataclass
class DecoderMLP:
    W1: np.ndarray  # h x v
    b1: np.ndarray
    W2: np.ndarray  # d x h
    b2: np.ndarray
    leaky_slope: float = 0.01
    history: list = field(default_factory=list)

    @property
    def dims(self):
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, X):
        h = X @ self.W1.T + self.b1
        a = leaky_relu(h, self.leaky_slope)
        return a @ self.W2.T + self.b2, (X, h, a)

    def backward(self, cache, grad_out):
        X, h, a = cache
        gW2 = grad_out.T @ a
        gb2 = grad_out.sum(axis=0)
        gh = (grad_out @ self.W2) * leaky_relu_grad(h, self.leaky_slope)
        return [gh.T @ X, gh.sum(axis=0), gW2, gb2]


def init_mlp(v, hidden, d, rng, slope=0.01) -> DecoderMLP:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    b_in, b_hid = 1.0 / np.sqrt(v), 1.0 / np.sqrt(hidden)
    return DecoderMLP(rng.uniform(-b_in, b_in, (hidden, v)), rng.uniform(-b_in, b_in, hidden),
                      rng.uniform(-b_hid, b_hid, (d, hidden)), rng.uniform(-b_hid, b_hid, d), slope)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        """In-place bias-corrected update of every parameter array."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    lr_init: float = 1e-4
    lr_drop_epochs: tuple = (3, 6, 9)
    lr_drop_factor: float = 10.0
    tau: float = 1.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_embeddings: bool = False

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")

    def to_json(self):
        out = asdict(self)
        out["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return out


def learning_rate(cfg: TrainConfig, epoch):
    """Rate used during 1-based ``epoch``: dropped after each listed epoch."""
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch > e)
    return cfg.lr_init / cfg.lr_drop_factor ** drops


def contrastive_step(model: DecoderMLP, X, Y, tau, normalize=False):
    """Loss and parameter gradients for one batch (queries = decoded X, keys = Y)."""
    out, cache = model.forward(X)
    if normalize:
        qn, qnorm = l2_normalize(out)
        kn, _ = l2_normalize(Y)
        loss, gq, _ = infonce_loss(qn, kn, tau)
        gq = l2_normalize_backward(qn, qnorm, gq)
    else:
        loss, gq, _ = infonce_loss(out, Y, tau)
    return loss, model.backward(cache, gq)


def batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def train_mlp(X, Y, cfg: TrainConfig, hidden=256) -> DecoderMLP:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError("X and Y must have the same number of rows")
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(X.shape[1], hidden, Y.shape[1], rng)
    opt = Adam(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        losses = []
        for idx in batches(X.shape[0], cfg.batch_size, rng):
            try:
                loss, grads = contrastive_step(model, X[idx], Y[idx], cfg.tau, cfg.normalize_embeddings)
            except NumericsError as exc:
                raise TrainingDiverged(f"non-finite decoder output in epoch {epoch}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            opt.step(grads, lr)
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
        log.debug("epoch %d lr %.1e loss %.4f", epoch, lr, model.history[-1])
    return model


def decode(model: DecoderMLP, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W1.shape[1]:
        raise ShapeError(f"decoder expects {model.W1.shape[1]} voxels, got shape {X.shape}")
    return model.forward(X)[0]


# --- ridge ------------------------------------------------------------------

@dataclass
class RidgeModel:
    W: np.ndarray  # d x v
    b: np.ndarray
    lam: float
    selection: dict = field(default_factory=dict)

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b


def fit_ridge(X, Y, lam) -> RidgeModel:
    """Closed-form ridge with an unpenalised intercept (via column centering)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ValidationError("ridge penalty must be >= 0")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    n, v = Xc.shape
    try:
        if v <= n:
            A = Xc.T @ Xc
            A[np.diag_indices(v)] += lam
            Wt = linalg.solve(A, Xc.T @ Yc, assume_a="pos")
        else:
            K = Xc @ Xc.T
            K[np.diag_indices(n)] += lam
            Wt = Xc.T @ linalg.solve(K, Yc, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"ridge system singular at lambda={lam}: {exc}") from None
    if not np.all(np.isfinite(Wt)):
        raise SolverError(f"ridge solution non-finite at lambda={lam}")
    return RidgeModel(Wt.T, ym - Wt.T @ xm, float(lam))


def train_ridge(X, Y, lambda_grid=RIDGE_GRID, X_val=None, Y_val=None) -> RidgeModel:
    """Fit every penalty in the grid and keep the one with the best validation top-1."""
    if len(lambda_grid) == 0:
        raise ValidationError("empty ridge grid")
    if X_val is None or Y_val is None:
        raise ValidationError("ridge selection needs validation data")
    best, record = None, []
    for lam in lambda_grid:
        model = fit_ridge(X, Y, lam)
        acc = topk_accuracy(Y_val, model.predict(X_val), 1)
        record.append({"lambda": float(lam), "val_top1": acc})
        if best is None or acc > best[0]:
            best = (acc, model)
    model = best[1]
    model.selection = {"grid": record, "selected": model.lam}
    return model


# --- retrieval --------------------------------------------------------------

def cosine_distances(Y_pred, Y_true):
    def unit(M, what):
        M = np.asarray(M, dtype=np.float64)
        norms = np.linalg.norm(M, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ZeroVectorError(f"{what} row {zero[0]} has zero norm", row=int(zero[0]))
        return M / norms[:, None]
    return 1.0 - unit(Y_pred, "prediction") @ unit(Y_true, "true").T


def retrieval_ranks(Y_true, Y_pred):
    """0-based rank of each true row among all true rows, by cosine distance to its prediction.

    Ties are resolved in favour of the lower row index.
    """
    Y_true = np.asarray(Y_true)
    Y_pred = np.asarray(Y_pred)
    if Y_true.shape != Y_pred.shape or Y_true.ndim != 2:
        raise ShapeError(f"paired matrices required, got {Y_true.shape} and {Y_pred.shape}")
    D = cosine_distances(Y_pred, Y_true)
    own = np.diag(D)[:, None]
    n = D.shape[0]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    return (D < own).sum(axis=1) + ((D == own) & lower).sum(axis=1)


def topk_accuracy(Y_true, Y_pred, k) -> float:
    n = np.asarray(Y_true).shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} must lie in [1, {n}]")
    ranks = retrieval_ranks(Y_true, Y_pred)
    return 100.0 * np.count_nonzero(ranks < k) / n


def chance_accuracy(k, n):
    return 100.0 * k / n
