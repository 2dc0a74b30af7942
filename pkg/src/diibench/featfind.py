"""Direction-finding methods: DAS, linear probe, diff-in-means, LDA, PCA, 2-means, random."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import container
from .encoded import EncodedPair, ForwardMemo
from .intervene import Direction
from .model import HookSite, Model, direction_grad

METHODS = ("das", "probe", "mean", "lda", "pca", "kmeans", "random")


class ZeroDirectionError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class DegenerateDataError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ActivationDataset:
    X: np.ndarray  # [n, d]
    y: np.ndarray  # [n] in {0, 1}

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"bad shapes X{X.shape} y{y.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("activations must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def X1(self) -> np.ndarray:
        return self.X[self.y == 0]

    @property
    def X2(self) -> np.ndarray:
        return self.X[self.y == 1]

    def require_both_classes(self) -> None:
        if not (self.y == 0).any() or not (self.y == 1).any():
            raise ValueError("both classes must be nonempty")


@dataclass(frozen=True)
class DasHyper:
    learning_rate: float = 5e-3
    batch_size: int = 4
    epochs: int = 1
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive; epochs nonnegative")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")


def collect_activations(
    model: Model,
    pairs: Sequence[EncodedPair],
    classes: Sequence[int],
    layer: int,
    region: str,
    memo: ForwardMemo | None = None,
) -> ActivationDataset:
    """Residual at (layer, base last token of region) for each base sentence."""
    memo = memo or ForwardMemo(model)
    X = np.stack([memo.get(p.ids_b)[1][layer, p.alignment.base_index(region)] for p in pairs])
    return ActivationDataset(X, np.asarray(classes))


# ------------------------------------------------------------------ DAS


def lr_multiplier(step: int, total: int, warmup: int) -> float:
    """Linear warmup from 0, then linear decay to 0 (the usual transformers schedule)."""
    if step < warmup:
        return step / max(1, warmup)
    return max(0.0, (total - step) / max(1, total - warmup))


def das_total_steps(n: int, hyper: DasHyper) -> int:
    return math.ceil(n / hyper.batch_size) * hyper.epochs


def train_das(
    model: Model,
    pairs: Sequence[EncodedPair],
    layer: int,
    region: str,
    hyper: DasHyper = DasHyper(),
    seed: int = 0,
    memo: ForwardMemo | None = None,
    history: list | None = None,
) -> Direction:
    """Learn a unit direction maximizing log p(y_s) under 1D DII at one site.

    Gradients are projected onto the tangent space of the unit sphere before the
    Adam update and the direction is renormalized after every step.
    """
    if not pairs:
        raise ValueError("DAS needs a nonempty training set")
    memo = memo or ForwardMemo(model)
    rng = np.random.default_rng(seed)
    d = model.config.d_model
    a = rng.standard_normal(d)
    a /= np.linalg.norm(a)
    total = das_total_steps(len(pairs), hyper)
    warmup = int(round(hyper.warmup_fraction * total))
    m = np.zeros(d)
    v = np.zeros(d)
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), hyper.batch_size):
            batch = [pairs[i] for i in order[start : start + hyper.batch_size]]
            g = np.zeros(d)
            losses = []
            for p in batch:
                _, cb = memo.get(p.ids_b)
                _, cs = memo.get(p.ids_s)
                loss, grad = direction_grad(
                    model,
                    p.ids_b,
                    p.ids_s,
                    HookSite(layer, p.alignment.base_index(region)),
                    HookSite(layer, p.alignment.source_index(region)),
                    a,
                    p.y_s,
                    cache_b=cb,
                    cache_s=cs,
                )
                if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                    raise DivergenceError(f"non-finite DAS loss at step {step}")
                g += grad
                losses.append(loss)
            g /= len(batch)
            g -= (g @ a) * a
            lr = hyper.learning_rate * lr_multiplier(step, total, warmup)
            step += 1
            m = hyper.beta1 * m + (1 - hyper.beta1) * g
            v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
            m_hat = m / (1 - hyper.beta1**step)
            v_hat = v / (1 - hyper.beta2**step)
            a = a - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
            a /= np.linalg.norm(a)
            if history is not None:
                history.append(float(np.mean(losses)))
    return Direction(a)


# ---------------------------------------------------------------- probe


def _probe_objective(X, s, w, b, lam):
    z = s * (X @ w + b)
    loss = np.logaddexp(0.0, -z).mean() + 0.5 * lam * (w @ w)
    r = -s * _sigmoid(-z) / len(s)
    return loss, X.T @ r + lam * w, r.sum()


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_probe_weights(
    acts: ActivationDataset,
    l2_weight: float = 1.0,
    fit_bias: bool = True,
    tol: float = 1e-6,
    max_iter: int = 50_000,
) -> tuple[np.ndarray, float, bool]:
    """Minimize mean logistic loss + (λ/2)‖w‖² by accelerated gradient descent.

    The weights and the bias are rescaled by their block Lipschitz bounds, so a
    large λ does not starve the bias of step size. Step sizes come from
    backtracking; momentum restarts whenever the objective goes up. Class 0 is
    the positive class. Returns (w, b, converged) with convergence judged on the
    unscaled gradient norm.
    """
    acts.require_both_classes()
    if l2_weight < 0:
        raise ValueError("l2_weight must be nonnegative")
    X = acts.X
    s = np.where(acts.y == 0, 1.0, -1.0)
    n, d = X.shape
    # w = sw·u, b = sb·c
    sw = 1.0 / math.sqrt(np.linalg.norm(X, 2) ** 2 / (4 * n) + l2_weight + 1e-12)
    sb = 2.0

    def objective(u, c):
        f, gw, gb = _probe_objective(X, s, sw * u, sb * c, l2_weight)
        return f, sw * gw, (sb * gb if fit_bias else 0.0), gw, gb

    u = np.zeros(d)
    c = 0.0
    yu, yc = u.copy(), c
    theta = 1.0
    step = 1.0
    f_prev = np.inf
    converged = False
    for _ in range(max_iter):
        f, gu, gc, _, _ = objective(yu, yc)
        gsq = gu @ gu + gc * gc
        step *= 2.0
        while True:
            nu, nc = yu - step * gu, yc - step * gc
            fn = objective(nu, nc)[0]
            if fn <= f - 0.5 * step * gsq or step < 1e-20:
                break
            step *= 0.5
        if fn > f_prev:
            # restart momentum from the last iterate
            yu, yc, theta = u.copy(), c, 1.0
            f_prev = np.inf
            continue
        theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        mom = (theta - 1.0) / theta_next
        yu = nu + mom * (nu - u)
        yc = nc + mom * (nc - c)
        u, c, theta, f_prev = nu, nc, theta_next, fn
        _, _, _, gw, gb = objective(u, c)
        gnorm = math.sqrt(gw @ gw + (gb * gb if fit_bias else 0.0))
        if gnorm < tol:
            converged = True
            break
    return sw * u, float(sb * c), converged


def fit_probe(
    acts: ActivationDataset, l2_weight: float = 1.0, fit_bias: bool = True, max_iter: int = 50_000
) -> Direction:
    w, _, converged = fit_probe_weights(acts, l2_weight, fit_bias, max_iter=max_iter)
    if not converged:
        warnings.warn("probe did not reach gradient-norm tolerance", ConvergenceWarning, stacklevel=2)
    if not np.any(w):
        raise ZeroDirectionError("probe weights are exactly zero")
    return Direction.from_vector(w)


# ------------------------------------------------------ closed forms


def diff_means(acts: ActivationDataset) -> Direction:
    acts.require_both_classes()
    diff = acts.X1.mean(0) - acts.X2.mean(0)
    if not np.any(diff):
        raise ZeroDirectionError("class means are identical")
    return Direction.from_vector(diff)


def pooled_covariance(acts: ActivationDataset) -> np.ndarray:
    X1, X2 = acts.X1, acts.X2
    c1 = X1 - X1.mean(0)
    c2 = X2 - X2.mean(0)
    dof = len(acts.y) - 2
    if dof <= 0:
        raise DegenerateDataError("pooled covariance needs at least 3 rows")
    return (c1.T @ c1 + c2.T @ c2) / dof


def fit_lda(acts: ActivationDataset, shrinkage: float | None = None) -> Direction:
    """normalize(Σ⁻¹(μ₁ − μ₂)) with Σ the pooled within-class covariance plus εI."""
    acts.require_both_classes()
    cov = pooled_covariance(acts)
    d = cov.shape[0]
    if shrinkage is None and not np.any(cov):
        # each class is a single point; Σ + εI ∝ I for every ε > 0
        return diff_means(acts)
    eps = 1e-4 * np.trace(cov) / d if shrinkage is None else shrinkage
    reg = cov + eps * np.eye(d)
    eig = np.linalg.eigvalsh(reg)
    if eig[0] <= eig[-1] * d * np.finfo(np.float64).eps:
        raise SingularMatrixError(f"covariance is singular (smallest eigenvalue {eig[0]:.3g})")
    diff = acts.X1.mean(0) - acts.X2.mean(0)
    sol = np.linalg.solve(reg, diff)
    if not np.any(sol):
        raise ZeroDirectionError("class means are identical")
    return Direction.from_vector(sol)


def _sign_fix(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] > 0 else -v


def fit_pca(acts: ActivationDataset) -> Direction:
    """First principal component of the pooled, mean-centred activations."""
    X = acts.X - acts.X.mean(0)
    if not np.any(X):
        raise DegenerateDataError("all rows identical")
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    return Direction.from_vector(_sign_fix(vt[0]))


def _kmeans_pp(X, rng):
    c0 = X[rng.integers(len(X))]
    d2 = ((X - c0) ** 2).sum(1)
    if d2.sum() == 0:
        raise DegenerateDataError("all rows identical")
    c1 = X[rng.choice(len(X), p=d2 / d2.sum())]
    return np.stack([c0, c1])


def _lloyd(X, centers, max_iter=300):
    assign = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = dist.argmin(1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(2):
            members = X[assign == k]
            if len(members):
                centers[k] = members.mean(0)
            else:
                # steal the point farthest from its centre
                far = dist[np.arange(len(X)), assign].argmax()
                centers[k] = X[far]
                assign[far] = k
    inertia = float(((X - centers[assign]) ** 2).sum())
    return centers, assign, inertia


def kmeans2(X: np.ndarray, seed: int = 0, restarts: int = 10) -> tuple[np.ndarray, np.ndarray, float]:
    """2-means with k-means++ seeding; best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=np.float64)
    if len(np.unique(X, axis=0)) < 2:
        raise DegenerateDataError("need at least two distinct rows")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, assign, inertia = _lloyd(X, _kmeans_pp(X, rng))
        if best is None or inertia < best[2]:
            best = (centers.copy(), assign.copy(), inertia)
    centers, assign, inertia = best
    # order clusters so the lexicographically larger centroid comes first
    if tuple(centers[1]) > tuple(centers[0]):
        centers = centers[::-1].copy()
        assign = 1 - assign
    return centers, assign, inertia


def fit_kmeans(acts: ActivationDataset, seed: int = 0) -> Direction:
    centers, _, _ = kmeans2(acts.X, seed)
    return Direction.from_vector(centers[0] - centers[1])


def random_direction(d: int, seed: int = 0) -> Direction:
    if d < 1:
        raise ValueError("dimension must be ≥ 1")
    rng = np.random.default_rng(seed)
    while True:
        v = rng.standard_normal(d)
        if np.any(v):
            return Direction.from_vector(v)


# ---------------------------------------------------------- persistence


def direction_key(task: str, layer: int, region: str, method: str) -> str:
    return f"{task}/{layer}/{region}/{method}"


def save_directions(directions: Mapping[tuple[str, int, str, str], Direction], path: str | Path) -> None:
    """Store (task, layer, region, method) → direction as fp32 vectors."""
    tensors = {direction_key(*k): np.asarray(v.a, dtype=np.float32) for k, v in sorted(directions.items())}
    container.save_file(tensors, path)


def load_directions(path: str | Path) -> dict[tuple[str, int, str, str], Direction]:
    tensors, _ = container.load_file(path)
    out = {}
    for name, v in tensors.items():
        task, layer, region, method = name.rsplit("/", 3)
        out[(task, int(layer), region, method)] = Direction.from_vector(v.astype(np.float64))
    return out
