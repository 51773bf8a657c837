"""Exact Gaussian-process posteriors for the linearized network.

The function-space route conditions the tangent-kernel prior on the
training data; the weight-space route assembles the Gauss-Newton
precision explicitly. The two agree through the Woodbury identity and
serve as mutual oracles in the tests. Diagonal and last-layer variants
restrict the weight-space construction.

The curvature block of the likelihood at a data point,

    curvature(g, y) = -d^2/dg^2 log p(y | g),

is 1/noise_variance * I for the Gaussian case and diag(p) - p p^T at the
softmax probabilities for the categorical case. The categorical block is
singular, so the data fit is factored through its PSD square root R:
solves use I + R kappa(X, X) R, which is always positive definite, instead
of inverting the curvature.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, DimensionMismatch
from .kernel import (
    KernelContext,
    jacobian,
    kernel_block_fast,
    kernel_diag_blocks,
    _layer_inputs,
)
from .linalg import cholesky, logdet, psd_sqrt, solve_psd
from .nn import forward

EXACT_CAP = 3000  # max N*C for the function-space route
WEIGHT_SPACE_CAP = 2000  # max parameter count for the explicit precision


@dataclass(frozen=True)
class LikelihoodModel:
    kind: str  # "gaussian" or "categorical"
    noise_variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise DimensionMismatch(f"unknown likelihood kind {self.kind!r}")
        if self.kind == "gaussian" and self.noise_variance <= 0:
            raise DimensionMismatch("noise_variance must be positive")


@dataclass(frozen=True)
class GaussianPredictive:
    """Per-input predictive: mean vector and function-space covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    likelihood: LikelihoodModel

    @property
    def y_variance(self):
        """Observation-space variance: function variance plus noise."""
        v = np.diag(self.covariance)
        if self.likelihood.kind == "gaussian":
            return v + self.likelihood.noise_variance
        return v


def softmax(g):
    shifted = g - np.max(g, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lambda_of(likelihood, net_output, label=None):
    """Likelihood curvature block for one data point; label-free for softmax."""
    g = np.asarray(net_output, dtype=np.float64).ravel()
    c = g.shape[0]
    if likelihood.kind == "gaussian":
        return np.eye(c) / likelihood.noise_variance
    p = softmax(g)
    return np.diag(p) - np.outer(p, p)


def _lambda_blocks(likelihood, outputs, labels):
    n, c = outputs.shape
    if likelihood.kind == "gaussian":
        blocks = np.broadcast_to(np.eye(c) / likelihood.noise_variance, (n, c, c)).copy()
        roots = np.broadcast_to(np.eye(c) / np.sqrt(likelihood.noise_variance), (n, c, c)).copy()
        return blocks, roots
    blocks = np.empty((n, c, c))
    roots = np.empty((n, c, c))
    for i in range(n):
        blocks[i] = lambda_of(likelihood, outputs[i])
        roots[i] = psd_sqrt(blocks[i])
    return blocks, roots


def _block_scale(roots, gram, n, c):
    """Apply the block-diagonal square roots on both sides of a Gram matrix."""
    g4 = gram.reshape(n, c, n, c)
    out = np.einsum("ica,iajb->icjb", roots, g4)
    out = np.einsum("icjb,jbd->icjd", out, roots)
    return out.reshape(n * c, n * c)


@dataclass(frozen=True)
class MapState:
    """Point-estimate baseline: the network output with zero function variance."""

    ctx: KernelContext
    likelihood: LikelihoodModel


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def predict_map_batch(state, x_star):
    means = forward(state.ctx.net, _as_batch(x_star)).output
    c = means.shape[1]
    zero = np.zeros((c, c))
    return [
        GaussianPredictive(mean=m, covariance=zero.copy(), likelihood=state.likelihood)
        for m in means
    ]


def predict_map(state, x_star):
    return predict_map_batch(state, x_star)[0]


@dataclass(frozen=True)
class LlaExactState:
    ctx: KernelContext
    likelihood: LikelihoodModel
    train_inputs: np.ndarray
    sqrt_lambda: np.ndarray  # (N, C, C) PSD square roots of the curvature blocks
    q_factor: object  # Cholesky of I + R kappa(X, X) R


def fit_exact(ctx, likelihood, x, y=None, cap=EXACT_CAP):
    """Condition the tangent-kernel prior on the training data."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    c = ctx.net.arch.output_dim
    if n * c > cap:
        raise CapExceeded(f"N*C = {n * c} exceeds exact cap {cap}; use a sparse method")
    if n == 0:
        return LlaExactState(
            ctx=ctx,
            likelihood=likelihood,
            train_inputs=x.reshape(0, ctx.net.arch.input_dim),
            sqrt_lambda=np.zeros((0, c, c)),
            q_factor=None,
        )
    outputs = forward(ctx.net, x).output
    _, roots = _lambda_blocks(likelihood, outputs, y)
    gram = kernel_block_fast(ctx, x, x).values
    gram = 0.5 * (gram + gram.T)
    whitened = _block_scale(roots, gram, n, c)
    q = np.eye(n * c) + whitened
    q = 0.5 * (q + q.T)
    return LlaExactState(
        ctx=ctx,
        likelihood=likelihood,
        train_inputs=x,
        sqrt_lambda=roots,
        q_factor=cholesky(q),
    )


def _apply_roots_left(roots, cross, n, c):
    """Multiply a (N*C, M) matrix by the block-diagonal roots on the left."""
    m = cross.shape[1]
    return np.einsum("ica,iam->icm", roots, cross.reshape(n, c, m)).reshape(n * c, m)


def predict_exact_batch(state, x_star):
    """Predictives at each query point; mean comes from the network forward pass."""
    ctx = state.ctx
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.ndim == 1:
        x_star = x_star[:, None]
    c = ctx.net.arch.output_dim
    means = forward(ctx.net, x_star).output
    prior = kernel_diag_blocks(ctx, x_star)
    n_train = state.train_inputs.shape[0]
    if n_train == 0:
        return [
            GaussianPredictive(mean=means[i], covariance=prior[i], likelihood=state.likelihood)
            for i in range(x_star.shape[0])
        ]
    cross = kernel_block_fast(ctx, state.train_inputs, x_star).values  # (NC, N*C')
    v = _apply_roots_left(state.sqrt_lambda, cross, n_train, c)
    w = solve_psd(state.q_factor, v)
    out = []
    for i in range(x_star.shape[0]):
        vi = v[:, i * c : (i + 1) * c]
        wi = w[:, i * c : (i + 1) * c]
        cov = prior[i] - vi.T @ wi
        cov = 0.5 * (cov + cov.T)
        out.append(GaussianPredictive(mean=means[i], covariance=cov, likelihood=state.likelihood))
    return out


def predict_exact(state, x_star):
    return predict_exact_batch(state, np.atleast_2d(np.asarray(x_star, dtype=np.float64)))[0]


@dataclass(frozen=True)
class LlaWeightState:
    ctx: KernelContext
    likelihood: LikelihoodModel
    precision: np.ndarray
    covariance_factor: object


def fit_weight_space(net, likelihood, x, y=None, prior_variance=1.0, cap=WEIGHT_SPACE_CAP):
    """Assemble the Gauss-Newton precision over all parameters explicitly."""
    p = net.param_count
    if p > cap:
        raise CapExceeded(f"P = {p} exceeds weight-space cap {cap}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    ctx = KernelContext(net=net, log_prior_variance=float(np.log(prior_variance)))
    precision = np.eye(p) / prior_variance
    if x.shape[0]:
        outputs = forward(net, x).output
        blocks, _ = _lambda_blocks(likelihood, outputs, y)
        for i in range(x.shape[0]):
            j = jacobian(ctx, x[i]).values
            precision += j.T @ blocks[i] @ j
    precision = 0.5 * (precision + precision.T)
    return LlaWeightState(
        ctx=ctx,
        likelihood=likelihood,
        precision=precision,
        covariance_factor=cholesky(precision),
    )


def predict_weight_space_batch(state, x_star):
    x_star = _as_batch(x_star)
    means = forward(state.ctx.net, x_star).output
    out = []
    for i in range(x_star.shape[0]):
        j = jacobian(state.ctx, x_star[i]).values
        cov = j @ solve_psd(state.covariance_factor, j.T)
        out.append(
            GaussianPredictive(
                mean=means[i], covariance=0.5 * (cov + cov.T), likelihood=state.likelihood
            )
        )
    return out


def predict_weight_space(state, x_star):
    return predict_weight_space_batch(state, x_star)[0]


@dataclass(frozen=True)
class LlaDiagState:
    ctx: KernelContext
    likelihood: LikelihoodModel
    precision_diag: np.ndarray


def fit_diag(net, likelihood, x, y=None, prior_variance=1.0):
    """Keep only the diagonal of the Gauss-Newton precision."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    ctx = KernelContext(net=net, log_prior_variance=float(np.log(prior_variance)))
    diag = np.full(net.param_count, 1.0 / prior_variance)
    if x.shape[0]:
        outputs = forward(net, x).output
        blocks, _ = _lambda_blocks(likelihood, outputs, y)
        for i in range(x.shape[0]):
            j = jacobian(ctx, x[i]).values
            diag += np.einsum("cp,cd,dp->p", j, blocks[i], j)
    return LlaDiagState(ctx=ctx, likelihood=likelihood, precision_diag=diag)


def predict_diag_batch(state, x_star):
    x_star = _as_batch(x_star)
    means = forward(state.ctx.net, x_star).output
    inv_root = 1.0 / np.sqrt(state.precision_diag)
    out = []
    for i in range(x_star.shape[0]):
        scaled = jacobian(state.ctx, x_star[i]).values * inv_root[None, :]
        cov = scaled @ scaled.T
        out.append(
            GaussianPredictive(
                mean=means[i], covariance=0.5 * (cov + cov.T), likelihood=state.likelihood
            )
        )
    return out


def predict_diag(state, x_star):
    return predict_diag_batch(state, x_star)[0]


@dataclass(frozen=True)
class LlaLastLayerState:
    ctx: KernelContext
    likelihood: LikelihoodModel
    precision_factor: object  # Cholesky over the (width+1)*C last-layer parameters


def last_layer_features(net, x):
    """(N, width+1) inputs to the final layer with the bias column appended."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    acts = _layer_inputs(net, x)
    return np.concatenate([acts[-1], np.ones((x.shape[0], 1))], axis=1)


def last_layer_jacobian(net, x):
    """(C, (width+1)*C) Jacobian w.r.t. final-layer parameters only.

    Column ordering matches the checkpoint layout of the final layer:
    weight (i, j) at i*C + j, then the C bias entries, which together
    equal the feature index i paired with class j.
    """
    phi = last_layer_features(net, x)[0]
    c = net.arch.output_dim
    jac = np.zeros((c, phi.shape[0] * c))
    for o in range(c):
        jac[o, o :: c] = phi
    return jac


def fit_last_layer(net, likelihood, x, y=None, prior_variance=1.0):
    """Weight-space pipeline restricted to the final layer's parameters."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    ctx = KernelContext(net=net, log_prior_variance=float(np.log(prior_variance)))
    c = net.arch.output_dim
    phi = last_layer_features(net, x) if x.shape[0] else np.zeros((0, 1))
    width1 = net.arch.layer_dims[-2] + 1
    precision = np.eye(width1 * c) / prior_variance
    if x.shape[0]:
        outputs = forward(net, x).output
        blocks, _ = _lambda_blocks(likelihood, outputs, y)
        # precision[(i,j),(i',j')] = sum_n phi_i phi_i' Lambda_n[j,j'];
        # accumulate one (j, j') class pair at a time with plain GEMMs.
        for j in range(c):
            for l in range(j, c):
                m = (phi * blocks[:, j, l][:, None]).T @ phi
                precision[j::c, l::c] += m
                if l != j:
                    precision[l::c, j::c] += m.T
    precision = 0.5 * (precision + precision.T)
    return LlaLastLayerState(ctx=ctx, likelihood=likelihood, precision_factor=cholesky(precision))


def predict_last_layer_batch(state, x_star):
    x_star = _as_batch(x_star)
    net = state.ctx.net
    means = forward(net, x_star).output
    out = []
    for i in range(x_star.shape[0]):
        j = last_layer_jacobian(net, x_star[i])
        cov = j @ solve_psd(state.precision_factor, j.T)
        out.append(
            GaussianPredictive(
                mean=means[i], covariance=0.5 * (cov + cov.T), likelihood=state.likelihood
            )
        )
    return out


def predict_last_layer(state, x_star):
    return predict_last_layer_batch(state, x_star)[0]


def log_marginal_likelihood(ctx, likelihood, x, y, cap=EXACT_CAP):
    """Log evidence of the linearized regression model.

    Gaussian likelihood only: log N(y | g(X), kappa(X, X) + noise * I).
    """
    if likelihood.kind != "gaussian":
        raise DimensionMismatch("marginal likelihood requires the gaussian likelihood")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    if n * ctx.net.arch.output_dim > cap:
        raise CapExceeded(f"N*C = {n} exceeds exact cap {cap}")
    resid = y - forward(ctx.net, x).output.ravel()
    cov = kernel_block_fast(ctx, x, x).values + likelihood.noise_variance * np.eye(n)
    cov = 0.5 * (cov + cov.T)
    factor = cholesky(cov)
    alpha = solve_psd(factor, resid)
    return float(-0.5 * (resid @ alpha + logdet(factor) + n * np.log(2.0 * np.pi)))


def grid_search_hyperparameters(net, x, y, prior_grid=None, noise_grid=None):
    """Maximize the evidence over a log-space grid of the two variances.

    Returns (best_prior_variance, best_noise_variance, table) where the
    table rows are (prior_variance, noise_variance, evidence).
    """
    if prior_grid is None:
        prior_grid = np.logspace(-3, 3, 10)
    if noise_grid is None:
        noise_grid = np.logspace(-4, 1, 10)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    base = KernelContext(net=net, log_prior_variance=0.0)
    resid = y - forward(net, x).output.ravel()
    unscaled = kernel_block_fast(base, x, x).values
    unscaled = 0.5 * (unscaled + unscaled.T)

    best = (None, None, -np.inf)
    table = []
    for pv in prior_grid:
        for nv in noise_grid:
            cov = pv * unscaled + nv * np.eye(n)
            factor = cholesky(cov)
            alpha = solve_psd(factor, resid)
            value = float(-0.5 * (resid @ alpha + logdet(factor) + n * np.log(2.0 * np.pi)))
            table.append((float(pv), float(nv), value))
            if value > best[2]:
                best = (float(pv), float(nv), value)
    return best[0], best[1], table
