"""Accelerated low-rank posterior from a random anchor subset.

A subset of M training points anchors a low-rank approximation of the
unscaled tangent-kernel Gram matrix: its top-K eigenpairs define features

    phi(x) = eigval^{-1/2} eigvec^T vec(J(anchors) J(x)^T)

of dimension K per output channel, so phi(x) phi(x')^T approximates
J(x) J(x')^T. A single pass over the training data accumulates the
feature-space precision

    G = sum_n phi(x_n)^T curvature_n phi(x_n) + (1/prior_variance) I_K

whose inverse gives the posterior covariance phi(x*) G^{-1} phi(x*)^T. At
full rank (M = N, K = N*C) this reproduces the exact posterior; at low
rank it tends to understate the variance away from the anchors.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EigenFloorExhausted
from .kernel import kernel_block_fast
from .linalg import cholesky, rng_stream, solve_psd, sym_eig
from .lla import GaussianPredictive, LikelihoodModel, _lambda_blocks
from .nn import forward

EIGEN_FLOOR_FACTOR = 1e-10


@dataclass(frozen=True)
class EllaState:
    ctx: object
    likelihood: LikelihoodModel
    anchors: np.ndarray  # (M, D) subset of the training inputs
    feature_dim: int
    projection: np.ndarray  # (K, M*C), maps unscaled kernel columns to features
    precision_factor: object  # Cholesky of G


def _features(state_ctx, projection, anchors, x):
    """(N, C, K) feature rows per output channel."""
    unscaled = state_ctx.with_log_prior_variance(0.0)
    cross = kernel_block_fast(unscaled, anchors, x).values  # (M*C, N*C)
    k = projection.shape[0]
    n = x.shape[0]
    c = state_ctx.net.arch.output_dim
    proj = projection @ cross  # (K, N*C)
    return proj.reshape(k, n, c).transpose(1, 2, 0)


def ella_fit(ctx, likelihood, x, y=None, m=20, k=20, seed=0, max_points=None, chunk=256):
    """Anchor, eigendecompose, then accumulate the precision in one pass.

    ``k=None`` keeps every eigenpair above the floor, which is the
    largest usable rank (anchor Gram matrices are routinely
    rank-deficient). ``max_points`` truncates the pass to the first
    points of ``x`` (the early-stopping variant); anchors are still drawn
    from the full set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    c = ctx.net.arch.output_dim
    if not 1 <= m <= n:
        raise DimensionMismatch(f"need 1 <= M <= N, got M={m}, N={n}")
    if k is not None and not 1 <= k <= m * c:
        raise DimensionMismatch(f"need 1 <= K <= M*C, got K={k}")

    rng = rng_stream(seed)
    anchor_idx = np.sort(rng.choice(n, size=m, replace=False))
    anchors = x[anchor_idx].copy()

    unscaled = ctx.with_log_prior_variance(0.0)
    gram = kernel_block_fast(unscaled, anchors, anchors).values
    gram = 0.5 * (gram + gram.T)
    eig = sym_eig(gram)
    floor = EIGEN_FLOOR_FACTOR * max(eig.values[0], 0.0)
    usable = int(np.sum(eig.values > floor))
    if k is None:
        k = usable
    if usable < k:
        raise EigenFloorExhausted(
            f"only {usable} eigenvalues above floor {floor:.3e}, requested K={k}"
        )
    vals = eig.values[:k]
    vecs = eig.vectors[:, :k]
    projection = vecs.T / np.sqrt(vals)[:, None]

    n_pass = n if max_points is None else min(int(max_points), n)
    precision = np.eye(k) / ctx.prior_variance
    for start in range(0, n_pass, chunk):
        stop = min(start + chunk, n_pass)
        xb = x[start:stop]
        phi = _features(ctx, projection, anchors, xb)  # (B, C, K)
        outputs = forward(ctx.net, xb).output
        yb = None if y is None else np.asarray(y)[start:stop]
        blocks, _ = _lambda_blocks(likelihood, outputs, yb)
        precision += np.einsum("bck,bcd,bdl->kl", phi, blocks, phi)
    precision = 0.5 * (precision + precision.T)
    return EllaState(
        ctx=ctx,
        likelihood=likelihood,
        anchors=anchors,
        feature_dim=k,
        projection=projection,
        precision_factor=cholesky(precision),
    )


def ella_predict_batch(state, x_star):
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.ndim == 1:
        x_star = x_star[:, None]
    means = forward(state.ctx.net, x_star).output
    phi = _features(state.ctx, state.projection, state.anchors, x_star)
    out = []
    for i in range(x_star.shape[0]):
        solved = solve_psd(state.precision_factor, phi[i].T)  # (K, C)
        cov = phi[i] @ solved
        out.append(
            GaussianPredictive(
                mean=means[i], covariance=0.5 * (cov + cov.T), likelihood=state.likelihood
            )
        )
    return out


def ella_predict(state, x_star):
    return ella_predict_batch(state, np.atleast_2d(np.asarray(x_star, dtype=np.float64)))[0]
