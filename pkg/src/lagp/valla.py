"""Sparse variational posterior with the predictive mean pinned to the network.

The approximation keeps the trained network's outputs as the predictive
mean and learns only a covariance correction supported on M inducing
locations Z. With A = L L^T parameterizing the correction (L lower
triangular, so A is PSD by construction and may be singular), the
posterior covariance between two inputs is

    K*(x, x') = kappa(x, x')
                - k(x, Z) L (I + L^T K_Z L)^{-1} L^T k(Z, x')

which is the inverse-free rewriting of the textbook form
kappa - k (A^{-1} + K_Z)^{-1} k'. The divergence from the prior over the
inducing basis reduces to the two covariance terms

    KL = 1/2 log|I + L^T K_Z L| - 1/2 tr((I + L^T K_Z L)^{-1} L^T K_Z L);

the quadratic mean term of the general decoupled-basis divergence is
constant here because the mean is not trained, so it is dropped from the
objective.

Training maximizes a likelihood-power data term minus the KL. For
alpha = 1 and Gaussian noise the data term is the exact log marginal of
each observation, log N(y | m(x), noise + v(x)); general alpha in (0, 1]
has a closed Gaussian form. For classification the expectation is
replaced by the deterministic softmax damping of
``metrics.predictive_class_probs``. Gradients with respect to L, Z and the
log variances are assembled in closed form and are checked against finite
differences in the tests.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonFiniteValue
from .kernel import (
    KernelContext,
    kernel_block_fast,
    kernel_diag_blocks,
    kernel_input_gradient_multi,
)
from .linalg import cholesky, logdet, rng_stream, solve_psd
from .lla import GaussianPredictive, LikelihoodModel
from .metrics import predictive_class_probs
from .nn import AdamOptimizer, forward

A_FACTOR_INIT_SCALE = 1e-3


@dataclass(frozen=True)
class VallaState:
    ctx: KernelContext
    likelihood: LikelihoodModel
    inducing: np.ndarray  # (M, D) locations of the covariance basis
    a_factor: np.ndarray  # (M*C, M*C) lower triangular, A = L L^T
    log_prior_variance: float
    log_noise_variance: float = 0.0  # regression only
    alpha: float = 1.0

    @property
    def prior_variance(self):
        return float(np.exp(self.log_prior_variance))

    @property
    def noise_variance(self):
        return float(np.exp(self.log_noise_variance))

    @property
    def scaled_ctx(self):
        return self.ctx.with_log_prior_variance(self.log_prior_variance)

    @property
    def observation_likelihood(self):
        if self.likelihood.kind == "gaussian":
            return LikelihoodModel(kind="gaussian", noise_variance=self.noise_variance)
        return self.likelihood


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int
    batch_size: int
    learning_rate: float
    seed: int = 0
    validate_every: int = 100
    patience: int = 3

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.validate_every, self.patience) < 1:
            raise DimensionMismatch("schedule counts must be >= 1")


@dataclass(frozen=True)
class DualBasisReport:
    kl_value: float
    data_term: float
    objective: float


def _capacity_factor(state):
    """Cholesky of I + L^T K_Z L, shared by prediction, KL, and gradients."""
    ctx = state.scaled_ctx
    k_ind = kernel_block_fast(ctx, state.inducing, state.inducing).values
    k_ind = 0.5 * (k_ind + k_ind.T)
    u = state.a_factor.T @ k_ind @ state.a_factor
    u = 0.5 * (u + u.T)
    h = np.eye(u.shape[0]) + u
    return k_ind, u, cholesky(h)


def valla_predict_batch(state, x_star):
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.ndim == 1:
        x_star = x_star[:, None]
    ctx = state.scaled_ctx
    c = ctx.net.arch.output_dim
    means = forward(ctx.net, x_star).output
    prior = kernel_diag_blocks(ctx, x_star)
    _, _, h_factor = _capacity_factor(state)
    cross = kernel_block_fast(ctx, state.inducing, x_star).values  # (MC, N*C)
    t = state.a_factor.T @ cross
    w = solve_psd(h_factor, t)
    likelihood = state.observation_likelihood
    out = []
    for i in range(x_star.shape[0]):
        ti = t[:, i * c : (i + 1) * c]
        wi = w[:, i * c : (i + 1) * c]
        cov = prior[i] - ti.T @ wi
        cov = 0.5 * (cov + cov.T)
        out.append(GaussianPredictive(mean=means[i], covariance=cov, likelihood=likelihood))
    return out


def valla_predict(state, x_star):
    return valla_predict_batch(state, np.atleast_2d(np.asarray(x_star, dtype=np.float64)))[0]


def kl_dual(state):
    """Covariance part of the divergence from the prior; zero at L = 0."""
    _, u, h_factor = _capacity_factor(state)
    q = u.shape[0]
    h_inv_trace = float(np.trace(solve_psd(h_factor, np.eye(q))))
    return 0.5 * logdet(h_factor) - 0.5 * (q - h_inv_trace)


def optimal_a(ctx, inducing, x, noise_variance):
    """Closed-form optimum of the correction matrix for Gaussian noise.

    A = (1/noise) K_Z^{-1} K_{Z,X} K_{X,Z} K_Z^{-1}; with the inducing set
    equal to the training inputs this reproduces the exact posterior. Used
    as a test oracle, not during training.
    """
    inducing = np.asarray(inducing, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if inducing.ndim == 1:
        inducing = inducing[:, None]
    q = inducing.shape[0] * ctx.net.arch.output_dim
    if x.shape[0] == 0:
        return np.zeros((q, q))
    k_ind = kernel_block_fast(ctx, inducing, inducing).values
    k_ind = 0.5 * (k_ind + k_ind.T)
    k_cross = kernel_block_fast(ctx, inducing, x).values
    w = solve_psd(cholesky(k_ind), k_cross)
    a = w @ w.T / noise_variance
    return 0.5 * (a + a.T)


def a_factor_from_matrix(a):
    """Lower-triangular L with L L^T = A, tolerating singular A."""
    a = 0.5 * (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        factor = cholesky(a)
        return factor.lower


def _gaussian_power_data_terms(y, means, variances, noise, alpha, n_scale):
    """Per-point value and derivative pieces of the likelihood-power term.

    Returns (values, d_dv, d_dnoise) where values[b] is
    (1/alpha) log E[N(y_b | f, noise)^alpha] under f ~ N(m_b, v_b).
    """
    s = noise / alpha + variances
    r = y - means
    const = -0.5 * math.log(2.0 * math.pi * noise) + (1.0 / (2.0 * alpha)) * math.log(
        2.0 * math.pi * noise / alpha
    )
    values = const + (1.0 / alpha) * (-0.5 * np.log(2.0 * math.pi * s) - r * r / (2.0 * s))
    inner = -0.5 / s + r * r / (2.0 * s * s)
    d_dv = (1.0 / alpha) * inner
    d_dnoise = (-0.5 / noise + 0.5 / (alpha * noise)) + inner / (alpha * alpha)
    return n_scale * values, n_scale * d_dv, n_scale * d_dnoise


def _categorical_data_terms(labels, means, variance_diags, n_scale):
    """Per-point log probability of the label under the damped softmax."""
    n, c = means.shape
    values = np.empty(n)
    d_dvdiag = np.empty((n, c))
    for b in range(n):
        gamma = np.sqrt(1.0 + (np.pi / 8.0) * np.clip(variance_diags[b], 0.0, None))
        t = means[b] / gamma
        t_shift = t - t.max()
        log_z = math.log(np.exp(t_shift).sum()) + t.max()
        p = np.exp(t - log_z)
        y = int(labels[b])
        values[b] = t[y] - log_z
        indicator = np.zeros(c)
        indicator[y] = 1.0
        dt_dv = -(np.pi / 16.0) * means[b] / gamma**3
        d_dvdiag[b] = (indicator - p) * dt_dv
    return n_scale * values, n_scale * d_dvdiag


def _batch_posterior(state, batch_x):
    """Shared pieces for the objective and its gradient on one batch."""
    ctx = state.scaled_ctx
    c = ctx.net.arch.output_dim
    b = batch_x.shape[0]
    k_ind, u, h_factor = _capacity_factor(state)
    cross = kernel_block_fast(ctx, state.inducing, batch_x).values  # (q, B*C)
    prior = kernel_diag_blocks(ctx, batch_x)  # (B, C, C)
    t = state.a_factor.T @ cross
    w = solve_psd(h_factor, t)
    covs = np.empty((b, c, c))
    for i in range(b):
        block = prior[i] - t[:, i * c : (i + 1) * c].T @ w[:, i * c : (i + 1) * c]
        covs[i] = 0.5 * (block + block.T)
    return {
        "k_ind": k_ind,
        "u": u,
        "h_factor": h_factor,
        "cross": cross,
        "prior": prior,
        "covs": covs,
        "means": forward(ctx.net, batch_x).output,
    }


def _data_term(state, pieces, batch_y, n_total, mode="alpha"):
    b = pieces["covs"].shape[0]
    n_scale = n_total / b
    if state.likelihood.kind == "gaussian":
        if pieces["covs"].shape[1] != 1:
            raise DimensionMismatch("gaussian likelihood requires a single output")
        y = np.asarray(batch_y, dtype=np.float64).ravel()
        variances = pieces["covs"][:, 0, 0]
        means = pieces["means"].ravel()
        noise = state.noise_variance
        if mode == "elbo":
            r = y - means
            values = -0.5 * np.log(2.0 * math.pi * noise) - r * r / (2.0 * noise) - variances / (2.0 * noise)
            d_dv = np.full(b, -0.5 / noise)
            d_dnoise = -0.5 / noise + (r * r + variances) / (2.0 * noise * noise)
            values, d_dv, d_dnoise = n_scale * values, n_scale * d_dv, n_scale * d_dnoise
        else:
            values, d_dv, d_dnoise = _gaussian_power_data_terms(
                y, means, variances, noise, state.alpha, n_scale
            )
        g_blocks = d_dv.reshape(b, 1, 1)
        return float(values.sum()), g_blocks, float(d_dnoise.sum())
    if mode == "elbo":
        raise DimensionMismatch("elbo data term is implemented for the gaussian likelihood only")
    labels = np.asarray(batch_y).astype(int).ravel()
    var_diags = np.stack([np.diag(pieces["covs"][i]) for i in range(b)])
    values, d_dvdiag = _categorical_data_terms(labels, pieces["means"], var_diags, n_scale)
    c = pieces["covs"].shape[1]
    g_blocks = np.zeros((b, c, c))
    for i in range(b):
        np.fill_diagonal(g_blocks[i], d_dvdiag[i])
    return float(values.sum()), g_blocks, 0.0


def alpha_objective(state, batch_x, batch_y, n_total):
    """Mini-batch training objective: scaled data term minus the KL."""
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim == 1:
        batch_x = batch_x[:, None]
    if not 0.0 < state.alpha <= 1.0:
        raise DimensionMismatch("alpha must lie in (0, 1]")
    pieces = _batch_posterior(state, batch_x)
    data, _, _ = _data_term(state, pieces, batch_y, n_total)
    kl = kl_dual(state)
    return DualBasisReport(kl_value=kl, data_term=data, objective=data - kl)


def elbo_objective(state, batch_x, batch_y, n_total):
    """Plain evidence bound with the expected log likelihood as data term.

    Gaussian case only: sum of log N(y | m, noise) - v/(2 noise), scaled
    to the full dataset, minus the KL. Exposes the degeneracy that makes
    the likelihood-power objective necessary: with the mean pinned, this
    bound always improves as the prior variance shrinks to zero.
    """
    if state.likelihood.kind != "gaussian":
        raise DimensionMismatch("elbo_objective requires the gaussian likelihood")
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim == 1:
        batch_x = batch_x[:, None]
    pieces = _batch_posterior(state, batch_x)
    data, _, _ = _data_term(state, pieces, batch_y, n_total, mode="elbo")
    kl = kl_dual(state)
    return DualBasisReport(kl_value=kl, data_term=data, objective=data - kl)


def objective_gradient(state, batch_x, batch_y, n_total, compute_inducing_gradient=True, mode="alpha"):
    """Closed-form gradient of the objective w.r.t. all trainable leaves.

    Returns (report, grads) with grads holding 'a_factor' (masked to the
    lower triangle), 'inducing', 'log_prior_variance' and, for Gaussian
    likelihoods, 'log_noise_variance'. The inducing-location gradient is
    the expensive piece (forward-mode kernel derivatives per location)
    and can be skipped when those are frozen. ``mode`` selects the data
    term: the likelihood-power objective or the plain evidence bound.
    """
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim == 1:
        batch_x = batch_x[:, None]
    ctx = state.scaled_ctx
    c = ctx.net.arch.output_dim
    b = batch_x.shape[0]
    q = state.inducing.shape[0] * c
    lower = state.a_factor

    pieces = _batch_posterior(state, batch_x)
    k_ind, u, h_factor = pieces["k_ind"], pieces["u"], pieces["h_factor"]
    cross = pieces["cross"]

    data, g_blocks, d_dnoise = _data_term(state, pieces, batch_y, n_total, mode=mode)
    kl = kl_dual(state)
    report = DualBasisReport(kl_value=kl, data_term=data, objective=data - kl)

    h_inv = solve_psd(h_factor, np.eye(q))
    # KL pieces: dKL/dU with U = L^T K L
    w_kl = 0.5 * h_inv @ u @ h_inv
    w_kl = 0.5 * (w_kl + w_kl.T)

    # data pieces through the posterior quadratic form
    proj = lower @ h_inv @ lower.T  # (q, q)
    cross_blocks = cross.reshape(q, b, c)
    weighted = np.einsum("qbc,bcd->qbd", cross_blocks, g_blocks).reshape(q, b * c)
    omega = -weighted @ cross.T  # d(data)/d(proj)
    omega = 0.5 * (omega + omega.T)
    w_data = h_inv @ lower.T @ omega @ lower @ h_inv
    w_data = 0.5 * (w_data + w_data.T)

    grad_lower = 2.0 * omega @ lower @ h_inv - 2.0 * k_ind @ lower @ w_data
    grad_lower -= 2.0 * k_ind @ lower @ w_kl
    grad_lower = np.tril(grad_lower)

    psi = -lower @ (w_data + w_kl) @ lower.T  # d(objective)/d(K_Z)
    psi = 0.5 * (psi + psi.T)
    grad_cross = -2.0 * proj @ weighted  # (q, B*C), d(data)/d(cross)

    # log prior variance: every kernel matrix is linear in the variance
    grad_lpv = float(
        np.sum(psi * k_ind)
        + np.sum(grad_cross * cross)
        + np.einsum("bcd,bcd->", g_blocks, pieces["prior"])
    )

    grads = {
        "a_factor": grad_lower,
        "log_prior_variance": grad_lpv,
    }
    if state.likelihood.kind == "gaussian":
        grads["log_noise_variance"] = float(state.noise_variance * d_dnoise)

    # inducing locations: contract kernel input-gradients against the
    # cotangents of K_Z (factor two from symmetry) and of the cross blocks
    m = state.inducing.shape[0]
    grad_z = np.zeros_like(state.inducing)
    if not compute_inducing_gradient:
        grads["inducing"] = grad_z
        return report, grads
    psi_blocks = psi.reshape(m, c, m, c)
    cross_cot = grad_cross.reshape(m, c, b, c)
    t_all = kernel_input_gradient_multi(ctx, np.vstack([state.inducing, batch_x]), state.inducing)
    grad_z += 2.0 * np.einsum("iomp,imopd->md", psi_blocks, t_all[:m])
    # cross block (j, b) holds kappa(z_j, x_b); its (p, o) entry is
    # kappa_{o p}(x_b, z_j), so pair the cotangent's first class index
    # with the gradient's second output index
    grad_z += np.einsum("jpbo,bjopd->jd", cross_cot, t_all[m:])
    grads["inducing"] = grad_z
    return report, grads


def kmeans_init(x, m, seed):
    """Deterministic k-means centers: plus-plus seeding then Lloyd updates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    m = int(m)
    if m < 1 or m > n:
        raise DimensionMismatch(f"need 1 <= M <= N, got M={m}, N={n}")
    rng = rng_stream(seed)

    centers = np.empty((m, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[k] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[k]) ** 2, axis=1))

    for _ in range(50):
        dists = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = dists.argmin(axis=1)
        new_centers = centers.copy()
        for k in range(m):
            mask = assign == k
            if mask.any():
                new_centers[k] = x[mask].mean(axis=0)
        if np.max(np.abs(new_centers - centers)) < 1e-12:
            centers = new_centers
            break
        centers = new_centers
    return centers


def validation_nll(state, x, y):
    """Mean negative log likelihood on held-out data under the posterior."""
    preds = valla_predict_batch(state, x)
    if state.likelihood.kind == "gaussian":
        y = np.asarray(y, dtype=np.float64).ravel()
        out = 0.0
        for p, target in zip(preds, y):
            var = float(p.y_variance[0])
            out += 0.5 * math.log(2.0 * math.pi * var) + (target - float(p.mean[0])) ** 2 / (2.0 * var)
        return out / len(preds)
    labels = np.asarray(y).astype(int).ravel()
    out = 0.0
    for p, label in zip(preds, labels):
        probs = predictive_class_probs(p.mean, p.covariance)
        out += -math.log(max(float(probs[label]), 1e-300))
    return out / len(preds)


def fit_valla(
    ctx,
    likelihood,
    train,
    validation,
    m_inducing,
    schedule,
    alpha=1.0,
    train_inducing=True,
    train_prior_variance=True,
    train_noise_variance=True,
    early_stopping=True,
    objective="alpha",
    log_path=None,
):
    """Fit the sparse posterior by stochastic ascent on the objective.

    Inducing locations start at k-means centers of the training inputs
    and the correction factor at a small multiple of the identity, so the
    initial predictive variance is close to the prior. Validation NLL is
    checked every ``schedule.validate_every`` iterations; after
    ``schedule.patience`` consecutive non-improving checks the best state
    seen is returned.
    """
    x, y = train
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if m_inducing > n:
        raise DimensionMismatch(f"M = {m_inducing} exceeds N = {n}")
    if early_stopping and (validation is None or len(validation[0]) == 0):
        raise DimensionMismatch("early stopping needs a nonempty validation set")

    c = ctx.net.arch.output_dim
    q = int(m_inducing) * c
    inducing = kmeans_init(x, m_inducing, schedule.seed)
    lower = A_FACTOR_INIT_SCALE * np.eye(q)
    lpv = float(ctx.log_prior_variance)
    lnv = float(np.log(likelihood.noise_variance)) if likelihood.kind == "gaussian" else 0.0

    def make_state():
        return VallaState(
            ctx=ctx,
            likelihood=likelihood,
            inducing=inducing.copy(),
            a_factor=lower.copy(),
            log_prior_variance=lpv,
            log_noise_variance=lnv,
            alpha=alpha,
        )

    train_noise = train_noise_variance and likelihood.kind == "gaussian"
    param_shapes = [lower.shape, inducing.shape, (), ()]
    opt = AdamOptimizer(param_shapes, schedule.learning_rate)
    batch_rng = rng_stream(schedule.seed + 1)
    batch = min(schedule.batch_size, n)
    order = batch_rng.permutation(n)
    cursor = 0

    best_state = make_state()
    best_nll = math.inf
    bad_checks = 0
    log_rows = []
    stopped_at = None

    for it in range(1, schedule.iterations + 1):
        if cursor + batch > n:
            order = batch_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch

        state = make_state()
        try:
            report, grads = objective_gradient(
                state, x[idx], y[idx], n, compute_inducing_gradient=train_inducing, mode=objective
            )
        except NonFiniteValue as exc:
            raise NonFiniteValue(f"diverged at iteration {it}: {exc}") from None
        if not np.isfinite(report.objective):
            raise NonFiniteValue(f"objective diverged at iteration {it}")

        step_grads = [
            -grads["a_factor"],
            -grads["inducing"] if train_inducing else np.zeros_like(inducing),
            -np.asarray(grads["log_prior_variance"]) if train_prior_variance else np.asarray(0.0),
            -np.asarray(grads.get("log_noise_variance", 0.0)) if train_noise else np.asarray(0.0),
        ]
        lower_new, inducing_new, lpv_new, lnv_new = opt.step(
            [lower, inducing, np.asarray(lpv), np.asarray(lnv)], step_grads
        )
        lower = np.tril(lower_new)
        inducing = inducing_new
        lpv = float(lpv_new)
        lnv = float(lnv_new)

        val_nll = None
        if it % schedule.validate_every == 0 or it == schedule.iterations:
            if validation is not None and len(validation[0]):
                val_nll = validation_nll(make_state(), validation[0], validation[1])
                if val_nll < best_nll - 1e-12:
                    best_nll = val_nll
                    best_state = make_state()
                    bad_checks = 0
                else:
                    bad_checks += 1
            log_rows.append((it, report.objective, report.kl_value, report.data_term, val_nll))
            if early_stopping and bad_checks >= schedule.patience:
                stopped_at = it
                break

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("iteration,objective,kl,data_term,validation_nll\n")
            for row in log_rows:
                vals = [str(row[0])] + [repr(v) if v is not None else "" for v in row[1:]]
                fh.write(",".join(vals) + "\n")

    if early_stopping and best_nll < math.inf:
        return best_state
    return make_state()
