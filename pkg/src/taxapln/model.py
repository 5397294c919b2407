"""Hierarchical Poisson log-normal generative models and ELBO training.

The tree model couples a latent Gaussian Markov chain over taxonomy levels
with a Poisson emission at the coarsest level and multinomial splitting of
each parent count over its children. The variational family is an amortized
backward factorization: a stacked GRU consumes the level sequence of
log(1 + count) vectors and per-level heads map (GRU state, level counts,
deeper latent) to a diagonal Gaussian posterior. Covariates, when present,
enter through feature-wise affine modulation of the head inputs and of the
latent dynamics inputs.

All combinatorial constants (log X!, multinomial coefficients) are dropped
from both training and reported ELBO values, consistently.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (
    Adam,
    Dense,
    GRUCell,
    MLPBlock,
    ParamStore,
    Tensor,
    backward,
    clip_gradients,
    concat,
    constant,
    diag_embed,
    diag_part,
    exp,
    log,
    logsumexp,
    matmul,
    mul,
    narrow,
    neg,
    softplus,
    solve_lower_rows,
    square,
    take_cols,
    tanh,
    tril_strict,
    tsum,
    zero_grad,
)
from .errors import (
    CovariateDimensionMismatchError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .taxonomy import TaxonomyTree, aggregate_matrix

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PlnTreeConfig:
    gru_hidden: int = 32
    gru_layers: int = 2
    head_hidden: int = 32
    film_hidden: int = 32
    covariate_dim: int = 0
    var_floor: float = 1e-6

    @property
    def conditional(self) -> bool:
        return self.covariate_dim > 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr: float = 1e-3
    clip: float = 5.0
    batch_size: int = 512
    mc_samples: int = 1
    seed: int = 0


def reparameterize(mean: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """Z = m + sqrt(v) * eps with v = exp(logvar)."""
    return ad.add(mean, mul(exp(mul(logvar, 0.5)), constant(noise)))


def film_modulate(a: Tensor, covariates: Tensor, alpha_head, gamma_head) -> Tensor:
    """Apply alpha(C) * a + gamma(C)."""
    alpha = alpha_head(covariates)
    gamma = gamma_head(covariates)
    if alpha.shape[-1] != a.shape[-1]:
        raise ShapeMismatchError(
            f"modulation width {alpha.shape[-1]} != activation width {a.shape[-1]}"
        )
    return ad.add(mul(alpha, a), gamma)


def diag_gaussian_logpdf(z: Tensor, mean: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample log N(z; mean, diag(exp(logvar))), summed over the last axis."""
    delta = ad.add(z, neg(mean))
    quad = mul(square(delta), exp(neg(logvar)))
    return mul(tsum(ad.add(ad.add(quad, logvar), LOG_2PI), axis=-1), -0.5)


class _FilmPair:
    """Alpha/gamma covariate heads of matching output width."""

    def __init__(self, store, name, cov_dim, hidden, width, rng):
        self.alpha = MLPBlock(store, f"{name}.alpha", cov_dim, hidden, width, rng)
        self.gamma = MLPBlock(store, f"{name}.gamma", cov_dim, hidden, width, rng)

    def __call__(self, a: Tensor, covariates: Tensor) -> Tensor:
        return film_modulate(a, covariates, self.alpha, self.gamma)

    def set_identity(self):
        self.alpha.fc2.W.value[:] = 0.0
        self.alpha.fc2.b.value[:] = 1.0
        self.gamma.fc2.W.value[:] = 0.0
        self.gamma.fc2.b.value[:] = 0.0


class PlnTree:
    """Taxonomy-structured Poisson log-normal model with amortized encoder."""

    kind = "plntree"

    def __init__(self, tree: TaxonomyTree, config: PlnTreeConfig | None = None,
                 init_seed: int = 0):
        self.tree = tree
        self.config = config or PlnTreeConfig()
        self.store = ParamStore()
        self.trace: list[float] = []
        rng = np.random.default_rng(init_seed)
        self._build(rng)
        if self.config.conditional:
            self._build_film(rng)

    # -- architecture ------------------------------------------------------

    def _build(self, rng):
        tree, cfg = self.tree, self.config
        K = tree.layer_sizes
        self.k_max = max(K)
        self.store.add("mu1", np.zeros(K[0]))
        # raw Cholesky: strict lower part free, diagonal stored in log scale
        self.store.add("chol1", np.zeros((K[0], K[0])))
        self.dyn_mean = []
        self.dyn_var = []
        for lev in range(1, tree.levels):
            self.dyn_mean.append(
                Dense(self.store, f"dyn{lev}.mean", K[lev - 1], K[lev], rng)
            )
            self.dyn_var.append(
                Dense(self.store, f"dyn{lev}.var", K[lev - 1], K[lev], rng)
            )
        self.gru = []
        for i in range(cfg.gru_layers):
            in_size = self.k_max if i == 0 else cfg.gru_hidden
            self.gru.append(GRUCell(self.store, f"gru{i}", in_size, cfg.gru_hidden, rng))
        self.heads = []
        for lev in range(tree.levels):
            a_dim = cfg.gru_hidden + K[lev]
            if lev < tree.levels - 1:
                a_dim += K[lev + 1]
            self.heads.append(
                MLPBlock(self.store, f"head{lev}", a_dim, cfg.head_hidden, 2 * K[lev], rng)
            )

    def _build_film(self, rng):
        tree, cfg = self.tree, self.config
        K = tree.layer_sizes
        self.dyn_film = []
        for lev in range(1, tree.levels):
            self.dyn_film.append(
                _FilmPair(self.store, f"film.dyn{lev}", cfg.covariate_dim,
                          cfg.film_hidden, K[lev - 1], rng)
            )
        self.enc_film = []
        for lev in range(tree.levels):
            a_dim = cfg.gru_hidden + K[lev]
            if lev < tree.levels - 1:
                a_dim += K[lev + 1]
            self.enc_film.append(
                _FilmPair(self.store, f"film.enc{lev}", cfg.covariate_dim,
                          cfg.film_hidden, a_dim, rng)
            )

    def set_film_identity(self):
        """Freeze all modulation heads to alpha = 1, gamma = 0."""
        for pair in list(getattr(self, "dyn_film", [])) + list(getattr(self, "enc_film", [])):
            pair.set_identity()

    def _chol1(self) -> Tensor:
        raw = self.store.params["chol1"]
        return ad.add(tril_strict(raw), diag_embed(exp(diag_part(raw))))

    def _check_covariates(self, covariates, batch_size):
        if self.config.conditional:
            if covariates is None:
                raise CovariateDimensionMismatchError("conditional model needs covariates")
            covariates = np.asarray(covariates, dtype=float)
            if covariates.shape != (batch_size, self.config.covariate_dim):
                raise CovariateDimensionMismatchError(
                    f"expected covariates of shape ({batch_size}, "
                    f"{self.config.covariate_dim}), got {covariates.shape}"
                )
            return constant(covariates)
        if covariates is not None:
            raise CovariateDimensionMismatchError(
                "covariates supplied to an unconditional model"
            )
        return None

    # -- encoder -----------------------------------------------------------

    def encode(self, x_levels: list[np.ndarray], covariates=None,
               noise: list[np.ndarray] | None = None):
        """Backward-factorized posterior; returns (z, mean, logvar) per level.

        ``noise`` supplies the standard normal draws per level (deepest level
        uses its own entry); with ``noise=None`` the posterior means are
        returned as latents (deterministic encoding).
        """
        tree = self.tree
        n = x_levels[0].shape[0]
        cov = self._check_covariates(covariates, n)
        u_levels = [constant(np.log1p(np.asarray(x, dtype=float))) for x in x_levels]

        # shared recurrent trunk over the coarse-to-fine level sequence
        states = [constant(np.zeros((n, self.config.gru_hidden)))
                  for _ in range(self.config.gru_layers)]
        embeddings = []
        for lev in range(tree.levels):
            padded = u_levels[lev]
            pad_width = self.k_max - tree.layer_sizes[lev]
            if pad_width:
                padded = concat([padded, constant(np.zeros((n, pad_width)))], axis=-1)
            inp = padded
            for i, cell in enumerate(self.gru):
                states[i] = cell(inp, states[i])
                inp = states[i]
            embeddings.append(states[-1])

        z: list = [None] * tree.levels
        means: list = [None] * tree.levels
        logvars: list = [None] * tree.levels
        for lev in range(tree.levels - 1, -1, -1):
            parts = [embeddings[lev], u_levels[lev]]
            if lev < tree.levels - 1:
                parts.append(z[lev + 1])
            a = concat(parts, axis=-1)
            if self.config.conditional:
                a = self.enc_film[lev](a, cov)
            out = self.heads[lev](a)
            k = tree.layer_sizes[lev]
            m = narrow(out, 0, k)
            lv = narrow(out, k, k)
            means[lev] = m
            logvars[lev] = lv
            if noise is None:
                z[lev] = m
            else:
                z[lev] = reparameterize(m, lv, noise[lev])
        return z, means, logvars

    # -- densities ---------------------------------------------------------

    def log_prior(self, z_levels, covariates=None) -> Tensor:
        """Per-sample log density of the latent chain, shape (n,)."""
        n = z_levels[0].shape[0]
        cov = self._check_covariates(covariates, n)
        chol = self._chol1()
        raw = self.store.params["chol1"]
        centered = ad.add(z_levels[0], neg(self.store.params["mu1"]))
        u = solve_lower_rows(chol, centered)
        k1 = self.tree.layer_sizes[0]
        logdet = tsum(diag_part(raw))
        out = ad.add(
            mul(tsum(square(u), axis=-1), -0.5),
            neg(ad.add(logdet, 0.5 * k1 * LOG_2PI)),
        )
        for lev in range(1, self.tree.levels):
            z_prev = z_levels[lev - 1]
            if self.config.conditional:
                z_prev = self.dyn_film[lev - 1](z_prev, cov)
            mean = self.dyn_mean[lev - 1](z_prev)
            var = ad.add(softplus(self.dyn_var[lev - 1](z_prev)), self.config.var_floor)
            out = ad.add(out, diag_gaussian_logpdf(z_levels[lev], mean, log(var)))
        return out

    def log_emission(self, z_levels, x_levels) -> Tensor:
        """Per-sample emission log-likelihood with constants dropped."""
        tree = self.tree
        x1 = constant(np.asarray(x_levels[0], dtype=float))
        out = tsum(ad.add(mul(x1, z_levels[0]), neg(exp(z_levels[0]))), axis=-1)
        for lev in range(tree.levels - 1):
            for k, childset in enumerate(tree.children[lev]):
                if len(childset) < 2:
                    continue
                idx = list(childset)
                logits = take_cols(z_levels[lev + 1], idx)
                xj = np.asarray(x_levels[lev + 1], dtype=float)[:, idx]
                parent = np.asarray(x_levels[lev], dtype=float)[:, k]
                term = ad.add(
                    tsum(mul(constant(xj), logits), axis=-1),
                    neg(mul(constant(parent), logsumexp(logits, axis=-1))),
                )
                out = ad.add(out, term)
        return out

    def log_q(self, z_levels, means, logvars) -> Tensor:
        out = None
        for z, m, lv in zip(z_levels, means, logvars):
            term = diag_gaussian_logpdf(z, m, lv)
            out = term if out is None else ad.add(out, term)
        return out

    def elbo(self, x_levels, covariates=None, mc_samples: int = 1,
             rng: np.random.Generator | None = None,
             noise: list[list[np.ndarray]] | None = None) -> Tensor:
        """Monte-Carlo ELBO averaged over the batch and draws.

        ``noise`` fixes the standard normal draws (one list of per-level
        arrays per MC sample), overriding ``rng``.
        """
        n = x_levels[0].shape[0]
        if noise is None:
            rng = rng or np.random.default_rng(0)
            noise = [
                [rng.standard_normal((n, k)) for k in self.tree.layer_sizes]
                for _ in range(mc_samples)
            ]
        total = None
        for eps in noise:
            z, m, lv = self.encode(x_levels, covariates, noise=eps)
            term = ad.add(
                ad.add(self.log_prior(z, covariates), self.log_emission(z, x_levels)),
                neg(self.log_q(z, m, lv)),
            )
            total = term if total is None else ad.add(total, term)
        return mul(tsum(total), 1.0 / (n * len(noise)))

    # -- training ----------------------------------------------------------

    def fit(self, x_levels, covariates=None, train: TrainConfig | None = None) -> list[float]:
        """Maximize the ELBO with Adam; returns the per-epoch ELBO trace."""
        train = train or TrainConfig(epochs=2000)
        rng = np.random.default_rng(train.seed)
        n = x_levels[0].shape[0]
        if n == 0:
            raise ValueError("empty dataset")
        opt = Adam(self.store.params, lr=train.lr)
        trace = []
        for _ in range(train.epochs):
            order = rng.permutation(n)
            epoch_elbo = 0.0
            for start in range(0, n, train.batch_size):
                idx = order[start : start + train.batch_size]
                batch = [x[idx] for x in x_levels]
                cov = covariates[idx] if covariates is not None else None
                zero_grad(self.store.params)
                value = self.elbo(batch, cov, mc_samples=train.mc_samples, rng=rng)
                if not np.isfinite(value.value):
                    raise NonFiniteLossError(
                        f"non-finite ELBO at epoch {len(trace)}: {value.value}"
                    )
                backward(neg(value))
                grads = {
                    k: t.grad
                    for k, t in self.store.params.items()
                    if t.grad is not None
                }
                grads = clip_gradients(grads, train.clip)
                opt.step(grads)
                epoch_elbo += float(value.value) * len(idx)
            trace.append(epoch_elbo / n)
        self.trace.extend(trace)
        return trace

    # -- sampling ----------------------------------------------------------

    def prior_latents(self, n: int, rng: np.random.Generator,
                      covariates: np.ndarray | None = None) -> list[np.ndarray]:
        """Ancestral draw of the latent chain, eager numpy values."""
        cov = None
        if self.config.conditional:
            cov = self._check_covariates(covariates, n)
        chol = self._chol1().value
        mu1 = self.store.params["mu1"].value
        z = [mu1 + rng.standard_normal((n, len(mu1))) @ chol.T]
        for lev in range(1, self.tree.levels):
            z_prev = constant(z[-1])
            if self.config.conditional:
                z_prev = self.dyn_film[lev - 1](z_prev, cov)
            mean = self.dyn_mean[lev - 1](z_prev).value
            var = softplus(self.dyn_var[lev - 1](z_prev)).value + self.config.var_floor
            z.append(mean + np.sqrt(var) * rng.standard_normal(mean.shape))
        return z

    def posterior_latents(self, x_levels, rng: np.random.Generator,
                          covariates=None) -> list[np.ndarray]:
        """One posterior draw per input sample."""
        n = x_levels[0].shape[0]
        noise = [rng.standard_normal((n, k)) for k in self.tree.layer_sizes]
        z, _, _ = self.encode(x_levels, covariates, noise=noise)
        return [t.value for t in z]

    def decode(self, z_levels: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
        """Sample counts from the emission process; parent-sum holds exactly."""
        tree = self.tree
        rate = np.exp(np.minimum(z_levels[0], 30.0))
        counts = [rng.poisson(rate).astype(np.int64)]
        for lev in range(tree.levels - 1):
            nxt = np.zeros((counts[0].shape[0], tree.layer_sizes[lev + 1]), dtype=np.int64)
            for k, childset in enumerate(tree.children[lev]):
                idx = list(childset)
                if len(idx) == 1:
                    nxt[:, idx[0]] = counts[lev][:, k]
                    continue
                logits = z_levels[lev + 1][:, idx]
                shifted = logits - logits.max(axis=1, keepdims=True)
                probs = np.exp(shifted)
                probs /= probs.sum(axis=1, keepdims=True)
                nxt[:, idx] = rng.multinomial(counts[lev][:, k], probs)
            counts.append(nxt)
        return counts

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": self.kind,
            "taxonomy_hash": self.tree.content_hash(),
            "taxonomy": self.tree.to_json(),
            "config": asdict(self.config),
            "params": {k: v.tolist() for k, v in self.store.state().items()},
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, doc: dict, tree: TaxonomyTree) -> "PlnTree":
        if doc["taxonomy_hash"] != tree.content_hash():
            raise ShapeMismatchError("checkpoint taxonomy hash mismatch")
        model = cls(tree, PlnTreeConfig(**doc["config"]))
        model.store.load({k: np.asarray(v) for k, v in doc["params"].items()})
        model.trace = list(doc.get("trace", []))
        return model


class FlatPln:
    """Flat Poisson log-normal baseline: full-covariance latent, no hierarchy."""

    kind = "pln"

    def __init__(self, dim: int, config: PlnTreeConfig | None = None, init_seed: int = 0):
        self.dim = dim
        self.config = config or PlnTreeConfig()
        self.store = ParamStore()
        self.trace: list[float] = []
        rng = np.random.default_rng(init_seed)
        self.store.add("mu", np.zeros(dim))
        self.store.add("chol", np.zeros((dim, dim)))
        self.encoder = MLPBlock(self.store, "enc", dim, self.config.head_hidden, 2 * dim, rng)
        if self.config.conditional:
            self.enc_film = _FilmPair(
                self.store, "film.enc", self.config.covariate_dim,
                self.config.film_hidden, dim, rng,
            )
            self.cond_mean = Dense(
                self.store, "film.mean", self.config.covariate_dim, dim, rng
            )

    def _chol(self) -> Tensor:
        raw = self.store.params["chol"]
        return ad.add(tril_strict(raw), diag_embed(exp(diag_part(raw))))

    def _check_covariates(self, covariates, n):
        if self.config.conditional:
            if covariates is None:
                raise CovariateDimensionMismatchError("conditional model needs covariates")
            covariates = np.asarray(covariates, dtype=float)
            if covariates.shape != (n, self.config.covariate_dim):
                raise CovariateDimensionMismatchError(
                    f"bad covariate shape {covariates.shape}"
                )
            return constant(covariates)
        return None

    def _prior_mean(self, cov) -> Tensor:
        mu = self.store.params["mu"]
        if cov is not None:
            return ad.add(mu, self.cond_mean(cov))
        return mu

    def encode(self, x: np.ndarray, covariates=None, noise: np.ndarray | None = None):
        n = x.shape[0]
        cov = self._check_covariates(covariates, n)
        u = constant(np.log1p(np.asarray(x, dtype=float)))
        if cov is not None:
            u = self.enc_film(u, cov)
        out = self.encoder(u)
        m = narrow(out, 0, self.dim)
        lv = narrow(out, self.dim, self.dim)
        z = m if noise is None else reparameterize(m, lv, noise)
        return z, m, lv

    def log_prior(self, z: Tensor, covariates=None) -> Tensor:
        n = z.shape[0]
        cov = self._check_covariates(covariates, n)
        chol = self._chol()
        raw = self.store.params["chol"]
        centered = ad.add(z, neg(self._prior_mean(cov)))
        u = solve_lower_rows(chol, centered)
        return ad.add(
            mul(tsum(square(u), axis=-1), -0.5),
            neg(ad.add(tsum(diag_part(raw)), 0.5 * self.dim * LOG_2PI)),
        )

    def log_emission(self, z: Tensor, x: np.ndarray) -> Tensor:
        xc = constant(np.asarray(x, dtype=float))
        return tsum(ad.add(mul(xc, z), neg(exp(z))), axis=-1)

    def elbo(self, x, covariates=None, mc_samples: int = 1,
             rng: np.random.Generator | None = None,
             noise: list[np.ndarray] | None = None) -> Tensor:
        n = x.shape[0]
        if noise is None:
            rng = rng or np.random.default_rng(0)
            noise = [rng.standard_normal((n, self.dim)) for _ in range(mc_samples)]
        total = None
        for eps in noise:
            z, m, lv = self.encode(x, covariates, noise=eps)
            term = ad.add(
                ad.add(self.log_prior(z, covariates), self.log_emission(z, x)),
                neg(diag_gaussian_logpdf(z, m, lv)),
            )
            total = term if total is None else ad.add(total, term)
        return mul(tsum(total), 1.0 / (n * len(noise)))

    def fit(self, x, covariates=None, train: TrainConfig | None = None) -> list[float]:
        train = train or TrainConfig(epochs=2000)
        rng = np.random.default_rng(train.seed)
        n = x.shape[0]
        opt = Adam(self.store.params, lr=train.lr)
        trace = []
        for _ in range(train.epochs):
            order = rng.permutation(n)
            epoch_elbo = 0.0
            for start in range(0, n, train.batch_size):
                idx = order[start : start + train.batch_size]
                cov = covariates[idx] if covariates is not None else None
                zero_grad(self.store.params)
                value = self.elbo(x[idx], cov, mc_samples=train.mc_samples, rng=rng)
                if not np.isfinite(value.value):
                    raise NonFiniteLossError(f"non-finite ELBO: {value.value}")
                backward(neg(value))
                grads = {k: t.grad for k, t in self.store.params.items()
                         if t.grad is not None}
                grads = clip_gradients(grads, train.clip)
                opt.step(grads)
                epoch_elbo += float(value.value) * len(idx)
            trace.append(epoch_elbo / n)
        self.trace.extend(trace)
        return trace

    def prior_latents(self, n: int, rng: np.random.Generator,
                      covariates=None) -> np.ndarray:
        cov = self._check_covariates(covariates, n)
        mean = self._prior_mean(cov).value
        chol = self._chol().value
        return mean + rng.standard_normal((n, self.dim)) @ chol.T

    def posterior_latents(self, x, rng: np.random.Generator, covariates=None) -> np.ndarray:
        noise = rng.standard_normal((x.shape[0], self.dim))
        z, _, _ = self.encode(x, covariates, noise=noise)
        return z.value

    def decode(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rate = np.exp(np.minimum(z, 30.0))
        return rng.poisson(rate).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": self.kind,
            "dim": self.dim,
            "config": asdict(self.config),
            "params": {k: v.tolist() for k, v in self.store.state().items()},
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FlatPln":
        model = cls(doc["dim"], PlnTreeConfig(**doc["config"]))
        model.store.load({k: np.asarray(v) for k, v in doc["params"].items()})
        model.trace = list(doc.get("trace", []))
        return model


def levels_from_leaves(tree: TaxonomyTree, leaf_counts: np.ndarray) -> list[np.ndarray]:
    """Convenience: batched leaf matrix -> per-level matrices."""
    return aggregate_matrix(tree, leaf_counts)
