"""Synthetic RCT and observational-data generator.

The generator specifies the causal margin directly: both potential outcomes
are materialized for every unit from a marginal structural model, and a
latent trivariate Gaussian copula couples (x1, x2, outcome residual).  Hidden
confounding enters only through the observational treatment assignment, where
``psi`` scales the influence of the unmeasured u1 + u2.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ScenarioConfig

RCT, RWD = "rct", "rwd"

# The effect modifier x3 has a fixed standard-normal margin, so its mean is
# an analytic constant rather than a tunable parameter.
MEAN_X3 = 0.0

EXPORT_COLUMNS = ("x1", "x2", "x3", "x4", "a", "y", "n1", "n2", "n3", "s")
DEBUG_COLUMNS = EXPORT_COLUMNS + ("u1", "u2", "z3", "y0", "y1")


@dataclass
class Dataset:
    """Column-oriented table of units from a single source (RCT or RWD)."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    z3: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    a: np.ndarray
    y: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    n3: np.ndarray
    s: np.ndarray

    @property
    def n(self) -> int:
        return self.x1.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return getattr(self, name)
        except AttributeError:
            raise KeyError(f"dataset has no column {name!r}") from None

    def covariates(self, names: tuple[str, ...]) -> np.ndarray:
        return np.column_stack([self.column(c) for c in names])

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(**{f.name: getattr(self, f.name)[idx] for f in dataclasses.fields(self)})

    def to_csv(self, debug_oracle: bool = False) -> str:
        cols = DEBUG_COLUMNS if debug_oracle else EXPORT_COLUMNS
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        mat = np.column_stack([self.column(c) for c in cols])
        for row in mat:
            buf.write(",".join(format(v, ".17g") for v in row) + "\n")
        return buf.getvalue()


def concat(datasets: list[Dataset]) -> Dataset:
    """Pool datasets row-wise (mixed sources are intentional here)."""
    return Dataset(
        **{
            f.name: np.concatenate([getattr(d, f.name) for d in datasets])
            for f in dataclasses.fields(Dataset)
        }
    )


def sample_covariates(cfg: ScenarioConfig, n: int, rng: np.random.Generator) -> dict:
    """Draw covariates and latents for ``n`` units.

    Returns a dict of columns including the latent copula residual ``z3``,
    which later becomes the conditional outcome noise.  The trivariate normal
    (z1, z2, z3) carries the configured correlations; x1 = z1 and
    x2 = 1{z2 <= 0} (a half-probability threshold), while z3 is retained.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    corr = cfg.copula_corr()
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigError(
            f"copula_logits {cfg.copula_logits} imply a non-positive-definite correlation matrix"
        ) from None
    z = rng.standard_normal((n, 3)) @ chol.T
    var_u1, var_u2 = cfg.u_vars
    return {
        "x1": z[:, 0],
        "x2": (z[:, 1] <= 0.0).astype(float),
        "x3": rng.standard_normal(n),
        "x4": rng.standard_normal(n),
        "u1": np.sqrt(var_u1) * rng.standard_normal(n),
        "u2": np.sqrt(var_u2) * rng.standard_normal(n),
        "z3": z[:, 2],
    }


def potential_outcome(cfg: ScenarioConfig, cols: dict, a: float, alpha: float) -> np.ndarray:
    """Evaluate y(a) from the marginal structural model with shared residual z3."""
    m = cfg.msm
    return (
        m.intercept
        + m.beta_a * a
        + m.beta_ax3 * a * cols["x3"]
        + m.beta_x3 * cols["x3"]
        + alpha * cols["x4"] ** 2
        + cols["u1"]
        + cols["u2"]
        + cols["z3"]
    )


def sample_outcomes(cfg: ScenarioConfig, cols: dict, source: str, rng: np.random.Generator) -> dict:
    """Add both potential outcomes and the three negative-control outcomes.

    y0 and y1 share one residual z3 (rank preserving); this leaves every
    marginal law, and hence the target effect, unchanged while making oracle
    checks exact.  The curvature coefficient is alpha_r for the RCT and
    alpha_o for the RWD.
    """
    alpha = cfg.alpha_r if source == RCT else cfg.alpha_o
    n = cols["x1"].shape[0]
    out = dict(cols)
    out["y0"] = potential_outcome(cfg, cols, 0.0, alpha)
    out["y1"] = potential_outcome(cfg, cols, 1.0, alpha)
    base = 1.0 + cols["x2"] + cols["x3"]
    out["n1"] = base + cols["u1"] + cfg.nco_sd * rng.standard_normal(n)
    out["n2"] = base + cols["u2"] + cfg.nco_sd * rng.standard_normal(n)
    out["n3"] = cfg.nco_sd * rng.standard_normal(n)
    return out


def assign_treatment(cfg: ScenarioConfig, cols: dict, source: str, rng: np.random.Generator) -> dict:
    """Assign treatment (fair coin in the RCT, confounded logit in the RWD)."""
    n = cols["x1"].shape[0]
    if source == RCT:
        p = np.full(n, 0.5)
    elif source == RWD:
        c = cfg.rwd_ps
        lin = (
            c.intercept
            + c.x1 * cols["x1"]
            + c.x2 * cols["x2"]
            + c.x3 * cols["x3"]
            + cfg.psi * (cols["u1"] + cols["u2"])
        )
        p = 1.0 / (1.0 + np.exp(-lin))
    else:
        raise ConfigError(f"unknown source {source!r}")
    out = dict(cols)
    out["a"] = (rng.random(n) < p).astype(float)
    out["y"] = np.where(out["a"] == 1.0, cols["y1"], cols["y0"])
    out["s"] = np.full(n, 1.0 if source == RCT else 0.0)
    return out


def generate_dataset(cfg: ScenarioConfig, source: str, rng: np.random.Generator) -> Dataset:
    """Sample one complete dataset for the given source."""
    n = cfg.n_r if source == RCT else cfg.n_o
    cols = sample_covariates(cfg, n, rng)
    cols = sample_outcomes(cfg, cols, source, rng)
    cols = assign_treatment(cfg, cols, source, rng)
    return Dataset(**cols)


def replication_rng(cfg: ScenarioConfig, rep: int, salt: int = 0) -> np.random.Generator:
    """Deterministic per-replication stream, invariant to execution order."""
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, salt, rep)))


def generate_pair(cfg: ScenarioConfig, rep: int = 0) -> tuple[Dataset, Dataset]:
    """Generate the (RCT, RWD) pair for one replication."""
    rng = replication_rng(cfg, rep)
    return generate_dataset(cfg, RCT, rng), generate_dataset(cfg, RWD, rng)


def true_ate(cfg: ScenarioConfig) -> float:
    """Analytic target effect: beta_a + beta_ax3 * E[x3]."""
    return cfg.msm.beta_a + cfg.msm.beta_ax3 * MEAN_X3
