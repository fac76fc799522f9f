"""Oracle equivalence suite run by ``portraitkit oracle-check``.

Each check draws random (z, t) points, compares two independent routes to the
same quantity and reports the worst residual against its tolerance.
"""

from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule, make_rng, make_schedule
from .guidance import cfg_score, classifier_guidance
from .oracle import (GmmScoreModel, gmm_eps, gmm_log_density, gmm_posterior, gmm_posterior_log_grad, gmm_score,
                     load_model)

BAYES_TOL = 1e-9
FD_TOL = 1e-4
FD_STEP = 1e-5
POSTERIOR_SUM_TOL = 1e-12


def random_points(m: GmmScoreModel, n: int, s: NoiseSchedule, rng: np.random.Generator):
    """Timesteps uniform over the schedule and points spread around the diffused data."""
    ts = rng.integers(0, s.T, size=n)
    k = rng.integers(0, m.n_components, size=n)
    ab = s.alpha_bar[ts][:, None]
    spread = np.sqrt(ab * m.variances[k] + 1.0 - ab)
    z = np.sqrt(ab) * m.means[k] + 2.0 * spread * rng.standard_normal((n, m.dims))
    return z, ts


def _conditions(m: GmmScoreModel) -> list[str]:
    if not m.conditions:
        raise ValueError("model has no condition table; guidance checks need at least one condition")
    return sorted(m.conditions)


def bayes_residual(m, s, z, ts, rng) -> float:
    """Max |CFG - classifier guidance with the exact posterior gradient|."""
    conds = _conditions(m)
    worst = 0.0
    for zi, t in zip(z, ts):
        c = conds[rng.integers(len(conds))]
        w = float(rng.uniform(0.0, 5.0))
        eps_c = gmm_eps(m, zi, t, c, s)
        eps_u = gmm_eps(m, zi, t, None, s)
        grad = gmm_posterior_log_grad(m, zi, t, c, s)
        diff = cfg_score(eps_c, eps_u, w) - classifier_guidance(eps_c, grad, w, s.sigma_at(t))
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def score_identity_residual(m, s, z, ts) -> float:
    """Max |(cond score - marginal score) - posterior log-gradient|."""
    worst = 0.0
    for c in _conditions(m):
        for zi, t in zip(z, ts):
            d = gmm_score(m, zi, t, c, s) - gmm_score(m, zi, t, None, s) - gmm_posterior_log_grad(m, zi, t, c, s)
            worst = max(worst, float(np.max(np.abs(d))))
    return worst


def fd_relative_error(m, s, z, ts, rng, h: float = FD_STEP) -> float:
    """Max relative error of the analytic score against central differences."""
    conds = [None] + (sorted(m.conditions) if m.conditions else [])
    eye = np.eye(m.dims) * h
    worst = 0.0
    for zi, t in zip(z, ts):
        c = conds[rng.integers(len(conds))]
        pts = np.concatenate([zi + eye, zi - eye])
        lp = gmm_log_density(m, pts, t, c, s)
        fd = (lp[: m.dims] - lp[m.dims:]) / (2 * h)
        g = gmm_score(m, zi, t, c, s)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - g) / denom))
    return worst


def posterior_sum_residual(m, s, z, ts) -> float:
    conds = _conditions(m)
    worst = 0.0
    for zi, t in zip(z, ts):
        total = sum(float(gmm_posterior(m, zi, t, c, s)) for c in conds)
        worst = max(worst, abs(total - 1.0))
    return worst


def run_oracle_checks(model: str | GmmScoreModel, trials: int = 1000, seed: int = 0,
                      s: NoiseSchedule | None = None) -> dict:
    """Run every check and return a JSON-serializable report."""
    m = load_model(model) if not isinstance(model, GmmScoreModel) else model
    s = s or make_schedule()
    rng = make_rng(seed)
    z, ts = random_points(m, trials, s, rng)
    checks = []

    def add(name, achieved, required):
        checks.append({"name": name, "achieved": achieved, "required": required, "op": "<",
                       "passed": bool(achieved < required)})

    add("score_vs_finite_difference_rel_err", fd_relative_error(m, s, z, ts, rng), FD_TOL)
    if m.conditions:
        add("bayes_identity_cfg_vs_classifier_max_abs", bayes_residual(m, s, z, ts, rng), BAYES_TOL)
        add("score_difference_vs_posterior_grad_max_abs", score_identity_residual(m, s, z, ts), BAYES_TOL)
        add("posterior_sum_max_abs", posterior_sum_residual(m, s, z, ts), POSTERIOR_SUM_TOL)
    return {"trials": trials, "seed": seed, "dims": m.dims, "components": m.n_components,
            "checks": checks, "passed": all(c["passed"] for c in checks)}
