"""scikit-learn style wrapper around the coupled samplers for crossed-effects models."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .chain import choose_k_m
from .crem import CrossedDesign
from .harness import ExperimentConfig, run_experiment
from .rng import derive_seed_sequence


class CoupledGibbsRegressor(RegressorMixin, BaseEstimator):
    """Unbiased posterior means of (mu, a) for a crossed random-effects model.

    ``fit`` runs independent coupled chain pairs and averages the
    time-averaged unbiased estimators of the effects. When ``k`` or ``m`` is
    None they are chosen from a pilot batch (90% quantile of the meeting
    times, ``m = 5 k``).

    Parameters
    ----------
    model : {"crem_collapsed", "crem_vanilla", "glmm_mwg"}
    tau : float or sequence
        Precisions (tau_0, tau_1, ..., tau_K).
    tau_mode : {"fixed", "sample"}
    family, laplace_scale, S, variant
        Response family and MH settings for ``glmm_mwg``.
    n_replicates : int
    n_pilot : int
    k, m : int or None
    max_iter : int
    random_state : int
    n_jobs : int
        Worker processes.

    Attributes
    ----------
    coef_ : ndarray
        Estimated posterior mean of ``[mu, a^(1), ..., a^(K)]``.
    coef_stderr_ : ndarray
        Monte Carlo standard errors across replicates.
    intercept_ : float
    meeting_times_ : ndarray
    k_, m_ : int
    report_ : RunReport
    """

    def __init__(self, model="crem_collapsed", tau=1.0, tau_mode="fixed", family="laplace", laplace_scale=1.0, S=1,
                 variant="fully_factorized_maximal", n_replicates=20, n_pilot=20, k=None, m=None, max_iter=100000,
                 random_state=0, n_jobs=1):
        self.model = model
        self.tau = tau
        self.tau_mode = tau_mode
        self.family = family
        self.laplace_scale = laplace_scale
        self.S = S
        self.variant = variant
        self.n_replicates = n_replicates
        self.n_pilot = n_pilot
        self.k = k
        self.m = m
        self.max_iter = max_iter
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self, K, I, **kw):
        if self.model not in ("crem_collapsed", "crem_vanilla", "glmm_mwg"):
            raise ValueError(f"model {self.model!r} is not a crossed-effects model")
        tau = list(np.broadcast_to(np.asarray(self.tau, dtype=float), (K + 1,)))
        base = dict(model=self.model, K=K, I=I, tau=[float(t) for t in tau], tau_mode=self.tau_mode,
                    family=self.family, laplace_scale=float(self.laplace_scale), S=int(self.S), variant=self.variant,
                    max_iter=int(self.max_iter), base_seed=int(self.random_state), threads=int(self.n_jobs))
        base.update(kw)
        return ExperimentConfig.from_dict(base)

    def fit(self, X, y):
        """Fit on integer level codes ``X`` of shape (N, K), 0-based, and responses ``y``."""
        X, y = check_X_y(X, y, dtype=None, y_numeric=True)
        if not np.all(X == np.round(X)) or X.min() < 0:
            raise ValueError("X must hold non-negative integer level codes")
        X = X.astype(np.int64)
        design = CrossedDesign(X, y)
        K, I = design.K, int(design.sizes.max())
        design = CrossedDesign(X, y, np.maximum(design.sizes, 2))
        k, m = self.k, self.m
        if k is None or m is None:
            pilot_seed = int(derive_seed_sequence(self.random_state, 0, "pilot").generate_state(1)[0])
            pilot = run_experiment(self._config(K, I, replicates=int(self.n_pilot), base_seed=pilot_seed), design)
            pk, pm = choose_k_m([r["T"] for r in pilot.rows])
            k = pk if k is None else k
            m = max(pm, k) if m is None else m
        report = run_experiment(
            self._config(K, I, replicates=int(self.n_replicates), k=int(k), m=int(m), test_functions=["effects"]), design
        )
        est = report.estimates().get("effects")
        if est is None:
            raise RuntimeError("no replicate met within max_iter")
        self.coef_ = np.asarray(est["mean"], dtype=float)
        self.coef_stderr_ = np.asarray([np.nan if s is None else s for s in np.atleast_1d(est["stderr"])], dtype=float)
        self.intercept_ = float(self.coef_[0])
        self.sizes_ = design.sizes.copy()
        self.meeting_times_ = np.array([np.nan if r["T"] is None else r["T"] for r in report.rows], dtype=float)
        self.k_, self.m_ = int(k), int(m)
        self.report_ = report
        self.n_features_in_ = K
        return self

    def effects(self, factor):
        """Estimated posterior means of the effects of ``factor`` (0-based)."""
        check_is_fitted(self, "coef_")
        start = 1 + int(np.sum(self.sizes_[:factor]))
        return self.coef_[start : start + int(self.sizes_[factor])]

    def predict(self, X):
        """Posterior mean of the linear predictor mu + sum_k a^(k) at the given level codes."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=None)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} factors, got {X.shape[1]}")
        X = X.astype(np.int64)
        if X.min() < 0 or np.any(X.max(axis=0) >= self.sizes_):
            raise ValueError("level code out of the fitted range")
        out = np.full(X.shape[0], self.intercept_)
        for k in range(self.n_features_in_):
            out += self.effects(k)[X[:, k]]
        return out
