"""Exact Gaussian-process regression with an isotropic RBF kernel.

Hyperparameters (length scale, observation noise) are selected by maximizing
the log marginal likelihood over a log-spaced grid, optionally followed by a
golden-section refinement pass per axis. Inputs are standardized per
dimension and outputs per target; the kernel has unit prior variance in
standardized units.

Prediction means are computed with reduction orders that do not depend on the
batch size, so predicting a batch equals stacking single-point predictions
bitwise.
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_float_array

__all__ = [
    "rbf_kernel",
    "log_marginal_likelihood",
    "GprSurrogate",
    "predict_joint",
    "DEFAULT_LENGTH_SCALE_GRID",
    "DEFAULT_NOISE_LEVEL_GRID",
]

#: Default hyperparameter search grids (standardized units): 40 log-spaced
#: length scales spanning [1e-1, 10**1.5] and {0} plus 30 log-spaced noise
#: levels spanning [1e-6, 1e-1].
DEFAULT_LENGTH_SCALE_GRID = np.logspace(-1.0, 1.5, 40)
DEFAULT_NOISE_LEVEL_GRID = np.concatenate(([0.0], np.logspace(-6.0, -1.0, 30)))

#: Diagonal regularization added before factorization, escalated tenfold on
#: failure up to this ceiling.
DEFAULT_JITTER = 1e-10
MAX_JITTER = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)

_MAGIC = b"VOLSURR-GPR-V1\n"
_FORMAT_TAG = "gpr-surrogate-v1"

#: Query rows processed per block during prediction.
_PREDICT_CHUNK = 512


def _pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, accumulated dimension by dimension.

    Every output entry is computed elementwise, so each row of the result is
    independent of which other rows are present in the batch.
    """
    out = np.zeros((a.shape[0], b.shape[0]))
    tmp = np.empty_like(out)
    for dim in range(a.shape[1]):
        np.subtract(a[:, dim, None], b[:, dim][None, :], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out += tmp
    return out


def rbf_kernel(x, y=None, length_scale: float = 1.0):
    """RBF kernel ``exp(-||x - y||^2 / (2 * length_scale**2))``.

    Accepts single vectors (returns a float) or 2-D arrays of row vectors
    (returns the kernel matrix). Note the length scale enters squared.
    """
    if length_scale <= 0:
        raise ValueError(f"length_scale must be > 0, got {length_scale}")
    x = as_float_array(x, "x")
    y = x if y is None else as_float_array(y, "y")
    scalar = x.ndim == 1 and y.ndim == 1
    xa = np.atleast_2d(x)
    ya = np.atleast_2d(y)
    if xa.shape[1] != ya.shape[1]:
        raise ValueError(
            f"dimension mismatch: {xa.shape[1]} vs {ya.shape[1]} features"
        )
    k = np.exp(_pairwise_sqdist(xa, ya) * (-0.5 / length_scale**2))
    return float(k[0, 0]) if scalar else k


def _jitter_ladder(base: float):
    if base < 0:
        raise ValueError(f"jitter must be >= 0, got {base}")
    ladder = [base]
    current = base if base > 0 else DEFAULT_JITTER
    if base == 0:
        ladder.append(current)
    while current < MAX_JITTER:
        current *= 10.0
        ladder.append(min(current, MAX_JITTER))
    return ladder


def _lml_from_kernel(k0: np.ndarray, y: np.ndarray, noise_level: float,
                     jitter: float, work: np.ndarray | None = None):
    """LML per target column from a unit-diagonal kernel matrix.

    Returns ``(lml_per_target, cholesky_factor, jitter_used)``; the jitter is
    escalated tenfold on factorization failure up to :data:`MAX_JITTER`.
    """
    n = k0.shape[0]
    if work is None:
        work = np.empty_like(k0)
    last_error = None
    for jit in _jitter_ladder(jitter):
        np.copyto(work, k0)
        work.flat[:: n + 1] += noise_level**2 + jit
        try:
            factor = cholesky(work, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            last_error = exc
            continue
        log_det = 2.0 * np.log(np.diag(factor)).sum()
        lmls = np.empty(y.shape[1])
        for t in range(y.shape[1]):
            alpha = cho_solve((factor, True), y[:, t], check_finite=False)
            lmls[t] = -0.5 * float(y[:, t] @ alpha) - 0.5 * log_det - 0.5 * n * _LOG_2PI
        return lmls, factor, jit
    raise np.linalg.LinAlgError(
        f"kernel factorization failed even with jitter {MAX_JITTER:g}"
    ) from last_error


def log_marginal_likelihood(X, y, length_scale: float, noise_level: float = 0.0,
                            jitter: float = DEFAULT_JITTER):
    """Log marginal likelihood of ``y`` under the RBF prior plus noise.

    Evaluates ``-y^T K~^{-1} y / 2 - log det(K~) / 2 - n log(2 pi) / 2`` with
    ``K~ = K + (noise_level**2 + jitter) I`` through a Cholesky factorization.
    ``X`` and ``y`` are used as given (no standardization). Returns a float
    for a single target column, an array for multi-column ``y``.
    """
    if length_scale <= 0:
        raise ValueError(f"length_scale must be > 0, got {length_scale}")
    if noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {noise_level}")
    X = np.atleast_2d(as_float_array(X, "X"))
    y = as_float_array(y, "y")
    single = y.ndim == 1
    y2 = y.reshape(X.shape[0], -1)
    if y2.shape[0] != X.shape[0]:
        raise ValueError("X and y must have the same number of rows")
    sqd = _pairwise_sqdist(X, X)
    k0 = np.exp(sqd * (-0.5 / length_scale**2))
    lmls, _, _ = _lml_from_kernel(k0, y2, noise_level, jitter)
    return float(lmls[0]) if single else lmls


def _golden_section_max(fun, lo: float, hi: float, *, tol: float = 1e-3,
                        max_iter: int = 60):
    """Golden-section maximization on [lo, hi]; returns the best point seen."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    best_x, best_f = (c, fc) if fc >= fd else (d, fd)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
            if fc > best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
            if fd > best_f:
                best_x, best_f = d, fd
    return best_x, best_f


class GprSurrogate(RegressorMixin, BaseEstimator):
    """GPR regressor mapping risk factors to valuations.

    Parameters
    ----------
    length_scale_grid : array-like or None
        Candidate kernel length scales (standardized-input units). ``None``
        selects :data:`DEFAULT_LENGTH_SCALE_GRID`.
    noise_level_grid : array-like or None
        Candidate observation noise levels (standardized-output units).
        ``None`` selects :data:`DEFAULT_NOISE_LEVEL_GRID`; pass ``[0.0]`` to
        pin the noise to zero and search the length scale only.
    refine : bool
        Run one golden-section refinement pass per axis around the grid
        argmax (skipped at grid edges and at the pinned zero-noise point).
    jitter : float
        Diagonal regularization added to the kernel before factorization; it
        acts as a noise floor and is escalated tenfold on failure up to 1e-6.

    The fit supports a single target ``y`` of shape ``(n,)`` or several
    targets ``(n, m)``; hyperparameters are selected per target while the
    expensive factorizations of the search grid are shared, since they do not
    depend on the targets.
    """

    def __init__(self, length_scale_grid=None, noise_level_grid=None,
                 refine: bool = True, jitter: float = DEFAULT_JITTER):
        self.length_scale_grid = length_scale_grid
        self.noise_level_grid = noise_level_grid
        self.refine = refine
        self.jitter = jitter

    # ------------------------------------------------------------- fitting
    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._single_output_ = y.ndim == 1
        Y = y.reshape(X.shape[0], -1).astype(float)
        n, d = X.shape
        if n < 2:
            raise ValueError("at least two training rows are required")

        x_scale = X.std(axis=0)
        if np.any(x_scale == 0):
            raise ValueError("degenerate training data: constant input column")
        self.x_mean_ = X.mean(axis=0)
        self.x_scale_ = x_scale
        self.y_mean_ = Y.mean(axis=0)
        y_scale = Y.std(axis=0)
        self.y_scale_ = np.where(y_scale == 0, 1.0, y_scale)

        Xs = (X - self.x_mean_) / self.x_scale_
        Ys = (Y - self.y_mean_) / self.y_scale_
        self.X_train_ = Xs
        self.y_train_ = Ys
        self.n_features_in_ = d

        lg = as_float_array(
            DEFAULT_LENGTH_SCALE_GRID if self.length_scale_grid is None
            else self.length_scale_grid,
            "length_scale_grid",
        )
        sg = as_float_array(
            DEFAULT_NOISE_LEVEL_GRID if self.noise_level_grid is None
            else self.noise_level_grid,
            "noise_level_grid",
        )
        if lg.ndim != 1 or np.any(lg <= 0):
            raise ValueError("length_scale_grid must be 1-D and positive")
        if sg.ndim != 1 or np.any(sg < 0):
            raise ValueError("noise_level_grid must be 1-D and non-negative")
        self.length_scale_grid_ = lg
        self.noise_level_grid_ = sg

        n_targets = Ys.shape[1]
        sqd = _pairwise_sqdist(Xs, Xs)
        k0 = np.empty_like(sqd)
        work = np.empty_like(sqd)
        lml_grid = np.empty((lg.size, sg.size, n_targets))
        for i, scale in enumerate(lg):
            np.multiply(sqd, -0.5 / scale**2, out=k0)
            np.exp(k0, out=k0)
            for j, noise in enumerate(sg):
                lml_grid[i, j, :] = _lml_from_kernel(k0, Ys, noise, self.jitter, work)[0]
        self.lml_grid_ = lml_grid

        def lml_single(scale: float, noise: float, t: int) -> float:
            np.multiply(sqd, -0.5 / scale**2, out=k0)
            np.exp(k0, out=k0)
            return _lml_from_kernel(k0, Ys[:, t : t + 1], noise, self.jitter, work)[0][0]

        length_scale = np.empty(n_targets)
        noise_level = np.empty(n_targets)
        lml = np.empty(n_targets)
        for t in range(n_targets):
            i, j = np.unravel_index(int(np.argmax(lml_grid[:, :, t])), (lg.size, sg.size))
            best_l, best_s, best_f = lg[i], sg[j], lml_grid[i, j, t]
            if self.refine and 0 < i < lg.size - 1:
                u, f = _golden_section_max(
                    lambda u: lml_single(10.0**u, best_s, t),
                    math.log10(lg[i - 1]),
                    math.log10(lg[i + 1]),
                )
                if f > best_f:
                    best_l, best_f = 10.0**u, f
            # the zero-noise grid point (index 0) has no log-space bracket
            if self.refine and 2 <= j <= sg.size - 2:
                u, f = _golden_section_max(
                    lambda u: lml_single(best_l, 10.0**u, t),
                    math.log10(sg[j - 1]),
                    math.log10(sg[j + 1]),
                )
                if f > best_f:
                    best_s, best_f = 10.0**u, f
            length_scale[t] = best_l
            noise_level[t] = best_s
            lml[t] = best_f

        self.length_scale_ = length_scale
        self.noise_level_ = noise_level
        self.lml_ = lml

        alpha = np.empty_like(Ys)
        jitter_used = np.empty(n_targets)
        for t in range(n_targets):
            np.multiply(sqd, -0.5 / length_scale[t] ** 2, out=k0)
            np.exp(k0, out=k0)
            _, factor, jit = _lml_from_kernel(
                k0, Ys[:, t : t + 1], noise_level[t], self.jitter, work
            )
            alpha[:, t] = cho_solve((factor, True), Ys[:, t], check_finite=False)
            jitter_used[t] = jit
        self.alpha_ = alpha
        self.jitter_used_ = jitter_used
        self._factor_cache: dict[int, np.ndarray] = {}
        return self

    # ---------------------------------------------------------- prediction
    def _factor(self, t: int) -> np.ndarray:
        """Cholesky factor for target ``t``, rebuilt on demand."""
        cache = getattr(self, "_factor_cache", None)
        if cache is None:
            cache = self._factor_cache = {}
        if t not in cache:
            k = rbf_kernel(self.X_train_, length_scale=self.length_scale_[t])
            k.flat[:: k.shape[0] + 1] += self.noise_level_[t] ** 2 + self.jitter_used_[t]
            cache[t] = cholesky(k, lower=True, overwrite_a=True, check_finite=False)
        return cache[t]

    def predict(self, X, return_std: bool = False):
        check_is_fitted(self, "alpha_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"dimension mismatch: model has {self.n_features_in_} features, "
                f"got {X.shape[1]}"
            )
        Xs = (X - self.x_mean_) / self.x_scale_
        n_targets = self.alpha_.shape[1]
        mean = np.empty((X.shape[0], n_targets))
        std = np.empty_like(mean) if return_std else None

        for lo in range(0, Xs.shape[0], _PREDICT_CHUNK):
            block = Xs[lo : lo + _PREDICT_CHUNK]
            sqd = _pairwise_sqdist(block, self.X_train_)
            for t in range(n_targets):
                mean[lo : lo + _PREDICT_CHUNK, t] = self._predict_chunk_mean(sqd, t)
                if return_std:
                    k_star = np.exp(sqd * (-0.5 / self.length_scale_[t] ** 2))
                    factor = self._factor(t)
                    for r in range(k_star.shape[0]):
                        v = solve_triangular(
                            factor, k_star[r], lower=True, check_finite=False
                        )
                        var = 1.0 - float(v @ v)
                        std[lo + r, t] = math.sqrt(max(var, 0.0))

        mean = self.y_mean_ + self.y_scale_ * mean
        if return_std:
            std = std * self.y_scale_
        if self._single_output_:
            mean = mean[:, 0]
            std = std[:, 0] if return_std else None
        return (mean, std) if return_std else mean

    def predict_variance(self, X):
        """Posterior predictive variance (de-standardized units)."""
        _, std = self.predict(X, return_std=True)
        return std**2

    # -------------------------------------------------------- serialization
    _ARRAY_ATTRS = (
        "x_mean_", "x_scale_", "y_mean_", "y_scale_", "X_train_", "y_train_",
        "alpha_", "length_scale_", "noise_level_", "lml_", "jitter_used_",
        "length_scale_grid_", "noise_level_grid_", "lml_grid_",
    )

    def save(self, path) -> None:
        """Write the fitted model to a self-contained, versioned binary file.

        The file stores the training inputs, targets, scalers and selected
        hyperparameters; the kernel factorization is reconstructed on load
        from this seed data, while the precomputed weight vector is stored so
        mean predictions round-trip without refactorization.
        """
        check_is_fitted(self, "alpha_")
        arrays = {}
        meta = {
            "format": _FORMAT_TAG,
            "scalars": {
                "n_features_in_": int(self.n_features_in_),
                "single_output": bool(self._single_output_),
                "refine": bool(self.refine),
                "jitter": float(self.jitter),
            },
            "arrays": {},
        }
        for name in self._ARRAY_ATTRS:
            arr = np.ascontiguousarray(getattr(self, name), dtype="<f8")
            arrays[name] = arr
            meta["arrays"][name] = list(arr.shape)
        header = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for name in sorted(arrays):
                fh.write(arrays[name].tobytes())

    @classmethod
    def load(cls, path) -> "GprSurrogate":
        """Load a model written by :meth:`save`."""
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError(f"{path!r} is not a GPR surrogate model file")
            header_len = int.from_bytes(fh.read(8), "little")
            meta = json.loads(fh.read(header_len).decode("utf-8"))
            if meta.get("format") != _FORMAT_TAG:
                raise ValueError(f"unsupported model format {meta.get('format')!r}")
            scalars = meta["scalars"]
            model = cls(refine=scalars["refine"], jitter=scalars["jitter"])
            for name in sorted(meta["arrays"]):
                shape = tuple(meta["arrays"][name])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
                setattr(model, name, data.copy())
        model.n_features_in_ = scalars["n_features_in_"]
        model._single_output_ = scalars["single_output"]
        model.length_scale_grid = model.length_scale_grid_.tolist()
        model.noise_level_grid = model.noise_level_grid_.tolist()
        model._factor_cache = {}
        return model

    def _predict_chunk_mean(self, sqd: np.ndarray, t: int) -> np.ndarray:
        """Standardized posterior mean of one target from a query-block
        squared-distance matrix; the same primitives as :meth:`predict`."""
        k_star = np.exp(sqd * (-0.5 / self.length_scale_[t] ** 2))
        # contiguous weights keep the reduction order independent of how the
        # target column is laid out, so all prediction paths agree bitwise
        alpha = np.ascontiguousarray(self.alpha_[:, t])
        return np.einsum("ij,j->i", k_star, alpha, optimize=False)

    def extract_target(self, index: int) -> "GprSurrogate":
        """A single-target fitted copy of target ``index`` (for per-target files)."""
        check_is_fitted(self, "alpha_")
        out = GprSurrogate(
            length_scale_grid=self.length_scale_grid,
            noise_level_grid=self.noise_level_grid,
            refine=self.refine,
            jitter=self.jitter,
        )
        out.n_features_in_ = self.n_features_in_
        out._single_output_ = True
        out.x_mean_ = self.x_mean_.copy()
        out.x_scale_ = self.x_scale_.copy()
        out.X_train_ = self.X_train_.copy()
        out.length_scale_grid_ = self.length_scale_grid_.copy()
        out.noise_level_grid_ = self.noise_level_grid_.copy()
        sel = slice(index, index + 1)
        out.y_mean_ = self.y_mean_[sel].copy()
        out.y_scale_ = self.y_scale_[sel].copy()
        out.y_train_ = self.y_train_[:, sel].copy()
        out.alpha_ = self.alpha_[:, sel].copy()
        out.length_scale_ = self.length_scale_[sel].copy()
        out.noise_level_ = self.noise_level_[sel].copy()
        out.lml_ = self.lml_[sel].copy()
        out.jitter_used_ = self.jitter_used_[sel].copy()
        out.lml_grid_ = self.lml_grid_[:, :, sel].copy()
        out._factor_cache = {}
        return out


def predict_joint(models, X) -> np.ndarray:
    """Posterior means of several single-target models, one column each.

    When the models share the same training inputs and scalers (the normal
    case: one model per valuation target fitted on one dataset), the
    query-to-training distance matrix is computed once per block and reused,
    which is the dominant cost of batch valuation. Results are bitwise
    identical to calling :meth:`GprSurrogate.predict` per model; models with
    differing training sets fall back to exactly that.
    """
    models = list(models)
    if not models:
        raise ValueError("predict_joint needs at least one model")
    first = models[0]
    shared = all(
        m.alpha_.shape[1] == 1
        and np.array_equal(m.X_train_, first.X_train_)
        and np.array_equal(m.x_mean_, first.x_mean_)
        and np.array_equal(m.x_scale_, first.x_scale_)
        for m in models
    )
    if not shared:
        return np.column_stack([np.asarray(m.predict(X)).reshape(-1) for m in models])

    check_is_fitted(first, "alpha_")
    X = check_array(X)
    if X.shape[1] != first.n_features_in_:
        raise ValueError(
            f"dimension mismatch: models have {first.n_features_in_} features, "
            f"got {X.shape[1]}"
        )
    Xs = (X - first.x_mean_) / first.x_scale_
    out = np.empty((X.shape[0], len(models)))
    for lo in range(0, Xs.shape[0], _PREDICT_CHUNK):
        sqd = _pairwise_sqdist(Xs[lo : lo + _PREDICT_CHUNK], first.X_train_)
        for col, model in enumerate(models):
            out[lo : lo + _PREDICT_CHUNK, col] = model._predict_chunk_mean(sqd, 0)
    for col, model in enumerate(models):
        out[:, col] = model.y_mean_[0] + model.y_scale_[0] * out[:, col]
    return out
