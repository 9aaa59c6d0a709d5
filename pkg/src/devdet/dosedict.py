"""Sparse dictionary over hard-fake features, used to set the developer dose.

Features are scaled to unit mean norm (over the fitting set) before any
coding. Low reconstruction error means an input looks like a known hard
fake and gets a high dose; high error pushes the dose to zero.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"DEVDETDD"
ISTA_TOL = 1e-9
ISTA_MAX_ITER = 1000
FIT_TOL = 1e-6
FIT_MAX_ROUNDS = 100
MONOTONE_SLACK = 1e-9


class DivergenceError(ArithmeticError):
    """The alternating fit increased its objective beyond the slack."""


@dataclass
class SparseCode:
    alpha: np.ndarray
    objective_value: float
    n_iter: int = 0


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(D: np.ndarray, Z: np.ndarray, A: np.ndarray, lam: float) -> float:
    """Sum over columns of 1/2 ||z - D a||^2 + lam ||a||_1."""
    R = Z - D @ A
    return float(0.5 * np.sum(R * R) + lam * np.sum(np.abs(A)))


def lipschitz(D: np.ndarray, iters: int = 1000) -> float:
    """Upper estimate of the largest eigenvalue of D^T D by power iteration.

    The Rayleigh quotient plus the residual norm bounds the eigenvalue
    closest to it, which after convergence is the largest.
    """
    G = D.T @ D
    K = G.shape[0]
    if K == 0 or not np.any(G):
        return 0.0
    v = np.ones(K) / np.sqrt(K)
    rho = 0.0
    for _ in range(iters):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # ones vector in the null space; restart from a fixed direction
            v = np.arange(1, K + 1, dtype=np.float64)
            v /= np.linalg.norm(v)
            continue
        rho_new = float(v @ w)
        v = w / nw
        if abs(rho_new - rho) <= 1e-13 * max(rho_new, 1.0):
            rho = rho_new
            break
        rho = rho_new
    resid = float(np.linalg.norm(G @ v - rho * v))
    return rho + resid + 1e-12 * rho


def sparse_code_batch(
    D: np.ndarray,
    Z: np.ndarray,
    lam: float,
    A0: np.ndarray | None = None,
    tol: float = ISTA_TOL,
    max_iter: int = ISTA_MAX_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft-thresholding with fixed step 1/L for every column of ``Z`` (d x N).

    Plain ISTA is painfully slow on ill-conditioned dictionaries (it can
    stall with an objective gap above 1e-6 for thousands of steps), so the
    proximal steps use monotone FISTA momentum with an adaptive restart:
    a proximal step that would raise the objective is rejected and the
    momentum is reset. Each column stops on its own once an accepted step
    decreases its objective by less than ``tol``. Returns codes (K x N)
    and per-column objectives.
    """
    D = np.asarray(D, np.float64)
    Z = np.asarray(Z, np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if not (np.isfinite(D).all() and np.isfinite(Z).all()):
        raise ValueError("sparse coding inputs must be finite")
    K, N = D.shape[1], Z.shape[1]
    A = np.zeros((K, N)) if A0 is None else np.array(A0, np.float64, copy=True)

    def col_obj(A_, idx):
        R = Z[:, idx] - D @ A_
        return 0.5 * np.sum(R * R, axis=0) + lam * np.sum(np.abs(A_), axis=0)

    L = lipschitz(D)
    if L == 0.0:
        return np.zeros((K, N)), col_obj(np.zeros((K, N)), slice(None))
    step = 1.0 / L
    obj = col_obj(A, slice(None))
    Y = A.copy()
    t = np.ones(N)
    active = np.arange(N)
    for _ in range(max_iter):
        if active.size == 0:
            break
        Xa, Ya, ta = A[:, active], Y[:, active], t[active]
        U = soft_threshold(Ya - step * (D.T @ (D @ Ya - Z[:, active])), lam * step)
        u_obj = col_obj(U, active)
        accept = u_obj <= obj[active]
        Xn = np.where(accept, U, Xa)
        xn_obj = np.where(accept, u_obj, obj[active])
        tn = (1.0 + np.sqrt(1.0 + 4.0 * ta * ta)) / 2.0
        Yn = Xn + (ta / tn) * (U - Xn) + ((ta - 1.0) / tn) * (Xn - Xa)
        # restart momentum where the step was rejected
        Y[:, active] = np.where(accept, Yn, Xn)
        t[active] = np.where(accept, tn, 1.0)
        dec = obj[active] - xn_obj
        A[:, active] = Xn
        obj[active] = xn_obj
        active = active[~(accept & (dec < tol))]
    return A, obj


def sparse_code(D: np.ndarray, z: np.ndarray, lambda_l1: float) -> SparseCode:
    """Solve min_a 1/2 ||z - D a||^2 + lambda ||a||_1 (see ``sparse_code_batch``)."""
    z = np.asarray(z, np.float64).reshape(-1)
    A, obj = sparse_code_batch(D, z[:, None], lambda_l1)
    return SparseCode(A[:, 0], float(obj[0]))


def least_squares_dictionary(Z: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of min_D ||Z - D A||_F^2."""
    sol, *_ = np.linalg.lstsq(np.asarray(A, np.float64).T, np.asarray(Z, np.float64).T, rcond=None)
    return sol.T


def project_columns(D: np.ndarray) -> np.ndarray:
    """Rescale every column with norm > 1 to unit norm."""
    norms = np.linalg.norm(D, axis=0)
    return D / np.maximum(norms, 1.0)[None, :]


def update_dictionary(Z: np.ndarray, A: np.ndarray, D_prev: np.ndarray | None = None) -> np.ndarray:
    """Least-squares dictionary for fixed codes, projected onto unit-norm
    columns. With all-zero codes the previous dictionary is returned and a
    warning is issued."""
    A = np.asarray(A, np.float64)
    if not np.any(A):
        warnings.warn("all sparse codes are zero; dictionary left unchanged", RuntimeWarning, stacklevel=2)
        if D_prev is None:
            return np.zeros((np.shape(Z)[0], A.shape[0]))
        return np.array(D_prev, copy=True)
    return project_columns(least_squares_dictionary(Z, A))


def _column_descent(Z: np.ndarray, A: np.ndarray, D: np.ndarray, sweeps: int = 20) -> np.ndarray:
    """Block-coordinate minimization of ||Z - D A||_F^2 over unit-ball
    columns, one column at a time. Never increases the objective."""
    D = D.copy()
    G = A @ A.T
    B = Z @ A.T
    for _ in range(sweeps):
        for k in range(D.shape[1]):
            if G[k, k] <= 0:
                continue
            u = D[:, k] + (B[:, k] - D @ G[:, k]) / G[k, k]
            D[:, k] = u / max(1.0, np.linalg.norm(u))
    return D


@dataclass
class DoseDictModel:
    D: np.ndarray
    lambda_l1: float
    calib_lo: float
    calib_hi: float
    feature_scale: float = 1.0
    extractor_hash: str = ""
    objective_trace: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)  # free-form provenance (config hash, seed)

    @property
    def feature_dim(self) -> int:
        return self.D.shape[0]

    @property
    def num_atoms(self) -> int:
        return self.D.shape[1]

    def save(self, path: str | Path) -> Path:
        header = {
            "d": self.feature_dim,
            "K": self.num_atoms,
            "lambda": self.lambda_l1,
            "calib_lo": self.calib_lo,
            "calib_hi": self.calib_hi,
            "feature_scale": self.feature_scale,
            "extractor_hash": self.extractor_hash,
            "objective_trace": self.objective_trace,
            "meta": self.meta,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            fh.write(np.asarray(self.D, dtype="<f8").tobytes(order="F"))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DoseDictModel":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a dictionary file")
        (n,) = struct.unpack("<Q", raw[8:16])
        h = json.loads(raw[16:16 + n].decode("utf-8"))
        D = np.frombuffer(raw[16 + n:], dtype="<f8").reshape((h["d"], h["K"]), order="F").astype(np.float64)
        return cls(D, h["lambda"], h["calib_lo"], h["calib_hi"], h["feature_scale"], h["extractor_hash"], h["objective_trace"], h.get("meta", {}))


def _init_dictionary(Z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    d, N = Z.shape
    cols = [Z[:, i] for i in rng.permutation(N)[:K]]
    while len(cols) < K:
        cols.append(rng.normal(size=d))
    D = np.stack(cols, axis=1)
    norms = np.linalg.norm(D, axis=0)
    norms[norms == 0] = 1.0
    return D / norms


def learn_dictionary(
    Z: np.ndarray,
    K: int,
    lambda_l1: float,
    seed: int = 0,
    max_rounds: int = FIT_MAX_ROUNDS,
    tol: float = FIT_TOL,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternating minimization on (already scaled) columns ``Z``.

    Returns ``(D, A, objective_trace)``; ``objective_trace[0]`` is the
    objective of the initial dictionary with zero codes.
    """
    Z = np.asarray(Z, np.float64)
    d, N = Z.shape
    if N < K:
        warnings.warn(f"fitting {K} atoms on only {N} samples", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    D = _init_dictionary(Z, K, rng)
    A = np.zeros((K, N))
    trace = [lasso_objective(D, Z, A, lambda_l1)]
    for rnd in range(1, max_rounds + 1):
        A, _ = sparse_code_batch(D, Z, lambda_l1, A0=A)
        before_d = lasso_objective(D, Z, A, lambda_l1)
        if not np.any(A):
            warnings.warn("all sparse codes are zero; stopping", RuntimeWarning, stacklevel=2)
            trace.append(before_d)
            break
        cand = update_dictionary(Z, A, D)
        if lasso_objective(cand, Z, A, lambda_l1) > before_d:
            # projection after the unconstrained solve overshot; fall back to
            # an exact constrained column update that cannot increase it
            cand = _column_descent(Z, A, D)
        D = cand
        cur = lasso_objective(D, Z, A, lambda_l1)
        if cur > trace[-1] + MONOTONE_SLACK:
            raise DivergenceError(f"dictionary objective increased at round {rnd}: {trace[-1]} -> {cur}")
        prev = trace[-1]
        trace.append(cur)
        log.debug("dict round %d objective %.6f", rnd, cur)
        if (prev - cur) < tol * max(abs(prev), 1e-300):
            break
    return D, A, trace


def fit(
    Z: np.ndarray,
    K: int | None = None,
    lambda_l1: float = 0.1,
    seed: int = 0,
    calib_features: np.ndarray | None = None,
    percentiles: tuple[float, float] = (5.0, 95.0),
    extractor_hash: str = "",
) -> DoseDictModel:
    """Fit a dose dictionary on hard-fake features.

    ``Z`` is N x d (one feature per row). Calibration percentiles of the
    reconstruction error are taken over ``calib_features`` (the full
    training set), or over ``Z`` when not given.
    """
    Z = np.asarray(Z, np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise ValueError("need a nonempty N x d feature matrix")
    N = len(Z)
    K = K if K is not None else max(1, min(64, N // 4))
    mean_norm = float(np.linalg.norm(Z, axis=1).mean())
    scale = 1.0 / mean_norm if mean_norm > 0 else 1.0
    D, _, trace = learn_dictionary((Z * scale).T, K, lambda_l1, seed)
    model = DoseDictModel(D, lambda_l1, 0.0, 1.0, scale, extractor_hash, trace)
    calib = Z if calib_features is None else np.asarray(calib_features, np.float64)
    errs = reconstruction_errors(model, calib)
    lo, hi = np.percentile(errs, percentiles)
    if not hi > lo:
        hi = lo + max(1e-12, abs(lo) * 1e-9)
    model.calib_lo, model.calib_hi = float(lo), float(hi)
    return model


def reconstruction_errors(model: DoseDictModel, Z: np.ndarray) -> np.ndarray:
    """Reconstruction error for each row of ``Z`` (N x d)."""
    Zs = np.asarray(Z, np.float64).reshape(-1, model.feature_dim).T * model.feature_scale
    A, _ = sparse_code_batch(model.D, Zs, model.lambda_l1)
    return np.linalg.norm(Zs - model.D @ A, axis=0)


def reconstruction_error(model: DoseDictModel, z: np.ndarray) -> float:
    """||z - D a*(z)||_2 in scaled feature units."""
    zs = np.asarray(z, np.float64).reshape(-1) * model.feature_scale
    code = sparse_code(model.D, zs, model.lambda_l1)
    return float(np.linalg.norm(zs - model.D @ code.alpha))


def dose_from_error(model: DoseDictModel, e, base_dose: float = 0.25):
    """Linear map from error to dose: ``base_dose`` at ``calib_lo`` or below,
    0 at ``calib_hi`` or above."""
    t = (model.calib_hi - np.asarray(e, np.float64)) / (model.calib_hi - model.calib_lo)
    out = base_dose * np.clip(t, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def adaptive_dose(model: DoseDictModel, z: np.ndarray, base_dose: float = 0.25) -> float:
    return dose_from_error(model, reconstruction_error(model, z), base_dose)


def adaptive_doses(model: DoseDictModel, Z: np.ndarray, base_dose: float = 0.25) -> np.ndarray:
    return np.asarray(dose_from_error(model, reconstruction_errors(model, Z), base_dose))
