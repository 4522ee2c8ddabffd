"""Executable analysis mathematics.

Channel-centralization metrics over [channels, time] arrays, the log-scale
mismatch of a stride set, the noise-suppression ratio bound for a linear
mixer, and the Gaussian mutual-information oracle for rank-r whitened
mixers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

# Ratios this close to their exact degenerate value (rank-1 covariance,
# identical influence columns) are snapped to it; the eigensolver itself is
# only trusted to ~1e-10.
_EXACTNESS_TOL = 1e-12


@dataclass
class CentralizationReport:
    """Spatial and dynamic dominance summary for one recording."""
    sci: float
    dic: float
    influence: np.ndarray  # [S] outgoing influence strength per channel
    transition: np.ndarray  # [S, S] one-step cross-moment matrix


def _as_channels_by_time(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a [channels, time] array, got shape {arr.shape}")
    return arr


def sci(x) -> float:
    """Spectral centralization: top covariance eigenvalue over the trace.

    The time mean is removed per channel; the covariance uses the 1/(T-1)
    normalization. Lies in [1/S, 1]; all-constant input has zero trace and
    is undefined.
    """
    arr = _as_channels_by_time(x)
    s, t = arr.shape
    if t < 2:
        raise ValueError("sci: need at least two timesteps")
    xc = arr - arr.mean(axis=1, keepdims=True)
    cov = xc @ xc.T / (t - 1)
    trace = float(np.trace(cov))
    if trace <= 0.0:
        raise NumericError("sci undefined: all channels are constant (zero trace)")
    lam_max = float(np.linalg.eigvalsh((cov + cov.T) / 2.0)[-1])
    ratio = lam_max / trace
    if ratio >= 1.0 - _EXACTNESS_TOL:
        return 1.0
    return ratio


def dic(x) -> tuple[float, np.ndarray]:
    """Dynamic influence centralization and the per-channel influence vector.

    The one-step transition is the unnormalized cross-moment A = Y Z^T of
    lagged column blocks (not a least-squares fit); the influence of
    channel i is the column-i sum of |A| (how strongly i drives every j),
    and the score is the normalized excess of the maximum over the mean.
    """
    arr = _as_channels_by_time(x)
    if arr.shape[1] < 3:
        raise ValueError("dic: need at least three timesteps")
    z = arr[:, :-1]
    y = arr[:, 1:]
    a = y @ z.T
    influence = np.abs(a).sum(axis=0)
    mean_s = float(influence.mean())
    if mean_s == 0.0:
        raise NumericError("dic undefined: all-zero signal (zero mean influence)")
    value = (float(influence.max()) - mean_s) / mean_s
    if abs(value) <= _EXACTNESS_TOL:
        value = 0.0
    return value, influence


def transition_matrix(x) -> np.ndarray:
    arr = _as_channels_by_time(x)
    return arr[:, 1:] @ arr[:, :-1].T


def centralization_report(x) -> CentralizationReport:
    d, influence = dic(x)
    return CentralizationReport(sci=sci(x), dic=d, influence=influence,
                                transition=transition_matrix(x))


# ---------------------------------------------------------------------------
# scale mismatch

def _check_strides(strides) -> tuple[float, ...]:
    s = tuple(float(v) for v in strides)
    if not s or any(v <= 0 for v in s):
        raise ValueError("strides must be positive")
    if any(b <= a for a, b in zip(s, s[1:])):
        raise ValueError("strides must be strictly ascending")
    return s


def scale_mismatch(tau: float, strides) -> float:
    """Log-scale distance from an event duration to its nearest stride."""
    s = _check_strides(strides)
    if not s[0] <= tau <= s[-1]:
        raise ValueError(f"tau={tau} outside the covered range [{s[0]}, {s[-1]}]")
    return float(min(abs(np.log(tau) - np.log(v)) for v in s))


def worst_case_mismatch(strides) -> float:
    """Half the largest log gap between adjacent strides (0 for one stride)."""
    s = _check_strides(strides)
    if len(s) == 1:
        return 0.0
    return 0.5 * max(float(np.log(b / a)) for a, b in zip(s, s[1:]))


# ---------------------------------------------------------------------------
# mixer propositions

@dataclass
class BoundReport:
    lhs: float
    rhs: float
    eps: float
    gamma: float
    holds: bool
    degenerate: bool


def noise_suppression_bound(m, s_vec, n_vec, slack: float = 1e-12) -> BoundReport:
    """Check that mixing reduces the nuisance-to-signal norm ratio.

    eps and gamma are measured from the mixer's action on the given signal
    and nuisance vectors; lhs = |Mn|/|Ms| is compared against
    (gamma / (1 - eps)) * |n|/|s|. A mixer annihilating the signal is
    flagged degenerate instead of evaluated.
    """
    m = np.asarray(m, dtype=np.float64)
    s_vec = np.asarray(s_vec, dtype=np.float64)
    n_vec = np.asarray(n_vec, dtype=np.float64)
    ns, nn = np.linalg.norm(s_vec), np.linalg.norm(n_vec)
    if ns == 0.0:
        raise ValueError("noise_suppression_bound: signal vector must be nonzero")
    ms, mn = np.linalg.norm(m @ s_vec), np.linalg.norm(m @ n_vec)
    eps = max(0.0, 1.0 - ms / ns)
    gamma = mn / nn if nn > 0 else 0.0
    if ms == 0.0:
        return BoundReport(np.inf, np.inf, eps, gamma, holds=False, degenerate=True)
    lhs = mn / ms
    rhs = (gamma / (1.0 - eps)) * (nn / ns)
    return BoundReport(lhs, rhs, eps, gamma, holds=bool(lhs <= rhs + slack),
                       degenerate=False)


def _check_mixer_inputs(sigma_s, sigma_n, sigma2: float, sym_tol: float = 1e-10):
    ss = np.asarray(sigma_s, dtype=np.float64)
    sn = np.asarray(sigma_n, dtype=np.float64)
    if ss.shape != sn.shape or ss.ndim != 2 or ss.shape[0] != ss.shape[1]:
        raise ValueError("covariances must be square matrices of equal size")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    for name, mat in (("sigma_s", ss), ("sigma_n", sn)):
        if np.max(np.abs(mat - mat.T)) > sym_tol:
            raise ValueError(f"{name} is not symmetric within {sym_tol}")
    return ss, sn


def _inv_sqrt_psd(mat: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Inverse matrix square root of a symmetric PD matrix via its
    eigendecomposition; eigenvalues below the floor fail the call."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals[0] <= floor:
        raise NumericError("matrix is not positive definite (eigenvalue "
                           f"{vals[0]:.3e} below {floor:.0e})")
    return (vecs * (vals ** -0.5)) @ vecs.T


def mixer_mi(m, sigma_s, sigma_n, sigma2: float) -> float:
    """Gaussian mutual information carried by z = M(s + n + xi) about s,
    with isotropic readout noise of variance sigma2, via log-determinants."""
    ss, sn = _check_mixer_inputs(sigma_s, sigma_n, sigma2)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != ss.shape[0]:
        raise ValueError(f"mixer must be [r, {ss.shape[0]}], got {m.shape}")
    noise = sn + sigma2 * np.eye(ss.shape[0])
    total = m @ (ss + noise) @ m.T
    nuis = m @ noise @ m.T
    sign_t, logdet_t = np.linalg.slogdet(total)
    sign_n, logdet_n = np.linalg.slogdet(nuis)
    if sign_t <= 0 or sign_n <= 0:
        raise NumericError("mixer_mi: projected covariance is singular")
    return 0.5 * float(logdet_t - logdet_n)


def whitened_signal_covariance(sigma_s, sigma_n, sigma2: float) -> np.ndarray:
    ss, sn = _check_mixer_inputs(sigma_s, sigma_n, sigma2)
    w = _inv_sqrt_psd(sn + sigma2 * np.eye(ss.shape[0]))
    k = w @ ss @ w
    return (k + k.T) / 2.0


def optimal_mixer(sigma_s, sigma_n, sigma2: float, rank: int):
    """Best rank-r mixer under the whitening constraint and its information.

    The mixer projects onto the top-r eigendirections of the whitened
    signal covariance; the achieved value is half the sum of log(1 + lambda)
    over the r largest eigenvalues.
    """
    ss, sn = _check_mixer_inputs(sigma_s, sigma_n, sigma2)
    c = ss.shape[0]
    if not 1 <= rank <= c:
        raise ValueError(f"rank must be in [1, {c}], got {rank}")
    w = _inv_sqrt_psd(sn + sigma2 * np.eye(c))
    k = w @ ss @ w
    vals, vecs = np.linalg.eigh((k + k.T) / 2.0)
    top = np.argsort(vals)[::-1][:rank]
    m_star = vecs[:, top].T @ w
    lam = np.clip(vals[top], 0.0, None)  # clip tiny negative fp noise
    mi_star = 0.5 * float(np.sum(np.log1p(lam)))
    return m_star, mi_star


def whitening_residual(m, sigma_n, sigma2: float) -> float:
    """Max deviation of M (Sigma_n + sigma2 I) M^T from the identity."""
    m = np.asarray(m, dtype=np.float64)
    sn = np.asarray(sigma_n, dtype=np.float64)
    gram = m @ (sn + sigma2 * np.eye(sn.shape[0])) @ m.T
    return float(np.max(np.abs(gram - np.eye(m.shape[0]))))
