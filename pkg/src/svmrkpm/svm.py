"""Soft-margin binary SVM trained in the dual, plus a small-problem QP oracle.

Training runs two-variable coordinate ascent on the box-constrained dual
(maximal-violating-pair selection), entirely in standardized coordinates;
the returned model keeps the standardization so scores are evaluated from
raw physical coordinates. The classification score of a trained model is

    S(x) = sum_j alpha_j y_j K(x_j, x_hat) + b,

summed over retained support vectors, with x_hat the standardized x.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import LabeledDataset

__all__ = [
    "SvmKernelSpec",
    "Standardization",
    "SvmModel",
    "SlackReport",
    "kernel_eval",
    "kernel_matrix",
    "standardize",
    "train",
    "score",
    "qp_oracle",
    "dual_objective",
    "slack_report",
    "save_model",
    "load_model",
]

SV_PRUNE_FACTOR = 1e-10  # alpha_i <= this * C is not a support vector


@dataclass(frozen=True)
class SvmKernelSpec:
    """Kernel family: 'linear', 'polynomial' (degree q >= 2) or 'gaussian'."""

    kind: str = "gaussian"
    degree: int = 3
    gamma: float = 0.25

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "gaussian"):
            raise ValueError(f"unknown SVM kernel kind: {self.kind}")
        if self.kind == "polynomial" and (self.degree < 2
                                          or self.degree != int(self.degree)):
            raise ValueError("polynomial degree must be an integer >= 2")
        if self.kind == "gaussian" and self.gamma <= 0:
            raise ValueError("gaussian scale must be positive")


@dataclass(frozen=True)
class Standardization:
    """Per-coordinate shift/scale applied before training and scoring."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float))
        if (self.std <= 0).any():
            raise ValueError("zero-variance coordinate cannot be standardized")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pts) - self.mean) / self.std


@dataclass(frozen=True)
class SvmModel:
    """Trained soft-margin classifier (support vectors in standardized space)."""

    support_vectors: np.ndarray
    sv_labels: np.ndarray
    multipliers: np.ndarray
    bias: float
    kernel: SvmKernelSpec
    penalty: float
    standardization: Standardization
    kkt_tol: float
    dual_objective: float

    @property
    def n_support(self) -> int:
        return len(self.multipliers)

    def validate(self):
        """Check the stored multipliers against the dual KKT conditions."""
        a, y, C = self.multipliers, self.sv_labels, self.penalty
        if (a <= 0).any() or (a > C * (1 + 1e-9)).any():
            raise ValueError("support-vector multipliers outside (0, C]")
        if abs(a @ y) > 1e-8 * max(1.0, a.sum()):
            raise ValueError("dual equality constraint violated")
        free = a < C * (1 - 1e-9)
        if free.any():
            s = _score_std(self, self.support_vectors[free])
            if np.abs(s - y[free]).max() > self.kkt_tol * (1 + 1e-9):
                raise ValueError("score at unbounded support vector off its label")


@dataclass(frozen=True)
class SlackReport:
    """Per-point hinge slack max(0, 1 - y S(x)); slack >= 1 = misclassified."""

    slack: np.ndarray

    @property
    def misclassified(self) -> int:
        return int((self.slack >= 1.0).sum())


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def kernel_eval(spec: SvmKernelSpec, a, b) -> float:
    """Kernel value between two points of equal dimension."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("kernel arguments have mismatched dimension")
    if spec.kind == "linear":
        return float(a @ b)
    if spec.kind == "polynomial":
        return float((1.0 + a @ b) ** spec.degree)
    d = a - b
    return float(np.exp(-spec.gamma * (d @ d)))


def kernel_matrix(spec: SvmKernelSpec, A: np.ndarray,
                  B: np.ndarray | None = None) -> np.ndarray:
    """Dense Gram block K[i, j] = K(A_i, B_j); B defaults to A."""
    A = np.atleast_2d(A)
    B = A if B is None else np.atleast_2d(B)
    if spec.kind == "linear":
        return A @ B.T
    if spec.kind == "polynomial":
        return (1.0 + A @ B.T) ** spec.degree
    sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
          - 2.0 * (A @ B.T))
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


def standardize(data: LabeledDataset) -> tuple[LabeledDataset, Standardization]:
    """Shift/scale every coordinate to zero mean and unit population std."""
    if len(data) < 2:
        raise ValueError("standardization requires at least two points")
    mean = data.points.mean(axis=0)
    std = data.points.std(axis=0)  # population convention (divide by l)
    if (std <= 0).any():
        raise ValueError("zero-variance coordinate cannot be standardized")
    tf = Standardization(mean=mean, std=std)
    return LabeledDataset(points=tf.apply(data.points), labels=data.labels), tf


# ---------------------------------------------------------------------------
# Training (two-variable dual ascent, maximal violating pair)
# ---------------------------------------------------------------------------

class _RowCache:
    """Kernel rows K[:, i]; whole Gram precomputed when it fits the budget."""

    def __init__(self, spec, pts, budget_bytes=2e8):
        self.spec = spec
        self.pts = pts
        self.full = None
        if len(pts) ** 2 * 8 <= budget_bytes:
            self.full = kernel_matrix(spec, pts)
        self.rows: dict[int, np.ndarray] = {}
        self.cap = max(8, int(budget_bytes / (8 * len(pts))))

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self.rows.get(i)
        if r is None:
            r = kernel_matrix(self.spec, self.pts[i:i + 1], self.pts)[0]
            if len(self.rows) >= self.cap:
                self.rows.pop(next(iter(self.rows)))
            self.rows[i] = r
        return r


def train(data: LabeledDataset, C: float = 500.0,
          spec: SvmKernelSpec = SvmKernelSpec(), tol: float = 1e-6,
          max_iter: int = 1_000_000) -> SvmModel:
    """Maximize the soft-margin dual to KKT tolerance ``tol``.

    Each step updates a violating pair: the first index carries the largest
    KKT violation, the second maximizes the second-order objective gain
    among the candidates it violates against (plain most-violating second
    picks zigzag badly on near-duplicate raster data). Updates preserve the
    equality constraint exactly. The bias averages
    y_j - sum_i alpha_i y_i K(x_i, x_j) over unbounded support vectors.
    Multipliers below ``1e-10 * C`` are dropped from the model.
    """
    data.require_both_classes()
    if C <= 0:
        raise ValueError("penalty weight must be positive")
    std_data, tf = standardize(data)
    pts = std_data.points
    y = std_data.labels.astype(float)
    l = len(std_data)

    cache = _RowCache(spec, pts)
    if spec.kind == "gaussian":
        kdiag = np.ones(l)
    else:
        dots = np.sum(pts * pts, axis=1)
        kdiag = dots if spec.kind == "linear" else (1.0 + dots) ** spec.degree

    alpha = np.zeros(l)
    u = np.zeros(l)            # u_i = sum_m alpha_m y_m K(x_m, x_i)
    eps = 1e-12 * C
    pos = y > 0

    for _ in range(max_iter):
        e = u - y
        at_lo = alpha <= eps
        at_hi = alpha >= C - eps
        up = (pos & ~at_hi) | (~pos & ~at_lo)
        low = (pos & ~at_lo) | (~pos & ~at_hi)
        if not up.any() or not low.any():
            break
        neg_e = np.where(up, -e, -np.inf)
        i = int(np.argmax(neg_e))
        pos_e = np.where(low, e, -np.inf)
        if neg_e[i] + pos_e.max() <= tol:
            break

        ki = cache.row(i)
        bvec = neg_e[i] + e
        denom = np.maximum(kdiag[i] + kdiag - 2.0 * ki, 1e-12)
        gain = np.where(low & (bvec > 0), bvec * bvec / denom, -np.inf)
        j = int(np.argmax(gain))

        kj = cache.row(j)
        eta = max(kdiag[i] + kdiag[j] - 2.0 * ki[j], 1e-12)
        if y[i] != y[j]:
            lo = max(0.0, alpha[j] - alpha[i])
            hi = min(C, C + alpha[j] - alpha[i])
        else:
            lo = max(0.0, alpha[j] + alpha[i] - C)
            hi = min(C, alpha[j] + alpha[i])
        aj_new = np.clip(alpha[j] + y[j] * (e[i] - e[j]) / eta, lo, hi)
        ai_new = alpha[i] + y[i] * y[j] * (alpha[j] - aj_new)
        u += y[i] * (ai_new - alpha[i]) * ki + y[j] * (aj_new - alpha[j]) * kj
        alpha[i], alpha[j] = ai_new, aj_new
    else:
        raise RuntimeError(f"SVM training did not converge in {max_iter} updates")

    objective = float(alpha.sum() - 0.5 * (alpha * y) @ u)
    bias = _bias_from_dual(alpha, y, u, C, eps)

    keep = alpha > SV_PRUNE_FACTOR * C
    return SvmModel(support_vectors=pts[keep], sv_labels=std_data.labels[keep],
                    multipliers=alpha[keep], bias=bias, kernel=spec, penalty=C,
                    standardization=tf, kkt_tol=tol, dual_objective=objective)


def model_from_dual(data: LabeledDataset, alpha: np.ndarray, bias: float,
                    C: float, spec: SvmKernelSpec,
                    tol: float = 1e-6) -> SvmModel:
    """Package a full-length multiplier vector (e.g. from the oracle) as a model."""
    std_data, tf = standardize(data)
    y = std_data.labels.astype(float)
    K = kernel_matrix(spec, std_data.points)
    keep = alpha > SV_PRUNE_FACTOR * C
    return SvmModel(support_vectors=std_data.points[keep],
                    sv_labels=std_data.labels[keep], multipliers=alpha[keep],
                    bias=bias, kernel=spec, penalty=C, standardization=tf,
                    kkt_tol=tol, dual_objective=dual_objective(K, y, alpha))


def _bias_from_dual(alpha, y, u, C, eps):
    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        return float(np.mean(y[free] - u[free]))
    pos = y > 0
    up = (pos & (alpha < C - eps)) | (~pos & (alpha > eps))
    low = (pos & (alpha > eps)) | (~pos & (alpha < C - eps))
    hi = (y - u)[up].max() if up.any() else 0.0
    lo = (y - u)[low].min() if low.any() else 0.0
    return float(0.5 * (hi + lo))


def _score_std(model: SvmModel, pts_std: np.ndarray) -> np.ndarray:
    k = kernel_matrix(model.kernel, pts_std, model.support_vectors)
    return k @ (model.multipliers * model.sv_labels) + model.bias


def score(model: SvmModel, x) -> float | np.ndarray:
    """Classification score at raw-coordinate point(s); sign gives the class."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    s = _score_std(model, model.standardization.apply(x))
    return float(s[0]) if single else s


def slack_report(model: SvmModel, data: LabeledDataset) -> SlackReport:
    s = score(model, data.points)
    return SlackReport(slack=np.maximum(0.0, 1.0 - data.labels * s))


def dual_objective(K: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """Value of the dual objective for a multiplier vector on Gram matrix K."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


# ---------------------------------------------------------------------------
# Desk-scale QP oracle
# ---------------------------------------------------------------------------

def _project_box_hyperplane(v, y, C):
    """Euclidean projection onto {0 <= a <= C, y.a = 0} via bisection on the
    hyperplane multiplier (the constraint value is monotone in it)."""
    span = np.abs(v).max() + C + 1.0

    def g(lam):
        return y @ np.clip(v - lam * y, 0.0, C)

    lo, hi = -span, span
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi) * y, 0.0, C)


def qp_oracle(data: LabeledDataset, C: float,
              spec: SvmKernelSpec = SvmKernelSpec(),
              max_iter: int = 200_000) -> tuple[np.ndarray, float]:
    """Reference dual solver for at most 12 points.

    Projected-gradient ascent identifies the active set, after which the
    remaining free multipliers are solved exactly from the KKT equality
    system and verified. Returns multipliers over all points plus the bias,
    in the same standardized coordinates used by ``train``.
    """
    if len(data) > 12:
        raise ValueError("oracle size cap exceeded (l <= 12)")
    data.require_both_classes()
    std_data, _ = standardize(data)
    y = std_data.labels.astype(float)
    K = kernel_matrix(spec, std_data.points)
    Q = (y[:, None] * y[None, :]) * K
    l = len(std_data)

    step = 1.0 / (np.linalg.norm(Q, 2) + 1.0)
    alpha = np.zeros(l)
    eps = 1e-9 * C
    for it in range(max_iter):
        grad = 1.0 - Q @ alpha
        alpha_new = _project_box_hyperplane(alpha + step * grad, y, C)
        moved = np.abs(alpha_new - alpha).max()
        alpha = alpha_new
        if it % 25 == 0 or moved < 1e-13 * C:
            polished = _kkt_polish(alpha, Q, y, C, eps)
            if polished is not None:
                alpha = polished
                break
        if moved < 1e-13 * C:
            break

    u = (K * (alpha * y)).sum(axis=1)
    bias = _bias_from_dual(alpha, y, u, C, eps)
    return alpha, bias


def _kkt_polish(alpha, Q, y, C, eps):
    """Exact solve on the active set guessed from alpha; None if KKT fails."""
    lo = alpha <= eps
    hi = alpha >= C - eps
    free = ~(lo | hi)
    a = np.where(hi, C, 0.0)
    nf = int(free.sum())
    if nf > 0:
        # stationarity on free set: Q_FF a_F + y_F * rho = 1 - Q_F,H * C
        A = np.zeros((nf + 1, nf + 1))
        A[:nf, :nf] = Q[np.ix_(free, free)]
        A[:nf, nf] = y[free]
        A[nf, :nf] = y[free]
        rhs = np.zeros(nf + 1)
        rhs[:nf] = 1.0 - Q[np.ix_(free, hi)] @ a[hi]
        rhs[nf] = -y[hi] @ a[hi]
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return None
        a[free] = sol[:nf]
        rho = sol[nf]
        if (a[free] < -1e-12 * C).any() or (a[free] > C * (1 + 1e-12)).any():
            return None
    else:
        if abs(y @ a) > 1e-12 * max(1.0, C):
            return None
        grad = 1.0 - Q @ a
        gy = grad * y
        lower = gy[((y > 0) & lo) | ((y < 0) & hi)]  # rho >= these
        upper = gy[((y > 0) & hi) | ((y < 0) & lo)]  # rho <= these
        rho_lo = lower.max() if len(lower) else -np.inf
        rho_hi = upper.min() if len(upper) else np.inf
        if rho_lo > rho_hi + 1e-10 or (rho_lo == -np.inf and rho_hi == np.inf):
            return None
        rho = np.clip(0.0, rho_lo, rho_hi)

    # multiplier sign conditions at the bounds
    grad = 1.0 - Q @ a
    resid = grad - rho * y
    if (resid[lo & ~free] > 1e-10).any() or (resid[hi & ~free] < -1e-10).any():
        return None
    a = np.clip(a, 0.0, C)
    return a


# ---------------------------------------------------------------------------
# Serialization (plain text, 17 significant digits)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_model(model: SvmModel, path):
    lines = ["svm-model v1"]
    k = model.kernel
    if k.kind == "gaussian":
        lines.append(f"kernel gaussian gamma={_fmt(k.gamma)}")
    elif k.kind == "polynomial":
        lines.append(f"kernel polynomial degree={k.degree}")
    else:
        lines.append("kernel linear")
    lines.append(f"penalty {_fmt(model.penalty)}")
    lines.append(f"kkt_tol {_fmt(model.kkt_tol)}")
    lines.append(f"bias {_fmt(model.bias)}")
    lines.append(f"dual_objective {_fmt(model.dual_objective)}")
    lines.append("mean " + " ".join(_fmt(v) for v in model.standardization.mean))
    lines.append("std " + " ".join(_fmt(v) for v in model.standardization.std))
    lines.append(f"nsv {model.n_support}")
    for yj, aj, xj in zip(model.sv_labels, model.multipliers,
                          model.support_vectors):
        lines.append(f"{int(yj)} {_fmt(aj)} "
                     + " ".join(_fmt(v) for v in xj))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> SvmModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "svm-model v1":
        raise ValueError("malformed header: not an svm-model v1 file")
    fields = {}
    for ln in lines[1:9]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    kparts = fields["kernel"].split()
    if kparts[0] == "gaussian":
        spec = SvmKernelSpec("gaussian", gamma=float(kparts[1].split("=")[1]))
    elif kparts[0] == "polynomial":
        spec = SvmKernelSpec("polynomial", degree=int(kparts[1].split("=")[1]))
    else:
        spec = SvmKernelSpec("linear")
    tf = Standardization(
        mean=np.array([float(v) for v in fields["mean"].split()]),
        std=np.array([float(v) for v in fields["std"].split()]))
    nsv = int(fields["nsv"])
    rows = [ln.split() for ln in lines[9:9 + nsv]]
    if len(rows) != nsv:
        raise ValueError("payload length mismatch")
    labels = np.array([int(r[0]) for r in rows])
    alphas = np.array([float(r[1]) for r in rows])
    svs = np.array([[float(v) for v in r[2:]] for r in rows])
    return SvmModel(support_vectors=svs, sv_labels=labels, multipliers=alphas,
                    bias=float(fields["bias"]), kernel=spec,
                    penalty=float(fields["penalty"]), standardization=tf,
                    kkt_tol=float(fields["kkt_tol"]),
                    dual_objective=float(fields["dual_objective"]))
