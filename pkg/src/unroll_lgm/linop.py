"""Matrix-free linear operators.

Every operator acts on vectors of length ``cols`` or on column blocks of
shape ``(cols, C)``.  The :func:`matvec` entry point is the instrumented one:
it bumps a process-wide counter by the number of columns it multiplies, which
is the portable cost measure reported by the training loop and the CLI.
Internal compositions call :meth:`LinearOperator.apply` and are not counted.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy import fft as sp_fft

__all__ = [
    "DENSE_CAP",
    "LinearOperator",
    "DenseOperator",
    "IdentityOperator",
    "DiagonalOperator",
    "BandedOperator",
    "OrthoTransformOperator",
    "RowMaskOperator",
    "PosteriorPrecisionOperator",
    "matvec",
    "banded_matvec",
    "to_dense",
    "matvec_count",
    "reset_matvec_count",
]

#: Default limit on ``rows * cols`` for :func:`to_dense`.
DENSE_CAP = 4096 * 4096


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, n):
        with self._lock:
            self._value += int(n)

    @property
    def value(self):
        return self._value

    def reset(self):
        with self._lock:
            old, self._value = self._value, 0
        return old


_MATVECS = _Counter()


def matvec_count():
    """Number of operator-vector products issued through :func:`matvec`."""
    return _MATVECS.value


def reset_matvec_count():
    """Reset the matvec counter and return its previous value."""
    return _MATVECS.reset()


def _as_block(v, n, name="v"):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        if v.shape[0] != n:
            raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
        return v[:, None], True
    if v.ndim == 2:
        if v.shape[0] != n:
            raise ValueError(f"{name} has {v.shape[0]} rows, expected {n}")
        return v, False
    raise ValueError(f"{name} must be a vector or a column block, got ndim={v.ndim}")


class LinearOperator:
    """Abstract linear map ``x -> Op @ x``.

    Subclasses implement ``_matmat`` (and ``_rmatmat`` when not symmetric) on
    2-D column blocks.
    """

    symmetric = False

    def __init__(self, shape):
        self.shape = (int(shape[0]), int(shape[1]))

    @property
    def rows(self):
        return self.shape[0]

    @property
    def cols(self):
        return self.shape[1]

    def _matmat(self, X):  # pragma: no cover - abstract
        raise NotImplementedError

    def _rmatmat(self, X):
        if self.symmetric:
            return self._matmat(X)
        raise NotImplementedError

    def apply(self, v):
        """Uncounted action on a vector or column block."""
        X, flat = _as_block(v, self.cols)
        out = self._matmat(X)
        return out[:, 0] if flat else out

    def apply_transpose(self, v):
        """Uncounted transpose action."""
        X, flat = _as_block(v, self.rows)
        out = self._rmatmat(X)
        return out[:, 0] if flat else out

    def __matmul__(self, v):
        return self.apply(v)

    @property
    def T(self):
        return _Transposed(self)

    def take_columns(self, idx):
        """Operator acting on a subset of the columns of a block.

        Only operators whose action differs per column (such as the batched
        posterior precision) need to override this.
        """
        return self

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class _Transposed(LinearOperator):
    def __init__(self, op):
        super().__init__((op.cols, op.rows))
        self.op = op
        self.symmetric = op.symmetric

    def _matmat(self, X):
        return self.op._rmatmat(X)

    def _rmatmat(self, X):
        return self.op._matmat(X)


class DenseOperator(LinearOperator):
    """Wraps an explicit matrix."""

    def __init__(self, matrix, symmetric=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        super().__init__(matrix.shape)
        self.matrix = matrix
        if symmetric is None:
            symmetric = matrix.shape[0] == matrix.shape[1] and np.allclose(matrix, matrix.T)
        self.symmetric = bool(symmetric)

    def _matmat(self, X):
        return self.matrix @ X

    def _rmatmat(self, X):
        return self.matrix.T @ X


class IdentityOperator(LinearOperator):
    symmetric = True

    def __init__(self, n):
        super().__init__((n, n))

    def _matmat(self, X):
        return X.copy()


class DiagonalOperator(LinearOperator):
    """Elementwise scaling by ``diag``."""

    symmetric = True

    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        if diag.ndim != 1:
            raise ValueError("diag must be a vector")
        super().__init__((diag.size, diag.size))
        self.diag = diag

    def _matmat(self, X):
        return self.diag[:, None] * X


class BandedOperator(LinearOperator):
    """Square banded matrix in diagonal-ordered, column-aligned storage.

    ``ab[upper + i - j, j] == A[i, j]`` for ``-lower <= j - i <= upper``, the
    layout used by :func:`scipy.linalg.solve_banded`.  With ``symmetric=True``
    only the upper half is stored (``lower`` must be 0) and the lower half is
    implied, matching :func:`scipy.linalg.solveh_banded`'s upper form.
    """

    def __init__(self, ab, lower, upper, symmetric=False):
        ab = np.asarray(ab, dtype=float)
        lower, upper = int(lower), int(upper)
        if ab.ndim != 2 or ab.shape[0] != lower + upper + 1:
            raise ValueError(
                f"band storage must have lower+upper+1={lower + upper + 1} rows, got {ab.shape}"
            )
        if symmetric and lower != 0:
            raise ValueError("symmetric storage keeps the upper bands only; use lower=0")
        n = ab.shape[1]
        super().__init__((n, n))
        self.ab = ab
        self.lower = lower
        self.upper = upper
        self.symmetric = bool(symmetric)
        # (offset, values) with A[i, i + offset] = values[i] on the valid range
        diags = []
        for k in range(ab.shape[0]):
            off = upper - k
            if off >= 0:
                diags.append((off, ab[k, off:]))
            else:
                diags.append((off, ab[k, : n + off]))
        self._diags = diags

    @property
    def bandwidth(self):
        return max(self.lower, self.upper)

    @classmethod
    def from_dense(cls, a, lower, upper, symmetric=False):
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        if symmetric:
            lower = 0
        ab = np.zeros((lower + upper + 1, n))
        for off in range(-lower, upper + 1):
            if abs(off) >= n:
                continue
            d = np.diagonal(a, off)
            k = upper - off
            if off >= 0:
                ab[k, off:] = d
            else:
                ab[k, : n + off] = d
        return cls(ab, lower, upper, symmetric=symmetric)

    def _apply_diags(self, X, transpose):
        n = self.rows
        out = np.zeros_like(X)
        for off, vals in self._diags:
            if off == 0:
                out += vals[:, None] * X
                continue
            m = n - abs(off)
            if m <= 0:
                continue
            v = vals[:, None]
            sym = self.symmetric
            # A[i, i+off] = v[i'] where i' = i for off >= 0, else i + off
            if off > 0:
                if not transpose or sym:
                    out[:m] += v * X[off:]
                if transpose or sym:
                    out[off:] += v * X[:m]
            else:
                a = -off
                if not transpose:
                    out[a:] += v * X[:m]
                else:
                    out[:m] += v * X[a:]
        return out

    def _matmat(self, X):
        return self._apply_diags(X, transpose=False)

    def _rmatmat(self, X):
        return self._apply_diags(X, transpose=True)


def banded_matvec(op, v):
    """Counted product with a :class:`BandedOperator` in O(D * bandwidth)."""
    if not isinstance(op, BandedOperator):
        raise TypeError("banded_matvec expects a BandedOperator")
    return matvec(op, v)


class OrthoTransformOperator(LinearOperator):
    """Orthonormal 2-D type-II cosine transform over a square grid.

    Vectors of length ``D = s * s`` are reshaped row-major to ``s x s``.
    ``transform_calls`` counts forward and inverse transform evaluations
    (one per column).
    """

    symmetric = False

    def __init__(self, dim):
        dim = int(dim)
        side = int(round(np.sqrt(dim)))
        if side * side != dim:
            raise ValueError(f"dimension {dim} is not a perfect square")
        super().__init__((dim, dim))
        self.side = side
        self._calls = _Counter()

    @property
    def transform_calls(self):
        return self._calls.value

    def _grid(self, X):
        return X.T.reshape(X.shape[1], self.side, self.side)

    def _matmat(self, X):
        self._calls.add(X.shape[1])
        Y = sp_fft.dctn(self._grid(X), type=2, norm="ortho", axes=(1, 2))
        return Y.reshape(X.shape[1], -1).T

    def _rmatmat(self, X):
        self._calls.add(X.shape[1])
        Y = sp_fft.idctn(self._grid(X), type=2, norm="ortho", axes=(1, 2))
        return Y.reshape(X.shape[1], -1).T


class RowMaskOperator(LinearOperator):
    """Selection of a sorted subset of rows of the ``m x m`` identity."""

    def __init__(self, indices, m):
        idx = np.asarray(indices, dtype=np.intp).ravel()
        m = int(m)
        if idx.size and (idx.min() < 0 or idx.max() >= m):
            raise ValueError(f"mask indices must lie in [0, {m})")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        super().__init__((idx.size, m))
        self.indices = idx

    @classmethod
    def from_bool(cls, flags):
        flags = np.asarray(flags, dtype=bool)
        return cls(np.flatnonzero(flags), flags.size)

    @property
    def weights(self):
        """0/1 indicator of the selected rows, length ``m``."""
        w = np.zeros(self.cols)
        w[self.indices] = 1.0
        return w

    def _matmat(self, X):
        return X[self.indices]

    def _rmatmat(self, X):
        out = np.zeros((self.cols, X.shape[1]))
        out[self.indices] = X
        return out


class PosteriorPrecisionOperator(LinearOperator):
    """Lazy ``Gamma + Phi^T Omega^T Omega Psi Omega^T Omega Phi``.

    Parameters
    ----------
    gamma : LinearOperator
        Prior precision, ``D x D``.
    phi : LinearOperator
        Loading / transform, ``M x D``.
    psi : array of shape (M,)
        Diagonal of the noise precision.
    mask : RowMaskOperator or array of shape (M,) or (M, C)
        Observation pattern.  A 2-D 0/1 array gives each column of a block its
        own mask, which is how independent systems for many data points are
        multiplied in one batch.
    """

    symmetric = True

    def __init__(self, gamma, phi, psi, mask):
        D = gamma.cols
        if gamma.shape != (D, D) or phi.cols != D:
            raise ValueError("gamma must be D x D and phi must have D columns")
        M = phi.rows
        psi = np.asarray(psi, dtype=float).ravel()
        if psi.size != M:
            raise ValueError(f"psi has length {psi.size}, expected {M}")
        if isinstance(mask, RowMaskOperator):
            if mask.cols != M:
                raise ValueError("mask width does not match phi rows")
            weights = mask.weights
        else:
            weights = np.asarray(mask, dtype=float)
            if weights.shape[0] != M:
                raise ValueError("mask weights must have M rows")
        super().__init__((D, D))
        self.gamma = gamma
        self.phi = phi
        self.psi = psi
        self.weights = weights

    @property
    def batched(self):
        return self.weights.ndim == 2

    def noise_weights(self):
        """Per-row effective precision ``1_Omega * psi`` (M,) or (M, C)."""
        if self.batched:
            return self.weights * self.psi[:, None]
        return self.weights * self.psi

    def _matmat(self, X):
        w = self.noise_weights()
        if self.batched and w.shape[1] != X.shape[1]:
            raise ValueError(
                f"operator carries {w.shape[1]} column masks but got {X.shape[1]} columns"
            )
        if not self.batched:
            w = w[:, None]
        out = self.gamma.apply(X)
        out += self.phi.apply_transpose(w * self.phi.apply(X))
        return out

    def take_columns(self, idx):
        if not self.batched:
            return self
        return PosteriorPrecisionOperator(self.gamma, self.phi, self.psi, self.weights[:, idx])

    def column(self, c):
        """Single-system operator for column ``c`` of a batched operator."""
        if not self.batched:
            return self
        return PosteriorPrecisionOperator(self.gamma, self.phi, self.psi, self.weights[:, c])


def matvec(op, v):
    """Counted product ``op @ v`` for a vector or a column block."""
    X, flat = _as_block(v, op.cols)
    _MATVECS.add(X.shape[1])
    out = op._matmat(X)
    return out[:, 0] if flat else out


def to_dense(op, cap=None):
    """Materialize ``op`` column by column (uncounted)."""
    cap = DENSE_CAP if cap is None else cap
    if op.rows * op.cols > cap:
        raise ValueError(
            f"densifying a {op.rows}x{op.cols} operator exceeds the cap of {cap} entries"
        )
    if isinstance(op, PosteriorPrecisionOperator) and op.batched:
        raise ValueError("select a single column system before densifying")
    return op.apply(np.eye(op.cols))
