"""Mean-field diffusivities F(x, mu) with space and Lions derivatives.

Shapes follow one convention throughout: ``F`` is ``(d, m)``, ``dxF`` is
``(d, m, d)`` with the last axis the differentiation direction, and the Lions
derivative ``D_mu F(x, mu)(z)`` is ``(d, m, d)`` likewise.  Measures are
uniform empirical measures given by their ``(n, d)`` atoms.

User callbacks must be pure and broadcast over leading batch axes: a point
callback receives arrays ``x[..., d]`` (and ``y[..., d]`` or ``mean[..., d]``)
and returns ``[..., d, m]`` (or ``[..., d, m, d]`` for derivatives).
"""

from __future__ import annotations

import numpy as np

from .measures import atoms_of

__all__ = [
    "MeanFieldCoefficient",
    "ConvolutionCoefficient",
    "MomentCoefficient",
    "make_convolution",
    "make_moment",
    "conv_tanh",
    "moment_tanh",
    "zero_coefficient",
    "from_name",
    "empirical_projection_grad",
    "BUILTIN_NAMES",
]


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


class MeanFieldCoefficient:
    """Generic coefficient backed by three point callbacks.

    ``eval_F(x, atoms)``, ``eval_dxF(x, atoms)`` and ``eval_dmuF(x, atoms, z)``
    act on a single state ``x`` of shape ``(d,)``.  The batch methods used by
    the solver fall back to loops over these; subclasses override them with
    vectorized versions.
    """

    def __init__(self, d, m, eval_F, eval_dxF, eval_dmuF, lipschitz_bound=np.inf, name="custom"):
        self.d = int(d)
        self.m = int(m)
        self._F = eval_F
        self._dxF = eval_dxF
        self._dmuF = eval_dmuF
        self.lipschitz_bound = float(lipschitz_bound)
        self.name = name

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, d={self.d}, m={self.m})"

    def _check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"state dimension {x.shape[-1]} != {self.d}")
        return x

    def _check_atoms(self, mu):
        atoms = atoms_of(mu)
        if atoms.shape[1] != self.d:
            raise ValueError(f"measure dimension {atoms.shape[1]} != {self.d}")
        return atoms

    # point evaluations
    def F(self, x, mu) -> np.ndarray:
        return np.asarray(self._F(self._check_point(x), self._check_atoms(mu)), dtype=float)

    def dxF(self, x, mu) -> np.ndarray:
        return np.asarray(self._dxF(self._check_point(x), self._check_atoms(mu)), dtype=float)

    def dmuF(self, x, mu, z) -> np.ndarray:
        return np.asarray(
            self._dmuF(self._check_point(x), self._check_atoms(mu), self._check_point(z)),
            dtype=float,
        )

    # batch evaluations against one measure
    def F_batch(self, xs, mu) -> np.ndarray:
        """``F(x^i, mu)`` for every row of ``xs``; shape ``(n, d, m)``."""
        atoms = self._check_atoms(mu)
        return np.stack([self.F(x, atoms) for x in np.asarray(xs, dtype=float)])

    def dxF_batch(self, xs, mu) -> np.ndarray:
        atoms = self._check_atoms(mu)
        return np.stack([self.dxF(x, atoms) for x in np.asarray(xs, dtype=float)])

    def dmuF_pairs(self, xs) -> np.ndarray:
        """``D_mu F(x^i, mu^n)(x^j)`` for all pairs; shape ``(n, n, d, m, d)``."""
        xs = self._check_point(xs)
        return np.stack([np.stack([self.dmuF(xi, xs, xj) for xj in xs]) for xi in xs])

    def mean_interaction(self, xs, vectors) -> np.ndarray:
        """``(1/n) sum_j D_mu F(x^i, mu^n)(x^j) . v^j`` for every ``i``.

        ``xs`` holds the atoms of ``mu^n`` (shape ``(n, d)``) and ``vectors``
        the ``v^j`` (shape ``(n, d)``), contracted with the derivative
        direction.  Result has shape ``(n, d, m)``.
        """
        xs = np.asarray(xs, dtype=float)
        vectors = np.asarray(vectors, dtype=float)
        n = xs.shape[0]
        out = np.zeros((n, self.d, self.m))
        for i in range(n):
            for j in range(n):
                out[i] += self.dmuF(xs[i], xs, xs[j]) @ vectors[j]
        return out / n


class ConvolutionCoefficient(MeanFieldCoefficient):
    """``F(x, mu) = mean over y ~ mu of f(x, y)``."""

    def __init__(self, f, dfdx, dfdy, d, m, lipschitz_bound=np.inf, name="convolution"):
        self.f, self.dfdx, self.dfdy = f, dfdx, dfdy
        super().__init__(
            d, m,
            lambda x, atoms: np.mean(f(x[None, :], atoms), axis=0),
            lambda x, atoms: np.mean(dfdx(x[None, :], atoms), axis=0),
            lambda x, atoms, z: dfdy(x, z),
            lipschitz_bound, name,
        )

    def F_batch(self, xs, mu):
        xs = self._check_point(xs)
        atoms = self._check_atoms(mu)
        return np.mean(self.f(xs[:, None, :], atoms[None, :, :]), axis=1)

    def dxF_batch(self, xs, mu):
        xs = self._check_point(xs)
        atoms = self._check_atoms(mu)
        return np.mean(self.dfdx(xs[:, None, :], atoms[None, :, :]), axis=1)

    def dmuF_pairs(self, xs):
        xs = self._check_point(xs)
        return self.dfdy(xs[:, None, :], xs[None, :, :])

    def mean_interaction(self, xs, vectors):
        xs = self._check_point(xs)
        vectors = np.asarray(vectors, dtype=float)
        n = xs.shape[0]
        out = np.zeros((n, self.d, self.m))
        # chunk rows so the pairwise tensor stays small
        chunk = max(1, 2**22 // max(1, n * self.d * self.m * self.d))
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            grad = self.dfdy(xs[lo:hi, None, :], xs[None, :, :])  # (c, n, d, m, d)
            out[lo:hi] = np.einsum("cjamk,jk->cam", grad, vectors) / n
        return out


class MomentCoefficient(MeanFieldCoefficient):
    """``F(x, mu) = g(x, mean of mu)``; the Lions derivative is constant in z."""

    def __init__(self, g, dgdx, dgdm, d, m, lipschitz_bound=np.inf, name="moment"):
        self.g, self.dgdx, self.dgdm = g, dgdx, dgdm
        super().__init__(
            d, m,
            lambda x, atoms: g(x, atoms.mean(axis=0)),
            lambda x, atoms: dgdx(x, atoms.mean(axis=0)),
            lambda x, atoms, z: dgdm(x, atoms.mean(axis=0)),
            lipschitz_bound, name,
        )

    def F_batch(self, xs, mu):
        xs = self._check_point(xs)
        mean = self._check_atoms(mu).mean(axis=0)
        return self.g(xs, np.broadcast_to(mean, xs.shape))

    def dxF_batch(self, xs, mu):
        xs = self._check_point(xs)
        mean = self._check_atoms(mu).mean(axis=0)
        return self.dgdx(xs, np.broadcast_to(mean, xs.shape))

    def dmuF_pairs(self, xs):
        xs = self._check_point(xs)
        grad = self.dgdm(xs, np.broadcast_to(xs.mean(axis=0), xs.shape))
        return np.broadcast_to(grad[:, None], (xs.shape[0],) + grad.shape)

    def mean_interaction(self, xs, vectors):
        xs = self._check_point(xs)
        mean = xs.mean(axis=0)
        grad = self.dgdm(xs, np.broadcast_to(mean, xs.shape))  # (n, d, m, d)
        return np.einsum("iamk,k->iam", grad, np.asarray(vectors, dtype=float).mean(axis=0))


def make_convolution(f, dfdx, dfdy, d, m, lipschitz_bound=np.inf, name="convolution"):
    """Coefficient ``F(x, mu) = int f(x, y) mu(dy)`` with ``D_mu F(x, mu)(z) = d_y f(x, z)``."""
    return ConvolutionCoefficient(f, dfdx, dfdy, d, m, lipschitz_bound, name)


def make_moment(g, dgdx, dgdm, d, m, lipschitz_bound=np.inf, name="moment"):
    """Coefficient ``F(x, mu) = g(x, int y mu(dy))`` with ``D_mu F = d_m g``."""
    return MomentCoefficient(g, dgdx, dgdm, d, m, lipschitz_bound, name)


def _diag_tensor(values, m):
    # values[..., d] -> [..., d, m, d] with entries values[ι] on ι == ℓ for every column
    d = values.shape[-1]
    eye = np.eye(d)
    return values[..., :, None, None] * np.ones(m)[:, None] * eye[:, None, :]


def conv_tanh(a: float = 1.0, d: int = 1, m: int = 1) -> ConvolutionCoefficient:
    """``f(x, y)^{ι, k} = a tanh(x_ι - y_ι)`` for every column ``k``."""

    def f(x, y):
        return np.repeat(a * np.tanh(x - y)[..., None], m, axis=-1)

    def dfdx(x, y):
        return _diag_tensor(a * _sech2(x - y), m)

    def dfdy(x, y):
        return -_diag_tensor(a * _sech2(x - y), m)

    bound = abs(a) * np.sqrt(d * m)
    return make_convolution(f, dfdx, dfdy, d, m, bound, "conv_tanh")


def moment_tanh(a: float = 0.5, b: float = 0.5, d: int = 1, m: int = 1) -> MomentCoefficient:
    """``g(x, mean)^{ι, k} = a tanh(x_ι) + b tanh(mean_ι)`` for every column ``k``."""

    def g(x, mean):
        return np.repeat((a * np.tanh(x) + b * np.tanh(mean))[..., None], m, axis=-1)

    def dgdx(x, mean):
        return _diag_tensor(a * _sech2(x), m)

    def dgdm(x, mean):
        return _diag_tensor(b * _sech2(mean), m)

    bound = (abs(a) + abs(b)) * np.sqrt(d * m)
    return make_moment(g, dgdx, dgdm, d, m, bound, "moment_tanh")


def zero_coefficient(d: int = 1, m: int = 1) -> MomentCoefficient:
    """``F = 0``; turns the particle system into a static cloud."""

    def g(x, mean):
        return np.zeros(np.shape(x)[:-1] + (d, m))

    def dg(x, mean):
        return np.zeros(np.shape(x)[:-1] + (d, m, d))

    return make_moment(g, dg, dg, d, m, 0.0, "zero")


BUILTIN_NAMES = ("conv_tanh", "moment_tanh", "zero")


def from_name(name: str, params: dict | None = None, d: int = 1, m: int = 1) -> MeanFieldCoefficient:
    """Build a built-in coefficient from its configuration name."""
    params = dict(params or {})
    if name == "conv_tanh":
        allowed = {"a"}
        factory = lambda: conv_tanh(params.get("a", 1.0), d, m)  # noqa: E731
    elif name == "moment_tanh":
        allowed = {"a", "b"}
        factory = lambda: moment_tanh(params.get("a", 0.5), params.get("b", 0.5), d, m)  # noqa: E731
    elif name == "zero":
        allowed = set()
        factory = lambda: zero_coefficient(d, m)  # noqa: E731
    else:
        raise ValueError(f"unknown coefficient {name!r}; expected one of {BUILTIN_NAMES}")
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"unknown parameters for {name}: {sorted(extra)}")
    return factory()


def empirical_projection_grad(coeff: MeanFieldCoefficient, i: int, j: int, states) -> np.ndarray:
    """Derivative of ``(x^1..x^n) -> F(x^i, mu^n)`` with respect to ``x^j``.

    Equals ``[i == j] dxF(x^i, mu^n) + D_mu F(x^i, mu^n)(x^j) / n``.
    """
    atoms = atoms_of(states)
    n = atoms.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"particle indices ({i}, {j}) outside 0..{n - 1}")
    out = coeff.dmuF(atoms[i], atoms, atoms[j]) / n
    if i == j:
        out = out + coeff.dxF(atoms[i], atoms)
    return out
