"""Fully connected displacement network u(X) with exact spatial derivatives.

Spatial derivatives are propagated forward through the layers alongside the
activations (first order for the deformation gradient, second order for the
stress divergence). Every array operation is recorded on the
:mod:`~demsolid.autodiff` tape, so parameter gradients of any loss built
from these quantities come from a single reverse sweep.

Layout conventions for a batch of ``n`` points:

* ``u``: ``(n, 3)``
* ``grad_u``: ``(n, 3, 3)`` with ``grad_u[:, m, a] = du_m / dX_a``
* ``hess_u``: ``(n, 3, 3, 3)`` with ``hess_u[:, m, a, b] = d2u_m / dX_a dX_b``
"""
from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteGradient, ParseError

# symmetric (a, b) pairs stored for second derivatives
_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_PAIR_INDEX = np.array([[0, 3, 4], [3, 1, 5], [4, 5, 2]])

ACTIVATIONS = ("tanh",)
CHECKPOINT_MAGIC = "demsolid-field"


@dataclass
class FieldEval:
    """Tape tensors produced by one traced evaluation."""

    u: ad.Tensor
    grad_u: ad.Tensor | None = None
    hess_u: ad.Tensor | None = None


class DisplacementField:
    """MLP mapping reference positions to displacements.

    Parameters
    ----------
    layer_sizes : sequence of int
        Widths including input and output, e.g. ``(3, 64, 64, 64, 3)``.
    bounds : (2, 3) array_like
        Scene bounding box; inputs are mapped affinely onto ``[-1, 1]^3``.
    seed : int
        Seed for the hidden-layer initialization.
    zero_output : bool
        Zero the final weights and bias so the field starts at u = 0.
    """

    def __init__(self, layer_sizes=(3, 64, 64, 64, 3), bounds=((-1, -1, -1), (1, 1, 1)),
                 activation="tanh", seed=0, zero_output=True):
        layer_sizes = tuple(int(w) for w in layer_sizes)
        if len(layer_sizes) < 2 or layer_sizes[0] != 3 or layer_sizes[-1] != 3:
            raise ValueError(f"layer sizes must start and end with 3, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        bounds = np.asarray(bounds, dtype=np.float64)
        lo, hi = bounds[0], bounds[1]
        extent = np.where(hi - lo > 0, hi - lo, 1.0)
        self.center = 0.5 * (lo + hi)
        self.scale = 2.0 / extent
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for k, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            last = k == len(layer_sizes) - 2
            if last and zero_output:
                W = np.zeros((fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                limit = np.sqrt(3.0 / fan_in)
                W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
                b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out)
            self.weights.append(W)
            self.biases.append(b)
        self.calls = Counter()

    # -- parameters -----------------------------------------------------
    @property
    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters)

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.parameters])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_parameters:
            raise ValueError(f"expected {self.n_parameters} parameters, got {theta.size}")
        pos = 0
        for k in range(len(self.weights)):
            for name in ("weights", "biases"):
                arr = getattr(self, name)[k]
                getattr(self, name)[k] = theta[pos:pos + arr.size].reshape(arr.shape).copy()
                pos += arr.size

    def copy(self):
        other = DisplacementField.__new__(DisplacementField)
        other.layer_sizes = self.layer_sizes
        other.activation = self.activation
        other.center = self.center.copy()
        other.scale = self.scale.copy()
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.calls = Counter()
        return other

    def tape(self):
        """Leaf tensors for one differentiable evaluation."""
        return FieldTape(self)

    # -- numpy conveniences ---------------------------------------------
    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = self._trace(np.atleast_2d(X), order=0, requires_grad=False).u.value
        return out[0] if single else out

    __call__ = forward

    def spatial_jacobian(self, X):
        """``Grad u`` at each point, shape ``(n, 3, 3)``."""
        return self._trace(np.atleast_2d(X), order=1, requires_grad=False).grad_u.value

    def spatial_hessian(self, X):
        """Second derivatives of each displacement component, ``(n, 3, 3, 3)``."""
        return self._trace(np.atleast_2d(X), order=2, requires_grad=False).hess_u.value

    def spatial_hessian_divergence(self, X, tangent_fn):
        """Divergence of the first Piola-Kirchhoff stress of the displacement field.

        ``tangent_fn(F)`` must return ``dP/dF`` with layout ``[..., j, k, p, q]``.
        The divergence is the chain rule ``sum_k dP_jk/dF_pq * d2u_p/dX_q dX_k``.
        """
        ev = self._trace(np.atleast_2d(X), order=2, requires_grad=False)
        F = ev.grad_u.value + np.eye(3)
        A = tangent_fn(F)
        return np.einsum("njkpq,npqk->nj", A, ev.hess_u.value)

    # -- traced evaluation ----------------------------------------------
    def _trace(self, X, order, requires_grad, params=None):
        if params is None:
            params = [ad.Tensor(p, requires_grad=requires_grad) for p in self.parameters]
        return _propagate(self, params, X, order)

    # -- serialization --------------------------------------------------
    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self):
        header = [
            f"{CHECKPOINT_MAGIC} 1",
            "layers " + " ".join(str(w) for w in self.layer_sizes),
            f"activation {self.activation}",
            "center " + " ".join(repr(float(c)) for c in self.center),
            "scale " + " ".join(repr(float(s)) for s in self.scale),
            "",
        ]
        buf = io.BytesIO()
        buf.write(("\n".join(header) + "\n").encode("ascii"))
        for p in self.parameters:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, data):
        marker = data.find(b"\n\n")
        if marker < 0:
            raise ParseError("checkpoint header is not terminated by a blank line")
        lines = data[:marker].decode("ascii").splitlines()
        blob = data[marker + 2:]
        fields = {}
        for line in lines:
            key, _, rest = line.partition(" ")
            fields[key] = rest.split()
        if CHECKPOINT_MAGIC not in fields:
            raise ParseError("not a displacement-field checkpoint")
        sizes = tuple(int(w) for w in fields["layers"])
        field = cls(sizes, activation=fields["activation"][0])
        field.center = np.array([float(c) for c in fields["center"]])
        field.scale = np.array([float(s) for s in fields["scale"]])
        expected = field.n_parameters * 8
        if len(blob) != expected:
            raise ParseError(f"weight blob has {len(blob)} bytes, expected {expected}")
        field.set_flat(np.frombuffer(blob, dtype="<f8"))
        return field


class FieldTape:
    """Parameter leaves of a field for one loss evaluation."""

    def __init__(self, field: DisplacementField):
        self.field = field
        self.params = [ad.Tensor(p, requires_grad=True) for p in field.parameters]

    def evaluate(self, X, order=1):
        return _propagate(self.field, self.params, np.atleast_2d(np.asarray(X, dtype=np.float64)), order)

    def gradients(self, grads):
        return [ad.grad_of(grads, p) for p in self.params]


def _propagate(field, params, X, order):
    """Forward pass with forward-mode spatial tangents up to ``order``."""
    if order >= 2:
        field.calls["second_order"] += 1
    if order >= 1:
        field.calls["first_order"] += 1
    field.calls["forward"] += 1

    n_layers = len(params) // 2
    h = ad.Tensor((X - field.center) * field.scale)
    # d h0 / dX_a is the constant diagonal of the normalizer; layout (1, a, i)
    jac = ad.Tensor(np.diag(field.scale)[None, :, :]) if order >= 1 else None
    hess = None
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        z = ad.linear(h, W, b)
        jz = ad.linear(jac, W) if order >= 1 else None
        hz = ad.linear(hess, W) if (order >= 2 and hess is not None) else None
        if k == n_layers - 1:
            u, jac_out, hess_out = z, jz, hz
            break
        t = ad.tanh(z)
        if order >= 1:
            d1 = 1.0 - t * t
            d1e = ad.reshape(d1, (d1.shape[0], 1, d1.shape[1]))
            if order >= 2:
                d2e = -2.0 * ad.reshape(t, (t.shape[0], 1, t.shape[1])) * d1e
                ia = [a for a, _ in _PAIRS]
                ib = [b_ for _, b_ in _PAIRS]
                hess_new = d2e * (ad.gather(jz, ia, 1) * ad.gather(jz, ib, 1))
                if hz is not None:
                    hess_new = hess_new + d1e * hz
                hess = hess_new
            jac = d1e * jz
        h = t

    grad_u = hess_u = None
    if order >= 1:
        # jac_out[n, a, m] -> grad_u[n, m, a]
        if jac_out.shape[0] != X.shape[0]:
            jac_out = jac_out + ad.Tensor(np.zeros((X.shape[0], 1, 1)))
        grad_u = ad.transpose(jac_out, (0, 2, 1))
    if order >= 2:
        if hess_out is None:
            hess_u = ad.Tensor(np.zeros((X.shape[0], 3, 3, 3)))
        else:
            full = ad.gather(hess_out, _PAIR_INDEX.ravel(), 1)
            full = ad.reshape(full, (X.shape[0], 3, 3, 3))
            hess_u = ad.transpose(full, (0, 3, 1, 2))
    return FieldEval(u, grad_u, hess_u)


def parameter_gradient(field: DisplacementField, loss_evaluator):
    """Loss value and d(loss)/d(theta) for every weight and bias.

    ``loss_evaluator(tape)`` receives a :class:`FieldTape` and must return a
    scalar :class:`~demsolid.autodiff.Tensor`. Gradients are returned as a
    list aligned with ``field.parameters``.
    """
    tape = field.tape()
    loss = loss_evaluator(tape)
    grads = tape.gradients(ad.backward(loss))
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("parameter gradient contains NaN or Inf")
    return float(loss.value), grads


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])
