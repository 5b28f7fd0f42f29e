"""Tensors and the reverse-mode tape.

Operations executed while a :class:`GradTape` is active are appended to it in
construction order; :meth:`GradTape.backward` replays their adjoints in exact
reverse order.  Outside a tape nothing is recorded, which is the inference path.

Tapes are thread-local, so independent tapes may run on different threads.
"""

import itertools
import threading

import numpy as np

from .errors import ContractError

_local = threading.local()
_param_counter = itertools.count()


class Tensor:
    """Dense n-dimensional array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]


class Parameter(Tensor):
    """A learnable leaf.  ``name`` is its id in gradient maps."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data), requires_grad=True, name=name or f"param{next(_param_counter)}")


class _Node:
    __slots__ = ("out", "inputs", "vjp", "per_sample")

    def __init__(self, out, inputs, vjp, per_sample):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.per_sample = per_sample


def _stack():
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape():
    s = _stack()
    return s[-1] if s else None


def record(out_data, inputs, vjp, per_sample=False):
    """Wrap ``out_data`` as a Tensor and record its adjoint on the active tape.

    ``vjp(g)`` returns one gradient (or None) per input.  Ops marked
    ``per_sample`` also accept ``vjp(g, per_sample=True)`` and then return
    parameter gradients with a leading batch axis instead of summing over it.
    """
    tape = active_tape()
    if tape is None or tape.consumed or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.nodes.append(_Node(out, tuple(inputs), vjp, per_sample))
    return out


class GradTape:
    """Ordered record of primitive ops; consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if s and s[-1] is self:
            s.pop()
        return False

    def _run(self, loss, per_sample):
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.consumed = True
        if per_sample:
            if loss.ndim != 1:
                raise ContractError(f"per-sample backward needs a loss of shape (N,), got {loss.shape}")
        elif loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if per_sample and node.per_sample:
                ins = node.vjp(g, per_sample=True)
            else:
                ins = node.vjp(g)
            for t, gi in zip(node.inputs, ins):
                if gi is None or not t.requires_grad:
                    continue
                if per_sample and isinstance(t, Parameter) and not node.per_sample:
                    raise ContractError(
                        f"parameter {t.name!r} feeds an op without per-sample gradient support"
                    )
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        self.nodes = []
        return grads

    def backward(self, loss, params, per_sample=False):
        """Gradients of ``loss`` for every parameter in ``params``, keyed by name.

        Parameters the loss does not reach get zero gradients.  With
        ``per_sample=True`` the loss is a vector of per-sample losses and each
        gradient has a leading batch axis.
        """
        grads = self._run(loss, per_sample)
        out = {}
        n = loss.shape[0] if per_sample else None
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros(((n,) if per_sample else ()) + p.shape, dtype=p.dtype)
            out[p.name] = g
        return out

    def gradient(self, loss, wrt):
        """Gradients of a scalar ``loss`` for arbitrary tensors, as a list."""
        grads = self._run(loss, False)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(tape, loss, params, per_sample=False):
    return tape.backward(loss, params, per_sample=per_sample)
