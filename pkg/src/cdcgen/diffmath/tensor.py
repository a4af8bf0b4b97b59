"""Dense float64 tensors with a define-by-run gradient tape."""

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Value-semantic n-d array of float64 with an optional gradient slot.

    Tensors produced by an operation on inputs that require gradients keep a
    reference to their parents and a backward rule; that linkage is the tape
    node for the operation.  Leaves that require gradients accumulate into
    ``grad`` when :func:`backward` reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        return _ops().transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def exp(self):
        return _ops().exp(self)

    def log(self):
        return _ops().log(self)

    def tanh(self):
        return _ops().tanh(self)

    def sigmoid(self):
        return _ops().sigmoid(self)


def _ops():
    from cdcgen.diffmath import ops

    return ops


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data):
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = None
    out._consumed = False
    return out


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of an operation.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` where the parent needs no gradient).
    """
    out = _wrap(data)
    for p in parents:
        if p.requires_grad:
            if getattr(_state, "enabled", True):
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
                out.op = op
            break
    return out


class Tape:
    """Ordered record of the operations reachable from a scalar loss.

    ``nodes`` is in topological order (inputs before outputs); backward
    replays it in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes if n.op is not None]


def backward(loss):
    """Populate ``grad`` on every leaf tensor reachable from ``loss``.

    Leaf gradients accumulate across calls until cleared.  The graph is
    released afterwards, so a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("graph already consumed by a previous backward; rerun the forward pass")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires gradients (empty tape)")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True
    return tape
