"""Dense float64 tensors with reverse-mode autodiff on an append-only tape.

Primitive set: matmul, add, mul, mean, relu, softmax, log, gather, plus
reshape as a structural (data-movement) node. Every primitive's output is
quantized under the tape's PrecisionMode, as are accumulated gradients, so
reduced-precision training failures are reproducible.

Tensors are immutable values; a tape is single-threaded and replayable.
"""

import numpy as np

from babelkit import precision
from babelkit.precision import EXACT


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")
        self.op = op
        self.shapes = shapes


class NotOnTapeError(ValueError):
    pass


class Tensor:
    """Immutable dense array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node", "contaminated")

    def __init__(self, data, tape=None, node=None, contaminated=False):
        arr = np.asarray(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node
        self.contaminated = bool(contaminated)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"


class Node:
    __slots__ = ("op", "inputs", "attrs", "output", "name", "trainable")

    def __init__(self, op, inputs, attrs, output, name=None, trainable=False):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.output = output
        self.name = name
        self.trainable = trainable


class DiffTape:
    """Append-only record of primitive executions over identified leaves."""

    def __init__(self, mode=EXACT):
        self.mode = mode
        self.nodes = []
        self.parameters = {}  # name -> node id (trainable leaves)

    # -- leaves ------------------------------------------------------------

    def parameter(self, data, name, trainable=True):
        """Register a named leaf. Frozen leaves (trainable=False) block
        gradient flow and report exactly-zero gradients."""
        if name in self.parameters:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(data, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}, arr, name=name, trainable=trainable))
        self.parameters[name] = node_id
        return Tensor(arr, self, node_id)

    def constant(self, data):
        arr = np.array(data, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(Node("const", (), {}, arr))
        return Tensor(arr, self, node_id)

    # -- recording ---------------------------------------------------------

    def _record(self, op, input_tensors, attrs, raw_output):
        out = precision.quantize_array(raw_output, self.mode)
        contaminated = any(t.contaminated for t in input_tensors) or not bool(
            np.all(np.isfinite(out))
        )
        node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(t.node for t in input_tensors), attrs, out))
        return Tensor(out, self, node_id, contaminated)

    def _lift(self, x):
        if isinstance(x, Tensor):
            if x.tape is not None and x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            if x.tape is None:
                return self.constant(x.data)
            return x
        return self.constant(x)

    # -- reverse pass ------------------------------------------------------

    def backward(self, output):
        """Gradients of a recorded scalar w.r.t. every trainable parameter.

        Returns {name: ndarray} with the parameter's shape; parameters the
        output does not depend on get zeros. Accumulated gradients are
        quantized under the tape's precision mode.
        """
        if not isinstance(output, Tensor) or output.tape is not self or output.node is None:
            raise NotOnTapeError("output was not recorded on this tape")
        if output.data.shape != ():
            raise ShapeError("backward", output.data.shape)

        grads = {output.node: np.ones(())}
        for node_id in range(output.node, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.op in ("leaf", "const"):
                node.attrs["_grad"] = g
                continue
            vjp = _VJPS[node.op]
            inputs = [self.nodes[i].output for i in node.inputs]
            contribs = vjp(g, node.output, inputs, node.attrs)
            for in_id, contrib in zip(node.inputs, contribs):
                if contrib is None:
                    continue
                in_node = self.nodes[in_id]
                if in_node.op == "const" or (in_node.op == "leaf" and not in_node.trainable):
                    continue  # gradient flow stops at constants and frozen leaves
                contrib = precision.quantize_array(contrib, self.mode)
                prev = grads.get(in_id)
                if prev is None:
                    grads[in_id] = contrib
                else:
                    grads[in_id] = precision.quantize_array(prev + contrib, self.mode)

        result = {}
        for name, node_id in self.parameters.items():
            node = self.nodes[node_id]
            g = node.attrs.pop("_grad", None)
            if g is None or not node.trainable:
                result[name] = np.zeros_like(node.output, dtype=np.float64)
            else:
                result[name] = np.array(g, dtype=np.float64).reshape(node.output.shape)
        # drop any stashed grads on anonymous leaves
        for node in self.nodes:
            node.attrs.pop("_grad", None)
        return result

    # -- replay ------------------------------------------------------------

    def replay(self):
        """Re-execute all recorded primitives from the stored leaves.
        Returns True iff every node's output is reproduced bit for bit."""
        values = []
        ok = True
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(node.output)
                continue
            inputs = [values[i] for i in node.inputs]
            raw = _FORWARDS[node.op](inputs, node.attrs)
            out = precision.quantize_array(raw, self.mode)
            values.append(out)
            if out.tobytes() != node.output.tobytes():
                ok = False
        return ok


def record_forward(tape, program, *inputs):
    """Run ``program`` (a composition of primitives) on ``tape``, returning
    its output tensor. Inputs may be Tensors, arrays, or scalars."""
    lifted = [tape._lift(x) for x in inputs]
    out = program(*lifted)
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise NotOnTapeError("program output was not recorded on the tape")
    return out


# -- primitives --------------------------------------------------------------


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _plain(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _apply(op, attrs, *xs):
    tape = _tape_of(*xs)
    if tape is None:
        raw = _FORWARDS[op]([_plain(x) for x in xs], attrs)
        return Tensor(raw)
    lifted = [tape._lift(x) for x in xs]
    raw = _FORWARDS[op]([t.data for t in lifted], attrs)
    return tape._record(op, lifted, attrs, raw)


def _fw_matmul(inputs, attrs):
    a, b = inputs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _fw_add(inputs, attrs):
    a, b = inputs
    try:
        return a + b
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None


def _fw_mul(inputs, attrs):
    a, b = inputs
    try:
        return a * b
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None


def _fw_mean(inputs, attrs):
    (a,) = inputs
    return np.mean(a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _fw_relu(inputs, attrs):
    return np.maximum(inputs[0], 0.0)


def _fw_softmax(inputs, attrs):
    a = inputs[0]
    axis = attrs.get("axis", -1)
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _fw_log(inputs, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(inputs[0])


def _fw_gather(inputs, attrs):
    a = inputs[0]
    idx = attrs["indices"]
    axis = attrs.get("axis", 0)
    if np.any(idx < 0) or np.any(idx >= a.shape[axis]):
        raise ShapeError("gather", a.shape, (f"indices up to {int(np.max(idx))}",))
    return np.take(a, idx, axis=axis)


def _fw_reshape(inputs, attrs):
    a = inputs[0]
    shape = attrs["shape"]
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return a.reshape(shape)


_FORWARDS = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "mul": _fw_mul,
    "mean": _fw_mean,
    "relu": _fw_relu,
    "softmax": _fw_softmax,
    "log": _fw_log,
    "gather": _fw_gather,
    "reshape": _fw_reshape,
}


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _vjp_matmul(g, out, inputs, attrs):
    a, b = inputs
    return g @ b.T, a.T @ g


def _vjp_add(g, out, inputs, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_mul(g, out, inputs, attrs):
    a, b = inputs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_mean(g, out, inputs, attrs):
    (a,) = inputs
    axis = attrs.get("axis")
    if axis is None:
        return (np.broadcast_to(g / a.size, a.shape),)
    n = a.shape[axis]
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape),)


def _vjp_relu(g, out, inputs, attrs):
    return (g * (inputs[0] > 0),)


def _vjp_softmax(g, out, inputs, attrs):
    axis = attrs.get("axis", -1)
    dot = np.sum(g * out, axis=axis, keepdims=True)
    return ((g - dot) * out,)


def _vjp_log(g, out, inputs, attrs):
    return (g / inputs[0],)


def _vjp_gather(g, out, inputs, attrs):
    a = inputs[0]
    idx = attrs["indices"]
    axis = attrs.get("axis", 0)
    grad = np.zeros_like(a)
    moved = np.moveaxis(grad, axis, 0)
    np.add.at(moved, idx, np.moveaxis(np.asarray(g), axis, 0))
    return (grad,)


def _vjp_reshape(g, out, inputs, attrs):
    return (np.asarray(g).reshape(inputs[0].shape),)


_VJPS = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "mul": _vjp_mul,
    "mean": _vjp_mean,
    "relu": _vjp_relu,
    "softmax": _vjp_softmax,
    "log": _vjp_log,
    "gather": _vjp_gather,
    "reshape": _vjp_reshape,
}


# -- public op API -----------------------------------------------------------


def matmul(a, b):
    return _apply("matmul", {}, a, b)


def add(a, b):
    return _apply("add", {}, a, b)


def mul(a, b):
    return _apply("mul", {}, a, b)


def mean(a, axis=None, keepdims=False):
    return _apply("mean", {"axis": axis, "keepdims": keepdims}, a)


def relu(a):
    return _apply("relu", {}, a)


def softmax(a, axis=-1):
    return _apply("softmax", {"axis": axis}, a)


def log(a):
    return _apply("log", {}, a)


def gather(a, indices, axis=0):
    idx = np.asarray(indices, dtype=np.intp)
    return _apply("gather", {"indices": idx, "axis": axis}, a)


def reshape(a, shape):
    return _apply("reshape", {"shape": tuple(shape)}, a)
