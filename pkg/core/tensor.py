"""
Reverse-mode differentiation over dense numpy arrays.

Every primitive application is recorded on a Tape; backward() walks the tape
in reverse and accumulates adjoints per tensor. Tapes are private to one
episode, so several episodes can run side by side against the same
read-only ParamStore.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
LAYER_NORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes"""


class GradientError(RuntimeError):
    """Raised when backward cannot run, or a gradient check evaluates to a non-finite value.

    Non-finite adjoints are returned as computed; the optimiser rejects them.
    """


class Tensor:
    """An array value living on a tape"""

    __slots__ = ('value', 'tape', 'name', 'requires_grad')

    def __init__(self, value: np.ndarray, tape: 'Tape', name: Optional[str] = None,
                 requires_grad: bool = False):
        self.value = value
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape}{label}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add(self, -np.asarray(other, dtype=np.float64))
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(other, multiply(self, -1.0))

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One executed primitive application"""

    __slots__ = ('primitive', 'inputs', 'attrs', 'ctx', 'output')

    def __init__(self, primitive: Type['Primitive'], inputs: List[Tensor], attrs: Dict,
                 ctx: Dict, output: Tensor):
        self.primitive = primitive
        self.inputs = inputs
        self.attrs = attrs
        self.ctx = ctx
        self.output = output


class Tape:
    """Ordered record of primitive applications for one forward pass"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: List[Tensor] = []
        self._params: Dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value: ArrayLike, name: Optional[str] = None,
             requires_grad: bool = True) -> Tensor:
        array = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise ValueError(f"leaf {name or '<unnamed>'} holds non-finite values")
        tensor = Tensor(array, self, name=name, requires_grad=requires_grad)
        self.leaves.append(tensor)
        return tensor

    def constant(self, value: ArrayLike) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def param(self, store, name: str) -> Tensor:
        """Leaf for a named parameter; one leaf per name per tape"""
        tensor = self._params.get(name)
        if tensor is None:
            tensor = self.leaf(store[name], name=name, requires_grad=store.is_trainable(name))
            self._params[name] = tensor
        return tensor

    def as_tensor(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return value
        return self.constant(value)

    def record(self, node: Node):
        self.nodes.append(node)

    def replay(self) -> List[np.ndarray]:
        """Re-run every recorded primitive from the leaf values and return the outputs"""
        values: Dict[int, np.ndarray] = {id(leaf): leaf.value for leaf in self.leaves}
        outputs = []
        for node in self.nodes:
            args = [values[id(t)] for t in node.inputs]
            value = node.primitive.forward({}, *args, **node.attrs)
            values[id(node.output)] = value
            outputs.append(value)
        return outputs


PRIMITIVES: Dict[str, Type['Primitive']] = {}


def register(kind: str):
    """Class decorator adding a primitive to the registry under its kind"""
    def decorator(cls):
        cls.kind = kind
        PRIMITIVES[kind] = cls
        return cls
    return decorator


class Primitive:
    """A forward formula with its exact adjoint rule"""

    kind = 'primitive'

    @staticmethod
    def forward(ctx: Dict, *values: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Dict, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *args, **attrs) -> Tensor:
        tape = _find_tape(args, cls.kind)
        inputs = [tape.as_tensor(arg) for arg in args]
        ctx: Dict = {}
        value = cls.forward(ctx, *[t.value for t in inputs], **attrs)
        output = Tensor(value, tape, requires_grad=any(t.requires_grad for t in inputs))
        tape.record(Node(cls, inputs, attrs, ctx, output))
        return output


def _find_tape(args, kind: str) -> Tape:
    for arg in args:
        if isinstance(arg, Tensor):
            return arg.tape
    raise ValueError(f"{kind}: at least one argument must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape of a broadcast operand"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


@register('matmul')
class MatMul(Primitive):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        ctx['a'], ctx['b'] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx['b'].T, ctx['a'].T @ grad


@register('add')
class Add(Primitive):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('add', a, b)
        ctx['shapes'] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        shape_a, shape_b = ctx['shapes']
        return _unbroadcast(grad, shape_a), _unbroadcast(grad, shape_b)


@register('multiply')
class Multiply(Primitive):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape('multiply', a, b)
        ctx['a'], ctx['b'] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx['a'], ctx['b']
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@register('concat')
class Concat(Primitive):
    @staticmethod
    def forward(ctx, *values, axis=-1):
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError:
            shapes = [v.shape for v in values]
            raise ShapeError(f"concat: shapes {shapes} cannot be joined on axis {axis}")
        ctx['sizes'] = [v.shape[axis] for v in values]
        ctx['axis'] = axis
        return out

    @staticmethod
    def backward(ctx, grad):
        cuts = np.cumsum(ctx['sizes'])[:-1]
        return tuple(np.split(grad, cuts, axis=ctx['axis']))


@register('leaky_relu')
class LeakyRelu(Primitive):
    @staticmethod
    def forward(ctx, x, slope=LEAKY_SLOPE):
        ctx['scale'] = np.where(x > 0, 1.0, slope)
        return x * ctx['scale']

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx['scale'],)


@register('sigmoid')
class Sigmoid(Primitive):
    @staticmethod
    def forward(ctx, x):
        y = expit(x)
        ctx['y'] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx['y']
        return (grad * y * (1.0 - y),)


@register('tanh')
class Tanh(Primitive):
    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx['y'] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad * (1.0 - ctx['y'] ** 2),)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


@register('softmax')
class Softmax(Primitive):
    """Softmax over the last axis"""

    @staticmethod
    def forward(ctx, x):
        y = _softmax(x)
        ctx['y'] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx['y']
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def topk_mask(x: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index"""
    order = np.argsort(-x, axis=-1, kind='stable')[..., :k]
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


@register('topk_softmax')
class TopKSoftmax(Primitive):
    """Softmax renormalised over the k largest logits, zero elsewhere"""

    @staticmethod
    def forward(ctx, x, k=1):
        width = x.shape[-1]
        if not 1 <= k <= width:
            raise ShapeError(f"topk_softmax: k={k} outside [1, {width}] for shape {x.shape}")
        mask = topk_mask(x, k)
        masked = np.where(mask, x, -np.inf)
        shifted = np.where(mask, np.exp(masked - masked.max(axis=-1, keepdims=True)), 0.0)
        y = shifted / shifted.sum(axis=-1, keepdims=True)
        ctx['y'] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx['y']
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


@register('layer_norm')
class LayerNorm(Primitive):
    """Normalise the last axis, then apply a learnable gain and bias"""

    @staticmethod
    def forward(ctx, x, gain, bias, eps=LAYER_NORM_EPS):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ShapeError(
                f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match features of {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        xhat = (x - mean) * inv_std
        ctx.update(xhat=xhat, inv_std=inv_std, gain=gain)
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gain = ctx['xhat'], ctx['inv_std'], ctx['gain']
        width = xhat.shape[-1]
        dxhat = grad * gain
        dx = inv_std / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        batch_axes = tuple(range(grad.ndim - 1))
        return dx, (grad * xhat).sum(axis=batch_axes), grad.sum(axis=batch_axes)


@register('outer_product')
class OuterProduct(Primitive):
    """a bᵀ for vectors; for matrices the sum over rows of a_i b_iᵀ"""

    @staticmethod
    def forward(ctx, a, b):
        a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
        if a.ndim != b.ndim or a.ndim > 2 or a2.shape[0] != b2.shape[0]:
            raise ShapeError(f"outer_product: shapes {a.shape} and {b.shape} are incompatible")
        ctx.update(a=a2, b=b2, shapes=(a.shape, b.shape))
        return a2.T @ b2

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx['a'], ctx['b']
        shape_a, shape_b = ctx['shapes']
        return (b @ grad.T).reshape(shape_a), (a @ grad).reshape(shape_b)


@register('flatten')
class Flatten(Primitive):
    """Row-major flatten keeping the first batch_dims axes"""

    @staticmethod
    def forward(ctx, x, batch_dims=1):
        ctx['shape'] = x.shape
        return x.reshape(x.shape[:batch_dims] + (-1,))

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx['shape']),)


@register('reshape')
class Reshape(Primitive):
    @staticmethod
    def forward(ctx, x, shape=()):
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        ctx['shape'] = x.shape
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx['shape']),)


@register('transpose')
class Transpose(Primitive):
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
        return x.T

    @staticmethod
    def backward(ctx, grad):
        return (grad.T,)


@register('slice')
class Slice(Primitive):
    """x[start:stop] along one axis"""

    @staticmethod
    def forward(ctx, x, start=0, stop=None, axis=-1):
        axis = axis % x.ndim
        stop = x.shape[axis] if stop is None else stop
        if not 0 <= start < stop <= x.shape[axis]:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        ctx.update(shape=x.shape, index=tuple(index))
        return x[ctx['index']]

    @staticmethod
    def backward(ctx, grad):
        full = np.zeros(ctx['shape'])
        full[ctx['index']] = grad
        return (full,)


@register('reduce_sum')
class ReduceSum(Primitive):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.update(shape=x.shape, axis=axis, keepdims=keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        shape, axis = ctx['shape'], ctx['axis']
        if axis is not None and not ctx['keepdims']:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


@register('reduce_max')
class ReduceMax(Primitive):
    """Maximum along one axis; the adjoint flows to the first maximiser"""

    @staticmethod
    def forward(ctx, x, axis=-1):
        if x.shape[axis] == 0:
            raise ShapeError(f"reduce_max: empty axis {axis} in shape {x.shape}")
        index = np.expand_dims(np.argmax(x, axis=axis), axis)
        ctx.update(shape=x.shape, index=index, axis=axis)
        return np.take_along_axis(x, index, axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, grad):
        full = np.zeros(ctx['shape'])
        np.put_along_axis(full, ctx['index'], np.expand_dims(grad, ctx['axis']), axis=ctx['axis'])
        return (full,)


@register('l2_normalize')
class L2Normalize(Primitive):
    @staticmethod
    def forward(ctx, x, eps=NORMALIZE_EPS):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
        y = x / norm
        ctx.update(y=y, norm=norm)
        return y

    @staticmethod
    def backward(ctx, grad):
        y, norm = ctx['y'], ctx['norm']
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm,)


@register('bce_loss')
class BCELoss(Primitive):
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels"""

    @staticmethod
    def forward(ctx, logits, labels):
        if logits.shape != labels.shape:
            raise ShapeError(f"bce_loss: logits {logits.shape} vs labels {labels.shape}")
        losses = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
        ctx.update(logits=logits, labels=labels)
        return np.asarray(losses.mean())

    @staticmethod
    def backward(ctx, grad):
        logits, labels = ctx['logits'], ctx['labels']
        dlogits = grad * (expit(logits) - labels) / logits.size
        return dlogits, None


matmul = MatMul.apply
add = Add.apply
multiply = Multiply.apply
leaky_relu = LeakyRelu.apply
sigmoid = Sigmoid.apply
tanh = Tanh.apply
softmax = Softmax.apply
topk_softmax = TopKSoftmax.apply
layer_norm = LayerNorm.apply
outer_product = OuterProduct.apply
flatten = Flatten.apply
reshape = Reshape.apply
transpose = Transpose.apply
slice_axis = Slice.apply
reduce_sum = ReduceSum.apply
reduce_max = ReduceMax.apply
l2_normalize = L2Normalize.apply
bce_loss = BCELoss.apply


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Gradients:
    """Adjoints produced by one backward pass"""

    def __init__(self, adjoints: Dict[int, np.ndarray], tape: Tape):
        self._adjoints = adjoints
        self._tape = tape

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._adjoints.get(id(tensor))
        return np.zeros_like(tensor.value) if grad is None else grad

    def by_name(self) -> Dict[str, np.ndarray]:
        """Gradients of named trainable leaves (parameters)"""
        return {
            leaf.name: self[leaf]
            for leaf in self._tape.leaves
            if leaf.name is not None and leaf.requires_grad
        }


def backward(tape: Tape, loss: Optional[Tensor] = None, loss_adjoint: float = 1.0) -> Gradients:
    """Propagate adjoints from a scalar loss back through the tape"""
    if loss is None:
        if not tape.nodes:
            raise GradientError("backward on an empty tape")
        loss = tape.nodes[-1].output
    if loss.tape is not tape:
        raise GradientError("loss was not produced on this tape")
    if loss.value.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(loss_adjoint))}
    for node in reversed(tape.nodes):
        grad = adjoints.get(id(node.output))
        if grad is None or not node.output.requires_grad:
            continue
        input_grads = node.primitive.backward(node.ctx, grad)
        for tensor, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + input_grad
            else:
                adjoints[key] = input_grad
    return Gradients(adjoints, tape)


def evaluate(fn: Callable[[Tape], Tensor]) -> np.ndarray:
    """Run a graph-building function on a throwaway tape and return its value"""
    return fn(Tape()).value
