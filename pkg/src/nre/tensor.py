"""Minimal dense tensor with reverse-mode automatic differentiation.

Values are float64 throughout. Every op builds forward results eagerly and
records a backward closure; backward() walks the tape (a topological ordering
of the graph under the loss) once, accumulating gradients into every ancestor
that requires them.
"""

import threading

import numpy as np

# floor value contributed by an empty pooling segment; feeds tanh downstream
# so it saturates to ~-1 instead of propagating -inf
POOL_FLOOR = -100.0

# tape recording is toggled per thread so concurrent inference requests
# cannot disable gradients for each other
_state = threading.local()


def _grads_on():
    return getattr(_state, "grad_enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an op's calling contract is violated (e.g. non-scalar loss)."""


class DegenerateInputError(ValueError):
    """Raised on inputs the op cannot meaningfully reduce (e.g. all-padding pool)."""


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        self._prev = _grads_on()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self._backward = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Topological ordering of the graph reaching a root tensor.

    Parents always appear before the ops that consume them; reverse iteration
    therefore visits each node exactly once with its output gradient complete.
    """

    def __init__(self, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order
        for i, node in enumerate(order):
            node.node_id = i


def _result(data, parents, backward_fn):
    """Build an op result, recording parents only while grads are enabled."""
    needs = _grads_on() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if grad is None:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(loss):
    """Populate grad on every requires_grad ancestor of a scalar loss.

    Repeated calls without zeroing accumulate.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = Tape(loss)
    # gradients flow through a per-call map so repeated backward() calls
    # accumulate exactly one contribution per call into .grad
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent.parents):
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    """Elementwise add; a 1-D b is broadcast over the rows of a (bias add)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        if not (b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]):
            raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        gb = g if b.data.shape == g.shape else g.reshape(-1, b.data.shape[0]).sum(axis=0)
        return g, gb

    return _result(a.data + b.data, (a, b), bw)


def mul(a, b):
    """Elementwise (Hadamard) product; 1-D b broadcasts over rows of a."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        if not (b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]):
            raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        if b.data.shape != g.shape:
            gb = gb.reshape(-1, b.data.shape[0]).sum(axis=0)
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw)


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.data.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack_rows(tensors):
    """Stack 1-D tensors of equal length into a matrix."""
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=0), tensors, bw)


def slice_rows(x, start, stop):
    x = as_tensor(x)
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice_rows [{start}:{stop}] out of range for {n} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), bw)


def slice_cols(x, start, stop):
    x = as_tensor(x)
    n = x.data.shape[-1]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice_cols [{start}:{stop}] out of range for {n} cols")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _result(x.data[..., start:stop].copy(), (x,), bw)


def embedding_gather(table, ids):
    """Row lookup; backward scatter-adds so repeated ids accumulate."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_gather: id out of range for table with {table.data.shape[0]} rows"
        )

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x):
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    return _result(out_data, (x,), lambda g: (g * (1.0 - out_data**2),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x, p, rng, train=True):
    """Inverted dropout: train-time Bernoulli mask scaled by 1/(1-p); identity at eval."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x):
    x = as_tensor(x)
    return _result(x.data.sum(), (x,), lambda g: (np.full_like(x.data, float(g)),))


def l2_norm(x):
    x = as_tensor(x)
    norm = float(np.sqrt((x.data**2).sum()))

    def bw(g):
        return (float(g) * x.data / max(norm, 1e-12),)

    return _result(np.float64(norm), (x,), bw)


def softmax_rows(x):
    """Row-wise softmax, overflow-safe via max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner),)

    return _result(probs, (x,), bw)


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over rows."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m, n = logits.data.shape
    if labels.shape != (m,):
        raise ShapeError(f"cross_entropy: {m} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"cross_entropy: label out of range for {n} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float((logsumexp - shifted[np.arange(m), labels]).mean())
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def bw(g):
        grad = probs.copy()
        grad[np.arange(m), labels] -= 1.0
        return (float(g) * grad / m,)

    return _result(np.float64(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# pooling


def max_pool_rows(x):
    """Column-wise max over rows; gradient routed to argmax rows only."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise ShapeError(f"max_pool_rows expects a non-empty matrix, got {x.data.shape}")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.data.shape[1])

    def bw(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g
        return (full,)

    return _result(x.data[arg, cols], (x,), bw)


def piecewise_max_pool(h, segments):
    """Per-segment column max, concatenated in segment order 1,2,3.

    Segment id 0 marks padding and never contributes. An empty segment
    contributes a constant POOL_FLOOR vector (no gradient).
    """
    h = as_tensor(h)
    segments = np.asarray(segments, dtype=np.int64)
    if h.data.ndim != 2 or segments.shape != (h.data.shape[0],):
        raise ShapeError(
            f"piecewise_max_pool: features {h.data.shape} vs segments {segments.shape}"
        )
    if not np.any((segments >= 1) & (segments <= 3)):
        raise DegenerateInputError("piecewise_max_pool: all positions are padding")
    d = h.data.shape[1]
    cols = np.arange(d)
    pieces = []
    routes = []  # (segment row indices, argmax within segment) or None
    for s in (1, 2, 3):
        rows = np.flatnonzero(segments == s)
        if rows.size == 0:
            pieces.append(np.full(d, POOL_FLOOR))
            routes.append(None)
        else:
            sub = h.data[rows]
            arg = sub.argmax(axis=0)
            pieces.append(sub[arg, cols])
            routes.append(rows[arg])

    def bw(g):
        full = np.zeros_like(h.data)
        for k, route in enumerate(routes):
            if route is not None:
                full[route, cols] += g[k * d : (k + 1) * d]
        return (full,)

    return _result(np.concatenate(pieces), (h,), bw)


# ---------------------------------------------------------------------------
# windowed matmul (1-D convolution) and layer norm


def windowed_matmul(x, weight, indices):
    """out[i] = concat(x[indices[i]]) @ weight; the unfolded-matmul kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    indices = np.asarray(indices, dtype=np.int64)
    n, w = indices.shape
    f = x.data.shape[1]
    if weight.data.shape[0] != w * f:
        raise ShapeError(
            f"windowed_matmul: weight rows {weight.data.shape[0]} != window*features {w * f}"
        )
    unfolded = x.data[indices].reshape(n, w * f)

    def bw(g):
        gw = unfolded.T @ g
        gunf = (g @ weight.data.T).reshape(n, w, f)
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, gunf)
        return gx, gw

    return _result(unfolded @ weight.data, (x, weight), bw)


def conv1d_window(x, weight, window):
    """Valid window-w convolution over rows of x, realized as an unfolded matmul.

    x: [L, F], weight: [window*F, H] -> [L-window+1, H]. Callers wanting
    same-length output pad x with PAD-token embedding rows first.
    """
    x = as_tensor(x)
    length = x.data.shape[0]
    if length < window:
        raise ShapeError(f"conv1d_window: {length} rows < window {window}")
    base = np.arange(length - window + 1)
    indices = base[:, None] + np.arange(window)[None, :]
    return windowed_matmul(x, weight, indices)


def layer_norm(x, gain, offset, eps=1e-5):
    """Row-wise layer normalization with learned gain/offset."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def bw(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        goffset = g.reshape(-1, d).sum(axis=0)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, goffset

    return _result(xhat * gain.data + offset.data, (x, gain, offset), bw)


def neg_sqdist(queries, centers):
    """out[i, j] = -||queries[i] - centers[j]||^2 (prototype logits)."""
    q, c = as_tensor(queries), as_tensor(centers)
    if q.data.shape[1] != c.data.shape[1]:
        raise ShapeError(f"neg_sqdist: dim mismatch {q.data.shape} vs {c.data.shape}")
    qn = (q.data**2).sum(axis=1, keepdims=True)
    cn = (c.data**2).sum(axis=1)
    out = -(qn + cn[None, :] - 2.0 * q.data @ c.data.T)

    def bw(g):
        gq = -2.0 * (g.sum(axis=1, keepdims=True) * q.data - g @ c.data)
        gc = -2.0 * (g.sum(axis=0)[:, None] * c.data - g.T @ q.data)
        return gq, gc

    return _result(out, (q, c), bw)
