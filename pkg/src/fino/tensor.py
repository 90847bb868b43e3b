"""Dense tensors with taped reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  The tape is
rebuilt on every forward pass, so arbitrary Python control flow (two
encodes, three decodes per training step) needs no graph surgery.

Binary ops never broadcast: operands must have identical shapes.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
DIV_EPS = 1e-12

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
MAGIC = b"FNT1"


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording (inference, evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for dim, (sa, sb) in enumerate(zip(a.shape, b.shape)):
            if sa != sb:
                raise ValueError(f"{op}: shape mismatch at dim {dim}: {sa} vs {sb} ({a.shape} vs {b.shape})")
        raise ValueError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return data


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    small = np.abs(bd) < DIV_EPS
    if small.any():
        idx = tuple(int(i) for i in np.argwhere(small)[0])
        raise ZeroDivisionError(f"div: divisor magnitude below {DIV_EPS} at index {idx}")
    out = ad / bd
    return Tensor._make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.data), "exp")
    return Tensor._make(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar (the one broadcast the engine allows)."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


_UNARY = {"relu": relu, "exp": exp, "neg": neg, "abs": abs_, "tanh": tanh, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise {op_kind!r} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise {op_kind!r} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions ------------------------------------------------------------

def _nonempty(a: Tensor, op: str) -> None:
    if a.size == 0:
        raise ValueError(f"{op}: empty input")


def sum_(a) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "sum")
    shape, dtype = a.shape, a.dtype
    return Tensor._make(np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "mean")
    n, shape, dtype = a.size, a.shape, a.dtype
    return Tensor._make(np.asarray(a.data.mean(), dtype=dtype), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def l1_mean(a) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "l1_mean")
    n = a.size
    sign = np.sign(a.data)
    return Tensor._make(np.asarray(np.abs(a.data).mean(), dtype=a.dtype), (a,), lambda g: (sign * (g / n),))


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "frobenius_sq")
    ad = a.data
    return Tensor._make(np.asarray(np.sum(ad * ad), dtype=a.dtype), (a,), lambda g: (2.0 * g * ad,))


_REDUCE = {"sum": sum_, "mean": mean, "l1_mean": l1_mean, "frobenius_sq": frobenius_sq}


def reduce(op_kind: str, a) -> Tensor:
    try:
        fn = _REDUCE[op_kind]
    except KeyError:
        raise ValueError(f"unknown reduction {op_kind!r}") from None
    return fn(a)


# -- shape ops -------------------------------------------------------------

def _split(a: Tensor, at: int, axis: int, op: str) -> tuple[Tensor, Tensor]:
    total = a.shape[axis]
    if not 0 < at < total:
        raise ValueError(f"{op}: split point {at} outside (0, {total})")
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(0, at)
    hi[axis] = slice(at, None)
    lo, hi = tuple(lo), tuple(hi)

    def scatter(region):
        def backward(g):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[region] = g
            return (full,)
        return backward

    head = Tensor._make(np.ascontiguousarray(a.data[lo]), (a,), scatter(lo))
    tail = Tensor._make(np.ascontiguousarray(a.data[hi]), (a,), scatter(hi))
    return head, tail


def _concat(parts: Sequence[Tensor], axis: int, op: str) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError(f"{op}: nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ValueError(f"{op}: incompatible shapes {ref} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return [np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))]

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def channel_split(a, c_head: int) -> tuple[Tensor, Tensor]:
    """Channels [0, c_head) and [c_head, C) of an N×C×H×W tensor."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ValueError(f"channel_split expects N×C×H×W, got shape {a.shape}")
    return _split(a, c_head, 1, "channel_split")


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 1, "channel_concat")


def batch_split(a, sizes: Sequence[int]) -> list[Tensor]:
    """Cut along the batch axis into consecutive pieces of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[0]:
        raise ValueError(f"batch_split: sizes {list(sizes)} do not sum to batch {a.shape[0]}")
    out, rest = [], a
    for s in sizes[:-1]:
        head, rest = _split(rest, s, 0, "batch_split")
        out.append(head)
    out.append(rest)
    return out


def batch_concat(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 0, "batch_concat")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.shape}")
    return Tensor._make(a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def gather(a, index: np.ndarray) -> Tensor:
    """Pick ``a.flat[index]``; repeated indices sum their gradients on the way back."""
    a = as_tensor(a)
    shape = a.shape
    flat_index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros(int(np.prod(shape)), dtype=g.dtype)
        np.add.at(out, flat_index.reshape(-1), g.reshape(-1))
        return (out.reshape(shape),)

    return Tensor._make(a.data.reshape(-1)[flat_index], (a,), backward)


# -- convolution -----------------------------------------------------------

def conv2d(x, weight, bias, padding: int = 0) -> Tensor:
    """Same-size 2-D cross-correlation, N×C_in×H×W -> N×C_out×H×W."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N×C×H×W, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be C_out×C_in×k×k, got shape {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input channel dim 1 is {x.shape[1]}, weight expects C_in={c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}×{kw}")
    if padding != (kh - 1) // 2:
        raise ValueError(f"conv2d: padding must be {(kh - 1) // 2} for a {kh}×{kh} kernel, got {padding}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias dim 0 is {bias.shape}, expected ({c_out},)")

    n, _, h, w = x.shape
    # Work on the zero-padded image flattened row-major: every kernel tap is
    # then one contiguous slice.  Output rows carry 2*padding junk columns
    # that are dropped (forward) or zeroed (backward).  Columns are laid out
    # (C_in·k·k)×(N·H·row) so each product below is a single matmul.
    row = w + 2 * padding
    length = h * row
    cols = _im2col_flat(x.data, kh, padding)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, h, row)[..., :w].transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        gpad = np.zeros((c_out, n, h, row), dtype=g.dtype)
        gpad[..., :w] = g.transpose(1, 0, 2, 3)
        gpad = gpad.reshape(c_out, n * length)
        if weight.requires_grad:
            gw = (gpad @ cols.T).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if c_out <= c_in:
                # correlate the gradient with the flipped, transposed kernel
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
                gcols = _im2col_flat(g, kh, padding)
                gx = (wflip @ gcols).reshape(c_in, n, h, row)[..., :w].transpose(1, 0, 2, 3)
                gx = np.ascontiguousarray(gx)
            else:
                gx = _col2im_flat(wmat.T @ gpad, x.shape, kh, padding)
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward)


def _im2col_flat(a: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = a.shape
    row = w + 2 * pad
    hp = h + 2 * pad
    flat = np.zeros((c, n, hp * row + k - 1), dtype=a.dtype)
    flat[:, :, :hp * row].reshape(c, n, hp, row)[:, :, pad:pad + h, pad:pad + w] = a.transpose(1, 0, 2, 3)
    length = h * row
    cols = np.empty((c, k, k, n, length), dtype=a.dtype)
    for i in range(k):
        for j in range(k):
            off = i * row + j
            cols[:, i, j] = flat[:, :, off:off + length]
    return cols.reshape(c * k * k, n * length)


def _col2im_flat(cols: np.ndarray, shape, k: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    row = w + 2 * pad
    hp = h + 2 * pad
    length = h * row
    cols = cols.reshape(c, k, k, n, length)
    flat = np.zeros((c, n, hp * row + k - 1), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            off = i * row + j
            flat[:, :, off:off + length] += cols[:, i, j]
    img = flat[:, :, :hp * row].reshape(c, n, hp, row)[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(img.transpose(1, 0, 2, 3))


# -- raw tensor dump ("FNT1") ---------------------------------------------

def write_raw(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype} for raw dump")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_raw(f: BinaryIO) -> np.ndarray:
    start = f.tell() if f.seekable() else 0
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"raw tensor: bad magic {magic!r} at byte {start}")
    (rank,) = _unpack(f, "<I", start + 4)
    extents = _unpack(f, f"<{rank}I", start + 8)
    (code,) = _unpack(f, "<B", start + 8 + 4 * rank)
    if code not in _CODE_DTYPES:
        raise ValueError(f"raw tensor: unknown dtype code {code} at byte {start + 8 + 4 * rank}")
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError(
            f"raw tensor: truncated payload at byte {start + 9 + 4 * rank}: "
            f"expected {count * dtype.itemsize} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).astype(_CODE_DTYPES[code]).reshape(extents)


def _unpack(f: BinaryIO, fmt: str, offset: int) -> tuple:
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise ValueError(f"raw tensor: truncated header at byte {offset}")
    return struct.unpack(fmt, raw)


def save_raw(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_raw(f, array)


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_raw(f)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
