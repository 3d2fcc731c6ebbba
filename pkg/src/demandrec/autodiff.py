"""Dense float64 tensors with a taped reverse-mode gradient engine.

Values live in numpy arrays; every differentiable operation goes through a
:class:`Tape`, which records one backward closure per primitive.  Replaying
the records in reverse order is a reverse-topological sweep because eager
execution appends them in forward-topological order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``constant`` marks tensors (inputs, targets) that never receive
    gradient; the backward sweep skips accumulating into them.
    """

    __slots__ = ("data", "grad", "constant", "name")

    def __init__(self, data, name: str = "", constant: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.constant = constant
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or "tensor"
        return f"Tensor({label}, shape={self.data.shape})"


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, name=name, constant=True)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.constant:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _grad_buf(t: Tensor) -> np.ndarray | None:
    """Writable gradient buffer for in-place scatter accumulation."""
    if t.constant:
        return None
    if t.grad is None:
        t.grad = np.zeros(t.data.shape)
    return t.grad


class Tape:
    """Ordered record of executed primitives for one backward sweep."""

    __slots__ = ("_records", "_deferred_outer", "_deferred_scatter")

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        # batched gradient contributions, flushed at the end of backward()
        self._deferred_outer: dict[int, tuple[Tensor, list, list]] = {}
        self._deferred_scatter: dict[int, tuple[Tensor, list, list]] = {}

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, out: Tensor, back: Callable[[np.ndarray], None]) -> Tensor:
        self._records.append((out, back))
        return out

    def _emit_pair(self, out_a: Tensor, out_b: Tensor, back: Callable[[], None]) -> None:
        """One record with two outputs; fires if either received gradient."""
        self._records.append(((out_a, out_b), back))

    def defer_outer(
        self, param: Tensor, d: np.ndarray, v: np.ndarray, bias: Tensor | None = None
    ) -> None:
        """Queue an outer(d, v) gradient contribution for batched accumulation.

        When ``bias`` is given, it also accumulates the summed ``d`` vectors
        (the bias gradient of an affine layer) at flush time.
        """
        entry = self._deferred_outer.get(id(param))
        if entry is None:
            entry = (param, bias, [], [])
            self._deferred_outer[id(param)] = entry
        entry[2].append(d)
        entry[3].append(v)

    def defer_scatter(self, param: Tensor, ids: np.ndarray, rows: np.ndarray) -> None:
        """Queue a row-scatter gradient contribution for batched accumulation."""
        entry = self._deferred_scatter.get(id(param))
        if entry is None:
            entry = (param, [], [])
            self._deferred_scatter[id(param)] = entry
        entry[1].append(ids)
        entry[2].append(rows)

    def _flush_deferred(self) -> None:
        for param, bias, ds, vs in self._deferred_outer.values():
            d_mat = np.stack(ds)
            _accum(param, d_mat.T @ np.stack(vs))
            if bias is not None:
                _accum(bias, d_mat.sum(axis=0))
        self._deferred_outer.clear()
        for param, ids, rows in self._deferred_scatter.values():
            buf = _grad_buf(param)
            if buf is not None:
                np.add.at(buf, np.concatenate(ids), np.concatenate(rows))
        self._deferred_scatter.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into every reachable tensor's .grad."""
        if loss.data.shape != ():
            raise ShapeError("backward", f"loss must be scalar, got {loss.data.shape}")
        loss.grad = np.array(1.0)
        for out, back in reversed(self._records):
            if type(out) is tuple:
                if out[0].grad is None and out[1].grad is None:
                    continue
                back()
            else:
                if out.grad is None:
                    continue
                back(out.grad)
        self._flush_deferred()

    # ----- arithmetic -----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError("add", f"shapes {a.data.shape} and {b.data.shape} differ")
        out = Tensor(a.data + b.data)

        def back(g):
            _accum(a, g)
            _accum(b, g)

        return self._emit(out, back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError("sub", f"shapes {a.data.shape} and {b.data.shape} differ")
        out = Tensor(a.data - b.data)

        def back(g):
            _accum(a, g)
            _accum(b, -g)

        return self._emit(out, back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product of same-shape tensors."""
        if a.data.shape != b.data.shape:
            raise ShapeError("mul", f"shapes {a.data.shape} and {b.data.shape} differ")
        out = Tensor(a.data * b.data)

        def back(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return self._emit(out, back)

    def affine(self, a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
        """scale * a + shift with python-float coefficients."""
        out = Tensor(a.data * scale + shift)

        def back(g):
            _accum(a, g * scale)

        return self._emit(out, back)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """2-D @ 1-D -> 1-D, or 2-D @ 2-D -> 2-D."""
        if a.data.ndim != 2 or b.data.ndim not in (1, 2):
            raise ShapeError(
                "matmul", f"expected 2-D @ 1-D/2-D, got {a.data.shape} @ {b.data.shape}"
            )
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                "matmul", f"inner dimensions differ: {a.data.shape} @ {b.data.shape}"
            )
        out = Tensor(a.data @ b.data)

        if b.data.ndim == 1:

            def back(g):
                _accum(a, np.outer(g, b.data))
                _accum(b, a.data.T @ g)

        else:

            def back(g):
                _accum(a, g @ b.data.T)
                _accum(b, a.data.T @ g)

        return self._emit(out, back)

    def maximum(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise max; gradient routes to the larger operand (ties to a)."""
        if a.data.shape != b.data.shape:
            raise ShapeError("maximum", f"shapes {a.data.shape} and {b.data.shape} differ")
        mask = a.data >= b.data
        out = Tensor(np.where(mask, a.data, b.data))

        def back(g):
            _accum(a, g * mask)
            _accum(b, g * ~mask)

        return self._emit(out, back)

    # ----- nonlinearities -----

    def sigmoid(self, a: Tensor) -> Tensor:
        s = expit(a.data)
        out = Tensor(s)

        def back(g):
            _accum(a, g * s * (1.0 - s))

        return self._emit(out, back)

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.data)
        out = Tensor(t)

        def back(g):
            _accum(a, g * (1.0 - t * t))

        return self._emit(out, back)

    def softmax(self, a: Tensor) -> Tensor:
        """Softmax over a 1-D vector, max-shifted for overflow safety."""
        if a.data.ndim != 1:
            raise ShapeError("softmax", f"expected 1-D, got {a.data.shape}")
        e = np.exp(a.data - a.data.max())
        s = e / e.sum()
        out = Tensor(s)

        def back(g):
            _accum(a, s * (g - np.dot(g, s)))

        return self._emit(out, back)

    def softmax_cols(self, a: Tensor) -> Tensor:
        """Independent softmax down each column of a 2-D tensor."""
        if a.data.ndim != 2:
            raise ShapeError("softmax_cols", f"expected 2-D, got {a.data.shape}")
        e = np.exp(a.data - a.data.max(axis=0, keepdims=True))
        s = e / e.sum(axis=0, keepdims=True)
        out = Tensor(s)

        def back(g):
            _accum(a, s * (g - (g * s).sum(axis=0, keepdims=True)))

        return self._emit(out, back)

    def log(self, a: Tensor) -> Tensor:
        """Natural log; inputs must be positive (clip first in loss paths)."""
        if np.any(a.data <= 0.0):
            raise ShapeError("log", "non-positive input; clip before log")
        out = Tensor(np.log(a.data))

        def back(g):
            _accum(a, g / a.data)

        return self._emit(out, back)

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clamp into [lo, hi]; gradient passes only where unclipped."""
        mask = (a.data >= lo) & (a.data <= hi)
        out = Tensor(np.clip(a.data, lo, hi))

        def back(g):
            _accum(a, g * mask)

        return self._emit(out, back)

    # ----- shape manipulation -----

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise ShapeError("concat", "no operands")
        for p in parts:
            if p.data.ndim != 1:
                raise ShapeError("concat", f"expected 1-D parts, got {p.data.shape}")
        sizes = [p.data.shape[0] for p in parts]
        out = Tensor(np.concatenate([p.data for p in parts]))
        offsets = np.cumsum([0] + sizes)

        def back(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, g[lo:hi])

        return self._emit(out, back)

    def stack_cols(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack 1-D tensors of equal length as the columns of a matrix."""
        if not parts:
            raise ShapeError("stack_cols", "no operands")
        n = parts[0].data.shape[0]
        for p in parts:
            if p.data.shape != (n,):
                raise ShapeError("stack_cols", f"expected ({n},) parts, got {p.data.shape}")
        out = Tensor(np.stack([p.data for p in parts], axis=1))

        def back(g):
            for j, p in enumerate(parts):
                _accum(p, g[:, j])

        return self._emit(out, back)

    def slice1d(self, a: Tensor, start: int, stop: int) -> Tensor:
        if a.data.ndim != 1:
            raise ShapeError("slice1d", f"expected 1-D, got {a.data.shape}")
        if not (0 <= start <= stop <= a.data.shape[0]):
            raise ShapeError("slice1d", f"range [{start}:{stop}] outside {a.data.shape}")
        out = Tensor(a.data[start:stop].copy())

        def back(g):
            buf = _grad_buf(a)
            if buf is not None:
                buf[start:stop] += g

        return self._emit(out, back)

    def pad1d(self, a: Tensor, length: int) -> Tensor:
        """Zero-pad a 1-D tensor at the tail up to ``length``."""
        if a.data.ndim != 1:
            raise ShapeError("pad1d", f"expected 1-D, got {a.data.shape}")
        n = a.data.shape[0]
        if length < n:
            raise ShapeError("pad1d", f"target length {length} below input length {n}")
        padded = np.zeros(length)
        padded[:n] = a.data
        out = Tensor(padded)

        def back(g):
            _accum(a, g[:n])

        return self._emit(out, back)

    def rows(self, m: Tensor, ids: np.ndarray) -> Tensor:
        """Gather rows of a 2-D tensor; backward scatter-adds into them."""
        if m.data.ndim != 2:
            raise ShapeError("rows", f"expected 2-D, got {m.data.shape}")
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= m.data.shape[0]):
            raise ShapeError("rows", f"row ids outside [0, {m.data.shape[0]})")
        out = Tensor(m.data[ids])

        def back(g):
            buf = _grad_buf(m)
            if buf is not None:
                np.add.at(buf, ids, g)

        return self._emit(out, back)

    def row(self, m: Tensor, i: int) -> Tensor:
        if m.data.ndim != 2:
            raise ShapeError("row", f"expected 2-D, got {m.data.shape}")
        if not 0 <= i < m.data.shape[0]:
            raise ShapeError("row", f"row {i} outside [0, {m.data.shape[0]})")
        out = Tensor(m.data[i].copy())

        def back(g):
            buf = _grad_buf(m)
            if buf is not None:
                buf[i] += g

        return self._emit(out, back)

    def col(self, m: Tensor, j: int) -> Tensor:
        if m.data.ndim != 2:
            raise ShapeError("col", f"expected 2-D, got {m.data.shape}")
        if not 0 <= j < m.data.shape[1]:
            raise ShapeError("col", f"column {j} outside [0, {m.data.shape[1]})")
        out = Tensor(m.data[:, j].copy())

        def back(g):
            buf = _grad_buf(m)
            if buf is not None:
                buf[:, j] += g

        return self._emit(out, back)

    def slice_rows(self, m: Tensor, start: int, stop: int) -> Tensor:
        if m.data.ndim != 2:
            raise ShapeError("slice_rows", f"expected 2-D, got {m.data.shape}")
        if not (0 <= start <= stop <= m.data.shape[0]):
            raise ShapeError("slice_rows", f"range [{start}:{stop}] outside {m.data.shape}")
        out = Tensor(m.data[start:stop].copy())

        def back(g):
            buf = _grad_buf(m)
            if buf is not None:
                buf[start:stop] += g

        return self._emit(out, back)

    def flatten(self, a: Tensor) -> Tensor:
        shape = a.data.shape
        out = Tensor(a.data.reshape(-1))

        def back(g):
            _accum(a, g.reshape(shape))

        return self._emit(out, back)

    def mul_colvec(self, m: Tensor, v: Tensor) -> Tensor:
        """Scale every column of a 2-D tensor elementwise by a vector."""
        if m.data.ndim != 2 or v.data.shape != (m.data.shape[0],):
            raise ShapeError(
                "mul_colvec", f"expected (n,k) and (n,), got {m.data.shape} and {v.data.shape}"
            )
        out = Tensor(m.data * v.data[:, None])

        def back(g):
            _accum(m, g * v.data[:, None])
            _accum(v, (g * m.data).sum(axis=1))

        return self._emit(out, back)

    # ----- reductions -----

    def sum(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.sum())

        def back(g):
            _accum(a, np.full(a.data.shape, float(g)))

        return self._emit(out, back)


# ----- gradient checking -----


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    eps: float
    coords_checked: int
    worst_param: str = ""
    worst_index: int = -1
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    failure: str | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = (
            f"grad_check {status}: max_rel_error={self.max_rel_error:.3e} "
            f"(tol={self.tol:.1e}, eps={self.eps:.1e}, coords={self.coords_checked})"
        )
        if self.worst_param:
            msg += (
                f" worst={self.worst_param}[{self.worst_index}]"
                f" analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e}"
            )
        if self.failure:
            msg += f" failure={self.failure}"
        return msg


def grad_check(
    f: Callable[[Tape], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar graph to central differences.

    ``f`` rebuilds the graph on a fresh tape each call, closing over ``params``;
    the finite-difference side perturbs the parameter arrays in place.  Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1), so dead coordinates are
    judged on absolute error instead of a 0/0 ratio.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    tape = Tape()
    for p in params:
        p.zero_grad()
    loss = f(tape)
    if loss.data.shape != ():
        raise ShapeError("grad_check", f"f must return a scalar, got {loss.data.shape}")
    tape.backward(loss)
    analytic = [
        np.zeros(p.data.shape) if p.grad is None else p.grad.copy() for p in params
    ]
    for p in params:
        p.zero_grad()

    def eval_loss() -> float:
        return float(f(Tape()).data)

    report = GradCheckReport(
        passed=True, max_rel_error=0.0, tol=tol, eps=eps, coords_checked=0
    )
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        a_flat = analytic[pi].reshape(-1)
        pname = p.name or f"param{pi}"
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = eval_loss()
            flat[idx] = orig - eps
            f_minus = eval_loss()
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.passed = False
                report.failure = f"non-finite loss at {pname}[{idx}]"
                return report
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            report.coords_checked += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = pname
                report.worst_index = idx
                report.worst_analytic = float(a)
                report.worst_numeric = float(numeric)
    report.passed = report.max_rel_error <= tol
    return report


# ----- checkpoint serialization -----
#
# Tensor bank layout (version 1, little endian):
#   magic  b"DRTB"
#   u32    version
#   u32    tensor count
#   per tensor:
#     u16      name length, then utf-8 name bytes
#     u8       ndim
#     u64*ndim dimensions
#     f64*prod row-major values

_BANK_MAGIC = b"DRTB"
_BANK_VERSION = 1


def save_tensor_bank(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<II", _BANK_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensor_bank(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BANK_MAGIC:
            raise ValueError(f"{path}: not a tensor bank (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _BANK_VERSION:
            raise ValueError(f"{path}: unsupported tensor bank version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.copy()
        return out
