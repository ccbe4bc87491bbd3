"""
Reverse-Mode Differentiation Engine

A small tape-free autodiff over numpy arrays, providing exactly the
differentiable operators AETomo-Net needs: complex matrix products, complex
soft-thresholding, 2D convolutions, pooling, transposed convolutions and
the loss reductions.

Gradient convention: for a real scalar loss L, a real tensor x stores
dL/dx and a complex tensor z stores the Wirtinger derivative dL/dconj(z)
= (dL/dRe(z) + i·dL/dIm(z)) / 2. Steepest descent on a complex tensor is
therefore `z -= 2 * lr * z.grad`; see `descent_direction`. Spatial tensors
are laid out (channels, height, width) with height = elevation and
width = azimuth.
"""

import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GraphError, InvalidParameterError, ShapeError

_recording = threading.local()


def is_recording() -> bool:
    return getattr(_recording, 'enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_recording()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


class Tensor:
    """
    Array node of the differentiation graph.

    Leaves created with requires_grad=True collect gradients in `.grad`;
    results of operators on such leaves record their parents and a backward
    rule until `backward` consumes the graph.
    """

    def __init__(self, data, requires_grad: bool = False):
        array = np.asarray(data)
        if np.iscomplexobj(array):
            array = array.astype(np.complex128, copy=False)
        else:
            array = array.astype(np.float64, copy=False)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ''
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = f", op={self._op}" if self._op else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"


def parameter(data) -> Tensor:
    """Trainable leaf tensor (owns a private copy of `data`)."""
    return Tensor(np.array(data, copy=True), requires_grad=True)


def descent_direction(tensor: Tensor) -> Optional[np.ndarray]:
    """dL/dx for real tensors, dL/dRe + i·dL/dIm (twice the stored grad) for complex ones."""
    if tensor.grad is None:
        return None
    return 2.0 * tensor.grad if tensor.is_complex else tensor.grad


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs_grad = is_recording() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if not tensor.requires_grad:
        return
    if not tensor.is_complex and np.iscomplexobj(grad):
        # real leaf seen as z with Im z = 0: dL/dx = 2·Re(dL/dconj z)
        grad = 2.0 * grad.real
    if grad.shape != tensor.shape:
        raise ShapeError(f"gradient shape {grad.shape} != tensor shape {tensor.shape}")
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad += grad


class Graph:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, output: Tensor):
        if output._released:
            raise GraphError("graph already consumed by backward; re-run the forward pass")
        self.output = output
        self.nodes = self._topological_order(output)

    @staticmethod
    def _topological_order(output: Tensor) -> List[Tensor]:
        order, visited = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if not node._parents and node.requires_grad]

    def backward(self) -> List[Tensor]:
        """
        Propagate d(output)/d(node) to every node in reverse topological order,
        then release the graph.

        Returns:
            Leaf tensors that received gradients
        """
        output = self.output
        if output._released:
            raise GraphError("graph already consumed by backward; re-run the forward pass")
        if output.data.size != 1 or output.is_complex:
            raise GraphError("backward needs a real scalar output")
        if not output.requires_grad:
            raise GraphError("output does not depend on any tensor requiring gradients")

        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        leaves = self.leaves()
        for node in self.nodes:
            if node._parents:
                node._backward = None
                node._parents = ()
                node._released = True
        return leaves


def backward(loss: Tensor) -> List[Tensor]:
    """Reverse-mode accumulation from a real scalar loss; consumes the graph."""
    return Graph(loss).backward()


# ---------------------------------------------------------------------------
# Elementwise and algebraic operators
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def _backward(grad):
        _accumulate(a, grad)
        _accumulate(b, grad)

    return _result(a.data + b.data, (a, b), 'add', _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def _backward(grad):
        _accumulate(a, factor * grad)

    return _result(factor * a.data, (a,), 'scale', _backward)


def linear_complex(W: Tensor, x: Tensor) -> Tensor:
    """
    Matrix product W·x for W (P x Q) and x (Q) or (Q x A).

    Columns of a 2D x are independent signals sharing W.
    """
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[0] != W.shape[1]:
        raise ShapeError(f"linear_complex: cannot multiply {W.shape} by {x.shape}")

    def _backward(grad):
        if x.data.ndim == 1:
            _accumulate(W, np.outer(grad, x.data.conj()))
        else:
            _accumulate(W, grad @ x.data.conj().T)
        _accumulate(x, W.data.conj().T @ grad)

    return _result(W.data @ x.data, (W, x), 'linear_complex', _backward)


def soft_threshold(z: Tensor, theta: Tensor) -> Tensor:
    """
    Phase-preserving shrinkage z·max(|z| - theta, 0)/|z| with a learnable
    scalar threshold.
    """
    if theta.data.size != 1 or theta.is_complex:
        raise ShapeError(f"soft_threshold: theta must be a real scalar, got {theta.shape}")
    threshold = float(theta.data.reshape(()))
    if threshold < 0:
        raise InvalidParameterError(f"soft_threshold: threshold must be >= 0, got {threshold}")

    magnitude = np.abs(z.data)
    active = magnitude > threshold
    safe_magnitude = np.where(active, magnitude, 1.0)
    unit = np.where(active, z.data / safe_magnitude, 0.0)
    out = unit * (magnitude - threshold) * active

    def _backward(grad):
        radial = np.real(np.conj(grad) * unit)
        shrink = np.where(active, threshold / safe_magnitude, 0.0)
        _accumulate(z, np.where(active, grad - shrink * (grad - radial * unit), 0.0))
        _accumulate(theta, np.full(theta.shape, -2.0 * radial[active].sum()))

    return _result(out, (z, theta), 'soft_threshold', _backward)


def relu(x: Tensor) -> Tensor:
    if x.is_complex:
        raise ShapeError("relu expects a real tensor")
    mask = x.data > 0

    def _backward(grad):
        _accumulate(x, grad * mask)

    return _result(x.data * mask, (x,), 'relu', _backward)


def complex_to_channels(z: Tensor) -> Tensor:
    """(H x W) complex -> (2 x H x W) real; channel 0 real part, 1 imaginary."""
    if z.data.ndim != 2:
        raise ShapeError(f"complex_to_channels expects H x W, got {z.shape}")

    def _backward(grad):
        _accumulate(z, 0.5 * (grad[0] + 1j * grad[1]))

    return _result(np.stack([z.data.real, z.data.imag]), (z,), 'complex_to_channels', _backward)


def channels_to_complex(x: Tensor) -> Tensor:
    """(2 x H x W) real -> (H x W) complex."""
    if x.data.ndim != 3 or x.shape[0] != 2:
        raise ShapeError(f"channels_to_complex expects 2 x H x W, got {x.shape}")

    def _backward(grad):
        _accumulate(x, 2.0 * np.stack([grad.real, grad.imag]))

    return _result(x.data[0] + 1j * x.data[1], (x,), 'channels_to_complex', _backward)


# ---------------------------------------------------------------------------
# Spatial operators
# ---------------------------------------------------------------------------

def _windows(array: np.ndarray, kernel_size: int) -> np.ndarray:
    """(C x H x W) -> (C x H x W x k x k) windows over the zero-padded input."""
    pad = kernel_size // 2
    padded = np.pad(array, ((0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(padded, (kernel_size, kernel_size), axis=(1, 2))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """
    Stride-1 cross-correlation with "same" zero padding.

    Shapes: x (C_in, H, W), kernels (C_out, C_in, k, k) with odd k,
    bias (C_out) -> (C_out, H, W).
    """
    if x.is_complex or kernels.is_complex or bias.is_complex:
        raise ShapeError("conv2d expects real tensors")
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels.shape}")
    c_out, c_in, k_h, k_w = kernels.shape
    if k_h != k_w or k_h % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k_h}x{k_w}")
    if x.shape[0] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    # zero padding keeps inputs smaller than the kernel (deep levels of small slices) valid

    windows = _windows(x.data, k_h)
    out = np.tensordot(kernels.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    out += bias.data[:, None, None]

    def _backward(grad):
        _accumulate(bias, grad.sum(axis=(1, 2)))
        _accumulate(kernels, np.tensordot(grad, windows, axes=([1, 2], [1, 2])))
        flipped = kernels.data[:, :, ::-1, ::-1]
        _accumulate(x, np.tensordot(flipped, _windows(grad, k_h), axes=([0, 2, 3], [0, 3, 4])))

    return _result(out, (x, kernels, bias), 'conv2d', _backward)


def maxpool2d(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """
    2x2 max pooling with stride 2.

    Returns:
        (pooled tensor, argmax indices in row-major window order); ties go
        to the first index
    """
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects C x H x W, got {x.shape}")
    channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"maxpool2d needs even height and width, got {height} x {width}")

    windows = (x.data.reshape(channels, height // 2, 2, width // 2, 2)
               .transpose(0, 1, 3, 2, 4)
               .reshape(channels, height // 2, width // 2, 4))
    indices = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]

    def _backward(grad):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, indices[..., None], grad[..., None], axis=-1)
        _accumulate(x, routed.reshape(channels, height // 2, width // 2, 2, 2)
                    .transpose(0, 1, 3, 2, 4)
                    .reshape(channels, height, width))

    return _result(out, (x,), 'maxpool2d', _backward), indices


def strided_conv2d(y: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """
    Stride-2, 2x2 cross-correlation (C_out x 2H x 2W) -> (C_in x H x W).

    The adjoint of conv_transpose2d for the same kernels (C_in, C_out, 2, 2).
    """
    c_out, height2, width2 = y.shape
    blocks = y.reshape(c_out, height2 // 2, 2, width2 // 2, 2)
    return np.tensordot(kernels, blocks, axes=([1, 2, 3], [0, 2, 4]))


def conv_transpose2d(x: Tensor, kernels: Tensor) -> Tensor:
    """
    Stride-2, 2x2 transposed convolution doubling both spatial dimensions.

    Shapes: x (C_in, H, W), kernels (C_in, C_out, 2, 2) -> (C_out, 2H, 2W).
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4 or kernels.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d: bad shapes {x.shape}, {kernels.shape}")
    if x.shape[0] != kernels.shape[0]:
        raise ShapeError(f"conv_transpose2d: {x.shape[0]} input channels, kernels expect {kernels.shape[0]}")
    c_out = kernels.shape[1]
    _, height, width = x.shape

    expanded = np.tensordot(kernels.data, x.data, axes=([0], [0]))  # (C_out, 2, 2, H, W)
    out = expanded.transpose(0, 3, 1, 4, 2).reshape(c_out, 2 * height, 2 * width)

    def _backward(grad):
        blocks = grad.reshape(c_out, height, 2, width, 2)
        _accumulate(x, strided_conv2d(grad, kernels.data))
        _accumulate(kernels, np.tensordot(x.data, blocks, axes=([1, 2], [1, 3])))

    return _result(out, (x, kernels), 'conv_transpose2d', _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial shapes differ {a.shape} vs {b.shape}")
    split = a.shape[0]

    def _backward(grad):
        _accumulate(a, grad[:split])
        _accumulate(b, grad[split:])

    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), 'concat_channels', _backward)


def _center_offsets(small: Tuple[int, int], large: Tuple[int, int]) -> Tuple[slice, slice]:
    return tuple(slice((l - s) // 2, (l - s) // 2 + s) for s, l in zip(small, large))


def pad_crop(x: Tensor, target: Tuple[int, int], mode: str = 'zero-pad') -> Tensor:
    """
    Resize the last two axes to `target` by centered zero padding or
    centered cropping; crop undoes pad exactly.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"pad_crop needs at least 2 dims, got {x.shape}")
    spatial = x.shape[-2:]
    target = tuple(int(t) for t in target)
    lead = (slice(None),) * (x.data.ndim - 2)

    if mode == 'zero-pad':
        if any(t < s for t, s in zip(target, spatial)):
            raise ShapeError(f"pad_crop: cannot pad {spatial} down to {target}")
        window = lead + _center_offsets(spatial, target)
        out = np.zeros(x.shape[:-2] + target, dtype=x.dtype)
        out[window] = x.data

        def _backward(grad):
            _accumulate(x, grad[window])
    elif mode == 'center-crop':
        if any(t > s for t, s in zip(target, spatial)):
            raise ShapeError(f"pad_crop: cannot crop {spatial} up to {target}")
        window = lead + _center_offsets(target, spatial)
        out = x.data[window].copy()

        def _backward(grad):
            padded = np.zeros(x.shape, dtype=grad.dtype)
            padded[window] = grad
            _accumulate(x, padded)
    else:
        raise InvalidParameterError(f"pad_crop: unknown mode {mode!r}")

    return _result(out, (x,), f'pad_crop[{mode}]', _backward)


# ---------------------------------------------------------------------------
# Loss reductions
# ---------------------------------------------------------------------------

def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared magnitudes sum |a - b|^2 (no averaging)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    difference = a.data - b.data
    # d|d|^2/dconj(d) = d; d(d^2)/dd = 2d
    factor = 1.0 if np.iscomplexobj(difference) else 2.0

    def _backward(grad):
        _accumulate(a, factor * grad * difference)
        _accumulate(b, -factor * grad * difference)

    value = np.vdot(difference, difference).real if a.is_complex or b.is_complex else np.dot(
        difference.ravel(), difference.ravel())
    return _result(np.asarray(value, dtype=np.float64), (a, b), 'mse_loss', _backward)


def l1_loss(a: Tensor) -> Tensor:
    """Sum of magnitudes sum |a|; subgradient 0 at 0."""
    magnitude = np.abs(a.data)
    direction = np.where(magnitude > 0, a.data / np.where(magnitude > 0, magnitude, 1.0), 0.0)
    if a.is_complex:
        direction = 0.5 * direction

    def _backward(grad):
        _accumulate(a, grad * direction)

    return _result(np.asarray(magnitude.sum(), dtype=np.float64), (a,), 'l1_loss', _backward)
