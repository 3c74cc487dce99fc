"""
Pseudo-invertible network: trainable lift A followed by affine coupling layers.

    z = phi(A x)            x = A^+ phi^{-1}(z)

All parameters live in one flat float64 vector. A layout table slices it into
named blocks, so the same forward code runs on numpy arrays, on duals and on
tape variables.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .errors import ErrorType, LatentSimError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSIM"
CHECKPOINT_VERSION = 1
# magic, version, n, m, layer count, hidden width, depth, clamp, parameter count
_HEADER = struct.Struct("<4sIIIIIIdQ")

DEFAULT_CLAMP = 5.0
PIVOT_FLOOR = 1e-12
SINGULAR_VALUE_FLOOR = 1e-8


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Named blocks of the flat parameter vector, in declaration order."""

    def __init__(self):
        self.blocks: List[ParamBlock] = []
        self.size = 0

    def add(self, name: str, shape: Tuple[int, ...]) -> ParamBlock:
        block = ParamBlock(name, tuple(shape), self.size)
        self.blocks.append(block)
        self.size += block.size
        return block

    def __getitem__(self, name: str) -> ParamBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def views(self, theta) -> Dict[str, Any]:
        """Slice theta into named parameter arrays (views for numpy input)."""
        out = {}
        for block in self.blocks:
            piece = theta[block.offset:block.offset + block.size]
            out[block.name] = piece.reshape(block.shape)
        return out


class LiftMatrix:
    """Tall lift A (m x n) with a cached Moore-Penrose pseudo-inverse."""

    def __init__(self, A: np.ndarray):
        A = np.asarray(A, dtype=np.float64)
        m, n = A.shape
        if m <= n:
            raise LatentSimError(
                message=f"Lift must be strictly tall, got {m}x{n}",
                error_type=ErrorType.CONFIGURATION,
                context={'m': m, 'n': n},
            )
        self._A = A
        self._pinv: Optional[np.ndarray] = None
        self.stale = True

    @property
    def A(self) -> np.ndarray:
        return self._A

    @property
    def shape(self) -> Tuple[int, int]:
        return self._A.shape

    def mark_stale(self) -> None:
        self.stale = True

    @property
    def pinv(self) -> np.ndarray:
        if self.stale or self._pinv is None:
            raise LatentSimError(
                message="Pseudo-inverse used after a parameter update without refresh",
                error_type=ErrorType.RANK_DEFICIENT,
            )
        return self._pinv

    def refresh(self) -> None:
        refresh_pseudo_inverse(self)


def refresh_pseudo_inverse(lift: LiftMatrix) -> None:
    """Recompute A^+ = (A^T A)^{-1} A^T through a Cholesky factor of A^T A."""
    A = lift.A
    gram = A.T @ A
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise LatentSimError(
            message="Lift matrix is rank deficient",
            error_type=ErrorType.RANK_DEFICIENT,
            context={'shape': A.shape},
        ) from exc

    pivot = float(np.min(np.diag(L))) ** 2
    if pivot < PIVOT_FLOOR:
        raise LatentSimError(
            message="Lift matrix is rank deficient",
            error_type=ErrorType.RANK_DEFICIENT,
            context={'shape': A.shape, 'min_pivot': pivot},
        )

    # L L^T X = A^T
    lift._pinv = np.linalg.solve(L.T, np.linalg.solve(L, A.T))
    lift.stale = False

    smallest = float(np.linalg.svd(A, compute_uv=False)[-1])
    if smallest < SINGULAR_VALUE_FLOOR:
        raise LatentSimError(
            message="Lift matrix lost full column rank",
            error_type=ErrorType.RANK_DEFICIENT,
            context={'smallest_singular_value': smallest},
        )
    logger.debug("Refreshed pseudo-inverse, smallest singular value %.3e", smallest)


def pseudo_inverse_expr(A):
    """(A^T A)^{-1} A^T written in differentiable primitives."""
    At = ad.transpose(A)
    return ad.solve(ad.matmul(At, A), At)


def clamp_scale(s, bound: float):
    """Smooth clamp c*tanh(s/c), keeps |scale| <= c."""
    return ad.mul(bound, ad.tanh(ad.mul(1.0 / bound, s)))


class CouplingLayer:
    """Affine coupling layer on a fixed first-half / second-half partition.

    z_b' = z_b * exp(clamp(s(z_a))) + t(z_a), z_a passes through unchanged.
    """

    def __init__(self, index: int, m: int, hidden_width: int, depth: int,
                 clamp: float, layout: ParamLayout):
        self.index = index
        self.clamp = clamp
        self.depth = depth
        half = (m + 1) // 2
        # odd m keeps the extra coordinate in z_a
        if index % 2 == 0:
            self.slice_a, self.slice_b = slice(0, half), slice(half, m)
            self.a_first = True
        else:
            self.slice_a, self.slice_b = slice(m - half, m), slice(0, m - half)
            self.a_first = False
        self.size_a = half
        self.size_b = m - half

        self.names: Dict[str, List[Tuple[str, str]]] = {}
        for net in ("s", "t"):
            names = []
            fan_in = self.size_a
            for j in range(depth):
                w = layout.add(f"layer{index}.{net}.W{j}", (fan_in, hidden_width)).name
                b = layout.add(f"layer{index}.{net}.b{j}", (hidden_width,)).name
                names.append((w, b))
                fan_in = hidden_width
            w = layout.add(f"layer{index}.{net}.Wout", (fan_in, self.size_b)).name
            b = layout.add(f"layer{index}.{net}.bout", (self.size_b,)).name
            names.append((w, b))
            self.names[net] = names

    def _subnet(self, net: str, params: Dict[str, Any], h):
        hidden = self.names[net]
        for w, b in hidden[:-1]:
            h = ad.silu(ad.add(ad.matmul(h, params[w]), params[b]))
        w, b = hidden[-1]
        return ad.add(ad.matmul(h, params[w]), params[b])

    def _scale_shift(self, params, za):
        s = clamp_scale(self._subnet("s", params, za), self.clamp)
        t = self._subnet("t", params, za)
        return s, t

    def _join(self, za, zb):
        return ad.concat([za, zb] if self.a_first else [zb, za], axis=-1)

    def forward(self, params: Dict[str, Any], z):
        za = ad.getitem(z, (Ellipsis, self.slice_a))
        zb = ad.getitem(z, (Ellipsis, self.slice_b))
        s, t = self._scale_shift(params, za)
        return self._join(za, ad.add(ad.mul(zb, ad.exp(s)), t))

    def inverse(self, params: Dict[str, Any], z):
        za = ad.getitem(z, (Ellipsis, self.slice_a))
        zb = ad.getitem(z, (Ellipsis, self.slice_b))
        s, t = self._scale_shift(params, za)
        return self._join(za, ad.mul(ad.sub(zb, t), ad.exp(ad.neg(s))))


def _check_finite(value, where: str, layer: Optional[int] = None) -> None:
    if isinstance(value, np.ndarray) and not np.all(np.isfinite(value)):
        context = {'stage': where}
        if layer is not None:
            context['layer'] = layer
        raise LatentSimError(
            message=f"Non-finite values in {where}",
            error_type=ErrorType.NON_FINITE,
            context=context,
        )


class PseudoInvertibleNet:
    """Lift A plus a stack of coupling layers with alternating masks."""

    def __init__(self, n: int, m: int, n_layers: int, hidden_width: int, depth: int,
                 clamp: float = DEFAULT_CLAMP, theta: Optional[np.ndarray] = None):
        if m <= n:
            raise LatentSimError(
                message=f"Latent dimension must exceed state dimension (m={m}, n={n})",
                error_type=ErrorType.CONFIGURATION,
                context={'n': n, 'm': m},
            )
        self.n = n
        self.m = m
        self.n_layers = n_layers
        self.hidden_width = hidden_width
        self.depth = depth
        self.clamp = float(clamp)

        self.layout = ParamLayout()
        self.layout.add("A", (m, n))
        self.layers = [
            CouplingLayer(i, m, hidden_width, depth, self.clamp, self.layout)
            for i in range(n_layers)
        ]

        self._theta = np.zeros(self.layout.size)
        if theta is None:
            self._theta[:n * n] = np.eye(n).ravel()
        else:
            self._theta[:] = np.asarray(theta, dtype=np.float64)
        self._views = self.layout.views(self._theta)
        self.lift = LiftMatrix(self._views["A"])
        self.lift.refresh()

    @property
    def dims(self) -> Tuple[int, int]:
        return self.n, self.m

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @property
    def n_params(self) -> int:
        return self.layout.size

    def params(self, theta=None) -> Dict[str, Any]:
        if theta is None:
            return self._views
        return self.layout.views(theta)

    def set_parameters(self, theta: np.ndarray) -> None:
        """Overwrite all parameters and refresh A^+ before anything reads it."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self._theta.shape:
            raise ValueError(f"Expected {self._theta.shape} parameters, got {theta.shape}")
        self.lift.mark_stale()
        self._theta[:] = theta
        self.lift.refresh()

    def copy(self) -> "PseudoInvertibleNet":
        return PseudoInvertibleNet(self.n, self.m, self.n_layers, self.hidden_width,
                                   self.depth, self.clamp, theta=self._theta.copy())

    def phi(self, u, params=None):
        params = self._views if params is None else params
        for layer in self.layers:
            u = layer.forward(params, u)
            _check_finite(u, "phi", layer.index)
        return u

    def phi_inverse(self, z, params=None):
        params = self._views if params is None else params
        for layer in reversed(self.layers):
            z = layer.inverse(params, z)
            _check_finite(z, "phi_inverse", layer.index)
        return z

    def phi_jvp(self, u, w, params=None):
        """J_phi(u) w through forward-mode duals."""
        return ad.jvp(lambda v: self.phi(v, params), u, w)

    def lift_state(self, x, params=None):
        A = self._views["A"] if params is None else params["A"]
        return ad.matmul(x, ad.transpose(A))

    def project(self, u, pinv=None):
        pinv = self.lift.pinv if pinv is None else pinv
        return ad.matmul(u, ad.transpose(pinv))

    def encode(self, x, params=None):
        return self.phi(self.lift_state(x, params), params)

    def decode(self, z, params=None, pinv=None):
        return self.project(self.phi_inverse(z, params), pinv)


def build_net(n: int, m: int, n_layers: int, hidden_width: int, depth: int,
              clamp: float = DEFAULT_CLAMP, rng: Optional[np.random.Generator] = None,
              lift_std: float = 0.1, output_scale: float = 0.0) -> PseudoInvertibleNet:
    """Fresh network: A = [I_n; G], hidden layers random, output layers zero.

    With output_scale = 0 the coupling stack is the identity map. A positive
    output_scale draws the output layers too, giving a non-trivial phi.
    """
    rng = np.random.default_rng() if rng is None else rng
    net = PseudoInvertibleNet(n, m, n_layers, hidden_width, depth, clamp)
    theta = np.zeros(net.n_params)
    views = net.layout.views(theta)

    views["A"][:n, :] = np.eye(n)
    views["A"][n:, :] = rng.normal(0.0, lift_std, size=(m - n, n))

    for block in net.layout.blocks[1:]:
        is_output = block.name.endswith("Wout") or block.name.endswith("bout")
        if block.name.split(".")[-1].startswith("W"):
            std = 1.0 / np.sqrt(block.shape[0])
            if is_output:
                std *= output_scale
            views[block.name][...] = rng.normal(0.0, 1.0, size=block.shape) * std
        elif is_output and output_scale > 0:
            views[block.name][...] = rng.normal(0.0, output_scale, size=block.shape)

    net.set_parameters(theta)
    return net


def encode(net: PseudoInvertibleNet, x) -> np.ndarray:
    """z = phi(A x)."""
    return net.encode(np.asarray(x, dtype=np.float64))


def decode(net: PseudoInvertibleNet, z) -> np.ndarray:
    """x = A^+ phi^{-1}(z), the least-squares projection for z off the image."""
    return net.decode(np.asarray(z, dtype=np.float64))


def phi_jvp(net: PseudoInvertibleNet, u, w) -> np.ndarray:
    return net.phi_jvp(np.asarray(u, dtype=np.float64), np.asarray(w, dtype=np.float64))


def save_checkpoint(net: PseudoInvertibleNet, path: Union[str, Path]) -> None:
    """Write the LSIM checkpoint: fixed header then little-endian float64 parameters."""
    path = Path(path)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.n, net.m, net.n_layers,
                          net.hidden_width, net.depth, net.clamp, net.n_params)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(net.theta.astype("<f8").tobytes())
    except OSError as exc:
        raise LatentSimError(
            message=f"Could not write checkpoint: {exc}",
            error_type=ErrorType.IO,
            context={'path': str(path)},
        ) from exc
    logger.info("Saved checkpoint %s (%d parameters)", path, net.n_params)


def _format_error(message: str, path: Path, **context) -> LatentSimError:
    return LatentSimError(
        message=message,
        error_type=ErrorType.CHECKPOINT_FORMAT,
        context={'path': str(path), **context},
    )


def load_checkpoint(path: Union[str, Path]) -> PseudoInvertibleNet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LatentSimError(
            message=f"Could not read checkpoint: {exc}",
            error_type=ErrorType.IO,
            context={'path': str(path)},
        ) from exc

    if len(data) < _HEADER.size:
        raise _format_error("Truncated checkpoint header", path, size=len(data))
    magic, version, n, m, n_layers, width, depth, clamp, n_params = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise _format_error("Bad checkpoint magic", path, magic=magic)
    if version != CHECKPOINT_VERSION:
        raise _format_error("Unsupported checkpoint version", path, version=version)
    if m <= n:
        raise _format_error("Checkpoint header has m <= n", path, n=n, m=m)

    net = PseudoInvertibleNet(n, m, n_layers, width, depth, clamp)
    if n_params != net.n_params:
        raise _format_error("Parameter count does not match header dimensions", path,
                            header_params=n_params, expected=net.n_params)
    expected = _HEADER.size + 8 * n_params
    if len(data) != expected:
        raise _format_error("Checkpoint size does not match header", path,
                            size=len(data), expected=expected)

    theta = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=n_params)
    net.set_parameters(theta.astype(np.float64))
    return net
