"""Linear forward operators, decoders and the measurement residual.

Signals are 1-D vectors (optionally viewed as small 2-D grids for the
outlier probes). Every operator and decoder acts on the last axis and
broadcasts over leading batch axes.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional
import logging

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "ForwardOperator",
    "MaskOperator",
    "DownsampleOperator",
    "BlurOperator",
    "ComposeOperator",
    "make_operator",
    "apply",
    "adjoint",
    "Decoder",
    "IdentityDecoder",
    "SmoothMapDecoder",
    "make_decoder",
    "decode",
    "decoder_jacobian",
    "Measurement",
    "make_measurement",
    "residual",
    "residual_gradient",
    "principal_jacobian_direction",
    "EigenResult",
    "grid_region_indices",
    "inject_scaled_outlier",
    "amplification_ratio",
]


def _check_last(x, n, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != n:
        raise ValueError(f"{what}: expected last axis of length {n}, got shape {x.shape}")
    return x


class ForwardOperator:
    """Linear measurement operator ``A`` with an exact adjoint."""

    kind = ""
    input_dim: int
    output_dim: int

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, v):
        raise NotImplementedError

    def matrix(self):
        return self.apply(np.eye(self.input_dim)).T

    def spectral_norm(self):
        return float(np.linalg.norm(self.matrix(), 2))

    def to_dict(self):
        raise NotImplementedError


class MaskOperator(ForwardOperator):
    """Random inpainting: keep a seeded subset of coordinates.

    Either pass ``keep`` explicitly or draw it with drop probability ``p``
    from ``seed``; at least one coordinate is always kept.
    """

    kind = "mask"

    def __init__(self, n, p=0.5, seed=0, keep=None):
        self.input_dim = int(n)
        self.p = float(p)
        self.seed = int(seed)
        if keep is None:
            if not 0.0 <= self.p < 1.0:
                raise ValueError("drop probability must lie in [0, 1)")
            u = np.random.default_rng(self.seed).random(self.input_dim)
            mask = u >= self.p
            if not mask.any():
                mask[np.argmax(u)] = True
            keep = np.flatnonzero(mask)
            self._explicit = False
        else:
            keep = np.unique(np.asarray(keep, dtype=int))
            if keep.size == 0 or keep.min() < 0 or keep.max() >= self.input_dim:
                raise ValueError("keep indices out of range")
            self._explicit = True
        self.keep = keep
        self.output_dim = keep.size

    def apply(self, x):
        x = _check_last(x, self.input_dim, "mask.apply")
        return x[..., self.keep]

    def adjoint(self, v):
        v = _check_last(v, self.output_dim, "mask.adjoint")
        out = np.zeros(v.shape[:-1] + (self.input_dim,))
        out[..., self.keep] = v
        return out

    def to_dict(self):
        if self._explicit:
            return {"kind": "mask", "n": self.input_dim, "keep": [int(i) for i in self.keep]}
        return {"kind": "mask", "n": self.input_dim, "p": self.p, "seed": self.seed}


class DownsampleOperator(ForwardOperator):
    """Average disjoint blocks of ``factor`` consecutive coordinates."""

    kind = "average_downsample"

    def __init__(self, n, factor=2):
        n, factor = int(n), int(factor)
        if factor < 1 or n % factor:
            raise ValueError(f"factor {factor} does not divide input length {n}")
        self.input_dim = n
        self.factor = factor
        self.output_dim = n // factor

    def apply(self, x):
        x = _check_last(x, self.input_dim, "downsample.apply")
        return x.reshape(x.shape[:-1] + (self.output_dim, self.factor)).mean(axis=-1)

    def adjoint(self, v):
        v = _check_last(v, self.output_dim, "downsample.adjoint")
        return np.repeat(v / self.factor, self.factor, axis=-1)

    def to_dict(self):
        return {"kind": "average_downsample", "n": self.input_dim, "factor": self.factor}


class BlurOperator(ForwardOperator):
    """Circular convolution with a centred kernel of taps."""

    kind = "circular_blur"

    def __init__(self, n, kernel):
        self.input_dim = self.output_dim = int(n)
        self.kernel = np.asarray(kernel, dtype=float).reshape(-1)
        if self.kernel.size == 0 or self.kernel.size > self.input_dim:
            raise ValueError("kernel must have between 1 and n taps")
        self._shifts = np.arange(self.kernel.size) - self.kernel.size // 2

    def apply(self, x):
        x = _check_last(x, self.input_dim, "blur.apply")
        out = np.zeros_like(x)
        for k, s in zip(self.kernel, self._shifts):
            out += k * np.roll(x, s, axis=-1)
        return out

    def adjoint(self, v):
        v = _check_last(v, self.output_dim, "blur.adjoint")
        out = np.zeros_like(v)
        for k, s in zip(self.kernel, self._shifts):
            out += k * np.roll(v, -s, axis=-1)
        return out

    def to_dict(self):
        return {"kind": "circular_blur", "n": self.input_dim, "kernel": [float(k) for k in self.kernel]}


class ComposeOperator(ForwardOperator):
    """``ops[-1] o ... o ops[0]``; the first operator is applied first."""

    kind = "compose"

    def __init__(self, ops):
        ops = list(ops)
        if not ops:
            raise ValueError("compose needs at least one operator")
        for a, b in zip(ops[:-1], ops[1:]):
            if a.output_dim != b.input_dim:
                raise ValueError(f"cannot compose {a.kind} ({a.output_dim}) with {b.kind} ({b.input_dim})")
        self.ops = ops
        self.input_dim = ops[0].input_dim
        self.output_dim = ops[-1].output_dim

    def apply(self, x):
        for op in self.ops:
            x = op.apply(x)
        return x

    def adjoint(self, v):
        for op in reversed(self.ops):
            v = op.adjoint(v)
        return v

    def to_dict(self):
        return {"kind": "compose", "ops": [op.to_dict() for op in self.ops]}


def gaussian_taps(width=5, std=1.0):
    x = np.arange(width) - width // 2
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def make_operator(spec, n=None):
    """Build an operator from a config mapping (see :meth:`ForwardOperator.to_dict`)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    n = spec.pop("n", n)
    if kind == "compose":
        ops = []
        for sub in spec.pop("ops"):
            op = make_operator(sub, n)
            ops.append(op)
            n = op.output_dim
        return ComposeOperator(ops)
    if n is None:
        raise ValueError(f"operator {kind!r} needs an input length")
    if kind == "identity":
        return MaskOperator(n, keep=np.arange(n))
    if kind == "mask":
        return MaskOperator(n, **spec)
    if kind == "average_downsample":
        return DownsampleOperator(n, **spec)
    if kind == "circular_blur":
        if "kernel" not in spec:
            spec["kernel"] = gaussian_taps(spec.pop("width", 5), spec.pop("std", 1.0))
        return BlurOperator(n, **spec)
    raise ValueError(f"unknown operator kind {kind!r}")


def apply(op, x):
    return op.apply(x)


def adjoint(op, v):
    return op.adjoint(v)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------


class Decoder:
    kind = ""
    latent_dim: int
    signal_dim: int

    def decode(self, z):
        raise NotImplementedError

    def jacobian(self, z):
        raise NotImplementedError

    def vjp(self, z, u):
        """``J(z)^T u`` without forming ``J``."""
        raise NotImplementedError

    def jvp(self, z, v):
        raise NotImplementedError


class IdentityDecoder(Decoder):
    kind = "identity"

    def __init__(self, d):
        self.latent_dim = self.signal_dim = int(d)

    def decode(self, z):
        return _check_last(z, self.latent_dim, "decode")

    def jacobian(self, z):
        z = _check_last(z, self.latent_dim, "decoder_jacobian")
        return np.broadcast_to(np.eye(self.latent_dim), z.shape[:-1] + (self.latent_dim, self.latent_dim)).copy()

    def vjp(self, z, u):
        return np.asarray(u, dtype=float)

    def jvp(self, z, v):
        return np.asarray(v, dtype=float)

    def to_dict(self):
        return {"kind": "identity", "d": self.latent_dim}


class SmoothMapDecoder(Decoder):
    """Seeded two-layer map ``W2 tanh(W1 z + b1) + b2``.

    Weights are drawn from ``seed`` alone, so the decoder is reproducible
    from its config. Explicit weights may be passed instead (tests use this
    for degenerate cases).
    """

    kind = "smooth_map"

    def __init__(self, d, hidden=None, signal_dim=None, seed=0, weights=None):
        d = int(d)
        h = 2 * d if hidden is None else int(hidden)
        m = 4 * d if signal_dim is None else int(signal_dim)
        self.seed = int(seed)
        if weights is None:
            rng = np.random.default_rng(self.seed)
            W1 = rng.normal(0.0, 1.0 / np.sqrt(d), (h, d))
            b1 = rng.normal(0.0, 0.1, h)
            W2 = rng.normal(0.0, 1.0 / np.sqrt(h), (m, h))
            b2 = rng.normal(0.0, 0.1, m)
            self._explicit = False
        else:
            W1, b1, W2, b2 = (np.asarray(w, dtype=float) for w in weights)
            h, m = W1.shape[0], W2.shape[0]
            self._explicit = True
        if W1.shape != (h, d) or b1.shape != (h,) or W2.shape != (m, h) or b2.shape != (m,):
            raise ValueError("inconsistent decoder weight shapes")
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2
        self.latent_dim, self.hidden, self.signal_dim = d, h, m

    def _pre(self, z):
        z = _check_last(z, self.latent_dim, "decode")
        return z @ self.W1.T + self.b1

    def decode(self, z):
        return np.tanh(self._pre(z)) @ self.W2.T + self.b2

    def jacobian(self, z):
        gate = 1.0 - np.tanh(self._pre(z)) ** 2
        return np.einsum("mh,...h,hd->...md", self.W2, gate, self.W1)

    def vjp(self, z, u):
        gate = 1.0 - np.tanh(self._pre(z)) ** 2
        return (gate * (np.asarray(u) @ self.W2)) @ self.W1

    def jvp(self, z, v):
        gate = 1.0 - np.tanh(self._pre(z)) ** 2
        return (gate * (np.asarray(v) @ self.W1.T)) @ self.W2.T

    def to_dict(self):
        if self._explicit:
            raise ValueError("decoders built from explicit weights are not serialisable")
        return {"kind": "smooth_map", "d": self.latent_dim, "hidden": self.hidden,
                "signal_dim": self.signal_dim, "seed": self.seed}


def make_decoder(spec, d=None):
    spec = dict(spec)
    kind = spec.pop("kind")
    d = spec.pop("d", d)
    if kind == "identity":
        return IdentityDecoder(d)
    if kind == "smooth_map":
        return SmoothMapDecoder(d, **spec)
    raise ValueError(f"unknown decoder kind {kind!r}")


def decode(dec, z):
    return dec.decode(z)


def decoder_jacobian(dec, z):
    return dec.jacobian(z)


# ---------------------------------------------------------------------------
# measurement and residual
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Measurement:
    """``y = A(x) + noise``; ``y`` may hold a batch of observations (``(n, m)``)."""

    y: np.ndarray
    operator: ForwardOperator
    noise_sigma: float = 0.0
    ground_truth: Optional[np.ndarray] = None
    latent_truth: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape[-1] != self.operator.output_dim:
            raise ValueError(f"y has length {y.shape[-1]}, operator outputs {self.operator.output_dim}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "y", y)

    @property
    def batch_shape(self):
        return self.y.shape[:-1]

    def select(self, idx):
        """Measurement restricted to batch entries ``idx``."""
        pick = lambda a: None if a is None else np.asarray(a)[idx]
        return Measurement(self.y[idx], self.operator, self.noise_sigma, pick(self.ground_truth), pick(self.latent_truth))


def make_measurement(op, dec, z_true, noise_sigma, rng):
    """Decode ``z_true`` (any batch shape), apply ``op`` and add Gaussian noise."""
    x = dec.decode(z_true)
    clean = op.apply(x)
    y = clean + noise_sigma * rng.standard_normal(clean.shape)
    return Measurement(y, op, float(noise_sigma), ground_truth=x, latent_truth=np.asarray(z_true, dtype=float))


def _mismatch(z, meas, dec):
    x = dec.decode(z)
    if x.shape[-1] != meas.operator.input_dim:
        raise ValueError("decoder output does not match the operator input")
    return meas.y - meas.operator.apply(x)


def residual(z, meas, dec):
    """``||y - A(D(z))||^2`` (per batch entry)."""
    r = _mismatch(z, meas, dec)
    out = np.sum(r * r, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def residual_gradient(z, meas, dec):
    """``grad_z ||y - A(D(z))||^2 = -2 J_D(z)^T A^T (y - A(D(z)))``."""
    r = _mismatch(z, meas, dec)
    return -2.0 * dec.vjp(z, meas.operator.adjoint(r))


# ---------------------------------------------------------------------------
# Jacobian probes
# ---------------------------------------------------------------------------


class EigenResult(NamedTuple):
    vector: np.ndarray
    value: float
    converged: bool
    iterations: int


def _fix_sign(v):
    nz = np.flatnonzero(np.abs(v) > 1e-14)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def principal_jacobian_direction(dec, z, iters=1000, seed=0, tol=1e-8):
    """Top eigenpair of ``J J^T`` by power iteration.

    The eigenvalue is the Rayleigh quotient; iteration stops once its
    relative change drops below ``tol``. If the budget runs out first the
    partial result comes back with ``converged=False`` (and a warning is
    logged) instead of raising.
    """
    z = _check_last(z, dec.latent_dim, "principal_jacobian_direction")
    if isinstance(dec, IdentityDecoder):
        e = np.zeros(dec.signal_dim)
        e[0] = 1.0
        return EigenResult(e, 1.0, True, 0)
    v = np.random.default_rng(seed).standard_normal(dec.signal_dim)
    v /= np.linalg.norm(v)
    value = 0.0
    for it in range(1, iters + 1):
        w = dec.jvp(z, dec.vjp(z, v))
        new_value = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return EigenResult(_fix_sign(v), 0.0, True, it)
        v = w / nrm
        if it > 1 and abs(new_value - value) <= tol * max(abs(new_value), 1e-300):
            value = float(v @ dec.jvp(z, dec.vjp(z, v)))
            return EigenResult(_fix_sign(v), value, True, it)
        value = new_value
    logger.warning("power iteration did not converge in %d iterations", iters)
    return EigenResult(_fix_sign(v), float(v @ dec.jvp(z, dec.vjp(z, v))), False, iters)


def grid_region_indices(shape, region):
    """Flat indices of the block ``region = (r0, r1, c0, c1)`` of an ``h x w`` grid."""
    h, w = shape
    r0, r1, c0, c1 = region
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise ValueError(f"region {region} outside grid {shape}")
    rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    return (rows * w + cols).reshape(-1)


def inject_scaled_outlier(z, shape, region, scale):
    """Scale the latent block ``region``; near-zero entries are set to ``scale``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != shape[0] * shape[1]:
        raise ValueError("latent length does not match the grid shape")
    idx = grid_region_indices(shape, region)
    out = z.copy()
    if scale == 1:
        return out
    block = out[..., idx]
    out[..., idx] = np.where(np.abs(block) < 1e-6, scale, block * scale)
    return out


def amplification_ratio(dec, z, region):
    """Mean Jacobian column norm over ``region`` divided by that over the rest.

    ``region`` is a collection of flat latent indices.
    """
    z = _check_last(z, dec.latent_dim, "amplification_ratio")
    idx = np.unique(np.asarray(region, dtype=int))
    mask = np.zeros(dec.latent_dim, dtype=bool)
    mask[idx] = True
    if not mask.any() or mask.all():
        raise ValueError("region and its complement must both be non-empty")
    cols = np.linalg.norm(dec.jacobian(z), axis=-2)
    return float(cols[..., mask].mean(axis=-1) / cols[..., ~mask].mean(axis=-1))
