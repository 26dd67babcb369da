"""LOAN: normalization whose scale and shift are conditioned on location.

Dynamic-branch activations ``z_d`` (``N x K x D x H x W``) are modulated by a
per-sample, per-location scale and bias generated from a 2-D conditional map:

    out[n, k, t, h, w] = z_d[n, k, t, h, w] * gamma[n, k, h, w] + beta[n, k, h, w]

The same ``gamma``/``beta`` are used at every time step. The conditional map is
either a static-branch activation of matching spatial size
(``variant="activation"``) or the raw static variables, nearest-resized and
lifted to twice as many channels by a 3x3 convolution (``variant="variable"``).
Before projection the map is normalized per channel over ``(N, H, W)`` with
``(z - mean) / (std + eps)``.
"""
import numpy as np

from .errors import DimensionError
from .nn import Conv, Module, RunningStats, resize_nearest

VARIANTS = ("activation", "variable")

# gamma/beta projection weights start this much smaller than a regular conv so
# a fresh LOAN layer is close to the identity modulation (gamma=1, beta=0)
PROJECTION_INIT_SCALE = 1e-4


def normalize_conditional_map(z_s, stats, training):
    """Channel-wise standardization of the conditional map (batch stats in training)."""
    if z_s.ndim != 4:
        raise DimensionError(f"conditional map must be N x K x H x W, got {z_s.shape}")
    return stats.normalize(z_s, training)


def modulate(z_d, gamma, beta):
    """Scale and shift ``z_d`` with time-constant, location-dependent parameters."""
    n, k, _, h, w = z_d.shape
    if gamma.shape != (n, k, h, w) or beta.shape != (n, k, h, w):
        raise DimensionError(
            f"modulation parameters {gamma.shape}/{beta.shape} do not match activation {z_d.shape}"
        )
    return z_d * gamma.reshape(n, k, 1, h, w) + beta.reshape(n, k, 1, h, w)


class LOAN(Module):
    """One LOAN layer attached to a dynamic block with ``channels`` feature maps.

    ``cond_channels`` is the channel count of the conditional map: the static
    activation width for the activation variant, the number of static
    variables for the variable variant.
    """

    def __init__(self, channels, cond_channels, rng, variant="activation", dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown LOAN variant {variant!r}")
        self.variant = variant
        self.channels = channels
        self.pre_conv = None
        proj_in = cond_channels
        if variant == "variable":
            self.pre_conv = Conv(cond_channels, 2 * cond_channels, (3, 3), rng, dtype, bias=False)
            proj_in = 2 * cond_channels
        self.cond_norm = RunningStats(proj_in, eps=1e-5, momentum=0.1, std_eps=True, dtype=dtype)
        self.gamma_conv = Conv(proj_in, channels, (3, 3), rng, dtype)
        self.beta_conv = Conv(proj_in, channels, (3, 3), rng, dtype)
        self.gamma_conv.weight.data *= PROJECTION_INIT_SCALE
        self.beta_conv.weight.data *= PROJECTION_INIT_SCALE
        self.gamma_conv.bias.data[:] = 1.0

    def prepare_conditional_map(self, static_vars, target):
        """Nearest-resize raw static variables to ``target`` and double their channels."""
        if self.pre_conv is None:
            raise ValueError("prepare_conditional_map is only used by the variable-conditioned variant")
        return self.pre_conv(resize_nearest(static_vars, target))

    def generate_modulation(self, cond):
        """Normalize the conditional map and project it to ``(gamma, beta)``."""
        if cond.shape[1] != self.cond_norm.num_channels:
            raise DimensionError(
                f"conditional map has {cond.shape[1]} channels, layer expects {self.cond_norm.num_channels}"
            )
        z_hat = normalize_conditional_map(cond, self.cond_norm, self.training)
        return self.gamma_conv(z_hat), self.beta_conv(z_hat)

    def forward(self, z_d, cond):
        """Modulate ``z_d`` using ``cond`` (static activation or raw static variables)."""
        if self.pre_conv is not None:
            cond = self.prepare_conditional_map(cond, z_d.shape[-2:])
        if cond.shape[-2:] != z_d.shape[-2:]:
            raise DimensionError(f"conditional map {cond.shape} does not match activation {z_d.shape} spatially")
        gamma, beta = self.generate_modulation(cond)
        return modulate(z_d, gamma, beta)
