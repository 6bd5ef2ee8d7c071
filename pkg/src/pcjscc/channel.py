"""Power normalization, real/complex packing, AWGN corruption, bandwidth accounting.

The transmit chain is: latent -> power_normalize -> pack_complex -> AWGN.
The normalizer keeps scalar moving statistics of the latent entries, learned
during training and frozen at inference. Its recorded deviation is calibrated
per complex symbol (sqrt(2) times the entry standard deviation) so that
normalized codewords satisfy the average power constraint E||z||^2 = n*P/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-5


@dataclass
class ChannelConfig:
    snr_db: float
    power: float = 1.0  # average power budget per complex symbol
    noiseless: bool = False

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError("power must be positive")

    @property
    def noise_power(self) -> float:
        """Per-complex-symbol noise variance N0 = P * 10^(-snr_db/10)."""
        if self.noiseless:
            return 0.0
        return self.power * 10.0 ** (-self.snr_db / 10.0)


class Normalizer:
    """Scalar moving statistics (mu, sigma) of latent entries.

    sigma tracks sqrt(2) * std(entries): the root-mean-square deviation per
    complex symbol, so dividing by it yields per-entry variance 1/2 and hence
    per-symbol power P = 1. The first update adopts the batch statistics
    outright; later updates blend with the given momentum. A final calibrate()
    snapshot can override the operative values without disturbing the moving
    estimates, so an interrupted training run resumes exactly. Frozen mode
    rejects updates.
    """

    def __init__(self, momentum: float = 0.01):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        self.momentum = momentum
        self.moving_mu = 0.0
        self.moving_sigma = 1.0
        self.calibrated_mu = None
        self.calibrated_sigma = None
        self.count = 0
        self.frozen = False

    @property
    def mu(self) -> float:
        return self.moving_mu if self.calibrated_mu is None else self.calibrated_mu

    @mu.setter
    def mu(self, value: float) -> None:
        self.calibrated_mu = float(value)

    @property
    def sigma(self) -> float:
        return self.moving_sigma if self.calibrated_sigma is None else self.calibrated_sigma

    @sigma.setter
    def sigma(self, value: float) -> None:
        self.calibrated_sigma = float(value)

    def update(self, z_tilde: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("normalizer is frozen; updates are training-only")
        z = np.asarray(z_tilde, dtype=np.float64).ravel()
        batch_mu = float(z.mean())
        batch_sigma = max(float(np.sqrt(2.0) * z.std()), SIGMA_FLOOR)
        if self.count == 0:
            self.moving_mu, self.moving_sigma = batch_mu, batch_sigma
        else:
            m = self.momentum
            self.moving_mu = (1.0 - m) * self.moving_mu + m * batch_mu
            self.moving_sigma = (1.0 - m) * self.moving_sigma + m * batch_sigma
        self.count += 1

    def calibrate(self, z_tilde: np.ndarray) -> None:
        """Snapshot the statistics of the given latents exactly (no blending).

        Used once at the end of training: the latent distribution drifts while
        the codec learns, so the operative (mu, sigma) are re-recorded from
        the finished model to meet the average power budget.
        """
        if self.frozen:
            raise RuntimeError("normalizer is frozen; updates are training-only")
        z = np.asarray(z_tilde, dtype=np.float64).ravel()
        self.calibrated_mu = float(z.mean())
        self.calibrated_sigma = max(float(np.sqrt(2.0) * z.std()), SIGMA_FLOOR)

    def reset_calibration(self) -> None:
        self.calibrated_mu = None
        self.calibrated_sigma = None

    def freeze(self) -> None:
        self.frozen = True

    def state_dict(self) -> dict:
        return {
            "moving_mu": self.moving_mu,
            "moving_sigma": self.moving_sigma,
            "calibrated_mu": self.calibrated_mu,
            "calibrated_sigma": self.calibrated_sigma,
            "momentum": self.momentum,
            "count": self.count,
            "frozen": self.frozen,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Normalizer":
        nz = cls(momentum=state["momentum"])
        nz.moving_mu = float(state["moving_mu"])
        nz.moving_sigma = float(state["moving_sigma"])
        nz.calibrated_mu = None if state["calibrated_mu"] is None else float(state["calibrated_mu"])
        nz.calibrated_sigma = None if state["calibrated_sigma"] is None else float(state["calibrated_sigma"])
        nz.count = int(state["count"])
        nz.frozen = bool(state["frozen"])
        return nz


def power_normalize(z_tilde: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    """Codeword z = (z_tilde - mu) / sigma.

    Enforces the average constraint E||z||^2 <= n*P/2 statistically, not per
    codeword; individual codewords may exceed the budget.
    """
    if normalizer.sigma <= 0:
        raise ValueError("normalizer state corrupt: sigma <= 0")
    return (np.asarray(z_tilde, dtype=np.float64) - normalizer.mu) / normalizer.sigma


def pack_complex(z: np.ndarray) -> np.ndarray:
    """Pair consecutive reals into complex symbols: z'[t] = z[2t] + i*z[2t+1]."""
    z = np.asarray(z)
    if z.shape[-1] % 2 != 0:
        raise ValueError(f"real dimension must be even, got {z.shape[-1]}")
    return z[..., 0::2] + 1j * z[..., 1::2]


def unpack_complex(zc: np.ndarray) -> np.ndarray:
    """Inverse of pack_complex."""
    zc = np.asarray(zc)
    out = np.empty(zc.shape[:-1] + (2 * zc.shape[-1],), dtype=np.float64)
    out[..., 0::2] = zc.real
    out[..., 1::2] = zc.imag
    return out


def transmit_awgn(zc: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """y' = z' + w with w ~ CN(0, N0) i.i.d. per complex symbol."""
    zc = np.asarray(zc, dtype=np.complex128)
    if not np.all(np.isfinite(zc.real)) or not np.all(np.isfinite(zc.imag)):
        raise ValueError("channel input contains non-finite values")
    n0 = cfg.noise_power
    if n0 == 0.0:
        return zc.copy()
    scale = np.sqrt(n0 / 2.0)
    w = scale * (rng.standard_normal(zc.shape) + 1j * rng.standard_normal(zc.shape))
    return zc + w


def noise_std_per_real_dim(cfg: ChannelConfig) -> float:
    """Std of the equivalent real-dimension noise, sqrt(N0/2).

    Adding N(0, N0/2) noise to each real entry of z is exactly the complex
    AWGN channel seen through pack/unpack; the training loop uses this form.
    """
    return float(np.sqrt(cfg.noise_power / 2.0))


def cpp(n: int, num_points: int) -> float:
    """Channel uses per point: n real dimensions = n/2 complex symbols per cloud."""
    if n % 2 != 0 or n < 2:
        raise ValueError("channel dimension n must be even and >= 2")
    if num_points < 1:
        raise ValueError("point count must be >= 1")
    return n / (2.0 * num_points)
