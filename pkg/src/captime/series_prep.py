"""Channel-independent instance normalization and patching."""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

STD_FLOOR = 1e-5


@dataclass
class SeriesWindow:
    """A lookback window: ``values`` is H x C, one column per channel."""

    values: np.ndarray
    timestamps: Optional[np.ndarray] = None
    channel_names: Sequence[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.timestamps is None:
            self.timestamps = np.arange(self.values.shape[0], dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != self.values.shape[0]:
            raise ValueError("timestamps and values disagree on window length")
        if not self.channel_names:
            self.channel_names = [f"ch{i + 1}" for i in range(self.values.shape[1])]
        if not np.all(np.isfinite(self.values)):
            raise ValueError("window contains missing or non-finite values")

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray  # True where the raw std fell below STD_FLOOR

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        self.clamped = np.atleast_1d(np.asarray(self.clamped, dtype=bool))
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")


@dataclass
class PatchSet:
    patches: np.ndarray  # N_p x L_p
    origin: int = 0
    n_full: int = 0  # number of verbatim (unpadded) patches

    @property
    def n_patches(self):
        return self.patches.shape[0]

    @property
    def patch_len(self):
        return self.patches.shape[1]


def _stats_1d(x):
    mean = x.mean()
    raw = np.sqrt(((x - mean) ** 2).mean())
    return mean, max(raw, STD_FLOOR), raw < STD_FLOOR


def series_stats(x):
    """Population mean/std of each row of ``x`` (any leading shape, time on the last axis)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.array([_stats_1d(np.ascontiguousarray(r)) for r in flat], dtype=np.float64).reshape(-1, 3)
    lead = x.shape[:-1]
    return out[:, 0].reshape(lead), out[:, 1].reshape(lead), out[:, 2].astype(bool).reshape(lead)


def instance_normalize(w):
    """Standardize each channel of a window with its own population mean and std.

    Accepts a :class:`SeriesWindow` or an H x C array (a 1-D array is one
    channel). Returns the normalized H x C array and the :class:`NormStats`
    needed to invert it. Channels are processed one at a time so the result
    for a column never depends on the other columns.
    """
    values = w.values if isinstance(w, SeriesWindow) else np.asarray(w, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 2:
        raise ValueError("instance normalization needs at least 2 time steps")
    out = np.empty_like(values)
    means, stds, flags = [], [], []
    for c in range(values.shape[1]):
        col = np.ascontiguousarray(values[:, c])
        m, s, clamped = _stats_1d(col)
        out[:, c] = (col - m) / s
        means.append(m)
        stds.append(s)
        flags.append(clamped)
    return out, NormStats(np.array(means), np.array(stds), np.array(flags))


def denormalize(x, stats, channel=None):
    """Invert :func:`instance_normalize` for values laid out H x C (or 1-D for one ``channel``)."""
    x = np.asarray(x, dtype=np.float64)
    if channel is not None:
        return x * stats.std[channel] + stats.mean[channel]
    return x * stats.std + stats.mean


def denormalize_dist(p, stats, channel=0):
    """Map location/scale of Student's t parameters back to the original units.

    The family is closed under ``y -> std * y + mean``: location and scale
    transform, degrees of freedom do not.
    """
    from .mixture_decoder import PatchDistParams

    std = stats.std[channel]
    mean = stats.mean[channel]
    if p.sigma is not None and np.any(p.sigma <= 0):
        raise ValueError("sigma must be positive")
    return PatchDistParams(
        mu=std * p.mu + mean,
        sigma=None if p.sigma is None else std * p.sigma,
        nu=None if p.nu is None else np.array(p.nu, copy=True),
    )


def n_patches(length, patch_len):
    return -(-length // patch_len) + 1


def patchify(channel, patch_len, origin=0):
    """Cut one channel into ``ceil(H / L_p) + 1`` patches of length ``L_p``.

    The first ``H // L_p`` patches are verbatim slices. The tail is padded to
    a multiple of ``L_p`` by repeating the final value, then one extra patch
    made only of the final value is appended.
    """
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    if patch_len < 1:
        raise ValueError("patch length must be >= 1")
    if x.size == 0:
        raise ValueError("cannot patchify an empty series")
    return PatchSet(patches=_patchify_rows(x[None, :], patch_len)[0], origin=origin, n_full=x.size // patch_len)


def patchify_batch(x, patch_len):
    """Vectorized :func:`patchify` over the rows of a B x H array -> B x N_p x L_p."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("expected a non-empty B x H array")
    if patch_len < 1:
        raise ValueError("patch length must be >= 1")
    return _patchify_rows(x, patch_len)


def _patchify_rows(x, patch_len):
    b, h = x.shape
    n_p = n_patches(h, patch_len)
    padded = np.empty((b, n_p * patch_len))
    padded[:, :h] = x
    padded[:, h:] = x[:, -1:]
    return padded.reshape(b, n_p, patch_len)


def unpatchify(ps):
    """Concatenate the verbatim patches back into the original prefix."""
    return ps.patches[: ps.n_full].reshape(-1)
