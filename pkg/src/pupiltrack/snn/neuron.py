"""Discrete-time integrate-and-fire update shared by numpy simulation and torch training."""

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


def _is_torch(x) -> bool:
    return torch is not None and isinstance(x, torch.Tensor)


def heaviside(x):
    if _is_torch(x):
        return (x >= 0).to(x.dtype)
    x = np.asarray(x)
    return (x >= 0).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def if_step(v, current, threshold=1.0, v_min=-1.0, spike_fn=heaviside, detach_reset=True):
    """One leakless IF update.

    ``v <- v + current``; neurons at or above ``threshold`` spike and reset to 0;
    the result is clamped below at ``v_min``. Returns ``(spikes, v_new)``.

    ``spike_fn`` receives ``v - threshold`` so a surrogate-gradient function can
    be swapped in for training; ``detach_reset`` stops gradients through the reset.
    """
    v = v + current
    spikes = spike_fn(v - threshold)
    if _is_torch(v):
        gate = spikes.detach() if detach_reset else spikes
        v = torch.clamp(v * (1.0 - gate), min=v_min)
    else:
        v = np.maximum(v * (1.0 - spikes), v_min)
    return spikes, v
