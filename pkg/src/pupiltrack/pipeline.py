"""Recording -> training/validation sequences, shared by the CLI and the desk-scale demo."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .events import DataError, Recording
from .learning import SequenceSet
from .slicing import SliceConfig, slice_all


@dataclass
class Split:
    train: SequenceSet
    heldout: SequenceSet
    train_anchors: np.ndarray
    heldout_anchors: np.ndarray


def usable_anchors(rec: Recording, cfg: SliceConfig, jobs: int = 1) -> list:
    """Slice at every label and keep sequences whose bins are all filled with events."""
    anchors = list(range(len(rec.labels)))
    if jobs <= 1:
        return slice_all(rec, cfg, anchors, min_real_bins=cfg.num_bins)
    chunks = [anchors[i::jobs] for i in range(jobs)]
    with ThreadPoolExecutor(jobs) as pool:
        parts = list(pool.map(lambda a: slice_all(rec, cfg, a, min_real_bins=cfg.num_bins), chunks))
    seqs = [s for part in parts for s in part]
    return sorted(seqs, key=lambda s: s.meta["anchor_index"])


def sequences(rec: Recording, cfg: SliceConfig, jobs: int = 1) -> SequenceSet:
    seqs = usable_anchors(rec, cfg, jobs)
    if not seqs:
        raise DataError(f"no label has {cfg.num_bins} filled bins before it")
    return SequenceSet.from_sequences(seqs)


def split_recording(rec: Recording, cfg: SliceConfig, holdout: float = 0.2, jobs: int = 1) -> Split:
    """Chronological split: the last ``holdout`` fraction of usable anchors is held out.

    Held-out sequences whose bins reach back into the training span are
    dropped so the two sets share no events.
    """
    if not 0 < holdout < 1:
        raise ValueError("holdout must be in (0, 1)")
    seqs = usable_anchors(rec, cfg, jobs)
    if len(seqs) < 2:
        raise DataError("recording is too short for a train/held-out split")
    cut = min(max(1, int(round(len(seqs) * (1 - holdout)))), len(seqs) - 1)
    train, rest = seqs[:cut], seqs[cut:]
    boundary = train[-1].meta["anchor_t"]
    # the first bin covers events after the previous bin's end, so compare the earliest end time
    held = [s for s in rest if s.bin_end_times[0] > boundary] or rest[-1:]
    return Split(
        SequenceSet.from_sequences(train),
        SequenceSet.from_sequences(held),
        np.array([s.meta["anchor_index"] for s in train]),
        np.array([s.meta["anchor_index"] for s in held]),
    )


def matched_fixed_window(rec: Recording, n_events: int, num_bins: int = 64, **kw) -> SliceConfig:
    """Fixed window whose mean active-pixel count per bin is closest to ``n_events``.

    Bisection on the window length over a few anchors; the count is monotone in
    the window length for any single bin.
    """
    anchors = np.linspace(num_bins, len(rec.labels) - 1, 8).astype(int)
    anchors = anchors[anchors >= 0]

    def mean_active(dt):
        seqs = slice_all(rec, SliceConfig.fixed(int(dt), num_bins=num_bins, **kw), anchors)
        return float(np.mean([s.active_pixels()[s.padded_bins:].mean() for s in seqs]))

    lo, hi = 1, 1
    while mean_active(hi) < n_events and hi < 10_000_000:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mean_active(mid) < n_events:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda d: abs(mean_active(d) - n_events))
    return SliceConfig.fixed(best, num_bins=num_bins, **kw)

