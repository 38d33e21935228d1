"""Independent reference implementations used as test oracles.

Each one is written as plainly as possible, with Python loops, and shares no
code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# slicing


def last_unique_events(xy, n):
    """Walk backwards from the newest event, stopping before the (n+1)-th distinct pixel.

    Returns the number of trailing events in the window, or None when the
    whole prefix has fewer than n distinct pixels.
    """
    seen = set()
    count = 0
    for k in range(len(xy) - 1, -1, -1):
        pixel = (int(xy[k][0]), int(xy[k][1]))
        if pixel not in seen and len(seen) == n:
            break
        seen.add(pixel)
        count += 1
    if len(seen) < n:
        return None
    return count


def reference_slice(t, x, y, p, anchor_t, n, num_bins, height, width):
    """Backwards dynamic slicing, one bin per loop iteration, counting polarities per pixel."""
    xyp = [(x[k], y[k], p[k]) for k in range(len(t)) if t[k] <= anchor_t]
    end_index = len(xyp)  # the newest event before the label is included
    tcwh = np.zeros((num_bins, 2, width, height))
    for i in reversed(range(num_bins)):
        count = last_unique_events([e[:2] for e in xyp[:end_index]], n)
        if count is None:
            break
        start_index = end_index - count
        for ex, ey, ep in xyp[start_index:end_index]:
            tcwh[i, int(ep), int(ex), int(ey)] += 1
        tcwh[i, 0][tcwh[i, 1] >= tcwh[i, 0]] = 0
        tcwh[i, 1][tcwh[i, 1] < tcwh[i, 0]] = 0
        tcwh[i] = tcwh[i].clip(0, 1)
        end_index = start_index
    return tcwh.transpose(0, 1, 3, 2).astype(np.uint8)  # -> (T, 2, H, W)


# ---------------------------------------------------------------------------
# statistics


def stats_oracle(t, label_period):
    t = [int(v) for v in t]
    gaps = [b - a for a, b in zip(t, t[1:]) if b != a]
    counts = {}
    for v in t:
        counts[v] = counts.get(v, 0) + 1
    per_ts = list(counts.values())
    periods = [0] * ((t[-1] - t[0]) // label_period + 1)
    for v in t:
        periods[(v - t[0]) // label_period] += 1

    def summary(vals):
        m = sum(vals) / len(vals)
        std = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
        s = sorted(vals)
        mid = len(s) // 2
        median = s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2
        return median, m, std, min(vals), max(vals)

    return summary(gaps) if gaps else None, summary(per_ts), summary(periods)


# ---------------------------------------------------------------------------
# neurons and networks


def scalar_if(drive, threshold=1.0, v_min=-1.0):
    """Leakless IF with reset to zero: returns (spike list, voltage list)."""
    v = 0.0
    spikes, volts = [], []
    for current in drive:
        v = v + current
        if v >= threshold:
            spikes.append(1)
            v = 0.0
        else:
            spikes.append(0)
        if v < v_min:
            v = v_min
        volts.append(v)
    return spikes, volts


def conv2d_loops(x, w, b, stride, pad):
    """x (C, H, W), w (F, C, KY, KX); plain nested loops."""
    c, h, wd = x.shape
    f, _, ky, kx = w.shape
    xp = np.zeros((c, h + 2 * pad[0], wd + 2 * pad[1]))
    xp[:, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] = x
    oh = (h + 2 * pad[0] - ky) // stride[0] + 1
    ow = (wd + 2 * pad[1] - kx) // stride[1] + 1
    out = np.zeros((f, oh, ow))
    for o in range(f):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride[0]:i * stride[0] + ky, j * stride[1]:j * stride[1] + kx]
                out[o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def sum_pool_loops(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for i in range(h // k):
        for j in range(w // k):
            out[:, i, j] = x[:, i * k:(i + 1) * k, j * k:(j + 1) * k].sum(axis=(1, 2))
    return out


def simulate_network(layers, params, frames):
    """Bin-by-bin simulation of a conv/IF/pool/flatten stack.

    ``layers`` is a list of ("conv", stride, pad) / ("if",) / ("pool", k) /
    ("flatten",) tuples; ``params`` maps a conv's position to (weight, bias).
    Returns (T, C_out) output spikes.
    """
    state = {}
    outputs = []
    for t in range(len(frames)):
        x = np.asarray(frames[t], dtype=np.float64)
        for idx, layer in enumerate(layers):
            if layer[0] == "conv":
                w, b = params[idx]
                x = conv2d_loops(x, w, b, layer[1], layer[2])
            elif layer[0] == "if":
                v = state.get(idx, np.zeros_like(x)) + x
                s = (v >= 1.0).astype(np.float64)
                v = np.where(s > 0, 0.0, v)
                state[idx] = np.maximum(v, -1.0)
                x = s
            elif layer[0] == "pool":
                x = sum_pool_loops(x, layer[1])
            elif layer[0] == "flatten":
                x = x.reshape(-1, 1, 1)
        outputs.append(x.reshape(-1))
    return np.array(outputs)


# ---------------------------------------------------------------------------
# readout


def filter_weights_loops(tau_mem, tau_syn, n):
    w = []
    for t in range(n):
        acc = 0.0
        for k in range(t + 1):
            acc += math.exp(-k / tau_syn) * math.exp(-(t - k) / tau_mem)
        w.append(acc)
    return np.array(w)


def apply_filter_loops(w, x):
    x = np.asarray(x, dtype=np.float64)
    T, C = x.shape
    y = np.zeros((T, C))
    for t in range(T):
        for c in range(C):
            for i in range(len(w)):
                if t - i >= 0:
                    y[t, c] += w[i] * x[t - i, c]
    return y


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_exhaustive(boxes, threshold):
    """Search every subset for the greedy fixed point.

    With boxes ranked by (-confidence, x_min, y_min), the greedy result is the
    unique subset S where a box is in S exactly when it overlaps no
    higher-ranked member of S above the threshold. Returns S in rank order.
    """
    ranked = sorted(boxes, key=lambda b: (-b[4], b[0], b[1]))
    n = len(ranked)
    # bit j of overlaps[i] is set when higher-ranked box j overlaps box i too much
    overlaps = [
        sum(1 << j for j in range(i) if box_iou(ranked[i], ranked[j]) > threshold)
        for i in range(n)
    ]
    found = []
    for subset in range(1 << n):
        if all(bool(subset >> i & 1) == (overlaps[i] & subset == 0) for i in range(n)):
            found.append([ranked[i] for i in range(n) if subset >> i & 1])
    assert len(found) == 1, "greedy fixed point must be unique"
    return found[0]


# ---------------------------------------------------------------------------
# mapping


def assign_exhaustive(options, n_cores):
    """All injective layer -> core maps consistent with ``options`` (list of sets)."""
    n = len(options)
    return [
        perm for perm in itertools.permutations(range(n_cores), n)
        if all(perm[i] in options[i] for i in range(n))
    ]
