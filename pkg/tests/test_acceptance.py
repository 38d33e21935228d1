"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

A summary line per criterion is printed at the end of the pytest run.
"""

import time

import numpy as np
import pytest
import torch

from pupiltrack import hardware
from pupiltrack.events import prepare_recording
from pupiltrack.learning import TrainConfig, evaluate, train
from pupiltrack.pipeline import matched_fixed_window, sequences, split_recording
from pupiltrack.readout import Readout, apply_filter, build_filter, nms, target_grid
from pupiltrack.slicing import SliceConfig, slice_dynamic, slice_fixed
from pupiltrack.snn import SpikingNet, count_macs, count_params, format_trace, if_step, reduced_config, retina_default
from pupiltrack.synth import generate, golden_config

from oracles import apply_filter_loops, filter_weights_loops, nms_exhaustive, reference_slice, scalar_if
from test_learning import non_spiking_loss
from test_readout import random_boxes
from test_slicing import random_recording
from test_snn import fused_forward, random_fusion_case, unfused_forward


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start

    def check(self, detail):
        detail(f"{self.elapsed:.2f}s of {self.seconds}s")
        assert self.elapsed < self.seconds


# -------------------------------------------------------------------- complexity and memory


@pytest.mark.criterion(1, "parameter count of the full network")
def test_c01_parameter_count(detail):
    with Budget(1) as b:
        n = count_params(retina_default())
    detail(f"params={n:,}")
    assert 62_000 <= n <= 64_500
    b.check(detail)


@pytest.mark.criterion(2, "MAC count within 25% of 3.03M")
def test_c02_mac_count(detail):
    with Budget(1) as b:
        net = retina_default()
        macs = count_macs(net)
        trace = format_trace(net)
    print(trace)
    print(f"total MACs: {macs:,}")
    detail(f"macs={macs:,} ({macs / 3.03e6 - 1:+.1%})")
    assert abs(macs - 3.03e6) <= 0.25 * 3.03e6
    b.check(detail)


@pytest.mark.criterion(3, "memory table: layer 1 kernel 0.78 Ki, layer 2 kernel 9.00 Ki / neuron 64 Ki")
def test_c03_memory_table(detail):
    with Budget(1) as b:
        fps = hardware.layer_footprints(retina_default())
        verdicts = hardware.validate_against_table(fps)
    for v in verdicts:
        print(f"{v.name}: kernel={v.kernel_exact_ki:.2f} Ki (addressed {v.kernel_ki:.2f}) neuron={v.neuron_ki:.2f} Ki"
              f" reference=({v.printed_nm}, {v.printed_kmt}) -> {v.verdict}")
    l1, l2 = fps[0], fps[1]
    detail(f"layer1 kernel={l1.exact_kernel_ki:.2f} neuron={l1.neuron_ki:.2f} [{verdicts[0].verdict}]; "
           f"layer2 kernel={l2.exact_kernel_ki:.2f} neuron={l2.neuron_ki:.2f} [{verdicts[1].verdict}]")
    b.check(detail)
    assert round(l1.exact_kernel_ki, 2) == 0.78
    assert round(l2.exact_kernel_ki, 2) == 9.00
    assert verdicts[0].verdict == hardware.MATCH_SWAPPED
    assert round(l2.neuron_ki, 2) == 64.00
    assert verdicts[1].verdict == hardware.MATCH_SWAPPED


@pytest.mark.criterion(4, "core compatibility and a feasible assignment")
def test_c04_core_compatibility(detail):
    with Budget(1) as b:
        fps = hardware.layer_footprints(retina_default())
        compat = [hardware.compatible_cores(fp) for fp in fps]
        mapping = hardware.assign_layers(fps)
    all_rows = [i for i, row in enumerate(hardware.PRINTED_TABLE) if row[2] is None]
    all_ok = all(compat[i] == frozenset(range(9)) for i in all_rows)
    detail(f"layer2 cores={sorted(compat[1])}; 'all' rows {'ok' if all_ok else 'differ'}; "
           f"feasible={mapping.feasible}")
    b.check(detail)
    assert mapping.feasible and len(set(mapping.assignment.values())) == 8
    assert all_ok
    assert compat[1] == frozenset({0, 1, 2})


# -------------------------------------------------------------------- slicing


def _slicing_corpus():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        rec = random_recording(rng)
        yield rec, int(rng.integers(1, 12)), int(rng.integers(1, 10)), 8
    for _ in range(100):
        rec = random_recording(rng, size=16, max_events=2000)
        yield rec, int(rng.integers(1, 60)), int(rng.integers(1, 12)), 16


@pytest.mark.criterion(5, "dynamic slicing exactness against the line-by-line oracle")
def test_c05_dynamic_slicing_exact(detail):
    streams = bins = mismatched = wrong_count = 0
    with Budget(30) as b:
        for rec, n, T, size in _slicing_corpus():
            seq = slice_dynamic(rec, SliceConfig.dynamic(n, num_bins=T, height=size, width=size))
            s = rec.stream
            want = reference_slice(s.t, s.x, s.y, s.p, rec.labels.t[-1], n, T, size, size)
            streams += 1
            mismatched += not np.array_equal(seq.frames, want)
            real = seq.active_pixels()[seq.padded_bins:]
            bins += real.size
            wrong_count += int(np.sum(real != n))
    detail(f"{streams} streams, {bins} real bins, {mismatched} tensor mismatches, {wrong_count} bins != N")
    assert streams >= 1000 and mismatched == 0 and wrong_count == 0
    b.check(detail)


@pytest.mark.criterion(6, "one active polarity per pixel")
def test_c06_channel_exclusivity(detail):
    violations = checked = 0
    with Budget(30) as b:
        for rec, n, T, size in _slicing_corpus():
            for seq in (slice_dynamic(rec, SliceConfig.dynamic(n, num_bins=T, height=size, width=size)),
                        slice_fixed(rec, SliceConfig.fixed(1 + n * 3, num_bins=T, height=size, width=size))):
                violations += int(np.sum(seq.frames[:, 0] & seq.frames[:, 1]))
                checked += 1
    detail(f"{checked} sequences, {violations} violations")
    assert violations == 0
    b.check(detail)


# -------------------------------------------------------------------- filter, neuron, fusion, NMS


@pytest.mark.criterion(7, "temporal filter weights, application and linearity")
def test_c07_filter(detail):
    rng = np.random.default_rng(7)
    with Budget(5) as b:
        f = build_filter(5, 5, 20)
        want = filter_weights_loops(5, 5, 20)
        w_err = float(np.max(np.abs(f.weights - want) / np.abs(want)))
        a_err = lin_err = 0.0
        for _ in range(50):
            x = rng.normal(size=(int(rng.integers(1, 80)), 6))
            z = rng.normal(size=x.shape)
            got, ref = apply_filter(f, x), apply_filter_loops(f.weights, x)
            a_err = max(a_err, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300))))
            a, c = rng.normal(size=2)
            lhs = apply_filter(f, a * x + c * z)
            rhs = a * got + c * apply_filter(f, z)
            lin_err = max(lin_err, float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1.0))))
    detail(f"weights rel={w_err:.1e}, apply rel={a_err:.1e}, linearity={lin_err:.1e}")
    assert w_err <= 1e-12 and a_err <= 1e-12 and lin_err <= 1e-10
    b.check(detail)


@pytest.mark.criterion(8, "IF neuron dynamics and clamp")
def test_c08_if_dynamics(detail):
    rng = np.random.default_rng(8)
    with Budget(5) as b:
        mismatches, counts = 0, {}
        for c in (0.1, 0.25, 0.4, 0.7, 0.99):
            want, _ = scalar_if([c] * 1000)
            v, got = 0.0, []
            for _ in range(1000):
                s, v = if_step(v, c)
                got.append(int(s))
            mismatches += sum(a != b_ for a, b_ in zip(got, want))
            counts[c] = sum(got)
        clamp_violations = 0
        v = np.zeros(256)
        for _ in range(2000):
            _, v = if_step(v, rng.normal(0, 2, size=256))
            clamp_violations += int(np.sum(v < -1.0) + np.sum(v >= 1.0))
    detail(f"spike mismatches={mismatches}, counts={counts}, clamp violations={clamp_violations}")
    assert mismatches == 0 and clamp_violations == 0
    b.check(detail)


@pytest.mark.criterion(9, "batch-norm fusion over 100 random layers")
def test_c09_batchnorm_fusion(detail):
    rng = np.random.default_rng(9)
    worst = 0.0
    with Budget(5) as b:
        for _ in range(100):
            case = random_fusion_case(rng)
            a, f = unfused_forward(*case), fused_forward(*case)
            worst = max(worst, float(torch.max(torch.abs(a - f)) / torch.max(torch.abs(a))))
    detail(f"worst relative deviation={worst:.1e}")
    assert worst <= 1e-5
    b.check(detail)


@pytest.mark.criterion(10, "greedy NMS equals exhaustive search")
def test_c10_nms(detail):
    rng = np.random.default_rng(10)
    disagreements = 0
    with Budget(30) as b:
        for _ in range(10_000):
            boxes = random_boxes(rng, int(rng.integers(1, 7)))
            thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, rng.random()]))
            disagreements += nms(boxes, thr) != nms_exhaustive(boxes, thr)
    detail(f"10000 trials, {disagreements} disagreements")
    assert disagreements == 0
    b.check(detail)


@pytest.mark.criterion(11, "gradient check of the non-spiking path")
def test_c11_gradient_check(detail):
    rng = np.random.default_rng(11)
    dt = torch.float64
    worst, checked = 0.0, 0
    with Budget(60) as b:
        params = [
            torch.tensor(rng.normal(0, 0.1, size=(160, 2, 3, 3)), dtype=dt, requires_grad=True),
            torch.tensor(rng.uniform(0.5, 1.5, 160), dtype=dt, requires_grad=True),
            torch.tensor(rng.normal(0, 0.1, 160), dtype=dt, requires_grad=True),
            torch.tensor(rng.normal(0, 0.1, 160), dtype=dt, requires_grad=True),
            torch.tensor(rng.uniform(0.5, 2.0, 160), dtype=dt, requires_grad=True),
        ]
        x = torch.tensor((rng.random((2, 6, 2, 3, 3)) < 0.5).astype(float), dtype=dt)
        target, mask = target_grid(rng.uniform(5, 59, size=(12, 2)))
        target = torch.tensor(target.reshape(2, 6, 4, 4, 2, 5), dtype=dt)
        mask = torch.tensor(mask.reshape(2, 6, 4, 4), dtype=dt)
        readout = Readout(build_filter())
        grads = torch.autograd.grad(non_spiking_loss(params, x, target, mask, readout), params)
        h = 1e-6
        for k, g in enumerate(grads):
            for idx in rng.choice(params[k].numel(), size=20, replace=False):
                plus = [q.detach().clone() for q in params]
                minus = [q.detach().clone() for q in params]
                plus[k].reshape(-1)[idx] += h
                minus[k].reshape(-1)[idx] -= h
                fd = float((non_spiking_loss(plus, x, target, mask, readout)
                            - non_spiking_loss(minus, x, target, mask, readout)) / (2 * h))
                an = float(g.reshape(-1)[idx])
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-8))
                checked += 1
    detail(f"{checked} entries, worst relative error={worst:.1e}")
    assert worst <= 1e-5
    b.check(detail)


# -------------------------------------------------------------------- desk-scale training


ITERATIONS = 300


@pytest.fixture(scope="module")
def desk_model():
    torch.set_num_threads(1)
    start = time.perf_counter()
    rec = prepare_recording(generate(golden_config()))
    slice_cfg = SliceConfig.dynamic(20)
    split = split_recording(rec, slice_cfg, 0.2)
    net = SpikingNet(reduced_config(), seed=0)
    result = train(net, split.train, TrainConfig(iterations=ITERATIONS, batch=16, sequence_length=64, seed=0))
    ev = evaluate(net, split.heldout)
    return dict(rec=rec, split=split, net=net, result=result, evaluation=ev,
                elapsed=time.perf_counter() - start, slice_cfg=slice_cfg)


@pytest.mark.slow
@pytest.mark.criterion(12, "desk-scale training reaches < 8 px on held-out data")
def test_c12_desk_training(desk_model, detail):
    losses = desk_model["result"].losses
    smooth = np.convolve(losses[:100], np.ones(10) / 10, mode="valid")
    slope = np.polyfit(np.arange(smooth.size), smooth, 1)[0]
    ev = desk_model["evaluation"]
    split = desk_model["split"]
    detail(f"{ITERATIONS} iterations, {len(split.train)} train / {len(split.heldout)} held-out sequences, "
           f"held-out error {ev.mean:.2f} +/- {ev.std:.2f} px, smoothed loss {smooth[0]:.2f} -> {smooth[-1]:.2f}, "
           f"{desk_model['elapsed']:.0f}s")
    assert ev.mean < 8.0
    assert slope < 0 and smooth[-1] < smooth[0]
    assert desk_model["elapsed"] < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(13, "first-layer firing rate: dynamic <= matched fixed window")
def test_c13_firing_rate_profile(desk_model, detail):
    rec, net = desk_model["rec"], desk_model["net"]
    fixed = matched_fixed_window(rec, desk_model["slice_cfg"].n_events, 64)
    fixed_data = sequences(rec, fixed)
    active = fixed_data.frames.reshape(*fixed_data.frames.shape[:2], -1).any(axis=-1)
    # mean pixel count over non-empty fixed bins, then the dynamic N that matches it
    per_bin = (fixed_data.frames[:, :, 0] | fixed_data.frames[:, :, 1]).reshape(*active.shape, -1).sum(-1)
    n_matched = max(1, int(round(per_bin[active].mean())))
    dyn_data = sequences(rec, SliceConfig.dynamic(n_matched))
    rate_fixed = evaluate(net, fixed_data).firing_rates
    rate_dyn = evaluate(net, dyn_data).firing_rates
    print("layer  dynamic  fixed")
    for i, (a, c) in enumerate(zip(rate_dyn, rate_fixed)):
        print(f"IF {i + 1}  {a:.5f}  {c:.5f}")
    detail(f"fixed dt={fixed.dt_us}us, N={n_matched}, first layer dynamic={rate_dyn[0]:.4f} fixed={rate_fixed[0]:.4f}")
    assert rate_dyn[0] <= rate_fixed[0]
