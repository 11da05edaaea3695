import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rollgen.context import (
    HistoryContext, MemoryPlan, RollingHistory, TaskMode, build_history, interpolate_prompts, paper_plan,
    rope_indices, task_mode, token_budget, toy_plan, zero_out_history,
)
from rollgen.latent import DimensionError


@st.composite
def plans(draw):
    kernels = [tuple(draw(st.sampled_from([1, 2, 4])) for _ in range(3)) for _ in range(3)]
    lengths = tuple(k[0] * draw(st.integers(1, 3)) for k in kernels)
    lcm_h = int(np.lcm.reduce([k[1] for k in kernels]))
    lcm_w = int(np.lcm.reduce([k[2] for k in kernels]))
    return MemoryPlan(lengths, tuple(kernels), lcm_h * draw(st.integers(1, 3)), lcm_w * draw(st.integers(1, 3)))


def test_paper_budget():
    plan = paper_plan()
    short, mid, long_, total = token_budget(plan)
    assert plan.height * plan.width == 3840
    assert total == 2400 == Fraction(5, 8) * 3840
    assert (short, mid, long_) == (1920, 240, 240)
    base = MemoryPlan((16, 2, 2), ((1, 2, 2),) * 3, 48, 80)
    assert token_budget(base)[3] == 19200 == 5 * 3840
    assert token_budget(base)[3] / total == 8


@given(plans())
def test_budget_matches_patch_enumeration(plan):
    count = 0
    for n, (pt, ph, pw) in zip(plan.term_lengths, plan.kernels):
        cells = set()
        for t, i, j in itertools.product(range(n), range(plan.height), range(plan.width)):
            cells.add((t // pt, i // ph, j // pw))
        count += len(cells)
    assert token_budget(plan)[3] == count


def test_uncompressed_budget():
    plan = MemoryPlan((3, 2, 5), ((1, 1, 1),) * 3, 4, 6)
    assert token_budget(plan)[3] == 10 * 24


def test_plan_validation():
    with pytest.raises(ValueError):
        MemoryPlan((3, 2, 4), ((2, 2, 2), (1, 1, 1), (1, 1, 1)), 8, 8)
    with pytest.raises(ValueError):
        MemoryPlan((2, 2, 4), ((1, 3, 3), (1, 1, 1), (1, 1, 1)), 8, 8)
    with pytest.raises(ValueError):
        MemoryPlan((0, 2, 4), ((1, 1, 1),) * 3, 8, 8)


def _labeled(start, n, h=8, w=8):
    """Frames whose every entry equals global index + 1."""
    vals = np.arange(start, start + n, dtype=np.float32) + 1
    return np.broadcast_to(vals[None, None, :, None, None], (1, 1, n, h, w)).copy()


def test_sliding_window_oracle():
    plan = toy_plan()
    window = plan.window
    roll = RollingHistory(plan, channels=1)
    seen = []
    for sec in range(10):
        ctx = roll.context()
        # hand simulation: newest frames at the end, oldest slots zero, anchor once frame 0 left the window
        want = [0] * window
        tail = seen[-window:]
        want[window - len(tail):] = [i + 1 for i in tail]
        if len(seen) > window:
            want[0] = 1
        got = ctx.frames[0, 0, :, 0, 0].tolist()
        assert got == want, (sec, got, want)
        assert ctx.anchor_present == (len(seen) > window)
        np.testing.assert_array_equal(ctx.mask, np.array(want) == 0)
        roll.push(_labeled(len(seen), 3))
        seen.extend(range(len(seen), len(seen) + 3))


def test_anchor_after_100_frames():
    plan = toy_plan()
    first = _labeled(0, 1)
    frames = _labeled(0, 100)
    ctx = build_history(frames, first, plan)
    assert ctx.anchor_present and ctx.sources[0] == 0
    np.testing.assert_array_equal(ctx.frames[:, :, 0], first[:, :, 0])


def test_empty_history():
    ctx = build_history(None, None, toy_plan(), channels=4)
    assert ctx.frames.shape == (1, 4, 8, 8, 8) and not ctx.frames.any() and ctx.mask.all()
    assert task_mode(ctx) is TaskMode.T2V


def test_grid_mismatch():
    with pytest.raises(DimensionError):
        build_history(np.ones((1, 1, 2, 4, 4), dtype=np.float32), None, toy_plan())


def test_rolling_memory_bounded():
    plan = toy_plan()
    roll = RollingHistory(plan, channels=1)
    for i in range(50):
        roll.push(_labeled(3 * i, 3))
        assert len(roll._buf) <= plan.window
    assert roll.total == 150


def _ctx(nonzero_slots, window=8):
    f = np.zeros((1, 2, window, 4, 4), dtype=np.float32)
    for i in nonzero_slots:
        f[:, :, i] = 1.0
    return HistoryContext(f, False, ~np.isin(np.arange(window), nonzero_slots))


def test_task_modes():
    assert task_mode(_ctx([])) is TaskMode.T2V
    assert task_mode(_ctx([7])) is TaskMode.I2V
    assert task_mode(_ctx([6, 7])) is TaskMode.V2V
    assert task_mode(_ctx([0])) is TaskMode.V2V


def test_zero_out_degenerate(rng):
    ctx = _ctx([3, 5, 7])
    h, mode = zero_out_history(ctx, (1, 0, 0), rng)
    assert mode is TaskMode.T2V and not h.frames.any()
    h, mode = zero_out_history(ctx, (0, 0, 1), rng)
    assert mode is TaskMode.V2V and h is ctx
    h, mode = zero_out_history(ctx, (0, 1, 0), rng)
    assert mode is TaskMode.I2V and task_mode(h) is TaskMode.I2V


def test_zero_out_frequencies(rng):
    ctx = _ctx([3, 5, 7])
    counts = {m: 0 for m in TaskMode}
    n = 10_000
    for _ in range(n):
        counts[zero_out_history(ctx, (0.3, 0.3, 0.4), rng)[1]] += 1
    for m, p in zip(TaskMode, (0.3, 0.3, 0.4)):
        assert abs(counts[m] / n - p) < 0.02


def test_zero_out_deterministic():
    ctx = _ctx([3, 5, 7])
    a = [zero_out_history(ctx, rng=np.random.Generator(np.random.Philox(5)))[1] for _ in range(1)]
    b = [zero_out_history(ctx, rng=np.random.Generator(np.random.Philox(5)))[1] for _ in range(1)]
    assert a == b
    with pytest.raises(ValueError):
        zero_out_history(ctx, (0.5, 0.6, 0.1), np.random.default_rng(0))


def test_rope_paper_plan():
    hist, noisy = rope_indices(paper_plan(), 3)
    assert len(hist) == 7 and noisy.tolist() == [7, 8, 9]
    hist, noisy = rope_indices(paper_plan(), 3, "pre")
    assert len(hist) == 20 and noisy.tolist() == [20, 21, 22]
    with pytest.raises(ValueError):
        rope_indices(paper_plan(), 3, "other")


@given(plans(), st.integers(1, 6))
def test_rope_max_index(plan, t_noisy):
    hist, noisy = rope_indices(plan, t_noisy)
    assert noisy.max() == plan.hist_temporal_positions + t_noisy - 1
    assert hist.min() == 0 and noisy.min() == hist.max() + 1


def test_interpolation_examples(rng):
    e1, e2 = rng.standard_normal((2, 4, 16))
    two = interpolate_prompts(e1, e2, 2)
    np.testing.assert_array_equal(two[0], e1)
    np.testing.assert_array_equal(two[1], e2)
    np.testing.assert_allclose(interpolate_prompts(e1, e2, 3)[1], (e1 + e2) / 2, atol=1e-15)
    with pytest.raises(DimensionError):
        interpolate_prompts(e1, e2[:3], 3)
    with pytest.raises(ValueError):
        interpolate_prompts(e1, e2, 1)


@given(st.integers(2, 12), st.floats(-3, 3), st.integers(0, 2**31))
def test_interpolation_symmetric_and_affine(m, a, seed):
    r = np.random.default_rng(seed)
    e1, e2 = r.standard_normal((2, 3, 5))
    seq = interpolate_prompts(e1, e2, m)
    scaled = interpolate_prompts(a * e1, a * e2, m)
    for j in range(m):
        np.testing.assert_allclose(seq[j] + seq[m - 1 - j], e1 + e2, atol=1e-12)
        np.testing.assert_allclose(scaled[j], a * seq[j], atol=1e-12)
