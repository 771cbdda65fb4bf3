import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gaitsf.silhouette import (BOTTOM_BOUND, HEIGHT, LOWER_KERNEL, MIDDLE_BOUND, UPPER_BOUND,
                               UPPER_KERNEL, WIDTH, AugmentOp, SpecError, SynthSpec,
                               apply_augment, cloth_augment, dilate, erode, generate_dataset,
                               sample_augment_op)


def brute_dilate(x, k):
    """Pixel loop with explicit zero padding; anchor at k//2."""
    H, W = x.shape
    a = k // 2
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            hit = False
            for u in range(k):
                for v in range(k):
                    y, z = i - (u - a), j - (v - a)
                    if 0 <= y < H and 0 <= z < W and x[y, z]:
                        hit = True
            out[i, j] = hit
    return out


def brute_erode(x, k):
    H, W = x.shape
    a = k // 2
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            ok = True
            for u in range(k):
                for v in range(k):
                    y, z = i + (u - a), j + (v - a)
                    if not (0 <= y < H and 0 <= z < W and x[y, z]):
                        ok = False
            out[i, j] = ok
    return out


# ---------------------------------------------------------------- generation

def test_single_sequence_shape():
    seqs, man = generate_dataset(SynthSpec(n_subjects=1, conditions=("NM",), views=(90,),
                                           seqs_per_cell=1, n_frames=30))
    assert len(seqs) == 1 and len(man) == 1
    assert seqs[0].frames.shape == (30, HEIGHT, WIDTH)
    assert seqs[0].frames.dtype == bool


def test_manifest_count():
    seqs, man = generate_dataset(SynthSpec(n_subjects=2, conditions=("NM", "CL"),
                                           views=(0, 90, 180), seqs_per_cell=2, n_frames=4))
    assert len(seqs) == len(man) == 24
    assert len({r["seq_id"] for r in man.records}) == 24
    assert {"seq_id", "subject_id", "condition", "view_deg", "n_frames", "path"} <= set(
        man.records[0])


def test_same_seed_bit_identical():
    a, _ = generate_dataset(SynthSpec(n_subjects=2, n_frames=5, seed=9))
    b, _ = generate_dataset(SynthSpec(n_subjects=2, n_frames=5, seed=9))
    c, _ = generate_dataset(SynthSpec(n_subjects=2, n_frames=5, seed=10))
    assert all(np.array_equal(x.frames, y.frames) and x.seq_id == y.seq_id for x, y in zip(a, b))
    assert not all(np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def test_every_frame_has_foreground(small_data):
    seqs, _ = small_data
    for s in seqs:
        assert s.frames.reshape(s.n_frames, -1).any(axis=1).all()


def test_cl_has_more_foreground_than_nm(small_data):
    seqs, _ = small_data
    by = {(s.subject_id, s.condition, s.view_deg, s.seq_index): s for s in seqs}
    for (sid, cond, v, k), s in by.items():
        if cond == "NM":
            cl = by[(sid, "CL", v, k)]
            assert cl.frames.sum() > s.frames.sum()
            # the coat covers the walker: CL is a superset of NM
            assert np.all(cl.frames >= s.frames)


def test_frontal_views_move_less_than_lateral(small_data):
    seqs, _ = small_data

    def motion(s):
        return np.mean(s.frames.std(axis=0))

    by_view = {}
    for s in seqs:
        by_view.setdefault(s.view_deg, []).append(motion(s))
    assert np.mean(by_view[0]) < np.mean(by_view[90])
    assert np.mean(by_view[180]) < np.mean(by_view[90])


@pytest.mark.parametrize("field,value", [("n_subjects", 0), ("seqs_per_cell", 0),
                                         ("n_frames", 0), ("conditions", ("XX",)),
                                         ("views", (200,)), ("coat_delta", (0.0, 1.0)),
                                         ("stride", (5.0, 1.0))])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(SpecError, match=field):
        generate_dataset(SynthSpec(**{field: value}))


# ---------------------------------------------------------------- morphology

def test_dilate_single_pixel():
    x = np.zeros((HEIGHT, WIDTH), bool)
    x[10, 10] = True
    y = dilate(x, 3)
    expect = np.zeros_like(x)
    expect[9:12, 9:12] = True
    assert np.array_equal(y, expect)


def test_zero_frame_stays_zero():
    x = np.zeros((HEIGHT, WIDTH), bool)
    assert not dilate(x, 5).any() and not erode(x, 2).any()


def test_erode_block_to_centre():
    x = np.zeros((16, 16), bool)
    x[4:7, 4:7] = True
    expect = np.zeros_like(x)
    expect[5, 5] = True
    assert np.array_equal(erode(x, 3), expect)


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_erode_all_on_zero_padding(k):
    x = np.ones((16, 16), bool)
    assert np.array_equal(erode(x, k), brute_erode(x, k))
    a = k // 2
    inner = erode(x, k)[a:16 - (k - 1 - a), a:16 - (k - 1 - a)]
    assert inner.all()


def test_empty_kernel_rejected():
    with pytest.raises(SpecError):
        dilate(np.zeros((4, 4), bool), 0)
    with pytest.raises(SpecError):
        erode(np.zeros((4, 4), bool), np.zeros((3, 3), bool))


def test_bad_row_bounds_rejected():
    with pytest.raises(SpecError):
        dilate(np.zeros((8, 8), bool), 3, (5, 5))
    with pytest.raises(SpecError):
        erode(np.zeros((8, 8), bool), 3, (0, 9))


frames16 = arrays(bool, (16, 16), elements=st.booleans())


@given(frames16, st.integers(2, 5))
def test_dilate_erode_match_brute_force(x, k):
    assert np.array_equal(dilate(x, k), brute_dilate(x, k))
    assert np.array_equal(erode(x, k), brute_erode(x, k))


@given(frames16, st.sampled_from([3, 5]))
def test_erosion_is_dual_of_dilation(x, k):
    # symmetric kernels: dilate(X) misses p  <=>  erode(not X) keeps p, away from the padded border
    inner = (slice(k, -k), slice(k, -k))
    assert np.array_equal((~dilate(x, k))[inner], erode(~x, k)[inner])


@given(arrays(bool, (12, 12), elements=st.booleans()), st.integers(2, 5))
def test_closing_contains_original(x, k):
    # zero padding eats the frame border, so embed in an empty margin
    big = np.zeros((12 + 2 * k, 12 + 2 * k), bool)
    big[k:-k, k:-k] = x
    closed = erode(dilate(big, k), k)
    assert np.all(closed >= big)


def test_extensive_and_anti_extensive_within_rows():
    r = np.random.default_rng(0)
    for _ in range(1000):
        x = r.random((HEIGHT, WIDTH)) < r.uniform(0.05, 0.9)
        k = int(r.integers(2, 7))
        r0 = int(r.integers(0, HEIGHT - 1))
        r1 = int(r.integers(r0 + 1, HEIGHT + 1))
        d = dilate(x, k, (r0, r1))
        e = erode(x, k, (r0, r1))
        assert np.all(d[r0:r1] >= x[r0:r1]) and np.all(e[r0:r1] <= x[r0:r1])
        outside = np.ones(HEIGHT, bool)
        outside[r0:r1] = False
        assert np.array_equal(d[outside], x[outside])
        assert np.array_equal(e[outside], x[outside])


def test_stack_equals_per_frame():
    r = np.random.default_rng(1)
    x = r.random((5, HEIGHT, WIDTH)) < 0.3
    assert np.array_equal(dilate(x, 3, (10, 40)), np.stack([dilate(f, 3, (10, 40)) for f in x]))
    assert np.array_equal(erode(x, 2), np.stack([erode(f, 2) for f in x]))


# ---------------------------------------------------------------- augmentation

def _seq(small_data, cond="NM", view=90):
    seqs, _ = small_data
    return next(s for s in seqs if s.condition == cond and s.view_deg == view)


def test_dilate_upper_touches_only_upper_rows(small_data):
    s = _seq(small_data)
    out = apply_augment(s, AugmentOp("dilate", "upper", 16, 40, 62))
    f, g = s.frames, out.frames
    assert np.array_equal(g[:, :16], f[:, :16])
    assert np.array_equal(g[:, 40:], f[:, 40:])
    assert np.array_equal(g[:, 16:40], dilate(f, UPPER_KERNEL, (16, 40))[:, 16:40])
    assert g.sum() > f.sum()


def test_erode_bottom_touches_only_lower_rows(small_data):
    s = _seq(small_data)
    out = apply_augment(s, AugmentOp("erode", "bottom", 16, 40, 62))
    f, g = s.frames, out.frames
    assert np.array_equal(g[:, :40], f[:, :40])
    assert np.array_equal(g[:, 62:], f[:, 62:])
    assert np.array_equal(g[:, 40:62], erode(f, LOWER_KERNEL, (40, 62))[:, 40:62])


def test_whole_is_upper_then_bottom(small_data):
    s = _seq(small_data)
    whole = apply_augment(s, AugmentOp("dilate", "whole", 15, 39, 61)).frames
    step = dilate(dilate(s.frames, UPPER_KERNEL, (15, 39)), LOWER_KERNEL, (39, 61))
    assert np.array_equal(whole, step)


class _StubRng:
    """Feeds fixed answers to random()/integers() in call order."""

    def __init__(self, randoms, ints):
        self.randoms, self.ints = list(randoms), list(ints)

    def random(self):
        return self.randoms.pop(0)

    def integers(self, lo, hi=None):
        return self.ints.pop(0)


def test_stub_forces_type_and_bounds():
    op = sample_augment_op(_StubRng([0.9], [0, 16, 40, 62]))
    assert (op.op, op.region, op.upper, op.middle, op.bottom) == ("dilate", "upper", 16, 40, 62)
    op = sample_augment_op(_StubRng([0.1], [1, 14, 38, 60]))
    assert (op.op, op.region) == ("erode", "bottom")


def test_six_types_uniform_and_bounds_in_range():
    r = np.random.default_rng(0)
    counts = {}
    n = 6000
    for _ in range(n):
        op = sample_augment_op(r)
        counts[(op.op, op.region)] = counts.get((op.op, op.region), 0) + 1
        assert UPPER_BOUND[0] <= op.upper <= UPPER_BOUND[1]
        assert MIDDLE_BOUND[0] <= op.middle <= MIDDLE_BOUND[1]
        assert BOTTOM_BOUND[0] <= op.bottom <= BOTTOM_BOUND[1]
    assert len(counts) == 6
    sd = np.sqrt(n * (1 / 6) * (5 / 6))
    for c in counts.values():
        assert abs(c - n / 6) < 4 * sd


def test_identity_probability_knob():
    r = np.random.default_rng(0)
    ops = [sample_augment_op(r, p_identity=1.0) for _ in range(20)]
    assert all(o.op == "identity" and o.segments() == [] for o in ops)


def test_cloth_augment_deterministic_and_keeps_metadata(small_data):
    s = _seq(small_data, "CL", 45)
    a = cloth_augment(s, np.random.default_rng(5))
    b = cloth_augment(s, np.random.default_rng(5))
    assert np.array_equal(a.frames, b.frames)
    assert (a.seq_id, a.subject_id, a.condition, a.view_deg, a.seq_index) == (
        s.seq_id, s.subject_id, s.condition, s.view_deg, s.seq_index)
    assert a.n_frames == s.n_frames


def test_augment_never_mutates_input(small_data):
    s = _seq(small_data)
    before = s.frames.copy()
    r = np.random.default_rng(2)
    for _ in range(12):
        cloth_augment(s, r)
    assert np.array_equal(s.frames, before)


@pytest.mark.parametrize("kw", [dict(op="grow"), dict(region="middle"),
                                dict(upper=40, middle=40), dict(upper_kernel=1),
                                dict(lower_kernel=10)])
def test_augment_op_validation(kw):
    base = dict(op="dilate", region="upper", upper=16, middle=40, bottom=62)
    base.update(kw)
    with pytest.raises(SpecError):
        AugmentOp(**base)
