import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import convolve2d

from morphopc.litho import LithoModel, print_band
from morphopc.metrics import (
    EpeConfig,
    EpeSample,
    MetricsRecord,
    Rectangle,
    epe_samples,
    epe_violations,
    evaluate,
    l2_error,
    pvb,
    shot_count,
)


def xor_popcount(a, b):
    pa = np.packbits(np.asarray(a, bool).ravel())
    pb = np.packbits(np.asarray(b, bool).ravel())
    return sum(bin(int(x) ^ int(y)).count("1") for x, y in zip(pa, pb))


def check_exact_cover(mask, rects):
    cover = np.zeros(mask.shape, int)
    for r in rects:
        assert r.x0 < r.x1 and r.y0 < r.y1
        cover[r.y0 : r.y1, r.x0 : r.x1] += 1
    assert cover.max(initial=0) <= 1, "rectangles overlap"
    np.testing.assert_array_equal(cover.astype(bool), mask.astype(bool))


def line_cracks(line):
    p = np.concatenate(([0], line.astype(int), [0]))
    return [e for e in range(len(line) + 1) if p[e] != p[e + 1]]


def epe_oracle(z, t, cfg):
    """Full-line scan: nearest printed edge anywhere on the normal line."""
    count = 0
    for s in epe_samples(t, cfg):
        line = z[:, s.pos] if s.axis == 0 else z[s.pos, :]
        cr = line_cracks(line)
        d = min((abs(e - s.crack) for e in cr), default=np.inf)
        count += d > cfg.threshold
    return count


def square(n, x0, y0, w, h=None):
    a = np.zeros((n, n), np.uint8)
    a[y0 : y0 + (h or w), x0 : x0 + w] = 1
    return a


# ------------------------------------------------------------------ l2


def test_l2_examples(rng):
    z = (rng.random((4, 4)) > 0.5).astype(np.uint8)
    assert l2_error(z, z) == 0
    assert l2_error(1 - z, z) == 16
    with pytest.raises(ValueError):
        l2_error(np.zeros((3, 3)), np.zeros((3, 4)))


def test_l2_matches_xor_popcount(rng):
    for _ in range(100):
        a = rng.random((33, 29)) > rng.random()
        b = rng.random((33, 29)) > rng.random()
        assert l2_error(a, b) == xor_popcount(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_l2_symmetric_and_triangle(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.random((3, 12, 12)) > 0.5)
    assert l2_error(a, b) == l2_error(b, a)
    assert l2_error(a, c) <= l2_error(a, b) + l2_error(b, c)
    assert (l2_error(a, b) == 0) == np.array_equal(a, b)


# ------------------------------------------------------------------ shots


def test_shot_examples():
    assert shot_count(np.zeros((8, 8)))[0] == 0
    n, rects = shot_count(square(16, 3, 4, 5, 7))
    assert n == 1 and rects == [Rectangle(3, 4, 8, 11)]
    L = np.zeros((16, 16), np.uint8)
    L[2:12, 2:5] = 1
    L[9:12, 2:10] = 1
    n, rects = shot_count(L)
    assert n == 2
    check_exact_cover(L, rects)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_shots_k_separated_rectangles(seed, k):
    r = np.random.default_rng(seed)
    m = np.zeros((60, 60), np.uint8)
    placed = []
    for _ in range(400):
        if len(placed) == k:
            break
        x0, y0 = r.integers(0, 55, 2)
        w, h = r.integers(1, 12, 2)
        x1, y1 = min(x0 + w, 60), min(y0 + h, 60)
        # keep a 1-px gap so rectangles never touch
        if m[max(y0 - 1, 0) : y1 + 1, max(x0 - 1, 0) : x1 + 1].any():
            continue
        m[y0:y1, x0:x1] = 1
        placed.append((x0, y0, x1, y1))
    n, rects = shot_count(m)
    assert n == len(placed)
    check_exact_cover(m, rects)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_shots_exact_cover_random(seed, p):
    m = (np.random.default_rng(seed).random((20, 23)) < p).astype(np.uint8)
    n, rects = shot_count(m)
    check_exact_cover(m, rects)
    assert n == len(rects) <= m.sum()


# ------------------------------------------------------------------ pvb


def test_pvb_examples():
    z = square(16, 3, 3, 10)
    assert pvb(z, z) == 0
    assert pvb(square(16, 4, 4, 8), square(16, 3, 3, 10)) == 36
    with pytest.raises(ValueError, match="not contained"):
        pvb(square(16, 0, 0, 5), square(16, 6, 6, 5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pvb_nested_pairs(seed):
    r = np.random.default_rng(seed)
    hi = r.random((16, 16)) > 0.4
    lo = hi & (r.random((16, 16)) > 0.5)
    assert pvb(lo, hi) == xor_popcount(lo, hi)
    bigger = hi | (r.random((16, 16)) > 0.8)
    assert pvb(lo, bigger) >= pvb(lo, hi)


# ------------------------------------------------------------------ EPE


CFG = EpeConfig(spacing=10, threshold=4, margin=0)


def test_epe_identical_is_zero():
    t = square(64, 12, 12, 40)
    assert epe_violations(t, t, CFG) == 0
    assert epe_violations(np.zeros((8, 8)), np.zeros((8, 8)), CFG) == 0


def test_epe_sites_on_square():
    t = square(64, 12, 12, 40)
    sites = epe_samples(t, CFG)
    assert len(sites) == 16
    top = [s.pos for s in sites if s.axis == 0 and s.crack == 12]
    assert top == [17, 27, 37, 47]
    assert EpeSample(1, 52, 17) in sites


@pytest.mark.parametrize(
    "dx,dy,expect_zero",
    [(5, 0, False), (3, 0, True), (0, 5, False), (0, -3, True), (-5, 0, False), (4, 0, True), (0, 4, True), (-4, -4, True), (5, 5, False), (-5, 3, False)],
)
def test_epe_shift_fixtures(dx, dy, expect_zero):
    t = square(80, 20, 20, 40)
    z = np.roll(t, (dy, dx), axis=(0, 1))
    got = epe_violations(z, t, CFG)
    assert got == epe_oracle(z, t, CFG)
    assert (got == 0) == expect_zero


def test_epe_shift_by_threshold_plus_one_hits_leading_edges():
    t = square(80, 20, 20, 40)
    z = np.roll(t, (0, CFG.threshold + 1), axis=(0, 1))
    sites = epe_samples(t, CFG)
    vertical = [s for s in sites if s.axis == 1]
    assert epe_violations(z, t, CFG) >= len(vertical)


def test_epe_uniform_erosion_below_threshold():
    t = square(80, 20, 20, 40)
    d = CFG.threshold - 1
    z = square(80, 20 + d, 20 + d, 40 - 2 * d)
    assert epe_violations(z, t, CFG) == 0
    d = CFG.threshold + 1
    z = square(80, 20 + d, 20 + d, 40 - 2 * d)
    assert epe_violations(z, t, CFG) == len(epe_samples(t, CFG))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_epe_matches_oracle_random(seed):
    r = np.random.default_rng(seed)
    t = np.zeros((64, 64), np.uint8)
    for _ in range(3):
        x0, y0 = r.integers(4, 40, 2)
        w, h = r.integers(6, 20, 2)
        t[y0 : y0 + h, x0 : x0 + w] = 1
    z = t.copy()
    for _ in range(4):
        x0, y0 = r.integers(0, 56, 2)
        z[y0 : y0 + r.integers(1, 9), x0 : x0 + r.integers(1, 9)] ^= 1
    assert epe_violations(z, t, CFG) == epe_oracle(z, t, CFG)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-4, 4), st.integers(-4, 4))
def test_epe_translation_invariant(seed, dy, dx):
    r = np.random.default_rng(seed)
    t = np.zeros((64, 64), np.uint8)
    t[20:44, 22:34] = 1
    z = t.copy()
    z[r.integers(18, 40) :, 20:46] = 0
    cfg = EpeConfig(spacing=10, threshold=4, margin=8)
    base = epe_violations(z, t, cfg)
    moved = epe_violations(np.roll(z, (dy, dx), (0, 1)), np.roll(t, (dy, dx), (0, 1)), cfg)
    assert base == moved


def test_epe_margin_drops_border_sites():
    t = square(64, 0, 20, 30, 20)
    near = EpeConfig(spacing=10, threshold=4, margin=8)
    assert all(s.crack >= 8 and s.pos >= 8 for s in epe_samples(t, near))
    assert len(epe_samples(t, near)) < len(epe_samples(t, CFG))


def test_epe_config_scaling():
    assert EpeConfig.for_pitch(1.0) == EpeConfig(40, 15, 8)
    assert EpeConfig.for_pitch(4.0) == EpeConfig(10, 4, 8)
    with pytest.raises(ValueError):
        EpeConfig(spacing=0)


# ------------------------------------------------------------------ evaluate


@pytest.fixture(scope="module")
def model():
    return LithoModel()


def test_evaluate_self_consistent_target(model):
    m = square(64, 16, 16, 32)
    zt = print_band(m[None, None].astype(float), model)[1][0, 0]
    rec = evaluate(m, zt, model)
    assert rec.l2 == 0 and rec.epe_violations == 0


def test_evaluate_zero_mask(model):
    zt = square(64, 16, 16, 32)
    rec = evaluate(np.zeros((64, 64)), zt, model)
    assert rec.l2 == zt.sum() and rec.shots == 0 and rec.pvb == 0


def test_evaluate_matches_scripted_pipeline(model):
    m = np.zeros((64, 64), np.uint8)
    m[10:50, 14:26] = 1
    m[30:42, 26:54] = 1
    zt = np.zeros((64, 64), np.uint8)
    zt[12:48, 16:24] = 1
    zt[32:40, 24:52] = 1
    k = model.kernels[0]
    z = {d: (d * convolve2d(m.astype(float), k, mode="same") ** 2 >= model.threshold) for d in model.doses}
    cfg = EpeConfig.for_pitch(model.pitch)
    rec = evaluate(m, zt, model, cfg)
    expect = MetricsRecord(
        l2=xor_popcount(z[1.0], zt),
        epe_violations=epe_oracle(z[1.0].astype(np.uint8), zt, cfg),
        pvb=int(np.sum(z[model.doses[2]] & ~z[model.doses[0]])),
        shots=2,
    )
    assert rec == expect
    assert rec.as_dict() == {"l2": expect.l2, "epe_violations": expect.epe_violations, "pvb": expect.pvb, "shots": 2}
