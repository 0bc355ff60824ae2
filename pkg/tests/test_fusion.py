from __future__ import annotations

import numpy as np
import pytest

import oracles
from tumorpipe.fusion import (
    EnsembleWeights,
    FusionError,
    ProbStack,
    average_folds,
    decode,
    ensemble_weights,
    load_stack,
    normalize,
    one_hot,
    save_stack,
    staple_binary,
    staple_fuse,
    weighted_fuse,
)
from tumorpipe.taskspec import builtin_task
from tumorpipe.volio import Volume

PED = builtin_task("PED")
CODES = (0, 1, 2, 3, 4)


def random_stack(rng, shape=(5, 4, 3), codes=CODES) -> ProbStack:
    p = rng.random((len(codes), *shape))
    return ProbStack((p / p.sum(axis=0)).astype(np.float32), codes)


def test_weights_formula():
    w = ensemble_weights({"a": 1.0, "b": 2.0, "c": 3.0})
    assert w.raw == pytest.approx({"a": 5 / 6, "b": 4 / 6, "c": 3 / 6}, abs=1e-15)
    assert w.weights == pytest.approx({"a": 5 / 12, "b": 4 / 12, "c": 3 / 12}, abs=1e-15)
    eq = ensemble_weights({"a": 1.0, "b": 1.0, "c": 1.0})
    assert eq.weights == pytest.approx({k: 1 / 3 for k in "abc"})
    assert sum(ensemble_weights({"a": 1.0, "b": 2.0, "c": 3.0}, normalize=False).weights.values()) == pytest.approx(2)


def test_weights_order_reverses_F(rng):
    for _ in range(50):
        n = int(rng.integers(2, 7))
        F = {f"m{i}": float(rng.uniform(1, 5)) for i in range(n)}
        w = ensemble_weights(F)
        assert max(w.weights, key=w.weights.get) == min(F, key=F.get)
        assert sum(w.raw.values()) == pytest.approx(n - 1, abs=1e-12)
        assert sum(w.weights.values()) == pytest.approx(1, abs=1e-9)
        assert all(v >= 0 for v in w.weights.values())
        assert EnsembleWeights.from_json(w.to_json()) == w


def test_weights_errors():
    with pytest.raises(FusionError):
        ensemble_weights({"a": 1.0})
    with pytest.raises(FusionError):
        ensemble_weights({"a": 1.0, "b": 0.0})


def test_average_folds(rng):
    s = random_stack(rng)
    assert average_folds([s]) is s
    a = np.zeros((2, 1, 1, 1))
    a[:, 0, 0, 0] = (0.8, 0.2)
    b = np.zeros((2, 1, 1, 1))
    b[:, 0, 0, 0] = (0.4, 0.6)
    avg = average_folds([ProbStack(a, (0, 1)), ProbStack(b, (0, 1))])
    assert avg.probs[1, 0, 0, 0] == pytest.approx(0.4)
    five = average_folds([random_stack(rng) for _ in range(5)])
    np.testing.assert_allclose(five.probs.sum(axis=0), 1, atol=1e-6)
    with pytest.raises(FusionError):
        average_folds([s, random_stack(rng, shape=(5, 4, 4))])
    with pytest.raises(FusionError):
        average_folds([s, random_stack(rng, codes=(0, 1, 2, 3, 5))])


def test_normalize_zero_voxels_become_background():
    p = np.zeros((3, 1, 1, 2))
    p[1, 0, 0, 1] = 2.0
    out = normalize(p)
    assert out[:, 0, 0, 0].tolist() == [1, 0, 0] and out[:, 0, 0, 1].tolist() == [0, 1, 0]


def test_weighted_fuse(rng):
    s = random_stack(rng)
    same = weighted_fuse({"a": s, "b": s, "c": s}, ensemble_weights({"a": 1.0, "b": 2.0, "c": 3.0}))
    np.testing.assert_allclose(same.probs, s.probs, atol=1e-6)
    t = random_stack(rng)
    one = weighted_fuse({"a": s, "b": t}, EnsembleWeights({"a": 1.0, "b": 0.0}, {}, {}, True))
    np.testing.assert_allclose(one.probs, s.probs, atol=1e-7)

    stacks = {k: random_stack(rng) for k in ("m1", "m2", "m3")}
    w = EnsembleWeights({"m1": 0.295, "m2": 0.296, "m3": 0.409}, {}, {}, True)
    fused = weighted_fuse(stacks, w)
    for _ in range(20):
        c, x, y, z = (int(rng.integers(n)) for n in fused.probs.shape)
        want = sum(w.weights[k] * float(stacks[k].probs[c, x, y, z]) for k in stacks)
        assert float(fused.probs[c, x, y, z]) == pytest.approx(want, abs=1e-6)
    assert fused.probs.min() >= 0 and fused.probs.max() <= 1 + 1e-6
    np.testing.assert_allclose(fused.probs.sum(axis=0), 1, atol=1e-5)
    with pytest.raises(FusionError):
        weighted_fuse({"m1": stacks["m1"]}, w)


def test_decode(rng):
    lab = rng.choice(CODES, size=(6, 5, 4)).astype(np.uint8)
    v = Volume(lab)
    assert decode(one_hot(v, PED), PED) == v
    uniform = ProbStack(np.full((5, 3, 3, 3), 0.2, np.float32), CODES)
    assert not decode(uniform).data.any()
    # tie between two foreground classes goes to the lower code
    p = np.zeros((5, 1, 1, 1), np.float32)
    p[[3, 2], 0, 0, 0] = 0.5
    assert decode(ProbStack(p, CODES)).data[0, 0, 0] == 2
    s = random_stack(rng)
    got = decode(s).data
    for idx in np.ndindex(s.dims):
        col = [float(s.probs[(c, *idx)]) for c in range(5)]
        assert got[idx] == CODES[col.index(max(col))]


def test_fusing_copies_returns_decode(rng):
    s = random_stack(rng)
    fused = weighted_fuse({"a": s, "b": s}, ensemble_weights({"a": 1.0, "b": 4.0}))
    assert decode(fused) == decode(s)
    lab = decode(s)
    out, _ = staple_fuse([lab, lab, lab], PED)
    assert out == lab


def test_staple_unanimity_is_exact(rng):
    lab = Volume(rng.choice(CODES, size=(7, 6, 5), p=[0.6, 0.1, 0.1, 0.1, 0.1]).astype(np.uint8))
    out, traces = staple_fuse([lab] * 4, PED)
    assert out == lab
    assert all(t.converged for t in traces)


def test_staple_four_against_one_complement(rng):
    truth = rng.random((6, 6, 6)) < 0.4
    raters = np.stack([truth] * 4 + [~truth]).reshape(5, -1)
    post, _ = staple_binary(raters)
    np.testing.assert_array_equal(post > 0.5, truth.ravel())
    lab = Volume(rng.choice(CODES, size=(6, 6, 6)).astype(np.uint8))
    adversary = Volume(((lab.data + 1) % 5).astype(np.uint8))
    out, _ = staple_fuse([lab] * 4 + [adversary], PED)
    assert out == lab


def test_staple_two_disjoint_voxels_closed_form():
    # with p = q the two hypotheses balance exactly: posterior 1/2 = prior, and
    # the M-step lands on p = q = 1/2, a fixed point; 1/2 is not above threshold
    a = np.zeros((2, 1, 1), np.uint8)
    b = a.copy()
    a[0, 0, 0] = 1
    b[1, 0, 0] = 1
    post, trace = staple_binary(np.stack([a.ravel(), b.ravel()]))
    np.testing.assert_allclose(post, 0.5, atol=1e-12)
    assert trace.sensitivity == pytest.approx([0.5, 0.5]) and trace.specificity == pytest.approx([0.5, 0.5])
    out, _ = staple_fuse([Volume(a), Volume(b)], PED)
    assert not out.data.any()


def test_staple_matches_loop_oracle(rng):
    for _ in range(5):
        d = rng.random((4, 30)) < rng.uniform(0.1, 0.6, size=(4, 1))
        want = oracles.staple_binary(d, iters=6)
        got, _ = staple_binary(d, max_iters=6, tol=0.0)
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_staple_log_likelihood_non_decreasing(rng):
    for _ in range(20):
        truth = rng.random(200) < 0.3
        d = np.stack([truth ^ (rng.random(200) < rng.uniform(0, 0.3)) for _ in range(5)])
        _, trace = staple_binary(d, tol=0.0, max_iters=30)
        ll = np.array(trace.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))


def test_staple_absent_label_skipped(rng):
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[1:3, 1:3, 1:3] = 1
    out, traces = staple_fuse([Volume(lab), Volume(lab)], PED)
    assert [t.label for t in traces] == ["ET"]
    with pytest.raises(FusionError):
        staple_fuse([Volume(lab)], PED)
    with pytest.raises(FusionError):
        staple_fuse([Volume(lab), Volume(np.zeros((4, 4, 5), np.uint8))], PED)


def test_stack_round_trip(tmp_path, rng):
    folds = [random_stack(rng) for _ in range(2)]
    save_stack(folds, tmp_path / "m1" / "stack.json")
    back = load_stack(tmp_path / "m1" / "stack.json")
    assert len(back) == 2
    for a, b in zip(folds, back):
        assert a.class_codes == b.class_codes
        assert a.probs.tobytes() == b.probs.tobytes()
