import itertools
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vshuffle import losses as L
from vshuffle.features import AttentionTap, attention

from conftest import make_taps

GOLDEN = Path(__file__).parent / "golden"


def streams(blocks=(10, 11), n=1, s=6, seed=0, h=2, d=3):
    out = make_taps(blocks, h, s, d, seed)
    c = make_taps(blocks, h, s, d, seed + 100)
    st_ = [make_taps(blocks, h, s, d, seed + 200 + i) for i in range(n)]
    return out, c, st_


def fixed(perm):
    return lambda image, block, draw, extent: np.asarray(perm)


# ---------------------------------------------------------------- specs


def test_spec_validation():
    with pytest.raises(ValueError):
        L.ShuffleSpec(axis="x")
    with pytest.raises(ValueError):
        L.ShuffleSpec(m=0)
    with pytest.raises(ValueError):
        L.ShuffleSpec(resample_policy="sometimes")
    with pytest.raises(ValueError):
        L.HsrSpec(alpha=1.5)
    with pytest.raises(ValueError):
        L.HsrSpec(window=(0.9, 0.2))


def test_window_bounds_inclusive():
    hsr = L.HsrSpec(window=(0.2, 0.9))
    assert hsr.in_window(40, 200) and hsr.in_window(180, 200)
    assert not hsr.in_window(39, 200) and not hsr.in_window(181, 200)


# ---------------------------------------------------------------- shuffle_values


def test_extent_one_is_identity():
    v = torch.randn(2, 3, 1, 4)
    out, perms = L.shuffle_values(v, L.ShuffleSpec(), 0)
    assert torch.equal(out, v) and all(p.tolist() == [0] for p in perms)


def test_constant_rows_unchanged_bitwise():
    row = torch.randn(1, 2, 1, 4)
    v = row.expand(3, 2, 7, 4).contiguous()
    out, _ = L.shuffle_values(v, L.ShuffleSpec(rng_seed=9), 3)
    assert out.numpy().tobytes() == v.numpy().tobytes()


def test_seed42_golden_trace():
    rec = json.loads((GOLDEN / "permutation_seed42.json").read_text())
    v = torch.tensor(rec["input_rows"])[None, None]
    out, perms = L.shuffle_values(v, L.ShuffleSpec(rng_seed=rec["seed"]), rec["draw_index"])
    assert perms[0].tolist() == rec["permutation"]
    assert out[0, 0].tolist() == rec["output_rows"]
    assert sorted(map(tuple, out[0, 0].tolist())) == sorted(map(tuple, rec["input_rows"]))


def test_permutation_201_maps_rows():
    r = torch.tensor([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    out, _ = L.shuffle_values(r[None, None], L.ShuffleSpec(), 0, source=fixed([2, 0, 1]))
    assert torch.equal(out[0, 0], torch.stack([r[2], r[0], r[1]]))


def test_permutation_shared_across_heads_independent_across_images():
    v = torch.arange(2 * 3 * 8 * 1, dtype=torch.float32).reshape(2, 3, 8, 1)
    out, perms = L.shuffle_values(v, L.ShuffleSpec(rng_seed=1), 0)
    for i in range(2):
        for head in range(3):
            assert torch.equal(out[i, head, :, 0], v[i, head, perms[i], 0])
    assert not np.array_equal(perms[0], perms[1])


@pytest.mark.parametrize("axis", ["h", "s", "d"])
def test_axes_permute_the_right_dimension(axis):
    v = torch.randn(2, 3, 4, 5)
    out, perms = L.shuffle_values(v, L.ShuffleSpec(axis=axis, rng_seed=2), 0)
    dim = {"h": 0, "s": 1, "d": 2}[axis]
    for i in range(2):
        assert torch.equal(out[i], v[i].index_select(dim, torch.from_numpy(perms[i])))


def test_draws_are_deterministic_and_order_free():
    spec = L.ShuffleSpec(rng_seed=5)
    src = L.spec_permutations(spec, timestep=7)
    a = [src(i, b, d, 16).tolist() for i in range(2) for b in (10, 11) for d in range(3)]
    b = [src(i, b, d, 16).tolist() for i in reversed(range(2)) for b in (11, 10) for d in reversed(range(3))]
    assert sorted(a) == sorted(b)
    assert src(0, 10, 0, 16).tolist() == L.spec_permutations(spec, 7)(0, 10, 0, 16).tolist()
    assert src(0, 10, 0, 16).tolist() != L.spec_permutations(spec, 8)(0, 10, 0, 16).tolist()


def test_resample_policy_controls_inner_key():
    per_t = L.ShuffleSpec(rng_seed=3)
    per_inner = L.ShuffleSpec(rng_seed=3, resample_policy="per-inner-step")
    assert L.spec_permutations(per_t, 5, 0)(0, 0, 0, 32).tolist() == L.spec_permutations(per_t, 5, 4)(0, 0, 0, 32).tolist()
    assert L.spec_permutations(per_inner, 5, 0)(0, 0, 0, 32).tolist() != L.spec_permutations(per_inner, 5, 4)(0, 0, 0, 32).tolist()


def test_identity_flag():
    src = L.spec_permutations(L.ShuffleSpec(identity=True), 3)
    assert src(0, 0, 0, 9).tolist() == list(range(9))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 16), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_shuffle_preserves_multiset_and_sorted_stats(n, h, s, d, seed):
    v = torch.randn(n, h, s, d, generator=torch.Generator().manual_seed(seed))
    out, perms = L.shuffle_values(v, L.ShuffleSpec(rng_seed=seed), seed % 7)
    a = np.sort(v.numpy(), axis=2)
    b = np.sort(out.numpy(), axis=2)
    assert a.tobytes() == b.tobytes()
    assert a.mean(axis=2).tobytes() == b.mean(axis=2).tobytes()
    assert a.var(axis=2).tobytes() == b.var(axis=2).tobytes()
    assert all(sorted(p.tolist()) == list(range(s)) for p in perms)


# ---------------------------------------------------------------- loss_content


def test_loss_content_examples():
    q = torch.randn(2, 4, 3, dtype=torch.float64)
    assert L.loss_content(q, q).item() == 0.0
    assert L.loss_content(q + 2, q).item() == pytest.approx(2.0, abs=1e-12)


def test_loss_content_loop_oracle_seed1():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    acc = sum(abs(a[i, j, k] - b[i, j, k]) for i in range(2) for j in range(3) for k in range(4))
    assert L.loss_content(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(acc / 24, abs=1e-14)


def test_loss_content_gradient_flows_only_to_output():
    qc = torch.randn(3, requires_grad=True)
    qo = torch.randn(3, requires_grad=True)
    L.loss_content(qo, qc).backward()
    assert qo.grad is not None and qc.grad is None


# ---------------------------------------------------------------- loss_ad


def test_loss_ad_zero_on_identical_streams():
    out, _, _ = streams()
    assert L.loss_ad(out, out, [out], 0.24).item() == 0.0


def test_loss_ad_beta_zero_is_style_term():
    out, c, s = streams()
    targets = L.build_targets(c, s, 1.0)
    assert L.loss_ad(out, c, s, 0.0).item() == L.style_term(out, targets.unshuffled, 1.0).item()


def test_loss_ad_recomposes_from_independent_terms():
    out, c, s = streams(seed=4)
    style = np.mean([
        (attention(o.q, o.k, o.v) - attention(ci.q, si.k, si.v)).abs().mean().item()
        for o, ci, si in zip(out, c, s[0])
    ])
    content = np.mean([(o.q - ci.q).abs().mean().item() for o, ci in zip(out, c)])
    assert L.loss_ad(out, c, s, 0.24).item() == pytest.approx(style + 0.24 * content, abs=1e-14)


def test_loss_ad_requires_single_style():
    out, c, s = streams(n=2)
    with pytest.raises(ValueError):
        L.loss_ad(out, c, s, 0.24)


def test_targets_are_constant():
    out, c, s = streams()
    c = [AttentionTap(t.block_index, 0, "c", t.q.clone().requires_grad_(True), t.k, t.v) for t in c]
    s = [[AttentionTap(t.block_index, 0, "s", t.q, t.k.clone().requires_grad_(True), t.v) for t in s[0]]]
    out = [AttentionTap(t.block_index, 0, "o", t.q.clone().requires_grad_(True), t.k, t.v) for t in out]
    L.loss_ad(out, c, s, 0.24).backward()
    assert all(t.q.grad is not None for t in out)
    assert all(t.q.grad is None for t in c) and all(t.k.grad is None for t in s[0])


# ---------------------------------------------------------------- shuffled style loss


def test_constant_values_shuffle_is_noop():
    out, c, s = streams(s=5)
    row = torch.randn(2, 1, 3, dtype=torch.float64)
    s = [[AttentionTap(t.block_index, 0, "s", t.q, t.k, row.expand(2, 5, 3).clone()) for t in s[0]]]
    spec = L.ShuffleSpec(m=3, rng_seed=4)
    targets = L.build_targets(c, s, 1.0)
    # the m identical draws are averaged, so equality holds up to the last ulp
    expected = L.style_term(out, targets.unshuffled, 1.0).item()
    assert L.loss_style_shuffled(out, c, s, spec).item() == pytest.approx(expected, rel=1e-14)


def test_identity_shuffle_matches_ad_style_term_bitwise():
    out, c, s = streams()
    spec = L.ShuffleSpec(identity=True)
    targets = L.build_targets(c, s, 1.0)
    assert L.loss_style_shuffled(out, c, s, spec).item() == L.style_term(out, targets.unshuffled, 1.0).item()


def test_m5_is_mean_of_single_draws():
    out, c, s = streams(n=2, seed=3)
    spec5 = L.ShuffleSpec(m=5, rng_seed=11)
    spec1 = L.ShuffleSpec(m=1, rng_seed=11)
    singles = [L.loss_style_shuffled(out, c, s, spec1, timestep=9, draws=[k]).item() for k in range(5)]
    assert L.loss_style_shuffled(out, c, s, spec5, timestep=9).item() == pytest.approx(np.mean(singles), abs=1e-14)


def test_exhaustive_expectation_s4():
    out, c, s = streams(blocks=(0,), s=4, seed=7)
    perms = list(itertools.permutations(range(4)))
    vals = [L.loss_style_shuffled(out, c, s, L.ShuffleSpec(), source=fixed(p)).item() for p in perms]
    q, k, v = c[0].q.numpy(), s[0][0].k.numpy(), s[0][0].v.numpy()
    o = attention(out[0].q, out[0].k, out[0].v).numpy()

    def np_attn(q_, k_, v_):
        lg = q_ @ k_.transpose(0, 2, 1) / np.sqrt(q_.shape[-1])
        w = np.exp(lg - lg.max(-1, keepdims=True))
        return (w / w.sum(-1, keepdims=True)) @ v_

    brute = np.mean([np.abs(o - np_attn(q, k, v[:, list(p)])).mean() for p in perms])
    assert abs(np.mean(vals) - brute) <= 1e-9


def test_transcript_records_every_draw():
    out, c, s = streams(n=2, s=5)
    transcript = []
    L.loss_style_shuffled(out, c, s, L.ShuffleSpec(m=3), timestep=4, transcript=transcript)
    assert len(transcript) == 3 * 2 * 2
    for entry in transcript:
        assert sorted(entry["perm"]) == list(range(5)) and entry["t"] == 4


# ---------------------------------------------------------------- loss_vshuffle


def test_vshuffle_beta_zero_and_perfect_match():
    out, c, s = streams(n=2)
    spec = L.ShuffleSpec(m=2, rng_seed=1)
    assert L.loss_vshuffle(out, c, s, spec, 0.0).item() == L.loss_style_shuffled(out, c, s, spec).item()
    assert L.loss_vshuffle(out, out, [out], L.ShuffleSpec(identity=True), 0.24).item() == 0.0


def test_vshuffle_recomposes():
    out, c, s = streams(n=3, seed=8)
    spec = L.ShuffleSpec(m=2, rng_seed=1)
    manual = L.loss_style_shuffled(out, c, s, spec).item() + 0.24 * np.mean(
        [L.loss_content(o.q, ci.q).item() for o, ci in zip(out, c)]
    )
    assert L.loss_vshuffle(out, c, s, spec, 0.24).item() == pytest.approx(manual, abs=1e-14)


# ---------------------------------------------------------------- loss_hsr


def test_hsr_outside_window_is_ad_bitwise():
    out, c, s = streams()
    for alpha in (0.0, 0.3, 1.0):
        hsr = L.HsrSpec(alpha=alpha)
        for t in (1, 39, 181, 200):
            assert L.loss_hsr(t, 200, hsr, L.ShuffleSpec(), out, c, s).item() == L.loss_ad(out, c, s, 0.24).item()


def test_hsr_alpha_zero_is_ad_bitwise():
    out, c, s = streams()
    for t in (1, 100, 200):
        v = L.loss_hsr(t, 200, L.HsrSpec(alpha=0.0), L.ShuffleSpec(m=3), out, c, s).item()
        assert v == L.loss_ad(out, c, s, 0.24).item()


def test_hsr_alpha_one_is_vshuffle_bitwise():
    out, c, s = streams(n=2)
    spec = L.ShuffleSpec(m=2, rng_seed=6)
    for t in (40, 100, 180):
        v = L.loss_hsr(t, 200, L.HsrSpec(alpha=1.0), spec, out, c, s).item()
        assert v == L.loss_vshuffle(out, c, s, spec, 0.24, timestep=t).item()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(40, 180))
def test_hsr_affine_in_alpha(seed, n, t):
    out, c, s = streams(n=n, seed=seed)
    spec = L.ShuffleSpec(m=2, rng_seed=seed)
    vals = {a: L.loss_hsr(t, 200, L.HsrSpec(alpha=a), spec, out, c, s).item() for a in (0.0, 0.25, 0.5, 0.75, 1.0)}
    for a in (0.25, 0.5, 0.75):
        assert abs(vals[a] - ((1 - a) * vals[0.0] + a * vals[1.0])) <= 1e-9


def test_hsr_multi_style_outside_window_uses_concatenated_features():
    out, c, s = streams(n=3)
    v = L.loss_hsr(1, 200, L.HsrSpec(), L.ShuffleSpec(), out, c, s).item()
    targets = L.build_targets(c, s, 1.0)
    assert v == L.ad_from_targets(out, targets, 0.24, 1.0).item()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_losses_non_negative(seed, n):
    out, c, s = streams(n=n, seed=seed)
    spec = L.ShuffleSpec(m=2, rng_seed=seed)
    assert L.loss_vshuffle(out, c, s, spec, 0.24).item() >= 0
    assert L.loss_hsr(100, 200, L.HsrSpec(), spec, out, c, s).item() >= 0
