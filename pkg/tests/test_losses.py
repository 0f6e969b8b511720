"""Loss oracles: hand-computed values, loop references, gradient checks."""

import numpy as np
import pytest

import seqswap.autodiff as ad
from seqswap import losses as lo
from seqswap.errors import ContractError, ShapeError

from conftest import gradcheck

rng = np.random.default_rng(51)


# similarity -----------------------------------------------------------------


def test_similarity_identical_features_is_zero():
    z = rng.standard_normal((2, 5, 4))
    out = lo.similarity_loss([ad.as_tensor(z)], [z.copy()])
    assert out.item() == 0.0


def test_similarity_unit_offset_is_one():
    z = rng.standard_normal((3, 6, 4))
    out = lo.similarity_loss([ad.as_tensor(z + 1.0)], [z])
    assert out.item() == pytest.approx(1.0, abs=1e-12)


def test_similarity_matches_double_loop():
    zs = [rng.standard_normal((2, 4, 3)) for _ in range(2)]
    zt = [rng.standard_normal((2, 4, 3)) for _ in range(2)]
    out = lo.similarity_loss([ad.as_tensor(z) for z in zs], zt).item()
    ref = 0.0
    for s, t in zip(zs, zt):
        acc = 0.0
        for b in range(2):
            for i in range(4):
                for d in range(3):
                    acc += (s[b, i, d] - t[b, i, d]) ** 2
        ref += acc / (2 * 4 * 3)
    assert out == pytest.approx(ref, rel=1e-12)


def test_similarity_mask_zeroes_rows_without_renormalizing():
    zs = rng.standard_normal((1, 4, 2))
    zt = np.zeros((1, 4, 2))
    mask = np.array([[1.0, 0.0, 1.0, 0.0]])
    out = lo.similarity_loss([ad.as_tensor(zs)], [zt], masks=[mask]).item()
    ref = (zs[0, 0] ** 2).sum() + (zs[0, 2] ** 2).sum()
    assert out == pytest.approx(ref / (4 * 2), rel=1e-12)


def test_similarity_accepts_unbatched_and_checks_shapes():
    z = rng.standard_normal((5, 3))
    assert lo.similarity_loss([ad.as_tensor(z)], [z]).item() == 0.0
    with pytest.raises(ShapeError):
        lo.similarity_loss([ad.as_tensor(z)], [z, z])
    with pytest.raises(ShapeError):
        lo.similarity_loss([ad.as_tensor(z)], [rng.standard_normal((5, 4))])


# halting alignment ----------------------------------------------------------


def test_halting_alignment_hand_value():
    hs = [ad.as_tensor(np.array([[1.0, 0.0]]))]
    ht = [np.array([[0.0, 0.0]])]
    out = lo.halting_alignment_loss(hs, ht, [0])
    assert out.item() == pytest.approx(0.5, abs=1e-15)  # (1-0)^2 / T with T=2


def test_halting_alignment_matches_loop():
    hs = [ad.as_tensor(rng.uniform(0, 1, (3, 5))) for _ in range(4)]
    ht = [rng.uniform(0, 1, (3, 5)) for _ in range(4)]
    replaced = [1, 3]
    out = lo.halting_alignment_loss(hs, ht, replaced).item()
    ref = 0.0
    for l in replaced:
        acc = 0.0
        for b in range(3):
            for t in range(5):
                acc += (hs[l].data[b, t] - ht[l][b, t]) ** 2
        ref += acc / (3 * 5)
    assert out == pytest.approx(ref, rel=1e-12)
    assert lo.halting_alignment_loss(hs, ht, []).item() == 0.0


def test_halting_alignment_shape_mismatch():
    with pytest.raises(ShapeError):
        lo.halting_alignment_loss([ad.as_tensor(np.zeros((2, 4)))],
                                  [np.zeros((2, 5))], [0])


# classification -------------------------------------------------------------


def test_cls_loss_uniform_logits_is_log_k():
    logits = ad.as_tensor(np.zeros((4, 10)))
    out = lo.cls_loss(logits, np.arange(4))
    assert out.item() == pytest.approx(np.log(10.0), rel=1e-12)


def test_cls_loss_saturated_correct_is_tiny():
    logits = np.full((2, 5), -50.0)
    logits[0, 1] = 50.0
    logits[1, 3] = 50.0
    out = lo.cls_loss(ad.as_tensor(logits), np.array([1, 3]))
    assert 0.0 <= out.item() < 1e-12


def test_cls_loss_matches_log_sum_exp():
    logits = rng.standard_normal((6, 7)) * 3
    y = rng.integers(0, 7, size=6)
    out = lo.cls_loss(ad.as_tensor(logits), y).item()
    ref = np.mean([np.log(np.exp(logits[i]).sum()) - logits[i, y[i]]
                   for i in range(6)])
    assert out == pytest.approx(ref, rel=1e-12)


def test_cls_loss_contracts():
    logits = ad.as_tensor(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        lo.cls_loss(logits, np.array([0, 3]))
    with pytest.raises(ContractError):
        lo.cls_loss(logits, np.array([-1, 0]))
    with pytest.raises(ShapeError):
        lo.cls_loss(logits, np.array([0]))


# halting prior, mass, and regularizer ---------------------------------------


def test_halting_prior_defaults_and_shape():
    p = lo.halting_prior(4)
    assert p.shape == (4,)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert p.argmax() == 2  # centered two layers before the end
    q = lo.halting_prior(6, center=1, sigma=0.5)
    assert q.argmax() == 1
    assert np.all(q > 0)


def test_discrete_kl_self_is_exact_zero():
    p = lo.halting_prior(5)
    assert lo.discrete_kl(ad.as_tensor(p), p).item() == 0.0


def test_discrete_kl_positive_and_asymmetric():
    p = np.array([0.7, 0.2, 0.1])
    q = np.array([0.2, 0.3, 0.5])
    kl_pq = lo.discrete_kl(ad.as_tensor(p), q).item()
    kl_qp = lo.discrete_kl(ad.as_tensor(q), p).item()
    ref = (p * (np.log(p + 1e-12) - np.log(q + 1e-12))).sum()
    assert kl_pq == pytest.approx(ref, rel=1e-12)
    assert kl_pq > 0 and kl_qp > 0 and kl_pq != kl_qp


def test_halting_mass_two_layer_hand_case():
    # one patch token: h = (0.3, 0.5) -> mass (0.3, 0.7*0.5), then normalized
    scores = [ad.as_tensor(np.array([[0.9, 0.3]])),
              ad.as_tensor(np.array([[0.9, 0.5]]))]
    p = lo.halting_mass_distribution(scores).data
    raw = np.array([0.3, 0.7 * 0.5])
    assert np.allclose(p, raw / raw.sum(), atol=1e-10)


def test_halting_mass_ignores_class_token_and_normalizes():
    scores = [ad.as_tensor(rng.uniform(0, 1, (4, 9))) for _ in range(3)]
    p = lo.halting_mass_distribution(scores).data
    assert p.shape == (3,)
    assert p.sum() == pytest.approx(1.0, rel=1e-9)
    bumped = [s.data.copy() for s in scores]
    for s in bumped:
        s[:, 0] = 0.0  # class column must not matter
    p2 = lo.halting_mass_distribution([ad.as_tensor(s) for s in bumped]).data
    assert np.allclose(p, p2, atol=1e-15)


def test_avit_regularizer_zero_when_saturated_on_prior():
    # R exactly 1 for all patches and halting mass matching the prior
    depth, t = 3, 5
    prior = lo.halting_prior(depth, center=1, sigma=1.0)
    # choose per-layer scores (uniform over tokens) whose mass equals the prior
    h = np.zeros(depth)
    survive = 1.0
    for l in range(depth):
        h[l] = prior[l] / survive
        survive *= 1.0 - h[l]
    scores = [ad.as_tensor(np.full((2, t), h[l])) for l in range(depth)]
    r_final = ad.as_tensor(np.ones((2, t)))
    out = lo.avit_regularizer(r_final, scores, prior, lambda_halt=0.01)
    assert abs(out.item()) < 1e-9


def test_avit_regularizer_matches_hand_decomposition():
    depth, b, t = 3, 2, 5
    scores = [ad.as_tensor(rng.uniform(0.1, 0.9, (b, t))) for _ in range(depth)]
    r_fin = rng.uniform(0, 1, (b, t))
    prior = lo.halting_prior(depth)
    out = lo.avit_regularizer(ad.as_tensor(r_fin), scores, prior,
                              lambda_halt=0.05).item()
    ponder = np.abs(r_fin[:, 1:] - 1.0).sum() / (b * (t - 1))
    mass = np.zeros(depth)
    surv = np.ones((b, t))
    for l in range(depth):
        hv = scores[l].data
        mass[l] = (hv * surv)[:, 1:].sum() / (b * (t - 1))
        surv = surv * (1 - hv)
    p = mass / (mass.sum() + 1e-12)
    kl = (p * (np.log(p + 1e-12) - np.log(prior + 1e-12))).sum()
    assert out == pytest.approx(ponder + 0.05 * kl, rel=1e-10)


# weighted total -------------------------------------------------------------


def test_weighted_total_hand_value_and_breakdown():
    parts = {"sim": ad.as_tensor(2.0), "halt": ad.as_tensor(1.0),
             "cls": ad.as_tensor(0.5)}
    weights = {"sim": 0.75, "halt": 0.1, "cls": 1.0}
    total, bd = lo.weighted_total(parts, weights)
    assert total.item() == pytest.approx(0.75 * 2 + 0.1 * 1 + 1.0 * 0.5, abs=1e-15)
    assert bd.total == total.item()
    assert (bd.sim, bd.halt, bd.cls, bd.avit) == (2.0, 1.0, 0.5, 0.0)
    d = bd.as_dict()
    assert set(d) == {"loss_total", "loss_cls", "loss_sim", "loss_halt", "loss_avit"}


def test_weighted_total_skips_none_parts():
    total, bd = lo.weighted_total({"cls": ad.as_tensor(0.3), "sim": None},
                                  {"cls": 1.0, "sim": 0.75})
    assert total.item() == pytest.approx(0.3, abs=1e-15)
    assert bd.sim == 0.0


def test_weighted_total_rejects_negative_weight():
    with pytest.raises(ContractError):
        lo.weighted_total({"cls": ad.as_tensor(1.0)}, {"cls": -0.1})


def test_breakdown_decomposition_identity():
    parts = {k: ad.as_tensor(v) for k, v in
             [("cls", 0.83), ("sim", 0.21), ("halt", 0.07), ("avit", 0.4)]}
    weights = {"cls": 1.0, "sim": 0.75, "halt": 0.1, "avit": 0.1}
    total, bd = lo.weighted_total(parts, weights)
    recon = sum(weights[k] * getattr(bd, k) for k in parts)
    assert abs(bd.total - recon) < 1e-12


# gradients ------------------------------------------------------------------


def test_similarity_loss_gradcheck():
    zt = [rng.standard_normal((2, 3, 4))]
    mask = [np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])]
    zs = rng.standard_normal((2, 3, 4))
    gradcheck(lambda s: lo.similarity_loss([s], zt, masks=mask), [zs])


def test_cls_loss_gradcheck():
    logits = rng.standard_normal((4, 6))
    y = np.array([2, 0, 5, 3])
    gradcheck(lambda lg: lo.cls_loss(lg, y), [logits])


def test_avit_regularizer_gradcheck():
    depth, b, t = 3, 2, 4
    scores = [rng.uniform(0.2, 0.8, (b, t)) for _ in range(depth)]
    r_fin = rng.uniform(0.1, 0.9, (b, t))
    prior = lo.halting_prior(depth)

    def build(r, *hs):
        return lo.avit_regularizer(r, list(hs), prior, lambda_halt=0.05)

    gradcheck(build, [r_fin] + scores, tol=1e-4)
