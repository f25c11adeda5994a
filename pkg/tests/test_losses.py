import numpy as np
import pytest

import oracles
from hegl.losses import (
    LossBreakdown,
    LossWeights,
    PenalizedDiceParams,
    batch_penalized_dice,
    ce_loss,
    cosine_sim,
    dal_loss,
    hegl_loss,
    pairwise_cosine,
    penalized_dice,
)
from hegl.tensor import Tensor, grad_check, softmax

N_PROPERTY = 1000


def _random_attention(rng, shape):
    return softmax(Tensor(rng.standard_normal(shape[:-2] + (shape[-2] * shape[-1],)) * 2)).data.reshape(shape)


def _random_case(rng, b=3, c=4, g=4):
    logits = rng.standard_normal((b, c))
    labels = (rng.random((b, c)) < 0.5).astype(float)
    attention = _random_attention(rng, (b, c, g, g))
    masks = (rng.random((b, c, g, g)) < 0.3).astype(float)
    masks[..., 0, 0] = 1.0
    return logits, labels, attention, masks


class TestCrossEntropy:
    def test_examples(self):
        assert ce_loss(Tensor([[0.0]]), [[1]]).item() == pytest.approx(np.log(2), abs=1e-15)
        assert ce_loss(Tensor([[20.0]]), [[1]]).item() <= 1e-8
        assert abs(ce_loss(Tensor([[0.0, 0.0]]), [[1, 0]]).item() - oracles.CE_EXAMPLE) <= 1e-15

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.standard_normal(6) * 4
            y = (rng.random(6) < 0.5).astype(float)
            got = ce_loss(Tensor(z.reshape(2, 3)), y.reshape(2, 3)).item()
            assert got == pytest.approx(oracles.bce_oracle(z, y), abs=1e-12)

    def test_rejects_soft_labels(self):
        with pytest.raises(ValueError, match="0 or 1"):
            ce_loss(Tensor([[0.0]]), [[0.5]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            ce_loss(Tensor([[0.0, 1.0]]), [[1]])


class TestPenalizedDice:
    def test_closed_form_example(self):
        got = penalized_dice(Tensor([0.5, 0.5, 0, 0]), np.array([1, 0, 0, 0])).item()
        assert oracles.dice_oracle([0.5, 0.5, 0, 0], [1, 0, 0, 0]) == oracles.DICE_EXAMPLE
        assert abs(got - float(oracles.DICE_EXAMPLE)) <= 1e-12

    @pytest.mark.parametrize("w_fp", [0.0, 1.0, 3.5])
    def test_perfect_overlap_is_zero(self, w_fp):
        m = np.array([[1, 0], [1, 1]], float)
        assert penalized_dice(Tensor(m), m, PenalizedDiceParams(w_fp=w_fp)).item() == 0.0

    def test_disjoint_is_one(self):
        assert penalized_dice(Tensor([0.3, 0.7, 0, 0]), np.array([0, 0, 1, 1])).item() == 1.0

    def test_hard_count_mode(self):
        a = np.array([0.9, 0.6, 0.4, 0.1])
        m = np.array([1, 0, 0, 0])
        params = PenalizedDiceParams(w_fp=2.0, fp_mode="hard-count", hard_threshold=0.5)
        expected = float(oracles.dice_oracle(a, m, w_fp=2, soft=False, threshold=0.5))
        assert penalized_dice(Tensor(a), m, params).item() == pytest.approx(expected, abs=1e-15)

    def test_matches_oracle_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = rng.random(9)
            m = (rng.random(9) < 0.4).astype(int)
            w = float(rng.uniform(0, 3))
            got = penalized_dice(Tensor(a), m, PenalizedDiceParams(w_fp=w)).item()
            assert got == pytest.approx(float(oracles.dice_oracle(a.tolist(), m.tolist(), w)),
                                        abs=1e-12)

    def test_range_property(self):
        rng = np.random.default_rng(2)
        for _ in range(N_PROPERTY):
            shape = tuple(rng.integers(1, 6, size=2))
            a = rng.random(shape) * rng.choice([0.0, 1.0], size=shape)
            m = (rng.random(shape) < 0.5).astype(float)
            if a.sum() + m.sum() == 0:
                m.flat[0] = 1.0
            value = penalized_dice(Tensor(a), m, PenalizedDiceParams(w_fp=float(rng.uniform(0, 5)))).item()
            assert 0.0 <= value <= 1.0

    def test_monotone_in_w_fp(self):
        rng = np.random.default_rng(3)
        for _ in range(N_PROPERTY):
            a = rng.random(8) + 0.01
            m = (rng.random(8) < 0.5).astype(float)
            m[0] = 0.0  # guarantees positive FP mass
            w1, w2 = np.sort(rng.uniform(0, 5, size=2))
            d1 = penalized_dice(Tensor(a), m, PenalizedDiceParams(w_fp=w1)).item()
            d2 = penalized_dice(Tensor(a), m, PenalizedDiceParams(w_fp=w2)).item()
            assert d1 <= d2 + 1e-15

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        a = _random_attention(rng, (2, 3, 4, 4))
        m = (rng.random((2, 3, 4, 4)) < 0.5).astype(float)
        batched = batch_penalized_dice(Tensor(a), m).data
        for i in range(2):
            for k in range(3):
                assert batched[i, k] == pytest.approx(penalized_dice(Tensor(a[i, k]), m[i, k]).item(),
                                                      abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError, match="shape"):
            penalized_dice(Tensor([1.0, 0.0]), np.array([1, 0, 0]))
        with pytest.raises(ValueError, match="both zero"):
            penalized_dice(Tensor([0.0, 0.0]), np.array([0, 0]))
        with pytest.raises(ValueError):
            PenalizedDiceParams(w_fp=-1.0)
        with pytest.raises(ValueError):
            PenalizedDiceParams(fp_mode="count")


class TestCosine:
    def test_closed_form(self):
        assert oracles.cosine_oracle_exact([1, 2, 2], [2, 1, 2]) == oracles.COSINE_EXAMPLE
        got = cosine_sim(Tensor([1.0, 2, 2]), Tensor([2.0, 1, 2])).item()
        assert abs(got - float(oracles.COSINE_EXAMPLE)) <= 1e-12

    def test_identical_and_disjoint(self):
        x = Tensor([[0.2, 0.0], [0.5, 0.3]])
        assert cosine_sim(x, x).item() == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim(Tensor([1.0, 0, 0]), Tensor([0, 2.0, 3.0])).item() == 0.0

    def test_zero_norm_is_an_error(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_pairwise_matrix_matches_oracle(self):
        rng = np.random.default_rng(5)
        maps = rng.standard_normal((3, 4, 2, 2))
        sims = pairwise_cosine(Tensor(maps)).data
        for b in range(3):
            for i in range(4):
                for j in range(4):
                    ref = oracles.cosine_oracle(maps[b, i].ravel().tolist(), maps[b, j].ravel().tolist())
                    assert sims[b, i, j] == pytest.approx(ref, abs=1e-12)


class TestDAL:
    def test_closed_form(self):
        e1, e2 = [1.0, 0.0], [0.0, 1.0]
        assert oracles.dal_oracle([e1, e1, e2]) == pytest.approx(float(oracles.DAL_EXAMPLE), abs=1e-15)
        assert abs(dal_loss(Tensor([e1, e1, e2])).item() - float(oracles.DAL_EXAMPLE)) <= 1e-12

    def test_trivial_examples(self):
        assert dal_loss(Tensor(np.ones((4, 3, 3)))).item() == pytest.approx(1.0, abs=1e-15)
        assert dal_loss(Tensor([[1.0, 0.0], [0.0, 1.0]])).item() == 0.0

    def test_errors(self):
        with pytest.raises(ValueError, match="2 classes"):
            dal_loss(Tensor(np.ones((1, 3, 3))))
        with pytest.raises(ValueError, match="zero-norm"):
            dal_loss(Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_batch_mean(self):
        rng = np.random.default_rng(6)
        maps = _random_attention(rng, (5, 3, 3, 3))
        per_sample = [dal_loss(Tensor(maps[i])).item() for i in range(5)]
        assert dal_loss(Tensor(maps)).item() == pytest.approx(np.mean(per_sample), abs=1e-15)

    def test_invariants(self):
        rng = np.random.default_rng(7)
        for _ in range(N_PROPERTY):
            c = int(rng.integers(2, 6))
            maps = rng.random((c, 3, 3)) + 1e-3
            base = dal_loss(Tensor(maps)).item()
            assert 0.0 <= base <= 1.0 + 1e-15
            assert dal_loss(Tensor(maps[rng.permutation(c)])).item() == pytest.approx(base, abs=1e-15)
            scaled = maps.copy()
            scaled[rng.integers(c)] *= rng.uniform(0.01, 100.0)
            assert abs(dal_loss(Tensor(scaled)).item() - base) <= 1e-12
            assert dal_loss(Tensor(maps)).item() == pytest.approx(oracles.dal_oracle(
                [m.ravel().tolist() for m in maps]), abs=1e-12)


class TestComposite:
    def test_breakdown_combination(self):
        br = LossBreakdown.combine(0.7, 0.6, 0.25, LossWeights(1.0, 1.0))
        assert br.l_total == pytest.approx(1.55, abs=1e-15)
        assert br.csv_row(3)[0] == 3 and LossBreakdown.CSV_HEADER[-1] == "l_total"

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 1.0)
        assert LossWeights(1.0, 0.0).label == "alpha=1,beta=0"

    def test_linearity(self):
        rng = np.random.default_rng(8)
        for _ in range(N_PROPERTY):
            logits, labels, attention, masks = _random_case(rng, b=2, c=3, g=3)
            alpha, beta = rng.uniform(0, 3, size=2)
            full, br = hegl_loss(Tensor(logits), labels, Tensor(attention), masks,
                                 LossWeights(alpha, beta))
            base, br0 = hegl_loss(Tensor(logits), labels, Tensor(attention), masks,
                                  LossWeights(0.0, 0.0))
            assert abs((br.l_total - br0.l_total) - (alpha * br.l_ha + beta * br.l_dal)) <= 1e-12
            assert br.l_total == full.item()
            assert min(br.l_ce, br.l_ha, br.l_dal) >= 0.0

    def test_alpha_zero_never_reads_masks(self):
        class Exploding:
            def __array__(self, *a, **k):
                raise AssertionError("mask accessed")

        logits, labels, attention, _ = _random_case(np.random.default_rng(9))
        _, br = hegl_loss(Tensor(logits), labels, Tensor(attention), Exploding(), LossWeights(0.0, 1.0))
        assert br.l_ha == 0.0 and br.l_dal > 0.0

    def test_beta_zero_matches_alignment_objective(self):
        logits, labels, attention, masks = _random_case(np.random.default_rng(10))
        _, br = hegl_loss(Tensor(logits), labels, Tensor(attention), masks, LossWeights(1.0, 0.0))
        assert br.l_dal == 0.0
        assert br.l_total == pytest.approx(br.l_ce + br.l_ha, abs=1e-15)

    def test_alignment_only_over_positive_labels(self):
        rng = np.random.default_rng(11)
        logits, labels, attention, masks = _random_case(rng)
        labels[:] = 0
        labels[1, 2] = 1
        _, br = hegl_loss(Tensor(logits), labels, Tensor(attention), masks, LossWeights(1.0, 0.0))
        single = penalized_dice(Tensor(attention[1, 2]), masks[1, 2]).item()
        assert br.l_ha == pytest.approx(single, abs=1e-15)

    def test_no_positive_pairs_gives_zero_alignment(self):
        logits, labels, attention, masks = _random_case(np.random.default_rng(12))
        _, br = hegl_loss(Tensor(logits), np.zeros_like(labels), Tensor(attention), masks)
        assert br.l_ha == 0.0

    def test_missing_masks_error(self):
        logits, labels, attention, masks = _random_case(np.random.default_rng(13))
        labels[0, 0] = 1
        with pytest.raises(ValueError, match="requires masks"):
            hegl_loss(Tensor(logits), labels, Tensor(attention), None)
        valid = np.ones_like(labels, bool)
        valid[0, 0] = False
        with pytest.raises(ValueError, match="no mask"):
            hegl_loss(Tensor(logits), labels, Tensor(attention), masks, mask_valid=valid)


def _loss_gradient_cases():
    """Yields (name, f, x) triples for the gradient suite."""
    rng = np.random.default_rng(2024)
    cases = {"ce_loss": [], "penalized_dice": [], "cosine_sim": [], "dal_loss": [], "hegl_loss": []}
    for _ in range(100):
        y = (rng.random((3, 4)) < 0.5).astype(float)
        cases["ce_loss"].append((lambda t, y=y: ce_loss(t, y), rng.standard_normal((3, 4)) * 2))

        m = (rng.random(9) < 0.4).astype(float)
        m[0] = 1.0
        cases["penalized_dice"].append((lambda t, m=m: penalized_dice(t, m),
                                        rng.uniform(0.05, 1.0, size=9)))

        other = rng.standard_normal(6)
        cases["cosine_sim"].append((lambda t, o=other: cosine_sim(t, o), rng.standard_normal(6)))

        cases["dal_loss"].append((lambda t: dal_loss(t), rng.uniform(0.05, 1.0, size=(3, 2, 2))))

        logits, labels, _, masks = _random_case(rng, b=2, c=3, g=2)
        cases["hegl_loss"].append((
            lambda t, lg=logits, lb=labels, mk=masks: hegl_loss(
                Tensor(lg), lb, softmax(t.reshape((2, 3, 4))).reshape((2, 3, 2, 2)), mk)[0],
            rng.standard_normal((2, 3, 2, 2))))
    return cases


@pytest.mark.parametrize("name", ["ce_loss", "penalized_dice", "cosine_sim", "dal_loss", "hegl_loss"])
def test_loss_gradients(name):
    worst = max(grad_check(f, x, eps=1e-5) for f, x in _loss_gradient_cases()[name])
    assert worst <= 1e-4
