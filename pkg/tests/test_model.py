import numpy as np
import pytest

from driftcast import model as M
from driftcast.data import TrainingExample, znormalize
from driftcast.nnkernel import AdamState, adam_step

SMALL = dict(
    n_features=3, interaction_dim=5, lookback=16, horizon=6,
    embed_dim=8, conv_channels=7, kernel_width=3, n_blocks=2,
    bank_size=4, shape_loss_weight=0.5,
)


def small_config(variant="proposed", **over):
    return M.ModelConfig(variant=variant, **{**SMALL, **over})


def random_batch(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(b, cfg.lookback, cfg.n_features))
    I = np.abs(rng.normal(size=(b, cfg.interaction_dim))) + 0.1
    Y = rng.normal(size=(b, cfg.horizon))
    return X, I, Y


class TestInteractionEncode:
    def test_one_hot_selects_row(self):
        rng = np.random.default_rng(0)
        C = rng.normal(size=(5, 8))
        one_hot = np.zeros(5)
        one_hot[3] = 7.0
        np.testing.assert_allclose(M.interaction_encode(one_hot, C), C[3])

    def test_sum_to_one_normalization(self):
        C = np.eye(4)
        out = M.interaction_encode(np.array([2.0, 6.0, 0.0, 0.0]), C)
        np.testing.assert_allclose(out, [0.25, 0.75, 0.0, 0.0])

    def test_two_entity_average(self):
        rng = np.random.default_rng(1)
        C = rng.normal(size=(6, 4))
        vec = np.zeros(6)
        vec[1] = vec[4] = 3.0
        np.testing.assert_allclose(
            M.interaction_encode(vec, C), (C[1] + C[4]) / 2
        )

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        C = rng.normal(size=(5, 3))
        vec = np.abs(rng.normal(size=5))
        a = M.interaction_encode(vec, C)
        b = M.interaction_encode(123.0 * vec, C)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(M.DegenerateInteractionError):
            M.interaction_encode(np.zeros(4), np.eye(4))


class TestTemporalEncode:
    def test_zero_params_give_zero(self):
        cfg = small_config()
        params = {k: np.zeros_like(v) for k, v in
                  M.init_params(cfg, np.random.default_rng(0)).items()}
        h = M.temporal_encode(np.random.default_rng(1).normal(size=(16, 3)), params, cfg)
        np.testing.assert_array_equal(h, np.zeros(cfg.conv_channels))

    def test_last_row_sensitivity(self):
        cfg = small_config()
        params = M.init_params(cfg, np.random.default_rng(3))
        T = np.random.default_rng(4).normal(size=(16, 3))
        h1 = M.temporal_encode(T, params, cfg)
        T2 = T.copy()
        T2[-1] += 1.0
        h2 = M.temporal_encode(T2, params, cfg)
        assert not np.allclose(h1, h2)


class TestScaleDecode:
    def test_zero_interaction_passage_gives_zero(self):
        cfg = small_config()
        params = M.init_params(cfg, np.random.default_rng(5))
        params["scale_inter1.W"][:] = 0.0
        params["scale_inter2.W"][:] = 0.0
        params["scale_inter2.b"][:] = 0.0
        sigma, mu = M.scale_decode(
            np.random.default_rng(6).normal(size=8) ** 2,
            np.random.default_rng(7).normal(size=7),
            params, cfg,
        )
        assert sigma == 0.0 and mu == 0.0

    def test_basis_pick(self):
        # processed temporal vector e_1 against a known mapping matrix
        cfg = small_config()
        params = M.init_params(cfg, np.random.default_rng(8))
        u = np.zeros(cfg.embed_dim)
        u[0] = 1.0
        w = np.zeros((cfg.embed_dim, 2))
        w[0] = [3.0, 7.0]
        out = u @ w
        assert tuple(out) == (3.0, 7.0)


class TestShapeDecode:
    def test_one_hot_mix_selects_bank_row(self):
        cfg = small_config()
        rng = np.random.default_rng(9)
        bank = rng.normal(size=(cfg.bank_size, cfg.horizon))
        mix = np.zeros(cfg.bank_size)
        mix[2] = 1.0
        np.testing.assert_allclose(mix @ bank, bank[2])

    def test_convexity_on_equal_rows(self):
        cfg = small_config()
        rng = np.random.default_rng(10)
        bank = rng.normal(size=(cfg.bank_size, cfg.horizon))
        bank[1] = bank[0]
        mix = np.array([0.4, 0.6, 0.0, 0.0])
        np.testing.assert_allclose(mix @ bank, bank[0])

    def test_mix_weights_positive_sum_one(self):
        cfg = small_config()
        params = M.init_params(cfg, np.random.default_rng(11))
        for seed in range(5):
            h_i = np.random.default_rng(seed).normal(size=cfg.embed_dim)
            h_t = np.random.default_rng(seed + 50).normal(size=cfg.conv_channels)
            _, mix, _ = M.shape_decode(h_i, h_t, params, cfg)
            assert np.all(mix > 0)
            assert mix.sum() == pytest.approx(1.0, abs=1e-12)


class TestForward:
    def test_amalgamate_identity(self):
        cfg = small_config()
        params = M.init_params(cfg, np.random.default_rng(12))
        X, I, _ = random_batch(cfg, b=3, seed=13)
        out, _ = M.batch_forward(params, cfg, X, I)
        np.testing.assert_array_equal(
            out["m_hat"], out["shape"] * out["sigma"][:, None] + out["mu"][:, None]
        )

    def test_flat_shape_gives_constant_output(self):
        shape = np.zeros(6)
        m_hat = shape * 2.0 + 3.0
        np.testing.assert_array_equal(m_hat, np.full(6, 3.0))
        shape = np.zeros(6)
        shape[1] = 1.0
        np.testing.assert_array_equal((shape * 2.0 + 3.0)[:2], [3.0, 5.0])

    def test_prediction_fields_by_variant(self):
        for variant in M.VARIANTS:
            cfg = small_config(variant)
            params = M.init_params(cfg, np.random.default_rng(14))
            example = TrainingExample(
                input_ts=np.random.default_rng(15).normal(size=(16, 3)),
                interaction=np.abs(np.random.default_rng(16).normal(size=5)) + 0.1,
                target=np.zeros(6),
            )
            pred = M.forward(example, params, cfg)
            assert pred.m_hat.shape == (6,)
            if variant == "proposed":
                assert pred.shape is not None and pred.bank.shape == (4, 6)
            else:
                assert pred.shape is None


class TestLoss:
    def test_perfect_prediction_zero_loss(self):
        target = np.array([1.0, 2.0, 3.0, 4.0])
        ztarget, _ = znormalize(target)
        pred = M.Prediction(
            m_hat=ztarget * 2.0 + 1.0, shape=ztarget, sigma=2.0, mu=1.0,
            mix_weights=np.array([0.5, 0.5]), bank=np.vstack([ztarget, ztarget]),
        )
        assert M.loss(pred, ztarget * 2.0 + 1.0, gamma=3.0) == pytest.approx(0.0)

    def test_zero_shape_term_is_gamma(self):
        # z-scores have unit population variance, so a flat shape costs gamma
        target = np.array([1.0, 2.0, 4.0, 8.0])
        shape = np.zeros(4)
        pred = M.Prediction(
            m_hat=shape * 1.0 + 0.0, shape=shape, sigma=1.0, mu=0.0,
            mix_weights=np.array([1.0]), bank=np.zeros((1, 4)),
        )
        expected_mse = float((target**2).mean())
        assert M.loss(pred, target, gamma=2.5) == pytest.approx(expected_mse + 2.5)

    def test_degenerate_target_drops_shape_term(self):
        shape = np.array([1.0, -1.0, 0.0])
        pred = M.Prediction(
            m_hat=shape * 1.0 + 0.0, shape=shape, sigma=1.0, mu=0.0,
            mix_weights=np.array([1.0]), bank=shape[None, :],
        )
        target = np.full(3, 7.0)
        expected_mse = float(((shape - target) ** 2).mean())
        assert M.loss(pred, target, gamma=10.0) == pytest.approx(expected_mse)

    def test_matches_hand_computed_value(self):
        rng = np.random.default_rng(17)
        cfg = small_config()
        params = M.init_params(cfg, rng)
        X, I, Y = random_batch(cfg, b=4, seed=18)
        losses = M.batch_losses(params, cfg, X, I, Y, gamma=0.7)
        out, _ = M.batch_forward(params, cfg, X, I)
        for i in range(4):
            mse = float(((out["m_hat"][i] - Y[i]) ** 2).mean())
            zy, degenerate = znormalize(Y[i])
            nmse = 0.0 if degenerate else float(((out["shape"][i] - zy) ** 2).mean())
            assert losses[i] == pytest.approx(mse + 0.7 * nmse, abs=1e-12)


def finite_difference_check(variant, seed=0, coords=40, eps=1e-6, tol=1e-5):
    rng = np.random.default_rng(seed)
    cfg = small_config(variant)
    params = M.init_params(cfg, rng)
    X, I, Y = random_batch(cfg, b=2, seed=seed + 100)
    _, grads = M.batch_loss_and_grads(params, cfg, X, I, Y, gamma=0.5)
    worst = 0.0
    for name, p in params.items():
        flat = p.ravel()
        ana = grads[name].ravel()
        picks = (
            range(flat.size) if flat.size <= coords
            else rng.choice(flat.size, coords, replace=False)
        )
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = M.batch_loss_and_grads(params, cfg, X, I, Y, gamma=0.5)
            flat[i] = orig - eps
            down, _ = M.batch_loss_and_grads(params, cfg, X, I, Y, gamma=0.5)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - ana[i]) / max(1.0, abs(num), abs(ana[i])))
    assert worst < tol, f"{variant}: max relative error {worst}"


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_full_model_gradients(variant):
    finite_difference_check(variant)


def test_one_example_overfit():
    rng = np.random.default_rng(19)
    cfg = small_config(conv_channels=8, shape_loss_weight=1.0)
    params = M.init_params(cfg, rng)
    X, I, Y = random_batch(cfg, b=1, seed=20)
    states = {k: AdamState.zeros_like(p, 0.01) for k, p in params.items()}
    initial, _ = M.batch_loss_and_grads(params, cfg, X, I, Y, 1.0)
    for _ in range(500):
        _, grads = M.batch_loss_and_grads(params, cfg, X, I, Y, 1.0)
        for k in params:
            params[k], states[k] = adam_step(params[k], grads[k], states[k])
    final, _ = M.batch_loss_and_grads(params, cfg, X, I, Y, 1.0)
    assert final < 1e-3 * initial


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="variant"):
        small_config("proposed_gru")
