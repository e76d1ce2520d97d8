import math

import numpy as np
import pytest

from amgdiff.denoiser import ANOMALY_LABEL, HEALTHY_LABEL, NULL_LABEL, DenoiserConfig, DenoiserModel
from amgdiff.diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    TrainConfig,
    ddpm_step,
    drop_labels,
    forward_diffuse,
    generate_healthy_counterpart,
    guided_denoise_step,
    guided_eps,
    make_schedule,
    standardize,
    train,
)
from amgdiff.errors import ConfigError, ContractError, DegenerateError, ShapeError
from amgdiff.signal import Label, SampleSet

SMALL = DenoiserConfig(input_len=16, patch_len=4, hidden_dim=16, num_attention_blocks=1, num_heads=2,
                       timestep_embed_dim=8, T_max=200)


def _toy_set(n_healthy=24, n_anom=8, L=16, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(L)
    rows, labels = [], []
    for i in range(n_healthy + n_anom):
        f = 1 if i < n_healthy else 3
        rows.append(np.sin(2 * np.pi * f * t / L + rng.uniform(0, 2 * np.pi)) + 0.01 * rng.standard_normal(L))
        labels.append(Label.HEALTHY if i < n_healthy else Label.ANOMALY)
    return SampleSet(np.array(rows), 100.0, labels, [f"x{i}" for i in range(len(rows))], [0] * len(rows))


class TestSchedule:
    def test_t1000_endpoint(self):
        s = make_schedule(1000)
        assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.05)

    def test_constant_schedule(self):
        np.testing.assert_allclose(make_schedule(2, 0.1, 0.1).alpha_bar, [0.9, 0.81])

    def test_invariants(self):
        s = make_schedule(200)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] < s.alpha_bar[0] < 1
        np.testing.assert_allclose(s.sigma**2 + s.alpha, 1.0, atol=1e-15)
        np.testing.assert_array_equal(s.alpha, 1 - s.beta)

    @pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_params_round_trip(self):
        s = make_schedule(50, 1e-3, 0.05)
        np.testing.assert_array_equal(NoiseSchedule.from_params(s.params()).alpha_bar, s.alpha_bar)


class TestForwardDiffuse:
    def test_zero_signal(self):
        s = make_schedule(100)
        noise = np.random.default_rng(0).standard_normal(32)
        np.testing.assert_allclose(forward_diffuse(np.zeros(32), 40, s, noise), math.sqrt(1 - s.alpha_bar[39]) * noise)

    def test_variance_preserved(self):
        s = make_schedule(1000)
        rng = np.random.default_rng(1)
        for t in (1, 250, 1000):
            x = forward_diffuse(rng.standard_normal(20000), t, s, rng.standard_normal(20000))
            assert np.var(x) == pytest.approx(1.0, rel=0.02)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            forward_diffuse(np.zeros(4), 1, make_schedule(10), np.zeros(5))

    def test_t_range(self):
        with pytest.raises(ContractError):
            forward_diffuse(np.zeros(4), 11, make_schedule(10), np.zeros(4))


def test_label_dropout_rate_within_three_sigma():
    rng = np.random.default_rng(0)
    n, p = 50000, 0.1
    u = drop_labels(np.full(n, HEALTHY_LABEL), p, rng)
    null = np.sum(u == NULL_LABEL)
    assert abs(null - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    assert set(np.unique(u)) == {NULL_LABEL, HEALTHY_LABEL}


def test_standardize():
    z, m, s = standardize(np.array([[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 12.0, 12.0]]))
    np.testing.assert_allclose(z.mean(1), 0, atol=1e-7)
    np.testing.assert_allclose(z.std(1), 1, atol=1e-6)
    np.testing.assert_allclose(z * s + m, [[1, 2, 3, 4], [10, 10, 12, 12]], rtol=1e-6)
    with pytest.raises(DegenerateError):
        standardize(np.ones((1, 4)))


class _ConstModel:
    """Stand-in returning fixed predictions per label, for guidance algebra."""

    def __init__(self, by_label):
        self.by_label = by_label

    def predict_noise(self, x, t, u):
        u = np.broadcast_to(u, (x.shape[0],))
        return np.stack([self.by_label[int(k)] for k in u]).astype(np.float32)


class TestGuidance:
    def test_identical_predictions_give_v(self):
        v = np.arange(4, dtype=np.float32)
        m = _ConstModel({NULL_LABEL: v, HEALTHY_LABEL: v})
        for w in (0.0, 1.0, 3.0, 7.5):
            np.testing.assert_allclose(guided_eps(m, np.zeros((1, 4), np.float32), 5, HEALTHY_LABEL, w)[0], v, rtol=1e-6)

    def test_combination(self):
        m = _ConstModel({NULL_LABEL: np.zeros(3), HEALTHY_LABEL: np.ones(3)})
        np.testing.assert_allclose(guided_eps(m, np.zeros((1, 3), np.float32), 5, HEALTHY_LABEL, 3.0)[0], 4.0)

    def test_w0_is_plain_conditional_step_bit_exact(self):
        m = DenoiserModel(SMALL, seed=3)
        s = make_schedule(50)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 16)).astype(np.float32)
        noise = rng.standard_normal((5, 16)).astype(np.float32)
        for t in (1, 2, 37, 50):
            a = guided_denoise_step(m, x, t, HEALTHY_LABEL, 0.0, s, noise)
            b = ddpm_step(m, x, t, HEALTHY_LABEL, s, noise)
            assert np.array_equal(a, b)

    def test_final_step_adds_no_noise(self):
        m = DenoiserModel(SMALL, seed=3)
        s = make_schedule(50)
        x = np.ones((2, 16), np.float32)
        a = guided_denoise_step(m, x, 1, HEALTHY_LABEL, 3.0, s, np.zeros((2, 16)))
        b = guided_denoise_step(m, x, 1, HEALTHY_LABEL, 3.0, s, 100 * np.ones((2, 16)))
        np.testing.assert_array_equal(a, b)

    def test_t_out_of_range(self):
        with pytest.raises(ContractError):
            guided_denoise_step(DenoiserModel(SMALL), np.zeros(16), 51, 1, 3.0, make_schedule(50), np.zeros(16))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            GuidanceConfig(w=-1)
        with pytest.raises(ConfigError):
            GuidanceConfig(t_star_frac=0)
        assert GuidanceConfig(t_star_frac=0.5).t_star(200) == 100
        assert GuidanceConfig(t_star_frac=1e-6).t_star(200) == 1


@pytest.fixture(scope="module")
def trained():
    data = _toy_set()
    model = DenoiserModel(SMALL, seed=0)
    result = train(model, data, make_schedule(200), TrainConfig(epochs=100, batch_size=8, seed=4))
    return model, data, result


class TestTraining:
    def test_loss_halves(self, trained):
        _, _, result = trained
        losses = [s[2] for s in result.steps]
        assert len(losses) == 400
        assert np.mean(losses[-40:]) < 0.5 * np.mean(losses[:10])

    def test_dropout_fraction(self, trained):
        _, _, r = trained
        p = r.null_tokens / r.total_tokens
        assert abs(p - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / r.total_tokens)

    def test_conditioning_is_live(self, trained):
        model, _, _ = trained
        x = np.random.default_rng(0).standard_normal((2, 16))
        h = model.predict_noise(x, 10, HEALTHY_LABEL)
        n = model.predict_noise(x, 10, NULL_LABEL)
        assert np.max(np.abs(h - n)) > 0

    def test_deterministic(self):
        data = _toy_set(8, 4)
        runs = []
        for _ in range(2):
            m = DenoiserModel(SMALL, seed=1)
            train(m, data, make_schedule(50), TrainConfig(epochs=3, batch_size=4, seed=9))
            runs.append(m.params)
        for k in runs[0]:
            np.testing.assert_array_equal(runs[0][k], runs[1][k])

    def test_loss_csv(self, trained, tmp_path):
        _, _, r = trained
        r.write_csv(tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,loss" and len(lines) == 401

    def test_requires_both_classes(self):
        data = _toy_set(6, 0)
        with pytest.raises(ContractError):
            train(DenoiserModel(SMALL), data, make_schedule(50), TrainConfig(epochs=1))


class TestGeneration:
    def test_tiny_t_star_is_near_identity(self, trained):
        model, data, _ = trained
        out = generate_healthy_counterpart(model, data, make_schedule(200), GuidanceConfig(t_star_frac=1e-6, seed=1))
        rel = np.sqrt(np.mean((out.values - data.values) ** 2) / np.mean(data.values**2))
        assert rel < 0.1

    def test_deterministic_and_tagged(self, trained):
        model, data, _ = trained
        g = GuidanceConfig(t_star_frac=0.5, seed=5, chunk_size=7)
        a = generate_healthy_counterpart(model, data, make_schedule(200), g)
        b = generate_healthy_counterpart(model, data, make_schedule(200), GuidanceConfig(t_star_frac=0.5, seed=5))
        np.testing.assert_array_equal(a.values, b.values)
        assert a.info[3]["counterpart_of"] == "x3#0"
        assert a.metadata["model_trained"] is True
        assert set(a.labels) == {Label.HEALTHY}

    def test_untrained_is_flagged(self):
        out = generate_healthy_counterpart(DenoiserModel(SMALL), _toy_set(2, 1), make_schedule(50), GuidanceConfig())
        assert out.metadata["model_trained"] is False

    def test_length_mismatch(self, trained):
        model, _, _ = trained
        bad = SampleSet(np.ones((1, 32)) + np.arange(32), 1.0, [Label.ANOMALY], ["a"], [0])
        with pytest.raises(ShapeError):
            generate_healthy_counterpart(model, bad, make_schedule(50), GuidanceConfig())
