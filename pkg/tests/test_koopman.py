"""
Unit tests for Koopman dynamics, loss terms and the critic objective
"""

import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from adv_koopman.exceptions import DivergenceError, ValidationError
from adv_koopman.koopman import (
    LossWeights,
    fd_gradients,
    forward_sequence,
    gan_losses,
    gradient_penalty,
    koopman_apply,
    loss_code,
    loss_grad,
    loss_pred,
    loss_recon,
    loss_reg,
    rollout,
    sequence_pairs,
    total_generator_loss,
)
from adv_koopman.networks import KoopmanModel, Mode, network_mode, to_network_layout, weight_arrays

from .conftest import constant_aux, tiny_model_config, traveling_wave, zero_aux

H = 1.0 / 8.0


def _window(start: int = 0, n_S: int = 2, dtype=torch.float32) -> torch.Tensor:
    """(1, n_S + 1, 1, 8) slice of the traveling wave"""
    x = traveling_wave(start + n_S + 1)[start:]
    return to_network_layout(x[None], spatial_rank=1, dtype=dtype)


def _double_model(seed: int = 0) -> KoopmanModel:
    torch.manual_seed(seed)
    model = KoopmanModel(tiny_model_config()).double()
    model.eval()
    return model


class TestLossWeights:
    def test_ks_preset(self):
        weights = LossWeights.for_ks()
        assert weights.lambda_gan == 0.01
        assert weights.order_weights() == {1: 1.0, 2: 1e-5, 4: 1e-8}
        assert weights.grid_spacing == H

    def test_gs_preset_drops_higher_orders(self):
        weights = LossWeights.for_gs()
        assert weights.order_weights() == {1: 1.0, 2: 0.0, 4: 0.0}
        assert weights.grid_spacing == 1.0

    def test_gated(self):
        weights = LossWeights.for_ks().gated(lambda_gan=0.0, lambda_grad=0.0)
        assert weights.lambda_gan == 0.0 and weights.lambda_grad == 0.0
        assert weights.lambda_reg == 1e-3

    def test_negative_weight(self):
        with pytest.raises(ValidationError, match="lambda_gan"):
            LossWeights(lambda_gan=-1.0)

    def test_dict_round_trip(self):
        weights = LossWeights.for_gs()
        assert LossWeights.from_dict(weights.to_dict()) == weights


class TestKoopmanDynamics:
    """Residual Koopman step and recursive rollout"""

    def test_zero_aux_is_identity(self, model):
        zero_aux(model)
        z = torch.randn(3, 4)
        assert torch.equal(koopman_apply(model, z, Mode.EVAL), z)

    def test_minus_identity_annihilates(self, model):
        constant_aux(model, -np.eye(4))
        z = torch.randn(3, 4)
        assert torch.equal(koopman_apply(model, z, Mode.EVAL), torch.zeros(3, 4))

    def test_constant_matrix_rollout(self, model):
        K = 0.1 * np.arange(16, dtype=np.float64).reshape(4, 4) / 16.0
        constant_aux(model, K)
        z = torch.randn(2, 4)
        states = rollout(model, z, 3, Mode.EVAL)
        assert states.shape == (2, 3, 4)

        step = torch.eye(4) + torch.as_tensor(K, dtype=torch.float32)
        expected = z @ torch.linalg.matrix_power(step, 3).T
        torch.testing.assert_close(states[:, -1], expected, rtol=1e-5, atol=1e-6)

    def test_divergence(self, model):
        constant_aux(model, 2.0 * np.eye(4))
        z = torch.ones(1, 4)
        with pytest.raises(DivergenceError, match="exceeded"):
            rollout(model, z, 5, Mode.EVAL, max_norm=10.0)

    @pytest.mark.parametrize("first,second", [(1, 4), (2, 3), (4, 1)])
    def test_rollout_composes(self, model, first, second):
        with torch.no_grad():
            model.aux.head.weight.normal_(std=0.05)
            z = torch.randn(3, 4)
            full = rollout(model, z, first + second, Mode.EVAL)
            head = rollout(model, z, first, Mode.EVAL)
            tail = rollout(model, head[:, -1], second, Mode.EVAL)
        torch.testing.assert_close(full, torch.cat([head, tail], dim=1), rtol=0, atol=0)

    def test_untrained_rollout_is_identity(self, model):
        z = 1.0e3 * torch.randn(2, 4)
        states = rollout(model, z, 64, Mode.TRAIN)
        assert torch.equal(states[:, -1], z)

    def test_rollout_length(self, model):
        with pytest.raises(ValidationError, match="rollout length"):
            rollout(model, torch.zeros(1, 4), 0)


class TestAuxLearning:
    """Only the AUX network trains, against latent data with a known operator"""

    def test_learns_constant_operator(self, model):
        gen = torch.Generator().manual_seed(5)
        A = 0.1 * torch.randn(4, 4, generator=gen)
        optimizer = torch.optim.Adam(model.aux.parameters(), lr=5e-3)
        schedule = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=0.995)
        frozen = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("aux.")}

        losses = []
        with network_mode(model.aux, Mode.EVAL):
            for _ in range(1000):
                z = torch.randn(64, 4, generator=gen)
                target = z + z @ A.T
                loss = ((koopman_apply(model, z) - target) ** 2).mean()
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                schedule.step()
                losses.append(loss.item())

        windows = np.asarray(losses).reshape(10, 100).mean(axis=1)
        assert windows[-1] < 1e-2 * windows[0]
        assert all(b <= 1.1 * a for a, b in zip(windows, windows[1:]))

        with torch.no_grad():
            z = torch.randn(256, 4, generator=gen)
            step = koopman_apply(model, z, Mode.EVAL) - z
            error = (step - z @ A.T).abs().mean() / (z @ A.T).abs().mean()
        assert error.item() < 0.05
        for name, value in model.state_dict().items():
            if name in frozen:
                assert torch.equal(value, frozen[name]), name


class TestSequenceForward:
    def test_shapes(self, model):
        model.eval()
        forward = forward_sequence(model, _window())
        assert forward.z_true.shape == (1, 3, 4)
        assert forward.z_pred.shape == (1, 2, 4)
        assert forward.x_pred.shape == (1, 2, 1, 8)
        assert forward.x_recon.shape == (1, 1, 8)
        assert forward.n_S == 2

    def test_rejects_flat_input(self, model):
        with pytest.raises(ValidationError, match="x_seq"):
            forward_sequence(model, torch.zeros(3, 1, 8))

    def test_masked_snapshots_zeroed(self, model):
        model.eval()
        mask = torch.tensor([[False, True, False]])
        forward = forward_sequence(model, _window(), mask)
        assert torch.all(forward.x_seq[0, 1] == 0)
        assert forward.step_weights.tolist() == [[0.0, 1.0]]
        assert forward.anchor_weight.tolist() == [1.0]


class TestLossTerms:
    def test_recon_without_forward(self, model):
        model.eval()
        x = _window()[:, 0]
        expected = ((x - model.decode(model.encode(x))) ** 2).mean()
        torch.testing.assert_close(loss_recon(model, x), expected)

    def test_recon_needs_input(self, model):
        with pytest.raises(ValidationError, match="loss_recon"):
            loss_recon(model)

    def test_static_sequence_with_zero_aux(self, model):
        model.eval()
        zero_aux(model)
        x = _window(n_S=0).repeat(1, 3, 1, 1)
        forward = forward_sequence(model, x)
        assert loss_code(model, forward=forward).item() <= 1e-12
        torch.testing.assert_close(
            loss_pred(model, forward=forward), loss_recon(model, forward=forward)
        )

    def test_masked_step_excluded_from_pred(self, model):
        model.eval()
        x = _window()
        full = forward_sequence(model, x)
        per_step = ((full.x_seq[:, 1:] - full.x_pred) ** 2).flatten(start_dim=2).mean(-1)
        masked = loss_pred(model, x, torch.tensor([[False, False, True]]))
        torch.testing.assert_close(masked, per_step[0, 0] / 2)

    def test_grad_components(self, model):
        model.eval()
        weights = LossWeights(lambda1=2.0, lambda2=0.0, lambda4=0.0, grid_spacing=H)
        grad = loss_grad(model, _window(), weights=weights)
        assert set(grad.by_order) == {1, 2, 4}
        torch.testing.assert_close(grad.total, 2.0 * grad.by_order[1])

    def test_reg_sums_squared_weights(self, model):
        with torch.no_grad():
            total = 0
            for _, weight in weight_arrays(model):
                weight.fill_(1.0)
                total += weight.numel()
            for param in model.disc.parameters():
                param.mul_(7.0)
        assert loss_reg(model).item() == pytest.approx(total)


class TestStencils:
    """Finite-difference stencils used by the gradient loss"""

    @pytest.fixture
    def grid(self):
        return np.arange(64) * H

    @pytest.mark.parametrize("order", [1, 2, 4])
    def test_constant_has_no_derivative(self, order):
        np.testing.assert_allclose(fd_gradients(np.full(16, 2.5), order, H), 0.0, atol=1e-9)

    def test_quadratic_exactness(self, grid):
        u = grid**2
        interior = slice(2, -2)
        np.testing.assert_allclose(fd_gradients(u, 1, H)[interior], 2 * grid[interior], atol=1e-10)
        np.testing.assert_allclose(fd_gradients(u, 2, H)[interior], 2.0, atol=1e-9)
        np.testing.assert_allclose(fd_gradients(u, 4, H)[interior], 0.0, atol=1e-6)

    def test_cubic_fourth_derivative(self, grid):
        np.testing.assert_allclose(fd_gradients(grid**3, 4, H)[2:-2], 0.0, atol=1e-4)

    @pytest.mark.parametrize(
        "order,exact,bound",
        [
            (1, np.cos, H**2 / 6),
            (2, lambda x: -np.sin(x), H**2 / 12),
            (4, np.sin, H**2 / 6),
        ],
    )
    def test_sine_error_bounds(self, grid, order, exact, bound):
        approx = fd_gradients(np.sin(grid), order, H)[2:-2]
        error = np.max(np.abs(approx - exact(grid[2:-2])))
        assert error <= bound

    def test_first_order_error_level(self):
        x = np.arange(0, 2 * np.pi, H)
        error = np.max(np.abs(fd_gradients(np.sin(x), 1, H)[2:-2] - np.cos(x[2:-2])))
        assert error == pytest.approx(2.6e-3, rel=1e-2)

    def test_two_dimensional_sum(self):
        i, j = np.meshgrid(np.arange(16.0), np.arange(16.0), indexing="ij")
        lap = fd_gradients(i**2 + j**2, 2, 1.0, spatial_rank=2)
        np.testing.assert_allclose(lap[2:-2, 2:-2], 4.0)

    def test_torch_input(self):
        out = fd_gradients(torch.ones(2, 8), 1, H)
        assert isinstance(out, torch.Tensor)
        assert torch.count_nonzero(out) == 0

    def test_unsupported_order(self):
        with pytest.raises(ValidationError, match="order 3"):
            fd_gradients(np.zeros(8), 3)


class TestCriticObjective:
    """WGAN losses and gradient penalty"""

    @pytest.fixture
    def pairs(self):
        torch.manual_seed(3)
        return torch.randn(4, 6, 8), torch.randn(4, 6, 8)

    def test_penalty_constant_critic(self, pairs):
        real, fake = pairs
        critic = lambda x: torch.zeros(x.shape[0]) + 3.0  # noqa: E731
        gp = gradient_penalty(critic, real, fake, gp_coeff=10.0)
        assert gp.item() == pytest.approx(10.0)

    def test_penalty_linear_critic(self, pairs):
        real, fake = pairs
        w = torch.full((6, 8), 3.0 / np.sqrt(48))
        critic = lambda x: (x * w).flatten(start_dim=1).sum(dim=1)  # noqa: E731
        gp = gradient_penalty(critic, real, fake, gp_coeff=10.0)
        assert gp.item() == pytest.approx(40.0, rel=1e-6)

    def test_gan_losses_linear_critic(self, pairs):
        real, fake = pairs
        w = torch.randn(6, 8)
        critic = lambda x: (x * w).flatten(start_dim=1).sum(dim=1)  # noqa: E731
        losses = gan_losses(critic, real, fake, with_penalty=False)
        d_fake, d_real = critic(fake).mean(), critic(real).mean()
        torch.testing.assert_close(losses.gen_loss, d_fake)
        torch.testing.assert_close(losses.disc_loss, d_fake - d_real)
        assert losses.gp.item() == 0.0

    def test_fake_pair_zeroed_at_masked_steps(self, model):
        model.eval()
        mask = torch.tensor([[False, False, True]])
        real, fake = sequence_pairs(forward_sequence(model, _window(), mask))
        assert real.shape == fake.shape == (1, 4, 8)
        # channels: X_t, X_t+1, X_t+1, X_t+2 for n_S=2, C=1
        assert torch.all(fake[0, 3] == 0) and torch.all(real[0, 3] == 0)
        assert not torch.all(fake[0, 2] == 0)


class TestTotalObjective:
    def test_component_additivity(self):
        model = _double_model()
        weights = LossWeights(lambda_grad=0.7, lambda_reg=1e-3, lambda_gan=0.05)
        loss = total_generator_loss(model, _window(dtype=torch.float64), None, weights)
        expected = (
            loss.recon
            + loss.pred
            + loss.code
            + 0.7 * loss.grad
            + 1e-3 * loss.reg
            + 0.05 * loss.gan
        )
        assert abs(loss.total.item() - expected.item()) <= 1e-10
        record = loss.as_dict()
        assert {"grad1", "grad2", "grad4", "total", "gan"} <= set(record)

    def test_masking_invariance(self, model):
        model.eval()
        mask = torch.tensor([[False, True, False]])
        x_nan = _window().clone()
        x_nan[0, 1] = float("nan")
        x_other = _window().clone()
        x_other[0, 1] = 123.0

        weights = LossWeights.for_ks()
        a = total_generator_loss(model, x_nan, mask, weights)
        b = total_generator_loss(model, x_other, mask, weights)
        assert a.is_finite()
        for key, value in a.as_dict().items():
            assert np.isfinite(value), key
            assert value == b.as_dict()[key], key

    def test_no_gan_term_when_disabled(self, model):
        model.eval()
        loss = total_generator_loss(model, _window(), None, LossWeights(lambda_gan=0.0))
        assert loss.gan.item() == 0.0


def _directional_check(loss_fn, params, n_directions=10, eps=1e-6, seed=0):
    """Compare analytic and central-difference directional derivatives"""
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    grad = torch.cat([p.grad.reshape(-1) for p in params])
    theta = parameters_to_vector(params).detach().clone()

    gen = torch.Generator().manual_seed(seed)
    for _ in range(n_directions):
        v = torch.randn(theta.shape, generator=gen, dtype=theta.dtype)
        v /= torch.linalg.vector_norm(v)
        # gradient_penalty needs autograd enabled
        vector_to_parameters(theta + eps * v, params)
        plus = loss_fn().item()
        vector_to_parameters(theta - eps * v, params)
        minus = loss_fn().item()
        vector_to_parameters(theta, params)
        numeric = (plus - minus) / (2 * eps)
        analytic = torch.dot(grad, v).item()
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-8)


class TestGradients:
    """Analytic vs finite-difference gradients on the tiny model"""

    def test_generator_objective(self):
        model = _double_model()
        x = _window(start=1, dtype=torch.float64)
        weights = LossWeights(lambda_gan=0.01)

        def objective():
            return total_generator_loss(model, x, None, weights).total

        with network_mode(model, Mode.EVAL):
            _directional_check(objective, model.generator_parameters())

    def test_critic_objective(self):
        model = _double_model()
        with torch.no_grad():
            real, fake = sequence_pairs(forward_sequence(model, _window(dtype=torch.float64)))

        def objective():
            gen = torch.Generator().manual_seed(11)
            losses = gan_losses(model.discriminate, real, fake, gp_coeff=10.0, generator=gen)
            return losses.disc_loss + losses.gp

        with network_mode(model, Mode.EVAL):
            _directional_check(objective, model.disc.parameters())
