import math

import torch
import torch.nn as nn
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from backbone.models import BackboneConfig
from earlyexit_lab.errors import ConfigError, NonFiniteLoss, ShapeMismatch
from sampling.policies import ExitPolicy
from .losses import (
    LossWeights, exit_decision, joint_objective, loss_joint,
    loss_layerwise_plain, loss_simple, loss_ual, loss_uncertainty,
    pseudo_uncertainty)
from .models import (
    EarlyExitDenoiser, UncertaintyHeads, UncertaintyRecord, aggregate,
    estimate_uncertainty)


def record(u_scalar, layer_index=1):
    u_scalar = torch.as_tensor([u_scalar], dtype=torch.float64)
    return UncertaintyRecord(
        u_map=u_scalar[:, None], u_scalar=u_scalar,
        layer_index=layer_index, t=torch.tensor([1]))


def micro_model(depth=3, hidden_dim=8, seed=0, **overrides):
    torch.manual_seed(seed)
    config = BackboneConfig(
        depth=depth, hidden_dim=hidden_dim, num_heads=2, input_shape=(2,),
        **overrides)
    model = EarlyExitDenoiser(config).double()
    for head in model.uem.heads:
        nn.init.normal_(head.weight, std=0.3)
        nn.init.normal_(head.bias, std=0.3)
    return model


def micro_batch(seed=1, batch=4):
    generator = torch.Generator().manual_seed(seed)
    x_t = torch.randn(batch, 2, dtype=torch.float64, generator=generator)
    eps = torch.randn(batch, 2, dtype=torch.float64, generator=generator)
    t = torch.tensor([1, 250, 500, 1000])[:batch]
    return x_t, t, eps


class ObjectiveHarness(nn.Module):
    """ Wraps the joint objective so torch.func can swap the parameters.
    """
    def __init__(self, model, x_t, t, eps, frozen):
        super().__init__()
        self.model = model
        self.inputs = (x_t, t, eps)
        self.frozen = frozen

    def forward(self):
        x_t, t, eps = self.inputs
        return joint_objective(
            self.model, x_t, t, eps, frozen=self.frozen).total


class TestEstimateUncertainty(SimpleTestCase):

    def setUp(self):
        self.tokens = torch.randn(3, 4, 8, dtype=torch.float64)
        self.t_emb = torch.randn(3, 8, dtype=torch.float64)
        self.head = nn.Linear(16, 1).double()

    def test_zero_head_gives_one_half(self):
        """
        w = 0 and b = 0 put every token at sigmoid(0) = 0.5.
        """
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        result = estimate_uncertainty(self.tokens, self.t_emb, self.head)
        self.assertTrue(torch.equal(
            result.u_map, torch.full((3, 4), 0.5, dtype=torch.float64)))
        self.assertEqual(result.u_scalar.tolist(), [0.5, 0.5, 0.5])

    def test_saturated_bias(self):
        """
        A bias of 20 with zero weights gives u within 1e-8 of 1, still
        strictly below it.
        """
        nn.init.zeros_(self.head.weight)
        nn.init.constant_(self.head.bias, 20.0)
        u_map = estimate_uncertainty(self.tokens, self.t_emb, self.head).u_map
        self.assertLess(float((1 - u_map).abs().max()), 1e-8)
        self.assertTrue(bool((u_map < 1).all()))

    def test_aggregation(self):
        """
        A constant map aggregates to its value; max picks the largest
        token.
        """
        u_map = torch.tensor([[0.3, 0.3, 0.3], [0.1, 0.7, 0.4]])
        self.assertAlmostEqual(float(aggregate(u_map)[0]), 0.3, places=6)
        self.assertAlmostEqual(
            float(aggregate(u_map, 'max')[1]), 0.7, places=6)
        with self.assertRaises(ConfigError):
            aggregate(u_map, 'median')

    def test_dimension_mismatch(self):
        """
        A head whose input size is not hidden + embedding is refused.
        """
        with self.assertRaises(ShapeMismatch):
            estimate_uncertainty(
                self.tokens, self.t_emb, nn.Linear(12, 1).double())

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(
        scale=st.floats(min_value=1e-3, max_value=1e3),
        bias=st.floats(min_value=-1e3, max_value=1e3),
        seed=st.integers(min_value=0, max_value=2 ** 16),
    )
    def test_open_unit_interval(self, scale, bias, seed):
        """
        Every estimated u lies strictly inside (0, 1), even where the
        sigmoid saturates.
        """
        generator = torch.Generator().manual_seed(seed)
        tokens = scale * torch.randn(2, 5, 8, generator=generator)
        t_emb = torch.randn(2, 8, generator=generator)
        head = nn.Linear(16, 1)
        nn.init.constant_(head.bias, bias)
        result = estimate_uncertainty(tokens, t_emb, head)
        self.assertTrue(bool((result.u_map > 0).all()))
        self.assertTrue(bool((result.u_map < 1).all()))
        self.assertTrue(bool((result.u_scalar > 0).all()))
        self.assertTrue(bool((result.u_scalar < 1).all()))


class TestUncertaintyHeads(SimpleTestCase):

    def test_one_head_per_intermediate_layer(self):
        """
        Depth N gets N - 1 unshared heads, all starting at zero.
        """
        heads = UncertaintyHeads(depth=5, hidden_dim=8)
        self.assertEqual(len(heads.heads), 4)
        self.assertIsNot(heads.head(1), heads.head(2))
        for head in heads.heads:
            self.assertEqual(float(head.weight.abs().sum()), 0.0)

    def test_shared_parameters(self):
        """
        share_params reuses a single head at every layer.
        """
        heads = UncertaintyHeads(depth=5, hidden_dim=8, share_params=True)
        self.assertEqual(len(heads.heads), 1)
        self.assertIs(heads.head(1), heads.head(4))

    def test_no_head_at_final_layer(self):
        """
        Layer N exits unconditionally and has no head.
        """
        heads = UncertaintyHeads(depth=5, hidden_dim=8)
        with self.assertRaises(ConfigError):
            heads.head(5)
        with self.assertRaises(ConfigError):
            heads.head(0)

    def test_collect_records(self):
        """
        A full pass yields one record per intermediate layer with a
        per-token map.
        """
        model = micro_model(depth=4)
        x_t, t, _ = micro_batch()
        eps_hat, trace, records = model.collect(x_t, t)
        self.assertEqual([r.layer_index for r in records], [1, 2, 3])
        for item in records:
            self.assertEqual(tuple(item.u_map.shape), (4, 1))
            self.assertEqual(tuple(item.u_scalar.shape), (4,))


class TestPseudoUncertainty(SimpleTestCase):

    def test_perfect_prediction(self):
        """
        pred = eps gives a zero target everywhere.
        """
        eps = torch.randn(3, 1, 4, 4)
        self.assertEqual(
            float(pseudo_uncertainty(eps.clone(), eps).abs().max()), 0.0)

    def test_single_unit_error(self):
        """
        An absolute error of 1 on one pixel gives tanh(1) on that token
        and 0 elsewhere.
        """
        eps = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        pred = eps.clone()
        pred[0, 0, 1, 0] = 1.0
        target = pseudo_uncertainty(pred, eps)
        self.assertEqual(tuple(target.shape), (1, 4))
        self.assertAlmostEqual(float(target[0, 2]), 0.76159, places=5)
        self.assertAlmostEqual(
            float(target[0, 2]), math.tanh(1.0), places=12)
        self.assertEqual(float(target[0, [0, 1, 3]].abs().sum()), 0.0)

    def test_patch_pooling(self):
        """
        With patches the absolute error is averaged per patch before tanh.
        """
        eps = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        pred = eps.clone()
        pred[0, 0, 0, 0] = 2.0
        target = pseudo_uncertainty(pred, eps, patch_size=2)
        self.assertEqual(tuple(target.shape), (1, 4))
        self.assertAlmostEqual(float(target[0, 0]), math.tanh(0.5))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            pseudo_uncertainty(torch.zeros(2, 2), torch.zeros(2, 3))

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(
        scale=st.floats(min_value=0.0, max_value=1e30),
        seed=st.integers(min_value=0, max_value=2 ** 16),
    )
    def test_half_open_unit_interval(self, scale, seed):
        """
        Every target lies in [0, 1), including very large errors.
        """
        generator = torch.Generator().manual_seed(seed)
        pred = scale * torch.randn(4, 2, generator=generator)
        eps = torch.randn(4, 2, generator=generator)
        target = pseudo_uncertainty(pred, eps)
        self.assertTrue(bool((target >= 0).all()))
        self.assertTrue(bool((target < 1).all()))

    def test_not_a_gradient_path(self):
        pred = torch.randn(4, 2, requires_grad=True)
        self.assertFalse(
            pseudo_uncertainty(pred, torch.zeros(4, 2)).requires_grad)


class TestLossFunctions(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(11)
        self.eps = torch.randn(6, 1, 4, 4, dtype=torch.float64,
                               generator=generator)
        self.preds = [
            torch.randn(6, 1, 4, 4, dtype=torch.float64, generator=generator)
            for _ in range(3)]

    def test_loss_simple(self):
        """
        Zero for a perfect prediction, 1 for the scalar (1, 0) pair and
        equal to a direct recomputation on random data.
        """
        self.assertEqual(float(loss_simple(self.eps, self.eps)), 0.0)
        self.assertEqual(
            float(loss_simple(torch.ones(1), torch.zeros(1))), 1.0)
        oracle = ((self.preds[0] - self.eps) ** 2).sum() / self.eps.numel()
        self.assertLess(
            abs(float(loss_simple(self.preds[0], self.eps)) - float(oracle)),
            1e-12)
        with self.assertRaises(ShapeMismatch):
            loss_simple(torch.zeros(2), torch.zeros(3))

    def test_loss_uncertainty(self):
        """
        Zero on a perfect match, 0.25 for (0.75, 0.25) on one token and
        additive over layers.
        """
        u = torch.full((2, 3), 0.4, dtype=torch.float64)
        self.assertEqual(float(loss_uncertainty([u], [u.clone()])), 0.0)
        one = torch.tensor([[0.75]], dtype=torch.float64)
        target = torch.tensor([[0.25]], dtype=torch.float64)
        self.assertEqual(float(loss_uncertainty([one], [target])), 0.25)
        self.assertEqual(
            float(loss_uncertainty([one, one], [target, target])), 0.5)
        with self.assertRaises(ShapeMismatch):
            loss_uncertainty([one, one], [target])

    def test_loss_uncertainty_detaches_targets(self):
        u = torch.full((1, 1), 0.75, requires_grad=True)
        target = torch.full((1, 1), 0.25, requires_grad=True)
        loss_uncertainty([u], [target]).backward()
        self.assertIsNotNone(u.grad)
        self.assertIsNone(target.grad)

    def test_loss_layerwise_plain(self):
        """
        Zero for perfect heads; one head reduces to loss_simple; doubling
        every error quadruples the sum.
        """
        perfect = [self.eps.clone() for _ in range(3)]
        self.assertEqual(
            float(loss_layerwise_plain(perfect, self.eps, depth=4)), 0.0)
        self.assertEqual(
            float(loss_layerwise_plain(self.preds[:1], self.eps, depth=2)),
            float(loss_simple(self.preds[0], self.eps)))
        doubled = [self.eps + 2 * (p - self.eps) for p in self.preds]
        base = float(loss_layerwise_plain(self.preds, self.eps, depth=4))
        self.assertAlmostEqual(
            float(loss_layerwise_plain(doubled, self.eps, depth=4)),
            4 * base, places=10)
        with self.assertRaises(ShapeMismatch):
            loss_layerwise_plain(self.preds, self.eps, depth=3)

    def test_loss_ual_reductions(self):
        """
        u = 1 zeroes the loss; u = 0 reproduces the plain layer-wise loss to
        1e-12.
        """
        ones = [torch.ones(6, 4, dtype=torch.float64) for _ in range(3)]
        zeros = [torch.zeros(6, 4, dtype=torch.float64) for _ in range(3)]
        self.assertEqual(float(loss_ual(
            self.preds, self.eps, ones, depth=4, patch_size=2)), 0.0)
        plain = float(loss_layerwise_plain(self.preds, self.eps, depth=4))
        weighted = float(loss_ual(
            self.preds, self.eps, zeros, depth=4, patch_size=2))
        self.assertLess(abs(weighted - plain), 1e-12)

    def test_loss_ual_hand_value(self):
        """
        One layer, uniform u = 0.25 and a plain term of 0.8 gives 0.6.
        """
        eps = torch.zeros(2, 3, dtype=torch.float64)
        pred = eps + math.sqrt(0.8)
        u = torch.full((2, 1), 0.25, dtype=torch.float64)
        self.assertAlmostEqual(
            float(loss_layerwise_plain([pred], eps, depth=2)), 0.8)
        self.assertAlmostEqual(
            float(loss_ual([pred], eps, [u], depth=2)), 0.6, places=12)

    def test_loss_ual_counts(self):
        u = torch.zeros(6, 16, dtype=torch.float64)
        with self.assertRaises(ShapeMismatch):
            loss_ual(self.preds, self.eps, [u, u], depth=4)
        with self.assertRaises(ShapeMismatch):
            loss_ual(self.preds, self.eps, [u, u, u], depth=5)

    def test_loss_ual_weights_are_constants(self):
        """
        Gradients never reach u through the layer-wise loss.
        """
        u = torch.full((6, 16), 0.3, dtype=torch.float64, requires_grad=True)
        pred = self.preds[0].clone().requires_grad_(True)
        loss_ual([pred], self.eps, [u], depth=2).backward()
        self.assertIsNone(u.grad)
        self.assertIsNotNone(pred.grad)

    def test_loss_joint(self):
        """
        Zero components sum to zero, (0.5, 0.25, 0.25) to 1 and zero
        weights reduce to the simple loss.
        """
        zero = torch.zeros(())
        self.assertEqual(float(loss_joint(zero, zero, zero)), 0.0)
        self.assertEqual(float(loss_joint(
            torch.tensor(0.5), torch.tensor(0.25), torch.tensor(0.25))), 1.0)
        f64 = dict(dtype=torch.float64)
        self.assertEqual(float(loss_joint(
            torch.tensor(0.7, **f64), torch.tensor(3.0, **f64),
            torch.tensor(9.0, **f64),
            LossWeights(lambda_u=0.0, beta_ual=0.0))), 0.7)

    def test_loss_joint_non_finite(self):
        """
        A diverged component is reported by name.
        """
        with self.assertRaises(NonFiniteLoss) as cm:
            loss_joint(
                torch.tensor(0.5), torch.tensor(float('nan')),
                torch.tensor(0.1))
        self.assertEqual(cm.exception.component, 'uncertainty')
        with self.assertRaises(NonFiniteLoss) as cm:
            loss_joint(
                torch.tensor(0.5), torch.tensor(0.1),
                torch.tensor(float('inf')))
        self.assertEqual(cm.exception.component, 'layerwise')

    def test_weights_validation(self):
        self.assertEqual(LossWeights(), LossWeights(1.0, 1.0))
        with self.assertRaises(ConfigError):
            LossWeights(lambda_u=-1.0)


class TestExitDecision(SimpleTestCase):

    def test_zero_threshold_never_fires(self):
        self.assertFalse(bool(exit_decision(
            record(1e-30), ExitPolicy(threshold=0.0))[0]))

    def test_threshold_above_one_always_fires(self):
        self.assertTrue(bool(exit_decision(
            record(0.999), ExitPolicy(threshold=1.5, min_layer=1))[0]))

    def test_threshold_comparison(self):
        """
        u = 0.05 exits under 0.1 but not under 0.01.
        """
        self.assertTrue(bool(exit_decision(
            record(0.05), ExitPolicy(threshold=0.1))[0]))
        self.assertFalse(bool(exit_decision(
            record(0.05), ExitPolicy(threshold=0.01))[0]))

    def test_min_layer_floor(self):
        """
        No exit is taken below min_layer, however low u is.
        """
        policy = ExitPolicy(threshold=0.5, min_layer=3)
        self.assertFalse(bool(exit_decision(record(0.01, 2), policy)[0]))
        self.assertTrue(bool(exit_decision(record(0.01, 3), policy)[0]))

    def test_policy_validation(self):
        with self.assertRaises(ConfigError):
            ExitPolicy(threshold=-0.1)
        with self.assertRaises(ConfigError):
            ExitPolicy(min_layer=0)
        with self.assertRaises(ConfigError):
            ExitPolicy(aggregation='median')
        with self.assertRaises(ConfigError):
            ExitPolicy(min_layer=6).check_depth(5)

    @hypothesis_settings(max_examples=100, deadline=None)
    @given(
        u=st.floats(min_value=1e-9, max_value=1 - 1e-9),
        threshold=st.floats(min_value=0.0, max_value=2.0),
        extra=st.floats(min_value=0.0, max_value=2.0),
    )
    def test_monotone_in_threshold(self, u, threshold, extra):
        """
        Firing at a threshold implies firing at every larger one.
        """
        item = record(u)
        low = bool(exit_decision(item, ExitPolicy(threshold=threshold))[0])
        high = bool(exit_decision(
            item, ExitPolicy(threshold=threshold + extra))[0])
        self.assertTrue(high or not low)


class TestJointObjective(SimpleTestCase):

    def setUp(self):
        self.model = micro_model()
        self.x_t, self.t, self.eps = micro_batch()

    def test_reduction_identities(self):
        """
        u = 0 turns the uncertainty-aware term into the plain one and zero
        weights leave only the simple loss.
        """
        base = joint_objective(self.model, self.x_t, self.t, self.eps)
        zero_u = [torch.zeros_like(u) for u in base.confidences]
        ual = joint_objective(
            self.model, self.x_t, self.t, self.eps,
            frozen=(base.targets, zero_u))
        plain = joint_objective(
            self.model, self.x_t, self.t, self.eps, layerwise='plain')
        self.assertLess(
            abs(float(ual.layerwise) - float(plain.layerwise)), 1e-12)

        reduced = joint_objective(
            self.model, self.x_t, self.t, self.eps,
            weights=LossWeights(lambda_u=0.0, beta_ual=0.0))
        self.assertLess(
            abs(float(reduced.total) - float(reduced.simple)), 1e-12)

    def test_layerwise_modes(self):
        none = joint_objective(
            self.model, self.x_t, self.t, self.eps, layerwise='none')
        self.assertEqual(float(none.layerwise), 0.0)
        with self.assertRaises(ConfigError):
            joint_objective(
                self.model, self.x_t, self.t, self.eps, layerwise='mean')

    def test_targets_do_not_move_layerwise_gradients(self):
        """
        Perturbing the pseudo uncertainty targets leaves the layer-wise
        gradient on the backbone unchanged.
        """
        base = joint_objective(self.model, self.x_t, self.t, self.eps)
        shifted = [(target + 0.1).clamp(max=0.9) for target in base.targets]
        params = list(self.model.backbone.parameters())
        grads = []
        for targets in (base.targets, shifted):
            parts = joint_objective(
                self.model, self.x_t, self.t, self.eps,
                frozen=(targets, base.confidences))
            grads.append(torch.autograd.grad(
                parts.layerwise, params, allow_unused=True))
        for first, second in zip(*grads):
            if first is None:
                self.assertIsNone(second)
            else:
                self.assertTrue(torch.equal(first, second))

    def test_uem_heads_trained_by_uncertainty_loss_only(self):
        """
        The layer-wise term sends no gradient into the uncertainty heads;
        the uncertainty term does.
        """
        parts = joint_objective(self.model, self.x_t, self.t, self.eps)
        heads = list(self.model.uem.parameters())
        through_layerwise = torch.autograd.grad(
            parts.layerwise, heads, retain_graph=True, allow_unused=True)
        self.assertTrue(all(g is None for g in through_layerwise))
        through_uncertainty = torch.autograd.grad(
            parts.uncertainty, heads, allow_unused=True)
        self.assertTrue(all(
            g is not None and float(g.abs().sum()) > 0
            for g in through_uncertainty))

    def test_every_parameter_receives_gradient(self):
        """
        No layer, output head or uncertainty head is left dead by the joint
        loss.
        """
        torch.manual_seed(5)
        for share_final_head in (True, False):
            config = BackboneConfig(
                depth=5, hidden_dim=16, num_heads=2, input_shape=(2,),
                share_final_head=share_final_head)
            model = EarlyExitDenoiser(config)
            x_t = torch.randn(8, 2)
            eps = torch.randn(8, 2)
            t = torch.randint(1, 1001, (8,))
            joint_objective(model, x_t, t, eps).total.backward()
            for name, param in model.named_parameters():
                self.assertIsNotNone(param.grad, name)
                self.assertGreater(float(param.grad.abs().sum()), 0.0, name)

    def test_matches_finite_differences(self):
        """
        Analytic gradients of the joint loss with respect to every
        parameter agree with central differences in double precision, with
        the targets and weights held at the base point.
        """
        base = joint_objective(self.model, self.x_t, self.t, self.eps)
        frozen = (
            [target.detach() for target in base.targets],
            [u.detach() for u in base.confidences])
        harness = ObjectiveHarness(
            self.model, self.x_t, self.t, self.eps, frozen)
        names = ['model.' + name for name, _ in
                 self.model.named_parameters()]
        values = tuple(
            param.detach().clone().requires_grad_(True)
            for param in self.model.parameters())

        def objective(*params):
            return torch.func.functional_call(
                harness, dict(zip(names, params)), ())

        self.assertTrue(torch.autograd.gradcheck(
            objective, values, eps=1e-6, atol=1e-8, rtol=1e-4))
