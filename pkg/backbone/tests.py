import math

import torch
from django.test import SimpleTestCase

from earlyexit_lab.errors import ConfigError, ShapeMismatch
from .models import (
    Backbone, BackboneConfig, default_skip_pairs, patchify,
    timestep_embedding, unpatchify)


def make_backbone(seed=0, **overrides):
    options = dict(depth=5, hidden_dim=16, num_heads=2, input_shape=(2,))
    options.update(overrides)
    torch.manual_seed(seed)
    model = Backbone(BackboneConfig(**options))
    model.eval()
    return model


class TestPatchify(SimpleTestCase):

    def test_round_trip(self):
        """
        unpatchify(patchify(x)) gives x back exactly.
        """
        config = BackboneConfig(
            input_shape=(1, 8, 8), patch_size=2, hidden_dim=16, num_heads=2)
        x = torch.randn(3, 1, 8, 8)
        self.assertTrue(torch.equal(unpatchify(patchify(x, 2), config), x))

    def test_token_arithmetic(self):
        """
        An 8x8 single-channel image with patch 4 is 4 tokens of length 16;
        patch 1 is one token per pixel.
        """
        x = torch.randn(1, 1, 8, 8)
        self.assertEqual(tuple(patchify(x, 4).shape), (1, 4, 16))
        self.assertEqual(tuple(patchify(x, 1).shape), (1, 64, 1))

    def test_vector_mode(self):
        """
        Vector inputs become a single token.
        """
        x = torch.randn(5, 2)
        self.assertEqual(tuple(patchify(x, 1).shape), (5, 1, 2))
        config = BackboneConfig(hidden_dim=16, num_heads=2)
        self.assertTrue(torch.equal(unpatchify(patchify(x, 1), config), x))

    def test_non_divisible(self):
        """
        Spatial dimensions must divide by the patch size.
        """
        with self.assertRaises(ShapeMismatch):
            patchify(torch.randn(1, 1, 6, 6), 4)


class TestTimestepEmbedding(SimpleTestCase):

    def test_zero(self):
        """
        At t = 0 every sine component is 0 and every cosine component 1.
        """
        emb = timestep_embedding(0, 16)[0]
        self.assertTrue(torch.equal(emb[0::2], torch.zeros(8)))
        self.assertTrue(torch.equal(emb[1::2], torch.ones(8)))

    def test_distinct_and_bounded(self):
        """
        Neighbouring timesteps get different vectors and every norm is at
        most sqrt(dim).
        """
        emb = timestep_embedding(torch.arange(0, 1001), 32)
        self.assertFalse(torch.equal(emb[1], emb[2]))
        self.assertTrue(bool(
            (emb.norm(dim=-1) <= math.sqrt(32) + 1e-5).all()))

    def test_odd_dim(self):
        """
        Odd embedding sizes are refused.
        """
        with self.assertRaises(ConfigError):
            timestep_embedding(3, 7)


class TestBackboneConfig(SimpleTestCase):

    def test_default_skip_pairs(self):
        """
        Depth 13 pairs layers (1, 13) .. (6, 8) and leaves 7 in the middle.
        """
        self.assertEqual(
            default_skip_pairs(13),
            ((1, 13), (2, 12), (3, 11), (4, 10), (5, 9), (6, 8)))
        self.assertEqual(BackboneConfig().depth, 13)

    def test_validation(self):
        """
        Bad depth, widths, skip pairs and patch sizes are refused.
        """
        with self.assertRaises(ConfigError):
            BackboneConfig(depth=1)
        with self.assertRaises(ConfigError):
            BackboneConfig(hidden_dim=30, num_heads=4)
        with self.assertRaises(ConfigError):
            BackboneConfig(depth=4, skip_pairs=((3, 2),))
        with self.assertRaises(ConfigError):
            BackboneConfig(depth=4, skip_pairs=((1, 5),))
        with self.assertRaises(ConfigError):
            BackboneConfig(input_shape=(1, 6, 6), patch_size=4)

    def test_dict_round_trip(self):
        """
        The config survives its checkpoint header representation.
        """
        config = BackboneConfig(depth=4, input_shape=(1, 8, 8), patch_size=2)
        self.assertEqual(BackboneConfig.from_dict(config.to_dict()), config)


class TestForwardPasses(SimpleTestCase):

    def setUp(self):
        self.model = make_backbone()
        generator = torch.Generator().manual_seed(3)
        self.x = torch.randn(4, 2, generator=generator)
        self.t = torch.tensor([1, 10, 100, 1000])

    def test_collect_records_every_layer(self):
        """
        A depth-N pass records exactly N layers and exits at N.
        """
        eps_hat, trace = self.model.forward_collect(self.x, self.t)
        self.assertEqual(len(trace.hidden), 5)
        self.assertEqual(len(trace.preds), 5)
        self.assertEqual(trace.exit_layer.tolist(), [5, 5, 5, 5])
        for pred in trace.preds:
            self.assertEqual(pred.shape, self.x.shape)

    def test_deterministic(self):
        """
        Two passes with the same weights and input agree bitwise.
        """
        with torch.no_grad():
            first, _ = self.model.forward_collect(self.x, self.t)
            second, _ = self.model.forward_collect(self.x, self.t)
        self.assertTrue(torch.equal(first, second))

    def test_shared_final_head(self):
        """
        With share_final_head set, eps_hat is the deepest head's output.
        """
        eps_hat, trace = self.model.forward_collect(self.x, self.t)
        self.assertTrue(torch.equal(eps_hat, trace.preds[-1]))

    def test_never_stopping_matches_collect(self):
        """
        A stop predicate that never fires reproduces forward_collect.
        """
        with torch.no_grad():
            full, _ = self.model.forward_collect(self.x, self.t)
            never, trace = self.model.forward_incremental(
                self.x, self.t, stop_fn=lambda i, h, t: False)
            lean = self.model(self.x, self.t)
        self.assertTrue(torch.equal(full, never))
        self.assertTrue(torch.equal(full, lean))
        self.assertEqual(trace.exit_layer.tolist(), [5, 5, 5, 5])

    def test_always_stopping_exits_at_first_layer(self):
        """
        A stop predicate that always fires returns g_1(L_1).
        """
        with torch.no_grad():
            eps_hat, trace = self.model.forward_incremental(
                self.x, self.t, stop_fn=lambda i, h, t: True)
            _, full_trace = self.model.forward_collect(self.x, self.t)
        self.assertEqual(trace.exit_layer.tolist(), [1, 1, 1, 1])
        self.assertEqual(len(trace.hidden), 1)
        self.assertTrue(torch.equal(eps_hat, full_trace.preds[0]))

    def test_prefix_consistency(self):
        """
        Exiting at layer k leaves hidden states equal to the first k of the
        full pass.
        """
        with torch.no_grad():
            _, trace = self.model.forward_incremental(
                self.x, self.t, stop_fn=lambda i, h, t: i == 3)
            _, full_trace = self.model.forward_collect(self.x, self.t)
        self.assertEqual(len(trace.hidden), 3)
        for mine, reference in zip(trace.hidden, full_trace.hidden[:3]):
            self.assertTrue(torch.equal(mine, reference))

    def test_per_row_exits(self):
        """
        Rows leave independently; the others carry on to full depth.
        """
        def stop_first_row(layer, hidden, t):
            stop = torch.zeros(hidden.shape[0], dtype=torch.bool)
            if layer == 2:
                stop[0] = True
            return stop

        with torch.no_grad():
            eps_hat, trace = self.model.forward_incremental(
                self.x, self.t, stop_fn=stop_first_row)
            full, full_trace = self.model.forward_collect(self.x, self.t)
        self.assertEqual(trace.exit_layer.tolist(), [2, 5, 5, 5])
        self.assertTrue(torch.equal(eps_hat[0], full_trace.preds[1][0]))
        self.assertTrue(torch.allclose(eps_hat[1:], full[1:], atol=1e-6))
        self.assertEqual(trace.rows[-1].tolist(), [1, 2, 3])

    def test_shape_mismatch(self):
        """
        Inputs that do not match input_shape are refused.
        """
        with self.assertRaises(ShapeMismatch):
            self.model.forward_collect(torch.randn(4, 3), self.t)
        with self.assertRaises(ShapeMismatch):
            self.model.forward_collect(self.x, torch.tensor([1, 2]))

    def test_stop_fn_errors_propagate(self):
        """
        Exceptions raised by the stop predicate reach the caller.
        """
        def broken(layer, hidden, t):
            raise RuntimeError("boom")

        with self.assertRaises(RuntimeError):
            self.model.forward_incremental(self.x, self.t, stop_fn=broken)

    def test_image_mode_shapes(self):
        """
        In image mode every head prediction is unpatchified to the input
        shape.
        """
        model = make_backbone(input_shape=(1, 8, 8), patch_size=2)
        x = torch.randn(2, 1, 8, 8)
        eps_hat, trace = model.forward_collect(x, 5)
        self.assertEqual(eps_hat.shape, x.shape)
        for pred in trace.preds:
            self.assertEqual(pred.shape, x.shape)
        self.assertEqual(trace.hidden[0].shape[1], 1 + 16)

    def test_unshared_final_head(self):
        """
        With share_final_head off, the final projection is its own module
        and the never-stopping pass still matches forward_collect.
        """
        model = make_backbone(share_final_head=False)
        self.assertIsNotNone(model.final_layer)
        with torch.no_grad():
            full, trace = model.forward_collect(self.x, self.t)
            never, _ = model.forward_incremental(
                self.x, self.t, stop_fn=lambda i, h, t: False)
        self.assertTrue(torch.equal(full, never))
        self.assertFalse(torch.equal(full, trace.preds[-1]))
