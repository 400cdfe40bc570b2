import json
import math
import os
import tempfile
import unittest

import mock
import torch
from torch import nn

from trajguard import diffusion
from trajguard import models
from trajguard import whitebox
from trajguard.diffusion import LatentImage
from trajguard.exc import CapabilityError, NumericalError, ParameterError
from trajguard.whitebox import WhiteBoxConfig

SHAPE = (3, 6, 6)


def image(seed=0, shape=SHAPE):
    gen = torch.Generator().manual_seed(seed)
    return LatentImage(torch.rand(*shape, generator=gen,
                                  dtype=torch.float64) * 1.6 - 0.8)


def vec(*values):
    return torch.tensor(values, dtype=torch.float64)


class NaNModule(nn.Module):

    def forward(self, x):
        return x * float('nan')


class TestAdversarialLoss(unittest.TestCase):

    def test_values(self):
        self.assertEqual(0.0, float(whitebox.adversarial_loss(vec(1, 2),
                                                              vec(1, 2))))
        self.assertEqual(1.0, float(whitebox.adversarial_loss(vec(0, 0),
                                                              vec(1, 1))))
        base = whitebox.adversarial_loss(vec(0, 0), vec(0.3, -0.2))
        double = whitebox.adversarial_loss(vec(0, 0), vec(0.6, -0.4))
        self.assertAlmostEqual(4 * float(base), float(double), places=14)

    def test_shape_mismatch(self):
        self.assertRaises(ParameterError, whitebox.adversarial_loss,
                          vec(0, 0), vec(0, 0, 0))


class TestInjectStep(unittest.TestCase):

    def setUp(self):
        self.sched = diffusion.build_linear_schedule()
        self.denoiser = models.make_toy_denoiser(kind='linear', c=0.1)
        self.manipulator = models.make_toy_manipulator(seed=4, kind='linear',
                                                       shape=SHAPE)
        self.x_clean = image(0)
        self.x_t2 = image(1).replace(timestep=30)

    def plain(self):
        return diffusion.ddim_step(self.x_t2, self.denoiser(self.x_t2.data,
                                                            30),
                                   30, 20, self.sched)

    def test_disabled_equals_ddim_step(self):
        for alpha, active in ((0.0, True), (0.7, False)):
            out = whitebox.inject_step(self.x_t2, self.denoiser,
                                       self.manipulator, self.x_clean, 30, 20,
                                       alpha, self.sched, active=active)
            self.assertTrue(torch.equal(out.data, self.plain().data))
            self.assertEqual(20, out.timestep)

    def test_linear_closed_form(self):
        alpha = 0.3
        out = whitebox.inject_step(self.x_t2, self.denoiser, self.manipulator,
                                   self.x_clean, 30, 20, alpha, self.sched)
        plain = self.plain().data
        matrix = self.manipulator.module.matrix
        numel = plain.numel()
        diff = matrix @ plain.reshape(-1) - \
            matrix @ self.x_clean.data.reshape(-1)
        expected = alpha * 2.0 * (matrix.t() @ diff) / numel
        self.assertLessEqual(
            float((out.data - plain).reshape(-1).sub(expected).abs().max()),
            1e-6)

    def test_ascent(self):
        clean_out = self.manipulator.forward(self.x_clean.data)
        plain = self.plain()
        out = whitebox.inject_step(self.x_t2, self.denoiser, self.manipulator,
                                   self.x_clean, 30, 20, 0.05, self.sched)
        before = whitebox.adversarial_loss(
            clean_out, self.manipulator.forward(plain.data))
        after = whitebox.adversarial_loss(
            clean_out, self.manipulator.forward(out.data))
        self.assertGreater(float(after), float(before))

    def test_trace_record(self):
        trace = []
        whitebox.inject_step(self.x_t2, self.denoiser, self.manipulator,
                             self.x_clean, 30, 20, 0.1, self.sched,
                             trace=trace)
        self.assertEqual(1, len(trace))
        self.assertEqual('inject', trace[0]['kind'])
        self.assertIn('adv_loss', trace[0])
        self.assertIn('grad_norm', trace[0])

    def test_query_only_is_capability_error(self):
        black = models.wrap_black_box(self.manipulator)
        self.assertRaises(CapabilityError, whitebox.inject_step, self.x_t2,
                          self.denoiser, black, self.x_clean, 30, 20, 0.1,
                          self.sched)


class TestNoiseLayer(unittest.TestCase):

    def test_kernel_one_is_identity(self):
        x = image()
        self.assertTrue(torch.equal(whitebox.noise_layer(x, 1, 1.0).data,
                                    x.data))

    def test_constant_image(self):
        x = LatentImage(torch.full(SHAPE, 0.25, dtype=torch.float64))
        out = whitebox.noise_layer(x, 3, 1.0)
        self.assertTrue(torch.allclose(out.data, x.data, atol=1e-12))

    def test_impulse_weights(self):
        x = LatentImage(vec(0, 0, 1, 0, 0).reshape(1, 1, 5))
        out = whitebox.noise_layer(x, 3, 1.0).data.reshape(-1)
        side = math.exp(-0.5)
        total = 1 + 2 * side
        expected = vec(0, side / total, 1 / total, side / total, 0)
        self.assertTrue(torch.allclose(out, expected, atol=1e-12))

    def test_even_kernel(self):
        self.assertRaises(ParameterError, whitebox.noise_layer, image(), 4,
                          1.0)


class TestGuidanceGradients(unittest.TestCase):

    def test_stationary_point(self):
        manipulator = models.make_toy_manipulator(seed=0)
        x = image()
        g1, g2 = whitebox.guidance_gradients(x, x, manipulator)
        self.assertEqual(0.0, float(g1.abs().max()))
        self.assertEqual(0.0, float(g2.abs().max()))

    def test_identity_manipulator(self):
        manipulator = models.make_toy_manipulator(kind='identity',
                                                  shape=SHAPE)
        x, x_prime = image(0), image(1)
        g1, g2 = whitebox.guidance_gradients(x, x_prime, manipulator)
        numel = x.data.numel()
        self.assertTrue(torch.allclose(
            g1, 2 * (x_prime.data - x.data) / numel, atol=1e-14))
        allowed = {-1.0 / numel, 0.0, 1.0 / numel}
        self.assertTrue(set(g2.reshape(-1).tolist()) <= allowed)

    def test_shape_mismatch(self):
        manipulator = models.make_toy_manipulator(seed=0)
        self.assertRaises(ParameterError, whitebox.guidance_gradients,
                          image(0), image(0, (3, 5, 5)), manipulator)


class TestGradientProjection(unittest.TestCase):

    def test_conflicting_example(self):
        g1, g2 = vec(1, 0), vec(-1, 1)
        self.assertEqual([0.5, 0.5], whitebox.project_out(g1, g2).tolist())
        self.assertEqual([0.0, 1.0], whitebox.project_out(g2, g1).tolist())
        merged = whitebox.gradient_projection(g1, g2, 1, 1, 1, 1)
        self.assertEqual([-0.5, 0.5], merged.tolist())

    def test_aligned_example(self):
        merged = whitebox.gradient_projection(vec(1, 0), vec(1, 1), 1, 1, 2,
                                              3)
        self.assertEqual([1.0, 3.0], merged.tolist())

    def test_orthogonal_pair(self):
        g1, g2 = vec(2, 0), vec(0, 3)
        self.assertEqual(whitebox.CONFLICTING,
                         whitebox.projection_branch(g1, g2))
        merged = whitebox.gradient_projection(g1, g2, 1.5, 0.5, 1.5, 0.5)
        self.assertTrue(torch.equal(merged, -1.5 * g1 + 0.5 * g2))

    def test_zero_norm_uses_plain_branch(self):
        g1, g2 = vec(1, -2), vec(0, 0)
        self.assertEqual(whitebox.ALIGNED, whitebox.projection_branch(g1, g2))
        merged = whitebox.gradient_projection(g1, g2, 5, 5, 2, 3)
        self.assertTrue(torch.equal(merged, -2 * g1))

    def test_random_pairs(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(1000):
            g1 = torch.randn(8, generator=gen, dtype=torch.float64)
            g2 = torch.randn(8, generator=gen, dtype=torch.float64)
            tol = 1e-6 * float(g1.norm() * g2.norm())
            p12 = whitebox.project_out(g1, g2)
            p21 = whitebox.project_out(g2, g1)
            self.assertLessEqual(abs(float(p12 @ g2)), tol)
            self.assertLessEqual(abs(float(p21 @ g1)), tol)
            again = whitebox.project_out(p12, g2)
            self.assertLessEqual(float((again - p12).abs().max()), 1e-6)

    def test_shape_mismatch(self):
        self.assertRaises(ParameterError, whitebox.gradient_projection,
                          vec(1, 0), vec(1, 0, 0), 1, 1, 1, 1)


class TestWhiteBoxConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = WhiteBoxConfig()
        self.assertEqual((50, 10, 3, 15.0), (cfg.T1, cfg.T2, cfg.K,
                                             cfg.alpha))
        self.assertEqual(10, cfg.inject_steps)
        self.assertEqual('descend', cfg.projection_sign)

    def test_invalid(self):
        for kwargs in [{'T1': 5, 'T2': 6}, {'K': 0}, {'alpha': -0.1},
                       {'inject_steps': 0}, {'inject_steps': 11},
                       {'lambda1': -1}, {'noise_kernel': 4},
                       {'noise_sigma': 0}, {'projection_sign': 'up'},
                       {'inversion': 'ddpm'}]:
            self.assertRaises(ParameterError, WhiteBoxConfig, **kwargs)


class TestProtectWhitebox(unittest.TestCase):

    def setUp(self):
        self.sched = diffusion.build_linear_schedule()
        self.denoiser = models.make_toy_denoiser(seed=0)
        self.manipulator = models.make_toy_manipulator(seed=0)
        self.x = image(2)

    def test_guidance_off_is_reconstruction(self):
        cfg = WhiteBoxConfig(T1=20, T2=5, K=2, alpha=0.0, lambda1=0.0,
                             mu1=0.0, lambda2=0.0, mu2=0.0, clamp_final=False)
        result = whitebox.protect_whitebox(self.x, self.manipulator,
                                           self.denoiser, cfg, self.sched)
        plan = diffusion.make_timestep_plan(20, 5)
        expected = diffusion.reconstruct(self.x, self.denoiser, self.sched,
                                         plan)
        self.assertTrue(torch.equal(result.adversarial_image.data,
                                    expected.data))

    def test_output_ascends_over_reconstruction(self):
        manipulator = models.make_toy_manipulator(seed=1, kind='linear',
                                                  shape=SHAPE)
        results = []
        for alpha in (0.0, 0.5):
            cfg = WhiteBoxConfig(T1=20, T2=5, K=1, alpha=alpha,
                                 inject_steps=1, clamp_final=False)
            results.append(whitebox.protect_whitebox(
                self.x, manipulator, self.denoiser, cfg, self.sched))
        clean_out = manipulator.forward(self.x.data)
        losses = [float(whitebox.adversarial_loss(
            clean_out, manipulator.forward(r.adversarial_image.data)))
                  for r in results]
        self.assertGreater(losses[1], losses[0])

    def test_trace_shape(self):
        cfg = WhiteBoxConfig(T1=20, T2=5, K=3, inject_steps=2)
        result = whitebox.protect_whitebox(self.x, self.manipulator,
                                           self.denoiser, cfg, self.sched)
        self.assertEqual(3 * 5 + 3, len(result.trace))
        injects = result.records('inject')
        self.assertEqual(15, len(injects))
        self.assertEqual(6, sum(1 for rec in injects if rec['active']))
        projections = result.records('projection')
        self.assertEqual([0, 1, 2], [rec['iteration'] for rec in projections])
        for rec in projections:
            self.assertIn(rec['branch'], (whitebox.CONFLICTING,
                                          whitebox.ALIGNED))
        self.assertLessEqual(float(result.adversarial_image.data.abs().max()),
                             1.0)
        self.assertEqual(0, result.adversarial_image.timestep)

    def test_deterministic_trace_lines(self):
        cfg = WhiteBoxConfig(T1=20, T2=4, K=2)
        first = whitebox.protect_whitebox(self.x, self.manipulator,
                                          self.denoiser, cfg, self.sched)
        second = whitebox.protect_whitebox(self.x, self.manipulator,
                                           self.denoiser, cfg, self.sched)
        self.assertTrue(torch.equal(first.adversarial_image.data,
                                    second.adversarial_image.data))
        self.assertEqual(first.trace_lines(), second.trace_lines())
        lines = first.trace_lines().splitlines()
        self.assertEqual(1 + len(first.trace), len(lines))
        header = json.loads(lines[0])
        self.assertEqual('metadata', header['kind'])
        self.assertEqual('whitebox', header['mode'])
        self.assertNotIn('wall_time', header)

    def test_projection_switch(self):
        cfg = WhiteBoxConfig(T1=20, T2=4, K=2, gradient_projection=False)
        result = whitebox.protect_whitebox(self.x, self.manipulator,
                                           self.denoiser, cfg, self.sched)
        self.assertEqual(['disabled', 'disabled'],
                         [rec['branch'] for rec in
                          result.records('projection')])

    def test_ascend_flips_disruption_weights(self):
        cfg = WhiteBoxConfig(T1=20, T2=4, K=1, lambda1=2.0, lambda2=3.0,
                             projection_sign='ascend')
        with mock.patch('trajguard.whitebox.gradient_projection',
                        wraps=whitebox.gradient_projection) as merged:
            whitebox.protect_whitebox(self.x, self.manipulator, self.denoiser,
                                      cfg, self.sched)
        args = merged.call_args[0]
        self.assertEqual((-2.0, 1.0, -3.0, 1.0), tuple(args[2:]))

    def test_stochastic_inversion_is_seeded(self):
        runs = []
        for seed in (1, 1, 2):
            cfg = WhiteBoxConfig(T1=20, T2=4, K=1, inversion='stochastic',
                                 seed=seed)
            runs.append(whitebox.protect_whitebox(
                self.x, self.manipulator, self.denoiser, cfg,
                self.sched).adversarial_image.data)
        self.assertTrue(torch.equal(runs[0], runs[1]))
        self.assertFalse(torch.equal(runs[0], runs[2]))

    def test_query_only_rejected(self):
        black = models.wrap_black_box(self.manipulator)
        self.assertRaises(CapabilityError, whitebox.protect_whitebox, self.x,
                          black, self.denoiser, WhiteBoxConfig(T1=20, T2=4),
                          self.sched)

    def test_non_finite_loss(self):
        broken = models.DifferentiableMap(NaNModule(), 'broken')
        cfg = WhiteBoxConfig(T1=20, T2=4, K=2)
        with self.assertRaises(NumericalError) as ctx:
            whitebox.protect_whitebox(self.x, broken, self.denoiser, cfg,
                                      self.sched)
        self.assertTrue(ctx.exception.trace)
        self.assertEqual('inject', ctx.exception.trace[-1]['kind'])

    def test_write_trace(self):
        cfg = WhiteBoxConfig(T1=20, T2=4, K=1)
        result = whitebox.protect_whitebox(self.x, self.manipulator,
                                           self.denoiser, cfg, self.sched)
        handle, path = tempfile.mkstemp(suffix='.jsonl')
        os.close(handle)
        try:
            result.write_trace(path)
            with open(path) as trace_file:
                self.assertEqual(result.trace_lines(), trace_file.read())
        finally:
            os.remove(path)


if __name__ == '__main__':
    unittest.main()
