"""Desk-scale efficacy and ablation trends on the seeded toy batch."""
import unittest

from trajguard import diffusion
from trajguard import distortions
from trajguard import images
from trajguard import metrics
from trajguard import models
from trajguard.blackbox import BlackBoxConfig, NESConfig, protect_blackbox
from trajguard.config import AblationPlan, RunConfig
from trajguard.diffusion import LatentImage
from trajguard.whitebox import WhiteBoxConfig, protect_whitebox

# Ablation rows override one axis on top of this injection strength.
TREND_ALPHA = 20.0


def protect_batch(protect, batch, manipulator, denoiser, cfg, sched):
    adv, queries = [], []
    for x in batch:
        result = protect(LatentImage(x), manipulator, denoiser, cfg, sched)
        adv.append(images.quantize(result.adversarial_image.data))
        queries.append(result.queries)
    return adv, queries


class TestDeskScaleEfficacy(unittest.TestCase):

    def setUp(self):
        self.batch = images.make_toy_batch(20, seed=0)
        self.sched = diffusion.build_linear_schedule()
        self.denoiser = models.make_toy_denoiser(seed=0)
        self.editor = models.make_toy_manipulator(seed=0)
        self.cfg = metrics.MetricsConfig()

    def test_whitebox(self):
        cfg = WhiteBoxConfig(T1=50, T2=10, inject_steps=10)
        adv, _ = protect_batch(protect_whitebox, self.batch, self.editor,
                               self.denoiser, cfg, self.sched)
        report = metrics.build_report(self.batch, adv, self.editor, self.cfg)
        self.assertGreaterEqual(report.dsr, 0.9)
        self.assertGreaterEqual(report.aggregates['mean_input_ssim'], 0.85)

    def test_blackbox(self):
        cfg = BlackBoxConfig(nes=NESConfig(n=32, sigma=0.01), T1=50, T2=10)
        black = models.wrap_black_box(self.editor)
        adv, queries = protect_batch(protect_blackbox, self.batch, black,
                                     self.denoiser, cfg, self.sched)
        self.assertEqual([cfg.expected_queries()] * len(self.batch), queries)
        self.assertEqual(cfg.expected_queries() * len(self.batch),
                         black.query_count)
        report = metrics.build_report(self.batch, adv, self.editor, self.cfg)
        self.assertGreaterEqual(report.dsr, 0.6)


class TestAblationTrends(unittest.TestCase):

    def setUp(self):
        self.batch = images.make_toy_batch(20, seed=0)
        self.base = RunConfig({'defense': {'alpha': TREND_ALPHA}})
        self.editor = self.base.evaluation_manipulator((3, 16, 16))
        self.cfg = metrics.MetricsConfig()

    def report(self, plan, value):
        row_cfg = plan.row_config(value)
        defense = row_cfg.defense_config()
        adv, _ = protect_batch(protect_whitebox, self.batch,
                               row_cfg.manipulator((3, 16, 16)),
                               row_cfg.denoiser(), defense,
                               row_cfg.schedule())
        return adv, metrics.build_report(self.batch, adv, self.editor,
                                         self.cfg)

    def output_l2(self, axis, values):
        plan = AblationPlan(axis, values, self.base)
        return [self.report(plan, value)[1].aggregates['mean_output_l2']
                for value in values]

    def test_denoising_steps(self):
        values = self.output_l2('T2', [6, 10, 15, 20])
        self.assertEqual(sorted(values), values)

    def test_injection_steps(self):
        values = self.output_l2('inject_step_t', [1, 3, 5, 7, 10])
        self.assertEqual(sorted(values), values)

    def test_projection_under_jpeg(self):
        plan = AblationPlan('gradient_projection', [False, True], self.base)
        spec = distortions.DistortionSpec('jpeg', grid=[70])
        metric = metrics.dsr_metric(metrics.ATTRIBUTE_EDITING, self.cfg)
        scores = []
        for value in (False, True):
            adv, _ = self.report(plan, value)
            curve = distortions.sweep(adv, self.batch, self.editor, spec,
                                      metric)
            scores.append(curve.points[0][1])
        self.assertGreaterEqual(scores[1], scores[0])


if __name__ == '__main__':
    unittest.main()
