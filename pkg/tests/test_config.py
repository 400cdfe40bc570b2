import json
import os
import unittest

import mock
from testfixtures import TempDirectory

from trajguard import config
from trajguard import models
from trajguard.blackbox import BlackBoxConfig
from trajguard.config import RunConfig, load_ablation_plan, load_run_config
from trajguard.exc import ConfigError
from trajguard.remote import RemoteManipulator
from trajguard.whitebox import WhiteBoxConfig


class ConfigTestCase(unittest.TestCase):

    def setUp(self):
        super(ConfigTestCase, self).setUp()
        self.tempdir = TempDirectory()
        self.tmp = self.tempdir.path
        self.env = mock.patch.dict(os.environ, {}, clear=False)
        self.env.start()
        for key in ('TRAJGUARD_SEED', 'TRAJGUARD_WORKERS'):
            os.environ.pop(key, None)

    def tearDown(self):
        self.env.stop()
        self.tempdir.cleanup()
        super(ConfigTestCase, self).tearDown()

    def write(self, name, data):
        path = os.path.join(self.tmp, name)
        with open(path, 'w') as handle:
            if isinstance(data, str):
                handle.write(data)
            else:
                json.dump(data, handle)
        return path


class TestRunConfig(ConfigTestCase):

    def test_defaults(self):
        cfg = RunConfig({})
        self.assertEqual('whitebox', cfg.mode)
        self.assertEqual(0, cfg.seed)
        self.assertEqual(1, cfg.workers)
        self.assertIsInstance(cfg.defense_config(), WhiteBoxConfig)
        self.assertEqual(4, len(cfg.distortion_specs()))
        self.assertEqual(64, len(cfg.config_hash))

    def test_precedence(self):
        os.environ['TRAJGUARD_SEED'] = '5'
        os.environ['TRAJGUARD_WORKERS'] = '3'
        path = self.write('run.json', {'seed': 7})
        cfg = load_run_config(path)
        self.assertEqual(7, cfg.seed)
        self.assertEqual(3, cfg.workers)
        self.assertEqual(9, load_run_config(path, seed=9).seed)
        self.assertEqual(7, load_run_config(path, seed=None).seed)

    def test_bad_env(self):
        os.environ['TRAJGUARD_SEED'] = 'many'
        self.assertRaises(ConfigError, RunConfig, {})

    def test_paths_relative_to_file(self):
        path = self.write('run.json', {'input_dir': 'faces',
                                       'output_dir': 'results'})
        cfg = load_run_config(path)
        self.assertEqual(os.path.join(self.tmp, 'faces'),
                         cfg.path('input_dir'))
        self.assertEqual(os.path.join(self.tmp, 'results', 'adversarial'),
                         cfg.adversarial_dir)

    def test_hash_is_stable(self):
        first = RunConfig({'defense': {'K': 2, 'alpha': 0.1}})
        second = RunConfig({'defense': {'alpha': 0.1, 'K': 2}})
        self.assertEqual(first.config_hash, second.config_hash)
        self.assertNotEqual(first.config_hash, RunConfig({}).config_hash)

    def test_rejections(self):
        for data in [{'colour': 'red'},
                     {'schema_version': 2},
                     {'mode': 'greybox'},
                     {'seed': 'zero'},
                     {'workers': 0},
                     {'defense': {'beta': 1}},
                     {'defense': {'T1': 5, 'T2': 6}},
                     {'mode': 'blackbox', 'defense': {'lambda1': 0.5}},
                     {'mode': 'blackbox', 'defense': {'nes': {'rho': 1}}},
                     {'metrics': {'task': 'face_swapping'}},
                     {'distortions': {'sharpen': [1]}},
                     {'distortions': {'jpeg': [5]}},
                     {'manipulator': {'kind': 'warp'}},
                     {'manipulator': {'remote': {'url': 'http://x'}}}]:
            self.assertRaises(ConfigError, RunConfig, data)

    def test_unreadable_files(self):
        self.assertRaises(ConfigError, load_run_config,
                          os.path.join(self.tmp, 'missing.json'))
        self.assertRaises(ConfigError, load_run_config,
                          self.write('bad.json', '{"seed": '))
        self.assertRaises(ConfigError, load_run_config,
                          self.write('list.json', [1, 2]))

    def test_blackbox(self):
        cfg = RunConfig({'mode': 'blackbox', 'seed': 3,
                         'defense': {'K': 1, 'nes': {'n': 4}}})
        defense = cfg.defense_config()
        self.assertIsInstance(defense, BlackBoxConfig)
        self.assertEqual(4, defense.nes.n)
        self.assertEqual(3, defense.nes.seed)
        self.assertEqual(11, cfg.defense_config(seed=11).seed)
        manipulator = cfg.manipulator((3, 16, 16))
        self.assertIsInstance(manipulator, models.QueryOnlyModel)
        self.assertIsInstance(cfg.evaluation_manipulator((3, 16, 16)),
                              models.DifferentiableMap)

    def test_remote_manipulator(self):
        cfg = RunConfig({'mode': 'blackbox', 'manipulator': {
            'remote': {'url': 'https://m.example.org', 'max_queries': 50}}})
        black = cfg.manipulator((3, 8, 8))
        self.assertEqual(50, black.max_queries)
        self.assertIsInstance(cfg.evaluation_manipulator((3, 8, 8)),
                              RemoteManipulator)

    def test_linear_manipulator_takes_image_shape(self):
        cfg = RunConfig({'manipulator': {'kind': 'linear', 'seed': 1}})
        manipulator = cfg.manipulator((1, 4, 4))
        self.assertEqual((16, 16), tuple(manipulator.module.matrix.shape))

    def test_saved_weights(self):
        dmap = models.make_toy_denoiser(seed=4)
        models.save_weights(dmap, os.path.join(self.tmp, 'den.json'))
        path = self.write('run.json', {'denoiser': {'weights': 'den.json'}})
        loaded = load_run_config(path).denoiser()
        self.assertEqual(4, loaded.seed)

    def test_with_overrides(self):
        cfg = RunConfig({'defense': {'K': 2}})
        changed = cfg.with_overrides(alpha=0.2, seed=4, K=None)
        self.assertEqual(0.2, changed.defense_config().alpha)
        self.assertEqual(2, changed.defense_config().K)
        self.assertEqual(4, changed.seed)
        self.assertEqual(15.0, cfg.defense_config().alpha)


class TestAblationPlan(ConfigTestCase):

    def test_inline_base(self):
        path = self.write('plan.json', {
            'schema_version': 1, 'axis': 'T2', 'values': [2, 5],
            'base': {'defense': {'T1': 20, 'K': 1}}})
        plan = load_ablation_plan(path)
        self.assertEqual('T2', plan.field)
        row = plan.row_config(2).defense_config()
        self.assertEqual((2, 2), (row.T2, row.inject_steps))
        self.assertEqual('T2=5', plan.label(5))

    def test_pinned_injection_window(self):
        base = RunConfig({'defense': {'T1': 20, 'inject_steps': 3}})
        plan = config.AblationPlan('T2', [2, 6], base)
        self.assertEqual(2, plan.row_config(2).defense_config().inject_steps)
        self.assertEqual(3, plan.row_config(6).defense_config().inject_steps)

    def test_base_file_and_overrides(self):
        self.write('run.json', {'seed': 2, 'defense': {'T1': 20}})
        path = self.write('plan.json', {'axis': 'inject_step_t',
                                        'values': [1, 4], 'base': 'run.json'})
        plan = load_ablation_plan(path, seed=8)
        self.assertEqual(8, plan.base.seed)
        self.assertEqual(4, plan.row_config(4).defense_config().inject_steps)

    def test_projection_axis(self):
        plan = config.AblationPlan('gradient_projection', [True, False],
                                   RunConfig({}))
        self.assertEqual('with GP', plan.label(True))
        self.assertEqual('w/o GP', plan.label(False))
        self.assertFalse(
            plan.row_config(False).defense_config().gradient_projection)

    def test_rejections(self):
        base = RunConfig({})
        self.assertRaises(ConfigError, config.AblationPlan, 'beta', [1], base)
        self.assertRaises(ConfigError, config.AblationPlan, 'T1', [], base)
        self.assertRaises(ConfigError, config.AblationPlan, 'T1', [5], base)
        self.assertRaises(ConfigError, config.AblationPlan,
                          'gradient_projection', ['yes'], base)
        self.assertRaises(ConfigError, config.AblationPlan,
                          'gradient_projection', [True],
                          RunConfig({'mode': 'blackbox'}))
        path = self.write('plan.json', {'axis': 'T1'})
        self.assertRaises(ConfigError, load_ablation_plan, path)
        path = self.write('plan2.json', {'axis': 'T1', 'values': [30],
                                         'extra': 1})
        self.assertRaises(ConfigError, load_ablation_plan, path)


if __name__ == '__main__':
    unittest.main()
