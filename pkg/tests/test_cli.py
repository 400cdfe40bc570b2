import csv
import io
import json
import os
import unittest

from click.testing import CliRunner
from testfixtures import TempDirectory

from trajguard import cli
from trajguard import images
from trajguard.__about__ import __version__

FAST_DEFENSE = {'T1': 20, 'T2': 4, 'K': 1}


def read_bytes(path):
    with open(path, 'rb') as handle:
        return handle.read()


def read_csv(path):
    with open(path) as handle:
        return list(csv.DictReader(io.StringIO(handle.read())))


class CliTestCase(unittest.TestCase):

    def setUp(self):
        super(CliTestCase, self).setUp()
        self.tempdir = TempDirectory()
        self.tmp = self.tempdir.path
        self.faces = os.path.join(self.tmp, 'faces')
        for index, data in enumerate(images.make_toy_batch(2, seed=6)):
            images.save_png(data, os.path.join(self.faces,
                                               'face%d.png' % index))
        self.runner = CliRunner()

    def tearDown(self):
        self.tempdir.cleanup()
        super(CliTestCase, self).tearDown()

    def write_config(self, name='run.json', **values):
        data = {'schema_version': 1, 'input_dir': 'faces',
                'output_dir': 'out', 'defense': dict(FAST_DEFENSE)}
        data.update(values)
        path = os.path.join(self.tmp, name)
        with open(path, 'w') as handle:
            json.dump(data, handle)
        return path

    def invoke(self, *args):
        return self.runner.invoke(cli.main, list(args))

    def out(self, *parts):
        return os.path.join(self.tmp, 'out', *parts)


class TestProtect(CliTestCase):

    def test_writes_images_and_traces(self):
        result = self.invoke('protect', '--config', self.write_config())
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        for stem in ('face0', 'face1'):
            self.assertTrue(os.path.exists(self.out('adversarial',
                                                    stem + '.png')))
            trace = self.out('traces', stem + '.trace.jsonl')
            with open(trace) as handle:
                header = json.loads(handle.readline())
            self.assertEqual('whitebox', header['mode'])
            self.assertIn('config_hash', header)
            self.assertEqual(stem + '.png', header['image'])

    def test_deterministic(self):
        config = self.write_config()
        self.invoke('protect', '--config', config)
        first = [read_bytes(self.out('adversarial', 'face0.png')),
                 read_bytes(self.out('traces', 'face0.trace.jsonl'))]
        self.invoke('protect', '--config', config)
        second = [read_bytes(self.out('adversarial', 'face0.png')),
                  read_bytes(self.out('traces', 'face0.trace.jsonl'))]
        self.assertEqual(first, second)
        self.invoke('protect', '--config', config, '--workers', '2')
        self.assertEqual(first[0],
                         read_bytes(self.out('adversarial', 'face0.png')))

    def test_seed_flag_changes_trace(self):
        config = self.write_config()
        self.invoke('protect', '--config', config, '--seed', '1')
        first = read_bytes(self.out('traces', 'face0.trace.jsonl'))
        self.invoke('protect', '--config', config, '--seed', '2')
        self.assertNotEqual(first,
                            read_bytes(self.out('traces',
                                                'face0.trace.jsonl')))

    def test_empty_input_dir(self):
        os.makedirs(os.path.join(self.tmp, 'empty'))
        result = self.invoke('protect', '--config',
                             self.write_config(input_dir='empty'))
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)
        self.assertIn('no inputs', result.output)

    def test_blackbox_rejects_projection_weights(self):
        config = self.write_config(mode='blackbox',
                                   defense=dict(FAST_DEFENSE, lambda1=0.5))
        result = self.invoke('protect', '--config', config)
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)
        self.assertFalse(os.path.exists(self.out()))

    def test_blackbox_run(self):
        config = self.write_config(
            mode='blackbox', defense=dict(FAST_DEFENSE, nes={'n': 2}))
        result = self.invoke('protect', '--config', config)
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        with open(self.out('traces', 'face1.trace.jsonl')) as handle:
            header = json.loads(handle.readline())
        self.assertEqual(1 * 4 * 4 + 1 + 1, header['queries'])

    def test_unreadable_image(self):
        with open(os.path.join(self.faces, 'junk.png'), 'wb') as junk:
            junk.write(b'not a png')
        result = self.invoke('protect', '--config', self.write_config())
        self.assertEqual(cli.EXIT_RUNTIME, result.exit_code)
        with open(self.out('adversarial', 'junk.error.json')) as handle:
            failure = json.load(handle)
        self.assertEqual('InputError', failure['error']['type'])
        self.assertEqual('protect', failure['context']['stage'])
        self.assertTrue(os.path.exists(self.out('adversarial', 'face0.png')))

    def test_missing_config(self):
        result = self.invoke('protect', '--config',
                             os.path.join(self.tmp, 'nope.json'))
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)

    def test_version(self):
        result = self.invoke('--version')
        self.assertEqual(0, result.exit_code)
        self.assertIn(__version__, result.output)


class TestEvaluate(CliTestCase):

    def test_report(self):
        config = self.write_config()
        self.invoke('protect', '--config', config)
        result = self.invoke('evaluate', '--config', config)
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        rows = read_csv(self.out('report.csv'))
        self.assertEqual(['face0', 'face1'], [row['name'] for row in rows])
        first = read_bytes(self.out('report.csv'))
        summary = read_bytes(self.out('report.summary.json'))
        self.invoke('evaluate', '--config', config)
        self.assertEqual(first, read_bytes(self.out('report.csv')))
        self.assertEqual(summary, read_bytes(self.out('report.summary.json')))
        meta = json.loads(summary.decode('utf-8'))['metadata']
        self.assertEqual(0, meta['seeds']['run'])
        self.assertEqual(64, len(meta['config_hash']))

    def test_clean_copies(self):
        config = self.write_config(adversarial_dir='faces')
        result = self.invoke('evaluate', '--config', config)
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        with open(self.out('report.summary.json')) as handle:
            self.assertEqual(0.0, json.load(handle)['aggregates']['dsr'])

    def test_missing_adversarial_file(self):
        config = self.write_config()
        self.invoke('protect', '--config', config)
        os.remove(self.out('adversarial', 'face1.png'))
        result = self.invoke('evaluate', '--config', config)
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)
        self.assertIn('face1.png', result.output)
        self.assertFalse(os.path.exists(self.out('report.csv')))


class TestSweep(CliTestCase):

    def test_identity_grid_matches_report(self):
        config = self.write_config(distortions={'gaussian_blur': [1],
                                                'average_blur': [1]})
        self.invoke('protect', '--config', config)
        self.invoke('evaluate', '--config', config)
        result = self.invoke('sweep', '--config', config)
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        with open(self.out('report.summary.json')) as handle:
            dsr = json.load(handle)['aggregates']['dsr']
        row = read_csv(self.out('auc.csv'))[0]
        self.assertEqual('', row['P1'])
        self.assertEqual(dsr, float(row['P2']))
        self.assertEqual(dsr, float(row['P3']))
        self.assertAlmostEqual((float(row['P2']) + float(row['P3'])) / 2,
                               float(row['Avg']), places=9)
        self.assertEqual('0', row['seed'])
        curves = read_csv(self.out('curves.csv'))
        self.assertEqual(['gaussian_blur', 'average_blur'],
                         [c['kind'] for c in curves])

    def test_needs_adversarial_set(self):
        result = self.invoke('sweep', '--config', self.write_config())
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)


class TestAblate(CliTestCase):

    def write_plan(self, axis, values):
        self.write_config()
        path = os.path.join(self.tmp, 'plan.json')
        with open(path, 'w') as handle:
            json.dump({'schema_version': 1, 'axis': axis, 'values': values,
                       'base': 'run.json'}, handle)
        return path

    def test_projection_rows(self):
        result = self.invoke('ablate', '--config',
                             self.write_plan('gradient_projection',
                                             [False, True]))
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        rows = read_csv(self.out('ablation_gradient_projection.csv'))
        self.assertEqual(['w/o GP', 'with GP'], [r['label'] for r in rows])
        for row in rows:
            self.assertNotEqual('', row['P1_jpeg_70_dsr'])
            self.assertNotEqual('', row['config_hash'])

    def test_single_value_matches_protect_and_evaluate(self):
        plan = self.write_plan('alpha', [0.05])
        config = os.path.join(self.tmp, 'run.json')
        self.invoke('protect', '--config', config)
        self.invoke('evaluate', '--config', config)
        result = self.invoke('ablate', '--config', plan)
        self.assertEqual(cli.EXIT_OK, result.exit_code, result.output)
        row = read_csv(self.out('ablation_alpha.csv'))[0]
        with open(self.out('report.summary.json')) as handle:
            aggregates = json.load(handle)['aggregates']
        self.assertEqual(aggregates['dsr'], float(row['dsr']))
        self.assertEqual(aggregates['mean_output_l2'],
                         float(row['output_l2']))

    def test_bad_axis(self):
        result = self.invoke('ablate', '--config',
                             self.write_plan('beta', [1]))
        self.assertEqual(cli.EXIT_VALIDATION, result.exit_code)


if __name__ == '__main__':
    unittest.main()
