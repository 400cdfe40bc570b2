"""Command-line surface: protect, evaluate, sweep and ablate.

Progress goes to stderr; machine outputs only to files under the output
directory. Exit status is 0 on success, 1 when the config, the inputs or
their alignment are invalid, and 2 when a run fails, including a run where
only some images failed.
"""

import contextlib
import csv
import io
import logging
import os
import sys
import threading

from multiprocessing.pool import ThreadPool

import click
import numpy as np

import trajguard
from trajguard import distortions
from trajguard import images
from trajguard import metrics
from trajguard import utils
from trajguard.__about__ import __version__
from trajguard.blackbox import protect_blackbox
from trajguard.config import load_ablation_plan, load_run_config
from trajguard.diffusion import LatentImage
from trajguard.exc import AlignmentError, ConfigError, InputError
from trajguard.exc import TrajguardException
from trajguard.notice import Failure
from trajguard.whitebox import protect_whitebox

LOG = trajguard.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


@contextlib.contextmanager
def stderr_logging(level=None):
    """Attach a stderr handler to the package logger for one command."""
    level = (level or os.getenv('TRAJGUARD_LOG_LEVEL') or 'INFO').upper()
    logger = logging.getLogger('trajguard')
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    previous = logger.level
    logger.addHandler(handler)
    logger.setLevel(getattr(logging, level, logging.INFO))
    try:
        yield logger
    finally:
        logger.removeHandler(handler)
        logger.setLevel(previous)


def _stem(name):
    return os.path.splitext(name)[0]


def _log_failure(message, sidecar, stage, **context):
    LOG.error(message, exc_info=True,
              extra=dict(context, sidecar=sidecar, stage=stage))


def _map(fn, items, workers):
    items = list(items)
    if workers > 1 and len(items) > 1:
        pool = ThreadPool(min(int(workers), len(items)))
        try:
            return pool.map(fn, items)
        finally:
            pool.close()
            pool.join()
    return [fn(item) for item in items]


class ManipulatorCache(object):
    """Builds each white-box or scoring manipulator once per image shape."""

    def __init__(self, factory):
        """Wrap factory(shape)."""
        self._factory = factory
        self._lock = threading.Lock()
        self._models = {}

    def get(self, shape):
        """Return the model for shape, building it on first use."""
        shape = tuple(shape)
        with self._lock:
            if shape not in self._models:
                self._models[shape] = self._factory(shape)
            return self._models[shape]


class Protector(object):
    """Protects single images under one run config."""

    def __init__(self, cfg):
        """Build the schedule and denoiser shared by every image."""
        self.cfg = cfg
        self.sched = cfg.schedule()
        self.denoiser = cfg.denoiser()
        self._whitebox = ManipulatorCache(cfg.manipulator)

    def image_seed(self, name):
        """Per-image seed, independent of worker scheduling."""
        return utils.derive_seed(self.cfg.seed, name)

    def protect(self, name, data):
        """Return the ProtectionResult of one image tensor."""
        seed = self.image_seed(name)
        defense = self.cfg.defense_config(seed=seed)
        x = LatentImage(data)
        if self.cfg.mode == 'whitebox':
            manipulator = self._whitebox.get(x.shape)
            result = protect_whitebox(x, manipulator, self.denoiser, defense,
                                      self.sched)
        else:
            manipulator = self.cfg.manipulator(x.shape)
            result = protect_blackbox(x, manipulator, self.denoiser, defense,
                                      self.sched)
        result.metadata.update({'image': name, 'seed': seed,
                                'run_seed': self.cfg.seed,
                                'config_hash': self.cfg.config_hash,
                                'quantization': '8-bit PNG round trip'})
        return result


def _require_dir(cfg, key):
    path = cfg.path(key)
    if path is None:
        raise ConfigError("%s is not set" % key)
    if not os.path.isdir(path):
        raise ConfigError("%s %s does not exist" % (key, path))
    return path


def load_aligned(clean_dir, adv_dir):
    """Load clean/adversarial pairs matched by filename.

    Raises InputError when there are no clean images and AlignmentError,
    naming the offenders, when the two sets differ.
    """
    clean_names = images.list_images(clean_dir)
    if not clean_names:
        raise InputError("no inputs in %s" % clean_dir)
    if not os.path.isdir(adv_dir):
        raise AlignmentError("adversarial directory %s does not exist"
                             % adv_dir, missing=clean_names)
    adv_names = images.list_images(adv_dir)
    missing = sorted(set(clean_names) - set(adv_names))
    extra = sorted(set(adv_names) - set(clean_names))
    if missing or extra:
        raise AlignmentError(
            "clean and adversarial sets differ; missing: %s; unexpected: %s"
            % (', '.join(missing) or '-', ', '.join(extra) or '-'),
            missing=missing + extra)
    return clean_names


def _write_table(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(['' if cell is None else
                         repr(float(cell)) if isinstance(cell, float) else
                         cell for cell in row])
    utils.atomic_write(path, buf.getvalue())
    return path


def _write_table_failure(path, failed, stage, cfg):
    sidecar = '%s.error.json' % os.path.splitext(path)[0]
    message = "%d item(s) failed; table is partial: %s" % (
        len(failed), ', '.join(str(item) for item in failed))
    Failure(exc_info=(None, None, None), message=message, stage=stage,
            context={'failed': [str(item) for item in failed],
                     'config_hash': cfg.config_hash,
                     'seed': cfg.seed}).write(sidecar)
    LOG.error(message)
    return sidecar


def run_protect(cfg):
    """Protect every PNG of input_dir; returns the exit status."""
    input_dir = _require_dir(cfg, 'input_dir')
    names = images.list_images(input_dir)
    if not names:
        raise InputError("no inputs in %s" % input_dir)
    adv_dir = cfg.adversarial_dir
    trace_dir = os.path.join(cfg.output_dir, 'traces')
    protector = Protector(cfg)
    LOG.info("protecting %d image(s) from %s (%s, %d worker(s))",
             len(names), input_dir, cfg.mode, cfg.workers)

    def one(name):
        sidecar = os.path.join(adv_dir, '%s.error.json' % _stem(name))
        try:
            data = images.load_png(os.path.join(input_dir, name))
            result = protector.protect(name, data)
            images.save_png(result.adversarial_image.data,
                            os.path.join(adv_dir, _stem(name) + '.png'))
            result.write_trace(os.path.join(trace_dir,
                                            '%s.trace.jsonl' % _stem(name)))
        except TrajguardException:
            _log_failure("protecting %s failed" % name, sidecar, 'protect',
                         image=name, config_hash=cfg.config_hash,
                         seed=cfg.seed)
            return False
        if os.path.exists(sidecar):
            os.remove(sidecar)
        LOG.info("protected %s", name)
        return True

    done = _map(one, names, cfg.workers)
    failed = [name for name, ok in zip(names, done) if not ok]
    if failed:
        LOG.error("%d of %d image(s) failed", len(failed), len(names))
        return EXIT_RUNTIME
    return EXIT_OK


def _scoring_context(cfg):
    encoder = cfg.identity_encoder()
    return (cfg.metrics_config(identity_encoder=encoder),
            ManipulatorCache(cfg.evaluation_manipulator))


def run_evaluate(cfg):
    """Score adversarial_dir against input_dir; returns the exit status."""
    clean_dir = _require_dir(cfg, 'input_dir')
    adv_dir = cfg.adversarial_dir
    names = load_aligned(clean_dir, adv_dir)
    metrics_cfg, scorers = _scoring_context(cfg)
    report_dir = cfg.output_dir
    csv_path = os.path.join(report_dir, 'report.csv')

    def one(name):
        try:
            clean = images.load_png(os.path.join(clean_dir, name))
            adv = images.load_png(os.path.join(adv_dir, name))
            return metrics.evaluate_pair(_stem(name), clean, adv,
                                         scorers.get(clean.shape),
                                         metrics_cfg)
        except TrajguardException:
            _log_failure("evaluating %s failed" % name,
                         os.path.join(report_dir, 'report',
                                      '%s.error.json' % _stem(name)),
                         'evaluate', image=name,
                         config_hash=cfg.config_hash, seed=cfg.seed)
            return None

    results = _map(one, names, cfg.workers)
    rows = [row for row in results if row is not None]
    failed = [name for name, row in zip(names, results) if row is None]
    if not rows:
        _write_table_failure(csv_path, failed, 'evaluate', cfg)
        return EXIT_RUNTIME
    metadata = metrics.report_metadata(
        config=cfg.data, seeds={'run': cfg.seed},
        extra={'images': [_stem(name) for name in names],
               'failed': failed})
    report = metrics.EvaluationReport(rows, metrics_cfg, metadata)
    report.write(csv_path, os.path.join(report_dir, 'report.summary.json'))
    LOG.info("wrote %s: dsr=%.4f over %d image(s)", csv_path, report.dsr,
             len(rows))
    if failed:
        _write_table_failure(csv_path, failed, 'evaluate', cfg)
        return EXIT_RUNTIME
    return EXIT_OK


def _single_shape(batch):
    shapes = set(tuple(x.shape) for x in batch)
    if len(shapes) != 1:
        raise InputError("images must share one shape, found %s"
                         % ', '.join(str(s) for s in sorted(shapes)))
    return shapes.pop()


AUC_COLUMNS = ('method', 'P1', 'P2', 'P3', 'P4', 'Avg', 'config_hash',
               'seed')


def auc_row(method, curves):
    """One AUC table row: P1..P4 scores and their mean."""
    scores = dict((distortions.LABELS[curve.kind],
                   distortions.curve_score(curve)) for curve in curves)
    present = [scores[label] for label in ('P1', 'P2', 'P3', 'P4')
               if label in scores]
    avg = float(np.mean(present)) if present else None
    return [method] + [scores.get(label) for label in
                       ('P1', 'P2', 'P3', 'P4')] + [avg]


def run_sweep(cfg):
    """Sweep every configured distortion over its grid; returns exit status."""
    clean_dir = _require_dir(cfg, 'input_dir')
    adv_dir = cfg.adversarial_dir
    names = load_aligned(clean_dir, adv_dir)
    clean = [images.load_png(os.path.join(clean_dir, n)) for n in names]
    adv = [images.load_png(os.path.join(adv_dir, n)) for n in names]
    shape = _single_shape(clean + adv)
    metrics_cfg, scorers = _scoring_context(cfg)
    manipulator = scorers.get(shape)
    metric = metrics.dsr_metric(metrics_cfg.task, metrics_cfg)

    curves, failed = [], []
    for spec in cfg.distortion_specs():
        try:
            curves.append(distortions.sweep(adv, clean, manipulator, spec,
                                            metric))
        except TrajguardException:
            failed.append(spec.kind)
            _log_failure("sweeping %s failed" % spec.kind,
                         os.path.join(cfg.output_dir, 'curves',
                                      '%s.error.json' % spec.kind),
                         'sweep', distortion=spec.kind,
                         config_hash=cfg.config_hash, seed=cfg.seed)

    curves_path = os.path.join(cfg.output_dir, 'curves.csv')
    auc_path = os.path.join(cfg.output_dir, 'auc.csv')
    utils.atomic_write(curves_path, distortions.curves_to_csv(curves))
    row = auc_row(cfg.mode, curves) + [cfg.config_hash, cfg.seed]
    _write_table(auc_path, AUC_COLUMNS, [row])
    LOG.info("wrote %s and %s", curves_path, auc_path)
    if failed:
        _write_table_failure(auc_path, failed, 'sweep', cfg)
        return EXIT_RUNTIME
    return EXIT_OK


def ablation_columns(specs):
    """Header of an ablation table for the given distortion columns."""
    columns = ['axis', 'value', 'label', 'dsr', 'output_l2', 'input_psnr',
               'input_ssim']
    for spec in specs:
        prefix = '%s_%s_%s' % (spec.label, spec.kind, spec.parameter)
        columns.extend(['%s_dsr' % prefix, '%s_output_l2' % prefix])
    return columns + ['config_hash', 'seed']


def ablation_row(plan, value, names, clean, manipulator_for):
    """Protect, evaluate and distort the batch under one axis value."""
    row_cfg = plan.row_config(value)
    protector = Protector(row_cfg)
    metrics_cfg = row_cfg.metrics_config(
        identity_encoder=row_cfg.identity_encoder())

    def protect_one(index):
        result = protector.protect(names[index], clean[index])
        return images.quantize(result.adversarial_image.data)

    adv = _map(protect_one, range(len(names)), row_cfg.workers)
    manipulator = manipulator_for(tuple(clean[0].shape))
    report = metrics.build_report(clean, adv, manipulator, metrics_cfg,
                                  names=[_stem(n) for n in names])
    aggregates = report.aggregates
    cells = [plan.axis, value, plan.label(value), aggregates['dsr'],
             aggregates.get('mean_output_l2'),
             metrics.display_psnr(aggregates.get('mean_input_psnr')),
             aggregates.get('mean_input_ssim')]
    dsr_fn = metrics.dsr_metric(metrics_cfg.task, metrics_cfg)
    l2_fn = metrics.output_l2_metric()
    for spec in row_cfg.ablation_specs():
        cells.append(distortions.sweep(adv, clean, manipulator, spec,
                                       dsr_fn).points[0][1])
        cells.append(distortions.sweep(adv, clean, manipulator, spec,
                                       l2_fn).points[0][1])
    return cells + [row_cfg.config_hash, row_cfg.seed]


def run_ablate(plan):
    """Run every value of an ablation axis; returns the exit status."""
    base = plan.base
    clean_dir = _require_dir(base, 'input_dir')
    names = images.list_images(clean_dir)
    if not names:
        raise InputError("no inputs in %s" % clean_dir)
    clean = [images.load_png(os.path.join(clean_dir, n)) for n in names]
    _single_shape(clean)
    scorers = ManipulatorCache(base.evaluation_manipulator)
    table_path = os.path.join(base.output_dir,
                              'ablation_%s.csv' % plan.axis)

    rows, failed = [], []
    for value in plan.values:
        LOG.info("ablation %s", plan.label(value))
        try:
            rows.append(ablation_row(plan, value, names, clean, scorers.get))
        except TrajguardException:
            failed.append(value)
            _log_failure("ablation row %s failed" % plan.label(value),
                         os.path.join(base.output_dir, 'ablation',
                                      '%s=%s.error.json' % (plan.axis,
                                                            value)),
                         'ablate', axis=plan.axis, value=value,
                         config_hash=base.config_hash, seed=base.seed)
    _write_table(table_path, ablation_columns(base.ablation_specs()), rows)
    LOG.info("wrote %s (%d row(s))", table_path, len(rows))
    if failed:
        _write_table_failure(table_path, failed, 'ablate', base)
        return EXIT_RUNTIME
    return EXIT_OK


def _dispatch(log_level, fn, *args):
    with stderr_logging(log_level):
        try:
            return fn(*args)
        except (ConfigError, AlignmentError, InputError) as err:
            LOG.error("%s: %s", type(err).__name__, err)
            return EXIT_VALIDATION
        except TrajguardException as err:
            LOG.exception("%s: %s", type(err).__name__, err)
            return EXIT_RUNTIME


def common_options(func):
    """Flags shared by every command."""
    func = click.option('--log-level', default=None,
                        type=click.Choice(['DEBUG', 'INFO', 'WARNING',
                                           'ERROR'], case_sensitive=False),
                        help='Defaults to TRAJGUARD_LOG_LEVEL or INFO.')(func)
    func = click.option('--out-dir', default=None,
                        help='Override output_dir.')(func)
    func = click.option('--workers', type=int, default=None,
                        help='Image-level worker threads.')(func)
    func = click.option('--seed', type=int, default=None,
                        help='Override the run seed.')(func)
    return func


def _load(config, seed, workers, out_dir):
    return load_run_config(config, seed=seed, workers=workers,
                           output_dir=os.path.abspath(out_dir)
                           if out_dir else None)


def _command(log_level, runner, loader, *args):
    def run():
        return runner(loader(*args))
    sys.exit(_dispatch(log_level, run))


@click.group()
@click.version_option(__version__, prog_name='trajguard')
def main():
    """Protect images against generative manipulation."""


@main.command()
@click.option('--config', 'config', required=True,
              type=click.Path(dir_okay=False), help='Run config (JSON).')
@common_options
def protect(config, seed, workers, out_dir, log_level):
    """Write protected PNGs and per-image traces."""
    _command(log_level, run_protect, _load, config, seed, workers, out_dir)


@main.command()
@click.option('--config', 'config', required=True,
              type=click.Path(dir_okay=False), help='Run config (JSON).')
@common_options
def evaluate(config, seed, workers, out_dir, log_level):
    """Write the evaluation report CSV and summary."""
    _command(log_level, run_evaluate, _load, config, seed, workers, out_dir)


@main.command()
@click.option('--config', 'config', required=True,
              type=click.Path(dir_okay=False), help='Run config (JSON).')
@common_options
def sweep(config, seed, workers, out_dir, log_level):
    """Write robustness curves and the AUC table."""
    _command(log_level, run_sweep, _load, config, seed, workers, out_dir)


@main.command()
@click.option('--config', 'config', required=True,
              type=click.Path(dir_okay=False), help='Ablation plan (JSON).')
@common_options
def ablate(config, seed, workers, out_dir, log_level):
    """Write one ablation table row per axis value."""
    def loader(path, seed, workers, out_dir):
        return load_ablation_plan(path, seed=seed, workers=workers,
                                  output_dir=os.path.abspath(out_dir)
                                  if out_dir else None)
    _command(log_level, run_ablate, loader, config, seed, workers, out_dir)


if __name__ == '__main__':
    main()  # pylint: disable=no-value-for-parameter
