"""Run configuration.

Run configs and ablation plans are JSON documents carrying
``"schema_version": 1``. Keys are checked strictly. Values resolve in this
order: command-line flags, then the file, then TRAJGUARD_* environment
variables, then defaults.
"""

import copy
import json
import logging
import os

from trajguard import distortions
from trajguard import models
from trajguard import utils
from trajguard.blackbox import BlackBoxConfig, NESConfig
from trajguard.diffusion import build_linear_schedule
from trajguard.distortions import DistortionSpec
from trajguard.exc import ConfigError, ModelError, ParameterError
from trajguard.metrics import MetricsConfig
from trajguard.remote import RemoteManipulator
from trajguard.whitebox import WhiteBoxConfig

LOG = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ('whitebox', 'blackbox')

WHITEBOX_ONLY_KEYS = ('lambda1', 'mu1', 'lambda2', 'mu2',
                      'gradient_projection', 'projection_sign')
DEFENSE_KEYS = {
    'whitebox': set(WhiteBoxConfig.FIELDS) - {'seed'},
    'blackbox': set(BlackBoxConfig.FIELDS) - {'seed'} | {'nes'},
}
NES_KEYS = set(NESConfig.FIELDS) - {'seed', 'workers'}
SCHEDULE_KEYS = {'T', 'beta_start', 'beta_end'}
METRICS_KEYS = {'dsr_l2_threshold', 'dsr_idsim_threshold', 'psnr_peak',
                'ssim_window', 'task'}
REMOTE_KEYS = {'url', 'token', 'timeout', 'max_queries', 'verify', 'name'}

DEFAULTS = {
    'schema_version': SCHEMA_VERSION,
    'mode': 'whitebox',
    'input_dir': None,
    'adversarial_dir': None,
    'output_dir': 'out',
    'seed': 0,
    'workers': 1,
    'defense': {},
    'schedule': {},
    'denoiser': {'kind': 'small-convolutional', 'seed': 0},
    'manipulator': {'kind': 'attribute-editor', 'seed': 0},
    'identity_encoder': None,
    'metrics': {},
    'distortions': dict(distortions.DEFAULT_GRIDS),
    'ablation_distortions': [
        {'kind': 'jpeg', 'parameter': 70},
        {'kind': 'gaussian_blur', 'parameter': 5},
        {'kind': 'average_blur', 'parameter': 5},
        {'kind': 'downscale', 'parameter': 0.5},
    ],
}

ABLATION_AXES = {
    'T1': 'T1',
    'T2': 'T2',
    'inject_step_t': 'inject_steps',
    'gradient_projection': 'gradient_projection',
    'alpha': 'alpha',
}


def _env_int(name):
    value = os.getenv(name)
    if value in (None, ''):
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError("%s must be an integer, got %r" % (name, value))


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError("%s must be an object, got %r" % (section, data))
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError("unknown key(s) in %s: %s"
                          % (section, ', '.join(unknown)))


def read_json(path):
    """Load a JSON document, turning read and parse errors into ConfigError."""
    try:
        with open(path, 'r') as handle:
            return json.load(handle)
    except (IOError, OSError) as err:
        raise ConfigError("cannot read config %s: %s" % (path, err))
    except ValueError as err:
        raise ConfigError("config %s is not valid JSON: %s" % (path, err))


class RunConfig(object):
    """A validated run configuration.

    ``data`` is the fully resolved document; its canonical hash is
    ``config_hash`` and is embedded in every output.
    """

    def __init__(self, data, base_dir=None):
        """Resolve defaults and validate; raises ConfigError."""
        self.base_dir = base_dir or os.getcwd()
        self.data = resolve(data)
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "RunConfig(mode=%s, seed=%s, hash=%s)" % (
            self.mode, self.seed, self.config_hash[:12])

    def __getitem__(self, key):
        """Raw access to resolved values."""
        return self.data[key]

    @property
    def mode(self):
        """``whitebox`` or ``blackbox``."""
        return self.data['mode']

    @property
    def seed(self):
        """Global seed."""
        return self.data['seed']

    @property
    def workers(self):
        """Image-level worker count."""
        return self.data['workers']

    @property
    def config_hash(self):
        """SHA-256 of the canonical resolved document."""
        return utils.config_hash(self.data)

    def path(self, key):
        """A path value resolved against the config's directory."""
        value = self.data.get(key)
        if value is None:
            return None
        return os.path.join(self.base_dir, value)

    @property
    def output_dir(self):
        """Directory every command writes under."""
        return self.path('output_dir')

    @property
    def adversarial_dir(self):
        """Protected images: configured, or ``<output_dir>/adversarial``."""
        return self.path('adversarial_dir') or \
            os.path.join(self.output_dir, 'adversarial')

    def with_overrides(self, **overrides):
        """Return a copy with top-level or ``defense`` values replaced."""
        data = copy.deepcopy(self.data)
        for key, value in overrides.items():
            if value is None:
                continue
            if key in DEFAULTS:
                data[key] = value
            else:
                data['defense'][key] = value
        return RunConfig(data, self.base_dir)

    def validate(self):
        """Check the whole document; raises ConfigError."""
        data = self.data
        if data['mode'] not in MODES:
            raise ConfigError("mode must be one of %s, got %r"
                              % (', '.join(MODES), data['mode']))
        for key in ('seed', 'workers'):
            if not isinstance(data[key], int) or isinstance(data[key], bool):
                raise ConfigError("%s must be an integer" % key)
        if data['workers'] < 1:
            raise ConfigError("workers must be >= 1")
        if data['mode'] == 'blackbox':
            misplaced = sorted(set(data['defense']) & set(WHITEBOX_ONLY_KEYS))
            if misplaced:
                raise ConfigError("white-box-only key(s) in a black-box run: "
                                  "%s" % ', '.join(misplaced))
        _check_keys('defense', data['defense'], DEFENSE_KEYS[data['mode']])
        if 'nes' in data['defense']:
            _check_keys('defense.nes', data['defense']['nes'], NES_KEYS)
        _check_keys('schedule', data['schedule'], SCHEDULE_KEYS)
        _check_keys('metrics', data['metrics'], METRICS_KEYS)
        _check_keys('distortions', data['distortions'], distortions.KINDS)
        if 'remote' in data['manipulator']:
            _check_keys('manipulator', data['manipulator'], {'remote'})
            _check_keys('manipulator.remote', data['manipulator']['remote'],
                        REMOTE_KEYS)
            if data['mode'] == 'whitebox':
                raise ConfigError("a remote manipulator needs mode blackbox")
        for role, kinds in (('denoiser', models.DENOISER_KINDS),
                            ('manipulator', models.MANIPULATOR_KINDS)):
            spec = data[role]
            if 'remote' in spec or 'weights' in spec:
                continue
            if spec.get('kind') not in kinds:
                raise ConfigError("%s kind must be one of %s, got %r"
                                  % (role, ', '.join(kinds),
                                     spec.get('kind')))
        try:
            self.defense_config()
            self.schedule()
            self.distortion_specs()
            self.ablation_specs()
            self.metrics_config(identity_encoder=self.identity_encoder())
        except (ParameterError, ModelError) as err:
            raise ConfigError(str(err))

    def defense_config(self, seed=None):
        """WhiteBoxConfig or BlackBoxConfig, seeded with seed or the global one."""
        seed = self.seed if seed is None else seed
        options = dict(self.data['defense'])
        if self.mode == 'whitebox':
            return WhiteBoxConfig(seed=seed, **options)
        nes = NESConfig(seed=seed, workers=1, **options.pop('nes', {}))
        return BlackBoxConfig(nes=nes, seed=seed, **options)

    def schedule(self):
        """The diffusion NoiseSchedule."""
        return build_linear_schedule(**self.data['schedule'])

    def denoiser(self):
        """The toy or saved denoiser."""
        return models.model_from_spec('denoiser', self._model_spec('denoiser'))

    def identity_encoder(self):
        """The identity encoder, or None when not configured."""
        spec = self.data['identity_encoder']
        if spec is None:
            return None
        return models.model_from_spec('identity_encoder', spec)

    def manipulator(self, shape):
        """The manipulator for images of shape, query-only in black-box mode.

        Black-box runs get a fresh counter per call so query totals can be
        read per image.
        """
        spec = self.data['manipulator']
        if 'remote' in spec:
            remote = dict(spec['remote'])
            max_queries = remote.pop('max_queries', None)
            return RemoteManipulator(**remote).as_query_only(max_queries)
        dmap = models.model_from_spec('manipulator',
                                      self._model_spec('manipulator'),
                                      shape=shape)
        if self.mode == 'blackbox':
            return models.wrap_black_box(dmap)
        return dmap

    def evaluation_manipulator(self, shape):
        """The manipulator used for scoring, never query-limited."""
        spec = self.data['manipulator']
        if 'remote' in spec:
            remote = dict(spec['remote'])
            remote.pop('max_queries', None)
            return RemoteManipulator(**remote)
        return models.model_from_spec('manipulator',
                                      self._model_spec('manipulator'),
                                      shape=shape)

    def _model_spec(self, role):
        spec = dict(self.data[role])
        if 'weights' in spec:
            spec['weights'] = os.path.join(self.base_dir, spec['weights'])
        return spec

    def metrics_config(self, identity_encoder=None):
        """MetricsConfig from the metrics section."""
        return MetricsConfig(identity_encoder=identity_encoder,
                             **self.data['metrics'])

    def distortion_specs(self):
        """One DistortionSpec with a grid per configured family, in P order."""
        grids = self.data['distortions']
        return [DistortionSpec(kind, grid=grids[kind])
                for kind in distortions.KINDS if kind in grids]

    def ablation_specs(self):
        """Single-parameter specs of the per-distortion ablation columns."""
        specs = []
        for item in self.data['ablation_distortions']:
            _check_keys('ablation_distortions', item, {'kind', 'parameter'})
            specs.append(DistortionSpec(item['kind'], item.get('parameter')))
        return specs


def resolve(data, overrides=None):
    """Merge defaults, environment fallbacks, the document and overrides."""
    if not isinstance(data, dict):
        raise ConfigError("a run config must be a JSON object")
    _check_keys('run config', data, DEFAULTS)
    version = data.get('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("unsupported schema_version %r, expected %d"
                          % (version, SCHEMA_VERSION))
    resolved = copy.deepcopy(DEFAULTS)
    env_seed = _env_int('TRAJGUARD_SEED')
    if env_seed is not None:
        resolved['seed'] = env_seed
    env_workers = _env_int('TRAJGUARD_WORKERS')
    if env_workers is not None:
        resolved['workers'] = env_workers
    resolved.update(copy.deepcopy(data))
    for key, value in (overrides or {}).items():
        if value is not None:
            resolved[key] = value
    resolved['schema_version'] = SCHEMA_VERSION
    return resolved


def load_run_config(path, **overrides):
    """Read, resolve and validate a run config file.

    Relative paths inside the file are taken relative to the file.
    """
    data = read_json(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    cfg = RunConfig(resolve(data, overrides), base_dir)
    LOG.debug("loaded %s: %r", path, cfg)
    return cfg


class AblationPlan(object):
    """One axis of values applied to a base run config.

    :param axis: ``T1``, ``T2``, ``inject_step_t``, ``gradient_projection``
        or ``alpha``.
    :param values: values of the axis, one table row each.
    :param RunConfig base: configuration every row starts from.
    """

    def __init__(self, axis, values, base):
        """Validate every row's configuration up front."""
        if axis not in ABLATION_AXES:
            raise ConfigError("unknown ablation axis %r, expected one of %s"
                              % (axis, ', '.join(sorted(ABLATION_AXES))))
        if not values:
            raise ConfigError("ablation values are empty")
        if axis == 'gradient_projection' and base.mode == 'blackbox':
            raise ConfigError("gradient_projection is a white-box axis")
        self.axis = axis
        self.values = list(values)
        self.base = base
        for value in self.values:
            self.row_config(value)

    def __repr__(self):
        """Return value for the repr function."""
        return "AblationPlan(axis=%s, values=%r)" % (self.axis, self.values)

    @property
    def field(self):
        """Defense field the axis sets."""
        return ABLATION_AXES[self.axis]

    def row_config(self, value):
        """Base config with the axis set to value."""
        if self.axis == 'gradient_projection' and not isinstance(value, bool):
            raise ConfigError("gradient_projection values must be booleans")
        overrides = {self.field: value}
        if self.axis == 'T2':
            # the injection window follows T2 unless the base pins it
            injected = self.base['defense'].get('inject_steps')
            overrides['inject_steps'] = min(injected, value) \
                if injected is not None else value
        return self.base.with_overrides(**overrides)

    def label(self, value):
        """Row label, e.g. ``T2=10`` or ``with GP``."""
        if self.axis == 'gradient_projection':
            return 'with GP' if value else 'w/o GP'
        return '%s=%s' % (self.axis, value)


def load_ablation_plan(path, **overrides):
    """Read an ablation plan; ``base`` is inline or a path to a run config."""
    data = read_json(path)
    _check_keys('ablation plan', data, {'schema_version', 'axis', 'values',
                                        'base'})
    if data.get('schema_version', SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError("unsupported schema_version %r"
                          % data.get('schema_version'))
    base_dir = os.path.dirname(os.path.abspath(path))
    base = data.get('base', {})
    if isinstance(base, str):
        base_path = os.path.join(base_dir, base)
        base_cfg = load_run_config(base_path, **overrides)
    else:
        base_cfg = RunConfig(resolve(base, overrides), base_dir)
    for field in ('axis', 'values'):
        if field not in data:
            raise ConfigError("ablation plan is missing %r" % field)
    return AblationPlan(data['axis'], data['values'], base_cfg)
