"""Evaluation metrics and reports.

Distances are mean-reduced so thresholds do not depend on resolution:
``l2_distance`` is the root mean square difference and ``l1_distance`` the
mean absolute difference.

Report columns name the pair they compare. ``input_*`` columns compare the
clean image with the protected image (fidelity, higher SSIM is better);
``output_*`` columns compare the manipulator's output on each (disruption,
lower SSIM is better); ``id_sim`` compares the clean image with the
manipulated protected image.
"""

import csv
import io
import logging
import math

from multiprocessing.pool import ThreadPool

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from trajguard.__about__ import __generator__
from trajguard import images
from trajguard import utils
from trajguard.exc import ParameterError

LOG = logging.getLogger(__name__)

ATTRIBUTE_EDITING = 'attribute_editing'
FACE_SWAPPING = 'face_swapping'
TASKS = (ATTRIBUTE_EDITING, FACE_SWAPPING)

SCHEMA_VERSION = 1
PSNR_DISPLAY_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

ROW_COLUMNS = ('name', 'input_l1', 'input_l2', 'input_psnr', 'input_ssim',
               'output_l1', 'output_l2', 'output_psnr', 'output_ssim',
               'id_sim', 'perceptual_distance', 'success')
NUMERIC_COLUMNS = ROW_COLUMNS[1:-1]


class MetricsConfig(object):
    """Thresholds and helpers used by the metrics.

    :param dsr_l2_threshold: attribute editing succeeds when the output L2
        exceeds this.
    :param dsr_idsim_threshold: face swapping succeeds when the identity
        similarity falls below this.
    :param psnr_peak: dynamic range of the pixel representation.
    :param ssim_window: odd Gaussian window size.
    :param identity_encoder: IdentityEncoder, needed for face swapping.
    :param task: ``attribute_editing`` or ``face_swapping``.
    :param perceptual_embedding: optional callable image -> vector filling
        the perceptual_distance column.
    """

    # pylint: disable=too-many-arguments

    def __init__(self, dsr_l2_threshold=0.05, dsr_idsim_threshold=0.4,
                 psnr_peak=2.0, ssim_window=11, identity_encoder=None,
                 task=ATTRIBUTE_EDITING, perceptual_embedding=None):
        """Store and validate the settings."""
        self.dsr_l2_threshold = dsr_l2_threshold
        self.dsr_idsim_threshold = dsr_idsim_threshold
        self.psnr_peak = psnr_peak
        self.ssim_window = ssim_window
        self.identity_encoder = identity_encoder
        self.task = task
        self.perceptual_embedding = perceptual_embedding
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "MetricsConfig(task=%s, l2>%g, id_sim<%g)" % (
            self.task, self.dsr_l2_threshold, self.dsr_idsim_threshold)

    def validate(self):
        """Raise ParameterError on a bad threshold, window or task."""
        if not self.dsr_l2_threshold > 0 or not self.dsr_idsim_threshold > 0:
            raise ParameterError("DSR thresholds must be positive")
        if not self.psnr_peak > 0:
            raise ParameterError("psnr_peak must be positive")
        if int(self.ssim_window) != self.ssim_window or \
                self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ParameterError("ssim_window must be an odd integer, got %r"
                                 % (self.ssim_window,))
        if self.task not in TASKS:
            raise ParameterError("task must be one of %s, got %r"
                                 % (', '.join(TASKS), self.task))
        if self.task == FACE_SWAPPING and self.identity_encoder is None:
            raise ParameterError("face swapping needs an identity encoder")

    def to_dict(self):
        """JSON-able settings; helpers are described, not serialized."""
        encoder = self.identity_encoder
        return utils.non_empty_keys({
            'dsr_l2_threshold': self.dsr_l2_threshold,
            'dsr_idsim_threshold': self.dsr_idsim_threshold,
            'psnr_peak': self.psnr_peak,
            'ssim_window': self.ssim_window,
            'task': self.task,
            'identity_encoder': repr(encoder) if encoder else None,
        })


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ParameterError("shapes differ: %s vs %s"
                             % (tuple(a.shape), tuple(b.shape)))


def _data(x):
    return getattr(x, 'data', x)


def l2_distance(a, b):
    """Root mean square difference."""
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    return float(torch.sqrt(((a - b) ** 2).mean()))


def l1_distance(a, b):
    """Mean absolute difference."""
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    return float((a - b).abs().mean())


def psnr(a, b, peak=2.0):
    """Peak signal-to-noise ratio in dB; identical inputs give inf."""
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float('inf')
    return 10.0 * math.log10(peak ** 2 / mse)


def display_psnr(value, cap=PSNR_DISPLAY_CAP):
    """PSNR for tables: infinite values shown as the cap."""
    if value is None:
        return None
    return min(value, cap)


def _ssim_window(window):
    offsets = torch.arange(window, dtype=torch.float64) - (window - 1) / 2.0
    weights = torch.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    return weights / weights.sum()


def _check_window(shape, window):
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ParameterError("SSIM window must be an odd integer, got %r"
                             % (window,))
    if len(shape) != 3:
        raise ParameterError("SSIM expects (C, H, W) images, got %s"
                             % (tuple(shape),))
    if window > min(shape[1], shape[2]):
        raise ParameterError("SSIM window %d larger than image %dx%d"
                             % (window, shape[1], shape[2]))


def ssim(a, b, window=11, peak=2.0):
    """Single-scale SSIM with a Gaussian window, valid positions only.

    Local statistics use a separable Gaussian of sigma 1.5; the constants
    are (0.01 peak)^2 and (0.03 peak)^2. The map is averaged over channels
    and positions.
    """
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    _check_window(a.shape, window)
    channels = a.shape[0]
    weights = _ssim_window(int(window)).to(a.dtype)
    rows = weights.reshape(1, 1, -1, 1).expand(channels, 1, -1, 1)
    cols = weights.reshape(1, 1, 1, -1).expand(channels, 1, 1, -1)

    def local_mean(data):
        out = F.conv2d(data.unsqueeze(0), rows.contiguous(), groups=channels)
        return F.conv2d(out, cols.contiguous(), groups=channels).squeeze(0)

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_reference(a, b, window=11, peak=2.0):
    """SSIM computed with scipy's 2-D correlation, for cross-checking."""
    a = np.asarray(_data(a), dtype=np.float64)
    b = np.asarray(_data(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError("shapes differ: %s vs %s" % (a.shape, b.shape))
    _check_window(a.shape, window)
    offsets = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    kernel = np.outer(g, g)
    kernel /= kernel.sum()
    r = window // 2
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]

        def filt(img):
            full = ndimage.correlate(img, kernel, mode='reflect')
            return full[r:img.shape[0] - r, r:img.shape[1] - r]

        ux, uy = filt(x), filt(y)
        vx = filt(x * x) - ux * ux
        vy = filt(y * y) - uy * uy
        vxy = filt(x * y) - ux * uy
        smap = ((2 * ux * uy + c1) * (2 * vxy + c2)) / \
            ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))


def id_similarity(a, b, encoder):
    """Cosine similarity of identity embeddings, clipped to [-1, 1]."""
    emb_a = encoder.embed(_data(a)).reshape(-1)
    emb_b = encoder.embed(_data(b)).reshape(-1)
    denom = float(emb_a.norm()) * float(emb_b.norm())
    if denom == 0:
        return 0.0
    return max(-1.0, min(1.0, float(torch.dot(emb_a, emb_b)) / denom))


def cosine_distance(vec_a, vec_b):
    """1 - cosine similarity of two vectors."""
    vec_a = torch.as_tensor(vec_a, dtype=torch.float64).reshape(-1)
    vec_b = torch.as_tensor(vec_b, dtype=torch.float64).reshape(-1)
    denom = float(vec_a.norm()) * float(vec_b.norm())
    if denom == 0:
        return 1.0
    return 1.0 - float(torch.dot(vec_a, vec_b)) / denom


class EvaluationRow(object):  # pylint: disable=too-few-public-methods
    """Metrics of one clean/protected pair.

    Missing metrics are None.
    """

    __slots__ = ROW_COLUMNS

    def __init__(self, **values):
        """Set the given columns; unknown names raise ParameterError."""
        unknown = set(values) - set(ROW_COLUMNS)
        if unknown:
            raise ParameterError("unknown row columns: %s"
                                 % ', '.join(sorted(unknown)))
        for column in ROW_COLUMNS:
            setattr(self, column, values.get(column))

    def __repr__(self):
        """Return value for the repr function."""
        return "EvaluationRow(name=%s, output_l2=%r, success=%r)" % (
            self.name, self.output_l2, self.success)

    def __eq__(self, other):
        """Rows are equal when every column is."""
        return isinstance(other, EvaluationRow) and \
            self.as_dict() == other.as_dict()

    def __hash__(self):
        """Hash of the name."""
        return hash(self.name)

    def as_dict(self):
        """Return the columns as an ordered-by-schema dict."""
        return dict((column, getattr(self, column)) for column in ROW_COLUMNS)

    def csv_cells(self):
        """Cells in ROW_COLUMNS order; floats are written with repr."""
        cells = []
        for column in ROW_COLUMNS:
            value = getattr(self, column)
            if value is None:
                cells.append('')
            elif column == 'success':
                cells.append('1' if value else '0')
            elif column == 'name':
                cells.append(value)
            else:
                cells.append(repr(float(value)))
        return cells

    @classmethod
    def from_csv_cells(cls, cells):
        """Parse cells written by csv_cells."""
        values = {}
        for column, cell in zip(ROW_COLUMNS, cells):
            if cell == '':
                values[column] = None
            elif column == 'success':
                values[column] = cell == '1'
            elif column == 'name':
                values[column] = cell
            else:
                values[column] = float(cell)
        return cls(**values)


def is_success(row, task, cfg):
    """Strict criterion: output L2 above, or ID similarity below, threshold."""
    if task == FACE_SWAPPING:
        if row.id_sim is None:
            raise ParameterError("row %s has no id_sim" % row.name)
        return row.id_sim < cfg.dsr_idsim_threshold
    if row.output_l2 is None:
        raise ParameterError("row %s has no output_l2" % row.name)
    return row.output_l2 > cfg.dsr_l2_threshold


def dsr(rows, task, cfg):
    """Defense success rate: the fraction of rows meeting the criterion."""
    rows = list(rows)
    if not rows:
        raise ParameterError("DSR of an empty row set")
    if task not in TASKS:
        raise ParameterError("unknown task %r" % (task,))
    hits = sum(1 for row in rows if is_success(row, task, cfg))
    return hits / float(len(rows))


def dsr_metric(task, cfg):
    """Sweep metric: DSR of distorted outputs against the clean outputs."""
    def metric(clean_images, clean_outputs, outputs):
        rows = []
        for clean, clean_out, out in zip(clean_images, clean_outputs,
                                         outputs):
            if task == FACE_SWAPPING:
                rows.append(EvaluationRow(id_sim=id_similarity(
                    clean, out, cfg.identity_encoder)))
            else:
                rows.append(EvaluationRow(output_l2=l2_distance(clean_out,
                                                                out)))
        return dsr(rows, task, cfg)
    metric.metric_name = 'dsr'
    return metric


def output_l2_metric():
    """Sweep metric: mean output L2 against the clean outputs."""
    def metric(clean_images, clean_outputs, outputs):
        # pylint: disable=unused-argument
        values = [l2_distance(a, b) for a, b in zip(clean_outputs, outputs)]
        return float(np.mean(values))
    metric.metric_name = 'output_l2'
    return metric


def evaluate_pair(name, clean, adv, manipulator, cfg):
    """Compute one EvaluationRow; the clean output is queried once."""
    clean, adv = _data(clean), _data(adv)
    _check_same_shape(clean, adv)
    clean_out = manipulator.forward(clean)
    adv_out = manipulator.forward(adv)
    row = EvaluationRow(
        name=name,
        input_l1=l1_distance(clean, adv),
        input_l2=l2_distance(clean, adv),
        input_psnr=psnr(clean, adv, cfg.psnr_peak),
        input_ssim=_maybe_ssim(clean, adv, cfg),
        output_l1=l1_distance(clean_out, adv_out),
        output_l2=l2_distance(clean_out, adv_out),
        output_psnr=psnr(clean_out, adv_out, cfg.psnr_peak),
        output_ssim=_maybe_ssim(clean_out, adv_out, cfg))
    if cfg.identity_encoder is not None and \
            tuple(adv_out.shape) == tuple(clean.shape):
        row.id_sim = id_similarity(clean, adv_out, cfg.identity_encoder)
    if cfg.perceptual_embedding is not None:
        row.perceptual_distance = cosine_distance(
            cfg.perceptual_embedding(clean), cfg.perceptual_embedding(adv))
    row.success = is_success(row, cfg.task, cfg)
    return row


def _maybe_ssim(a, b, cfg):
    if a.dim() != 3 or cfg.ssim_window > min(a.shape[1], a.shape[2]):
        return None
    return ssim(a, b, cfg.ssim_window, cfg.psnr_peak)


def aggregate(rows, cfg):
    """Means of the numeric columns plus DSR."""
    rows = list(rows)
    result = {'count': len(rows), 'dsr': dsr(rows, cfg.task, cfg)}
    for column in NUMERIC_COLUMNS:
        values = [getattr(row, column) for row in rows
                  if getattr(row, column) is not None]
        if values:
            result['mean_%s' % column] = float(np.mean(values))
    return result


class EvaluationReport(object):
    """Per-image rows, aggregates and run metadata."""

    def __init__(self, rows, cfg, metadata=None):
        """Aggregate rows under cfg."""
        self.rows = list(rows)
        self.cfg = cfg
        self.aggregates = aggregate(self.rows, cfg)
        self.metadata = dict(metadata or {})

    def __repr__(self):
        """Return value for the repr function."""
        return "EvaluationReport(rows=%d, dsr=%.4f)" % (
            len(self.rows), self.aggregates['dsr'])

    @property
    def dsr(self):
        """Aggregate defense success rate."""
        return self.aggregates['dsr']

    def to_csv(self):
        """Rows as CSV text, ROW_COLUMNS header first."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(ROW_COLUMNS)
        for row in self.rows:
            writer.writerow(row.csv_cells())
        return buf.getvalue()

    def summary(self):
        """Aggregates and metadata as a JSON-able dict."""
        display = {}
        if 'mean_input_psnr' in self.aggregates:
            display['mean_input_psnr'] = display_psnr(
                self.aggregates['mean_input_psnr'])
        if 'mean_output_psnr' in self.aggregates:
            display['mean_output_psnr'] = display_psnr(
                self.aggregates['mean_output_psnr'])
        return {'schema_version': SCHEMA_VERSION,
                'task': self.cfg.task,
                'metrics': self.cfg.to_dict(),
                'aggregates': self.aggregates,
                'display': display,
                'metadata': self.metadata}

    def summary_json(self):
        """summary() as indented canonical JSON text."""
        return utils.canonical_json(self.summary(), indent=2) + '\n'

    def write(self, csv_path, summary_path):
        """Atomically write the CSV and the summary."""
        utils.atomic_write(csv_path, self.to_csv())
        utils.atomic_write(summary_path, self.summary_json())
        return csv_path, summary_path


def rows_from_csv(text):
    """Parse the CSV written by EvaluationReport.to_csv."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != ROW_COLUMNS:
        raise ParameterError("unexpected report header %r" % (header,))
    return [EvaluationRow.from_csv_cells(cells) for cells in reader]


def report_metadata(config=None, seeds=None, extra=None):
    """Metadata embedded in reports: config hash, seeds, codec versions."""
    metadata = {'generator': __generator__,
                'codec_versions': images.codec_versions(),
                'git_revision': utils.source_revision(),
                'quantization': '8-bit PNG round trip'}
    if config is not None:
        metadata['config_hash'] = utils.config_hash(config)
    if seeds is not None:
        metadata['seeds'] = seeds
    metadata.update(extra or {})
    return utils.non_empty_keys(metadata)


def build_report(clean_batch, adv_batch, manipulator, cfg, names=None,
                 metadata=None, workers=1):
    """Evaluate aligned batches into an EvaluationReport.

    :param names: row names, defaulting to the batch index.
    :param metadata: dict merged into the summary metadata.
    :param workers: threads computing rows; row order is kept.
    """
    # pylint: disable=too-many-arguments
    clean_batch, adv_batch = list(clean_batch), list(adv_batch)
    if len(clean_batch) != len(adv_batch):
        raise ParameterError("batches are not aligned: %d vs %d"
                             % (len(clean_batch), len(adv_batch)))
    if not clean_batch:
        raise ParameterError("cannot report on an empty batch")
    cfg.validate()
    names = list(names) if names is not None else \
        ['%04d' % i for i in range(len(clean_batch))]

    def one(index):
        return evaluate_pair(names[index], clean_batch[index],
                             adv_batch[index], manipulator, cfg)

    indices = list(range(len(clean_batch)))
    if workers > 1 and len(indices) > 1:
        pool = ThreadPool(min(int(workers), len(indices)))
        try:
            rows = pool.map(one, indices)
        finally:
            pool.close()
            pool.join()
    else:
        rows = [one(i) for i in indices]
    report = EvaluationReport(rows, cfg, metadata)
    LOG.info("evaluated %d pairs: dsr=%.4f", len(rows), report.dsr)
    return report
