"""Util functions/classes for trajguard."""

import hashlib
import json
import math
import os
import subprocess
import tempfile
import traceback

from subprocess import DEVNULL

import numpy as np
import torch


class FailProofJSONEncoder(json.JSONEncoder):
    """Encode tensors, numpy values and anything else without failing."""

    def default(self, o):  # pylint: disable=E0202
        """Return a JSON-able stand-in for unsupported types."""
        if isinstance(o, torch.Tensor):
            return o.detach().cpu().tolist()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        try:
            return repr(o)
        except Exception:  # pylint: disable=W0703
            return super(FailProofJSONEncoder, self).default(o)


def finite_or_str(value):
    """Replace non-finite floats by 'inf', '-inf' or 'nan' strings.

    JSON has no spelling for them; recursing through dicts and lists keeps
    summaries valid JSON.
    """
    if isinstance(value, dict):
        return dict((key, finite_or_str(val)) for key, val in value.items())
    if isinstance(value, (list, tuple)):
        return [finite_or_str(val) for val in value]
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def canonical_json(data, indent=None):
    """Serialize ``data`` deterministically (sorted keys, fixed separators)."""
    separators = (',', ': ') if indent else (',', ':')
    return json.dumps(finite_or_str(data), cls=FailProofJSONEncoder,
                      sort_keys=True, indent=indent, separators=separators)


def config_hash(data):
    """Return the SHA-256 hex digest of the canonical JSON form of data."""
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def derive_seed(seed, *labels):
    """Derive a 31-bit child seed from a parent seed and string labels."""
    text = '/'.join([str(seed)] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode('utf-8')).hexdigest()
    return int(digest[:8], 16) & 0x7fffffff


def atomic_write(path, data):
    """Write bytes or text to path via a temp file and a rename."""
    if isinstance(data, str):
        data = data.encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        os.makedirs(directory)
    handle, tmp_path = tempfile.mkstemp(
        prefix='.%s.' % os.path.basename(path), dir=directory)
    try:
        with os.fdopen(handle, 'wb') as tmp:
            tmp.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def is_exc_info_tuple(exc_info):
    """Determine whether 'exc_info' is an exc_info tuple.

    Note: exc_info tuple means a tuple of exception related values
    as returned by sys.exc_info().
    """
    try:
        errtype, value, tback = exc_info
        if all([x is None for x in exc_info]):
            return True
        elif all((isinstance(errtype, type),
                  isinstance(value, Exception),
                  hasattr(tback, 'tb_frame'),
                  hasattr(tback, 'tb_lineno'),
                  hasattr(tback, 'tb_next'))):
            return True
    except (TypeError, ValueError):
        pass
    return False


def pytb_lastline(excinfo=None):
    """Return the actual last line of the (current) traceback.

    Either an exception instance or a sys.exc_info() tuple may be given;
    with neither, the exception being handled is read.
    """
    lines = None
    if excinfo:
        if isinstance(excinfo, Exception):
            kls = type(excinfo).__name__
            lines = ['%s: %s' % (kls, excinfo)]
        else:
            lines = traceback.format_exception(*excinfo)
            lines = "\n".join(lines).split('\n')
    if not lines:
        lines = traceback.format_exc().split('\n')
    # the traceback module sometimes returns the string 'None'
    lines = [line.strip() for line in lines if line]
    lines = [line for line in lines if str(line).lower() != 'none']
    if lines:
        return lines[-1]
    return None


def non_empty_keys(data):
    """Strip out empty keys from a dict.

    :param dict data: the dict to copy
    :return: a copy without None, 'None' or empty values
    """
    non_empty = {}
    for (key, val) in data.items():
        if isinstance(val, dict):
            nested = non_empty_keys(val)
            if nested:
                non_empty[key] = nested
        elif val is not None and val != 'None' and val != [] and val != '':
            non_empty[key] = val
    return non_empty


def source_revision(root=None):
    """Commit of the checkout holding the package, or None outside git."""
    root = root or package_root()
    return _revision_from_binary(root) or read_head_ref(
        os.path.join(root, '.git'))


def package_root():
    """Directory above the installed package."""
    return os.path.normpath(os.path.join(os.path.dirname(__file__),
                                         os.pardir))


def _revision_from_binary(root):
    try:
        rev = subprocess.check_output(['git', 'rev-parse', 'HEAD'],
                                      stderr=DEVNULL, cwd=root)
    except (OSError, subprocess.CalledProcessError):
        return None
    return rev.decode('utf-8').strip() or None


def read_head_ref(git_dir):
    """Commit named by ``git_dir/HEAD``, following a symbolic ref once."""
    head = _read_stripped(os.path.join(git_dir, 'HEAD'))
    if head is None:
        return None
    if head.startswith('ref:'):
        return _read_stripped(os.path.join(git_dir, head[4:].strip()))
    return head if len(head) == 40 else None


def _read_stripped(path):
    try:
        with open(path) as handle:
            return handle.read().strip() or None
    except (IOError, OSError):
        return None
