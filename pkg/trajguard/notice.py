"""Failure records.

Wrapper classes for converting exceptions raised inside a pipeline stage
into JSON-able records written next to the outputs they replace.
"""

import sys
import traceback

from trajguard.__about__ import __generator__
from trajguard import utils


class ErrorLevels(object):  # pylint: disable=too-few-public-methods,no-init
    """Convenience error levels."""

    DEBUG = "debug"
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"

    DEFAULT_LEVEL = ERROR


class Failure(object):  # pylint: disable=too-few-public-methods
    """Format an exception as a failure record.

    :param exc_info: a sys.exc_info() tuple, an exception instance or None
        to read the exception currently being handled.
    :param message: overrides the message taken from the traceback.
    :param stage: pipeline stage that failed (protect, evaluate, ...).
    :param context: extra keys merged into the record context.
    :param severity: one of ErrorLevels.
    """

    # pylint: disable=too-many-arguments

    def __init__(self, exc_info=None, message=None, stage=None,
                 context=None, severity=None):
        """Failure record constructor."""
        if isinstance(exc_info, BaseException):
            exc_info = (type(exc_info), exc_info, exc_info.__traceback__)
        elif exc_info is None:
            exc_info = sys.exc_info()

        if not utils.is_exc_info_tuple(exc_info):
            raise TypeError(
                "Failure received unsupported 'exc_info' type. Should be an "
                "exception or a 3-piece tuple as returned by sys.exc_info(). "
                "Invalid argument was %s" % str(exc_info))
        self.exc_info = exc_info

        self.data = {
            'type': 'Record',
            'backtrace': [],
            'message': message or 'N/A',
        }
        if all(exc_info):
            errmessage = utils.pytb_lastline(exc_info[1])
            if message and errmessage and message != errmessage:
                message = "%s | %s" % (message, errmessage)
            self.data.update({
                'type': exc_info[1].__class__.__name__,
                'backtrace': format_backtrace(exc_info[2]),
                'message': message or errmessage,
            })
            for attr in ('missing', 'probe'):
                value = getattr(exc_info[1], attr, None)
                if value:
                    self.data[attr] = value

        self.context = dict(context or {})
        self.context['stage'] = stage
        self.context['severity'] = severity or ErrorLevels.DEFAULT_LEVEL
        self.context['generator'] = __generator__

    @property
    def payload(self):
        """Create a dict of all non-empty data in this record."""
        return utils.non_empty_keys({'error': self.data,
                                     'context': self.context})

    def dumps(self):
        """Return the record as indented canonical JSON text."""
        return utils.canonical_json(self.payload, indent=2) + '\n'

    def write(self, path):
        """Atomically write the record to path."""
        utils.atomic_write(path, self.dumps())
        return path


def format_backtrace(trace):
    """Create a list of file/line/function dicts from a traceback object."""
    backtrace = []
    for filename, line, func, _ in traceback.extract_tb(trace):
        backtrace.append({'file': filename,
                          'line': line,
                          'function': func})
    return backtrace
