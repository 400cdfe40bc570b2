"""SidecarHandler module.

All functions and types related to python logging should be defined in
this module. Records logged with ``extra={'sidecar': path}`` are written as
failure records next to the output that could not be produced.
"""
import logging

from trajguard.notice import ErrorLevels, Failure

_FAKE_LOGRECORD = logging.LogRecord('', '', '', '', '', '', '', '')


class SidecarHandler(logging.Handler):
    """A handler class which writes failure records to sidecar files.

    Records without a ``sidecar`` attribute are ignored, so the handler can
    sit on any logger next to an ordinary stream handler.
    """

    def __init__(self, level=logging.ERROR, context=None):
        """Initialize the handler with a default logging level of ERROR."""
        logging.Handler.__init__(self, level=level)
        self.context = dict(context or {})
        self.written = []

    def emit(self, record):
        """Write the record to its sidecar path, if it names one."""
        path = getattr(record, 'sidecar', None)
        if not path:
            return
        try:
            failure = failure_from_logrecord(record, self.context)
            failure.write(path)
            self.written.append(path)
        except (KeyboardInterrupt, SystemExit):
            raise
        except:  # pylint: disable=bare-except
            self.handleError(record)


def failure_from_logrecord(record, context=None):
    """Create a Failure from a python LogRecord object.

    Values passed through ``extra`` become context keys; they take precedence
    over the handler-wide context.
    """
    ctx = dict(context or {})
    ctx.update({
        'logger': record.name,
        'levelname': record.levelname,
        'pathname': record.pathname,
        'lineno': record.lineno,
        'funcName': record.funcName,
    })
    for key, val in list(vars(record).items()):
        if not hasattr(_FAKE_LOGRECORD, key) and key not in ('sidecar',
                                                             'stage'):
            ctx[key] = val

    exc_info = record.exc_info
    if not exc_info:
        exc_info = (None, None, None)
    severity = getattr(ErrorLevels, record.levelname, ErrorLevels.ERROR)
    return Failure(exc_info=exc_info, message=record.getMessage(),
                   stage=getattr(record, 'stage', None), context=ctx,
                   severity=severity)
