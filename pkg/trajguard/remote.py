"""Remote manipulator client module.

Initialize this class to query a manipulation model that runs behind an
HTTP endpoint. The service receives one image and answers with one image:

    request:  {"shape": [C, H, W], "data": [...flattened floats...]}
    response: {"shape": [...], "data": [...flattened floats...]}

Only forward queries are possible, so the client plugs into the black-box
defense through ``as_query_only()``.
"""

import json
import logging
import os

import requests
import torch

from trajguard.__about__ import __generator__
from trajguard import exc as tg_exc
from trajguard import utils
from trajguard.models import DTYPE, QueryOnlyModel

LOG = logging.getLogger(__name__)


class RemoteManipulator(object):
    """Query a manipulation model served over HTTP.

    Usage:

        remote = RemoteManipulator(url="https://example.org/edit")
        result = protect_blackbox(x, remote.as_query_only(max_queries=10000),
                                  denoiser, cfg, sched)

    The endpoint URL, bearer token and timeout fall back to the
    TRAJGUARD_REMOTE_URL, TRAJGUARD_REMOTE_TOKEN and TRAJGUARD_REMOTE_TIMEOUT
    environment variables. TLS verification takes ``verify`` or the
    TRAJGUARD_CA_BUNDLE variable.
    """

    REMOTE_TIMEOUT_DEFAULT = 30

    def __init__(self, url=None, token=None, timeout=None, name=None,
                 **config):
        """Client constructor."""
        if not url:
            url = os.getenv('TRAJGUARD_REMOTE_URL', '')
        self.url = str(url)
        if not self.url:
            raise tg_exc.ConfigError(
                "Remote manipulator URL (url) must be set. It may be set "
                "using the environment variable TRAJGUARD_REMOTE_URL or by "
                "passing in the argument explicitly.")

        if not token:
            token = os.getenv('TRAJGUARD_REMOTE_TOKEN', '')
        self.token = str(token)

        if not timeout:
            timeout = os.getenv('TRAJGUARD_REMOTE_TIMEOUT')
        try:
            self.timeout = float(timeout or self.REMOTE_TIMEOUT_DEFAULT)
        except ValueError:
            raise tg_exc.ConfigError("remote timeout must be a number, got %r"
                                     % (timeout,))
        self.name = name or 'remote'

        self._session = requests.Session()
        if "verify" in config:
            self._session.verify = config["verify"]
        elif "TRAJGUARD_CA_BUNDLE" in os.environ:
            self._session.verify = os.environ["TRAJGUARD_CA_BUNDLE"]

    def __repr__(self):
        """Return value for the repr function."""
        return "RemoteManipulator(url=%s, token=*****, timeout=%s)" % (
            self.url, self.timeout)

    @property
    def headers(self):
        """Request headers, with the bearer token when one is set."""
        headers = {'Content-Type': 'application/json',
                   'User-Agent': '%s/%s' % (__generator__['name'],
                                            __generator__['version'])}
        if self.token:
            headers['Authorization'] = 'Bearer %s' % self.token
        return headers

    def forward(self, x):
        """Post one (C, H, W) image and return the manipulated image."""
        payload = {'shape': list(x.shape),
                   'data': x.detach().reshape(-1).tolist()}
        try:
            response = self._session.post(
                self.url,
                data=json.dumps(payload, cls=utils.FailProofJSONEncoder,
                                sort_keys=True),
                headers=self.headers,
                timeout=self.timeout)
            response.raise_for_status()
            body = response.json()
        except (requests.RequestException, ValueError) as err:
            raise tg_exc.ModelError("%s query failed: %s" % (self.name, err))
        return decode_tensor(body, self.name)

    __call__ = forward

    def describe(self):
        """Return a JSON-able summary; the token is never included."""
        return {'name': self.name, 'url': self.url, 'remote': True}

    def as_query_only(self, max_queries=None):
        """Return a counted QueryOnlyModel issuing this client's queries."""
        return QueryOnlyModel(self.forward, name=self.name,
                              max_queries=max_queries)


def decode_tensor(body, name='remote'):
    """Turn a ``{"shape", "data"}`` response body into a float64 tensor."""
    try:
        shape = [int(side) for side in body['shape']]
        data = torch.tensor(body['data'], dtype=DTYPE)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError, RuntimeError) as err:
        raise tg_exc.ModelError("%s returned a malformed body: %s"
                                % (name, err))
