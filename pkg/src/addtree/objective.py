"""Black-box objectives that live in a separate process.

The process reads one JSON request per line on stdin and answers with one
JSON line on stdout::

    -> {"path": ["0", "0"], "params": {"r8": 0.0, "x4": 0.0}}
    <- {"y": 0.1}

``path`` lists the edge labels from the root to the leaf, ``params`` the
named continuous values on that path. Requests are strictly sequential.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading

from .space import StructuredPoint, TreeSpec

__all__ = [
    "ObjectiveError",
    "ObjectiveTimeout",
    "MalformedResponse",
    "ObjectiveProcessError",
    "ExternalObjective",
    "encode_request",
]

logger = logging.getLogger(__name__)


class ObjectiveError(RuntimeError):
    """Base class for failures of an external objective."""

    def __init__(self, message, payload=None):
        super().__init__(message if payload is None else f"{message} (request: {payload})")
        self.payload = payload


class ObjectiveTimeout(ObjectiveError):
    pass


class MalformedResponse(ObjectiveError):
    pass


class ObjectiveProcessError(ObjectiveError):
    pass


def encode_request(spec: TreeSpec, point: StructuredPoint) -> str:
    i = spec.path_index(point)
    return json.dumps({"path": list(spec.path_labels(i)), "params": spec.to_params(point)},
                      sort_keys=True)


def _pump(stream, q):
    for line in iter(stream.readline, ""):
        q.put(line)
    q.put(None)


class ExternalObjective:
    """Callable wrapper around a persistent objective subprocess.

    The process is started on first use and reused for later calls. Copies
    made by pickling (for example by parallel workers) start their own
    process.

    Parameters
    ----------
    command : str or list of str
        Command line; a string is split with :func:`shlex.split`.
    spec : TreeSpec
    timeout : float
        Seconds to wait for each response.
    """

    def __init__(self, command, spec: TreeSpec, timeout: float = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty objective command")
        self.spec = spec
        self.timeout = float(timeout)
        self._proc = None
        self._lines = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_proc"] = None
        state["_lines"] = None
        return state

    def _start(self):
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self._lines = queue.Queue()
        threading.Thread(target=_pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    def __call__(self, point: StructuredPoint) -> float:
        if self._proc is None or self._proc.poll() is not None:
            if self._proc is not None:
                code = self._proc.returncode
                self._proc = None
                raise ObjectiveProcessError(f"objective process exited with status {code}")
            self._start()
        request = encode_request(self.spec, point)
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            code = self._proc.poll()
            self.close()
            raise ObjectiveProcessError(f"cannot write to objective (status {code}): {exc}",
                                        request) from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise ObjectiveTimeout(f"no response within {self.timeout:g} s", request) from None
        if line is None:
            code = self._proc.wait()
            self._proc = None
            raise ObjectiveProcessError(f"objective process exited with status {code}", request)
        return _parse_response(line, request)

    def close(self):
        if self._proc is not None:
            if self._proc.poll() is None:
                try:
                    self._proc.stdin.close()
                    self._proc.wait(timeout=1.0)
                except (OSError, subprocess.TimeoutExpired):
                    self._proc.kill()
                    self._proc.wait()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def _parse_response(line: str, request: str) -> float:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        raise MalformedResponse(f"response is not JSON: {line.strip()!r}", request) from None
    if not isinstance(msg, dict) or "y" not in msg:
        raise MalformedResponse(f"response lacks a 'y' field: {line.strip()!r}", request)
    y = msg["y"]
    if isinstance(y, bool) or not isinstance(y, (int, float)) or not math.isfinite(y):
        raise MalformedResponse(f"'y' is not a finite number: {y!r}", request)
    return float(y)
