"""Client for external score evaluators over a child-process pipe.

The evaluator is any program speaking the newline-delimited JSON protocol:
requests carry an op name ("hello", "score", "potential", "hvp", "denoise"),
the raster shape, and base64-encoded little-endian float32 payloads;
responses answer {"ok": true, ...} with a payload or value, or
{"ok": false, "error": ...}.  The first exchange must be the hello
handshake, which reports the evaluator's capabilities.
"""

from __future__ import annotations

import base64
import json
import subprocess
import threading

import numpy as np

from .grids import ImageGrid
from .priors import DiffusionSchedule, DEFAULT_SCHEDULE, PriorModel

WIRE_DTYPE = "<f4"


class TransportError(RuntimeError):
    """The external evaluator failed, died, or answered with an error."""


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=WIRE_DTYPE).tobytes()).decode("ascii")


def decode_array(payload: str, shape) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise TransportError(f"payload size {len(raw)} does not match shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=WIRE_DTYPE).astype(np.float64).reshape(shape)


class ExternalEvaluator:
    """Low-level line client: spawns the process and runs the handshake."""

    def __init__(self, command: list[str]):
        self.command = list(command)
        try:
            self.process = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot start evaluator {self.command}: {exc}") from exc
        self._lock = threading.Lock()
        reply = self.request({"op": "hello"})
        self.caps = tuple(reply.get("caps", ()))

    def request(self, message: dict) -> dict:
        with self._lock:
            if self.process.poll() is not None:
                raise TransportError("evaluator process has exited")
            try:
                self.process.stdin.write(json.dumps(message) + "\n")
                self.process.stdin.flush()
                line = self.process.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise TransportError(f"evaluator pipe failure: {exc}") from exc
        if not line:
            raise TransportError("evaluator closed the stream")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TransportError(f"malformed evaluator reply: {line!r}") from exc
        if not reply.get("ok", False):
            raise TransportError(f"evaluator error: {reply.get('error', 'unknown')}")
        return reply

    def close(self):
        if self.process.poll() is None:
            try:
                self.process.stdin.close()
            except OSError:
                pass
            self.process.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


class ExternalPrior(PriorModel):
    """PriorModel backed by an external evaluator process.

    Capabilities are taken from the handshake; a missing "potential" cap
    makes ``has_exact_potential`` false so landscape probes fall back to the
    flow-likelihood evaluation.  One request is in flight at a time per
    process; concurrent callers should hold separate instances.
    """

    def __init__(self, command: list[str], sched: DiffusionSchedule = DEFAULT_SCHEDULE):
        super().__init__(sched)
        self.evaluator = ExternalEvaluator(command)
        caps = self.evaluator.caps
        self.has_exact_potential = "potential" in caps
        self.has_hvp = "hvp" in caps
        self.has_exact_divergence = False

    def _payload_request(self, op: str, x: np.ndarray, t: float | None, v: np.ndarray | None = None) -> dict:
        msg = {
            "op": op,
            "t": self._time(t),
            "shape": list(x.shape),
            "x": encode_array(x),
        }
        if v is not None:
            msg["v"] = encode_array(v)
        return self.evaluator.request(msg)

    def score_array(self, x, t=None):
        x = np.asarray(x, dtype=np.float64)
        reply = self._payload_request("score", x, t)
        return decode_array(reply["y"], x.shape)

    def potential_array(self, x):
        if not self.has_exact_potential:
            raise NotImplementedError("evaluator does not serve potentials")
        x = np.asarray(x, dtype=np.float64)
        reply = self._payload_request("potential", x, None)
        return float(reply["val"])

    def hvp_array(self, x, v):
        if not self.has_hvp:
            raise NotImplementedError("evaluator does not serve Hessian-vector products")
        x = np.asarray(x, dtype=np.float64)
        reply = self._payload_request("hvp", x, None, np.asarray(v, dtype=np.float64))
        return decode_array(reply["y"], x.shape)

    def denoise(self, x: ImageGrid, noise_variance: float) -> ImageGrid:
        if "denoise" not in self.evaluator.caps:
            raise NotImplementedError("evaluator does not serve denoising")
        msg = {
            "op": "denoise",
            "gamma": float(noise_variance),
            "shape": list(x.shape),
            "x": encode_array(x.data),
        }
        reply = self.evaluator.request(msg)
        return ImageGrid(decode_array(reply["y"], x.shape))

    def close(self):
        self.evaluator.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def external_denoiser(command: list[str], noise_variance: float = 1e-2):
    """Image map backed by an external evaluator's denoise op."""
    prior = ExternalPrior(command)
    if "denoise" not in prior.evaluator.caps:
        prior.close()
        raise TransportError("evaluator lacks the denoise capability")

    def denoise(x: ImageGrid) -> ImageGrid:
        return prior.denoise(x, noise_variance)

    denoise.close = prior.close
    return denoise
