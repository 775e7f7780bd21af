"""Adversary-facing query interface over a target GAN.

Every generator invocation is charged to a :class:`QueryLedger`. Defenses
installed on the provider rewrite latent codes before generation (input
defenses) or perturb samples after it (output defenses); the client is
charged for what it asked for either way.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
from dataclasses import dataclass

import numpy as np

from .gan import GanModel, generate_from
from .worlds import Provenance, SampleBatch, as_points

log = logging.getLogger(__name__)


class QuotaError(RuntimeError):
    """The request would push the ledger past its budget."""


class CapabilityError(PermissionError):
    """The adversary lacks the capability an operation requires."""


@dataclass(frozen=True)
class Capability:
    generated_data_only: bool = True
    latent_queries: bool = False
    real_fraction: float = 0.0
    discriminator_access: bool = False

    def __post_init__(self):
        if self.generated_data_only and self.latent_queries:
            raise ValueError("generated-data-only access excludes latent queries")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real-data fraction must lie in [0, 1]")

    @property
    def can_query(self) -> bool:
        return self.generated_data_only or self.latent_queries

    @classmethod
    def black_box(cls) -> "Capability":
        return cls()

    @classmethod
    def partial_black_box(cls, fraction: float) -> "Capability":
        return cls(real_fraction=fraction)

    @classmethod
    def white_box(cls, fraction: float = 0.1) -> "Capability":
        return cls(real_fraction=fraction, discriminator_access=True)

    @classmethod
    def latent(cls, fraction: float = 0.0, discriminator: bool = False) -> "Capability":
        return cls(generated_data_only=False, latent_queries=True, real_fraction=fraction,
                   discriminator_access=discriminator)

    @classmethod
    def from_names(cls, names, fraction: float = 0.0) -> "Capability":
        names = set(names)
        return cls(
            generated_data_only="latent" not in names,
            latent_queries="latent" in names,
            real_fraction=fraction if "real" in names else 0.0,
            discriminator_access="discriminator" in names,
        )


class QueryLedger:
    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 0:
            raise ValueError("budget must be non-negative")
        self.budget = budget
        self.used = 0

    @property
    def remaining(self):
        return None if self.budget is None else self.budget - self.used

    def charge(self, n: int) -> None:
        if n < 0:
            raise ValueError("cannot charge a negative number of queries")
        if self.budget is not None and self.used + n > self.budget:
            raise QuotaError(f"query of {n} exceeds budget ({self.used}/{self.budget} used)")
        self.used += n


class TargetProvider:
    """In-process provider; the canonical implementation of the query API."""

    def __init__(self, target: GanModel, capability: Capability | None = None, budget: int | None = None,
                 corpus: SampleBatch | None = None, defense=None, seed=0):
        self._target = target
        self.capability = capability or Capability()
        self.ledger = QueryLedger(budget)
        self._corpus = corpus
        self.defense = defense
        self._rng = np.random.default_rng([seed, 31])
        self._defense_rng = np.random.default_rng([seed, 37])
        order_rng = np.random.default_rng([seed, 41])
        self._corpus_order = order_rng.permutation(len(corpus)) if corpus is not None else None

    @property
    def latent_dim(self) -> int:
        return self._target.prior.dim

    def _generate(self, codes) -> SampleBatch:
        if self.defense is not None:
            codes = self.defense.perturb_codes(codes, self._defense_rng)
        batch = generate_from(self._target, codes)
        if self.defense is not None:
            batch = self.defense.perturb_samples(batch, self._defense_rng)
        return batch

    def query(self, n: int) -> SampleBatch:
        if not self.capability.can_query:
            raise CapabilityError("no generator query capability")
        if n < 0:
            raise ValueError("n must be non-negative")
        self.ledger.charge(n)
        if n == 0:
            return SampleBatch(np.empty((0, 2)), Provenance.GENERATED)
        return self._generate(self._target.prior.sample(n, self._rng))

    def query_with_codes(self, codes) -> SampleBatch:
        if not self.capability.latent_queries:
            raise CapabilityError("latent-code queries are not permitted")
        codes = np.asarray(codes, dtype=float)
        n = 0 if codes.size == 0 else len(np.atleast_2d(codes))
        self.ledger.charge(n)
        if n == 0:
            return SampleBatch(np.empty((0, 2)), Provenance.GENERATED)
        return self._generate(np.atleast_2d(codes))

    def real_data(self, fraction: float) -> SampleBatch:
        if fraction < 0:
            raise ValueError("fraction must be non-negative")
        if fraction > self.capability.real_fraction + 1e-12 or (fraction > 0 and self._corpus is None):
            raise CapabilityError(f"real-data request of {fraction:.0%} exceeds granted "
                                  f"{self.capability.real_fraction:.0%}")
        if fraction == 0:
            return SampleBatch(np.empty((0, 2)), Provenance.REAL)
        count = int(round(fraction * len(self._corpus)))
        return SampleBatch(self._corpus.points[self._corpus_order[:count]], Provenance.REAL)

    def discriminator_logit(self, x):
        if not self.capability.discriminator_access:
            raise CapabilityError("discriminator access is not permitted")
        x = np.asarray(x, dtype=float)
        logits = self._target.logits(x)
        return float(logits[0]) if x.ndim == 1 else logits


# -- wire protocol ---------------------------------------------------------

def handle_request(provider: TargetProvider, line: str) -> dict:
    """Dispatch one newline-delimited JSON request to ``provider``."""
    try:
        req = json.loads(line)
        op = req["op"]
        if op == "query":
            n = req["n"]
            if not isinstance(n, int) or isinstance(n, bool):
                raise ValueError("n must be an integer")
            return {"ok": True, "samples": provider.query(n).points.tolist()}
        if op == "codes":
            codes = np.asarray(req["codes"], dtype=float)
            if codes.size and (codes.ndim != 2 or codes.shape[1] != provider.latent_dim):
                raise ValueError("codes have the wrong shape")
            return {"ok": True, "samples": provider.query_with_codes(codes).points.tolist()}
        if op == "real":
            return {"ok": True, "samples": provider.real_data(float(req["fraction"])).points.tolist()}
        if op == "dlogit":
            x = np.asarray(req["x"], dtype=float)
            if x.shape[-1] != 2 or x.ndim > 2:
                raise ValueError("x must be a point or a list of points")
            value = provider.discriminator_logit(x)
            return {"ok": True, "logit": value if x.ndim == 1 else value.tolist()}
        raise ValueError(f"unknown op {op!r}")
    except QuotaError:
        return {"ok": False, "error": "quota"}
    except CapabilityError:
        return {"ok": False, "error": "permission"}
    except (ValueError, KeyError, TypeError, AttributeError):
        return {"ok": False, "error": "bad_request"}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            if not raw.strip():
                continue
            try:
                reply = handle_request(self.server.provider, raw.decode("utf-8"))
            except UnicodeDecodeError:
                reply = {"ok": False, "error": "bad_request"}
            self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
            self.wfile.flush()


class ProviderServer(socketserver.TCPServer):
    """Serves one connection at a time; requests are handled sequentially."""

    allow_reuse_address = True

    def __init__(self, provider: TargetProvider, host="127.0.0.1", port=0):
        self.provider = provider
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class RemoteProvider:
    """Client side of the wire protocol, mirroring :class:`TargetProvider`."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._reader = self._sock.makefile("rb")

    def close(self):
        self._reader.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, payload: dict) -> dict:
        self._sock.sendall((json.dumps(payload) + "\n").encode("utf-8"))
        line = self._reader.readline()
        if not line:
            raise ConnectionError("provider closed the connection")
        return json.loads(line.decode("utf-8"))

    def _samples(self, payload):
        reply = self.request(payload)
        if not reply["ok"]:
            err = reply["error"]
            if err == "quota":
                raise QuotaError("remote quota exceeded")
            if err == "permission":
                raise CapabilityError("remote provider refused the request")
            raise ValueError("remote provider rejected the request")
        return reply

    def query(self, n: int) -> SampleBatch:
        pts = self._samples({"op": "query", "n": int(n)})["samples"]
        return SampleBatch(np.asarray(pts, dtype=float).reshape(-1, 2), Provenance.GENERATED)

    def query_with_codes(self, codes) -> SampleBatch:
        codes = np.asarray(codes, dtype=float)
        pts = self._samples({"op": "codes", "codes": codes.tolist()})["samples"]
        return SampleBatch(np.asarray(pts, dtype=float).reshape(-1, 2), Provenance.GENERATED)

    def real_data(self, fraction: float) -> SampleBatch:
        pts = self._samples({"op": "real", "fraction": float(fraction)})["samples"]
        return SampleBatch(np.asarray(pts, dtype=float).reshape(-1, 2), Provenance.REAL)

    def discriminator_logit(self, x):
        x = as_points(x) if np.ndim(x) == 2 else np.asarray(x, dtype=float)
        value = self._samples({"op": "dlogit", "x": x.tolist()})["logit"]
        return np.asarray(value, dtype=float) if x.ndim == 2 else float(value)
