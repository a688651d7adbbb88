"""Two-stage personalized federated training and split sampling.

Clients train a secret denoiser on steps ``1..t0``, then release each of their
points at most once as a ``t0``-diffused sample.  The server trains a shared
denoiser on ``1..T`` using only those releases.  Sampling runs the shared
model from ``T`` to 0, hands the result to a client as ``x_{t0}``, and the
client finishes with ``t0`` steps of its own denoiser.
"""

from __future__ import annotations

import hashlib
import logging
import os
import socket
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ._rng import stream
from .denoiser import build_trainable_denoiser, dump_denoiser
from .diffusion import SampleBatch, reverse_chain, sample_ddpm, train_ddpm

logger = logging.getLogger(__name__)

WIRE_MAGIC = b"PFDM"
WIRE_VERSION = 1
_HEADER = struct.Struct("<4sHIIII32sB")


class ProtocolError(RuntimeError):
    """Raised when a message would break the privacy or schedule contract."""


class FederationError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        detail = "; ".join(f"client {cid}: {exc!r}" for cid, exc in failures.items())
        super().__init__(f"{len(failures)} client(s) failed, server not started: {detail}")


@dataclass
class NoisyDatasetMessage:
    """The only payload a client sends: ``t0``-diffused samples and public labels."""

    client_id: int
    t0: int
    samples: np.ndarray
    labels: Optional[np.ndarray]
    fingerprint: bytes

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError("samples must be (N, flat_dim)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint16)
            if self.labels.shape != (self.samples.shape[0],):
                raise ValueError("need one label per sample")
        if len(self.fingerprint) != 32:
            raise ValueError("schedule fingerprint must be 32 bytes")

    @property
    def count(self):
        return self.samples.shape[0]

    def to_bytes(self) -> bytes:
        n, d = self.samples.shape
        head = _HEADER.pack(
            WIRE_MAGIC, WIRE_VERSION, self.client_id, self.t0, n, d, self.fingerprint,
            1 if self.labels is not None else 0,
        )
        body = self.samples.astype("<f4", copy=False).tobytes()
        if self.labels is not None:
            body += self.labels.astype("<u2", copy=False).tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NoisyDatasetMessage":
        if len(raw) < _HEADER.size:
            raise ProtocolError("truncated message header")
        magic, version, cid, t0, n, d, fp, flag = _HEADER.unpack_from(raw)
        if magic != WIRE_MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {version}")
        expected = _HEADER.size + 4 * n * d + (2 * n if flag else 0)
        if len(raw) != expected:
            raise ProtocolError(f"message length {len(raw)} != declared {expected}")
        pos = _HEADER.size
        samples = np.frombuffer(raw, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
        labels = None
        if flag:
            labels = np.frombuffer(raw, dtype="<u2", count=n, offset=pos + 4 * n * d)
        return cls(cid, t0, samples.astype(np.float32), None if labels is None else labels.copy(), fp)


# -- transports --------------------------------------------------------------


@dataclass
class AuditEntry:
    kind: str
    client_id: int
    n_bytes: int
    sha256: str


class Transport:
    """Client-to-server channel that only accepts :class:`NoisyDatasetMessage`."""

    def __init__(self):
        self.audit_log: List[AuditEntry] = []

    def send(self, message):
        if type(message) is not NoisyDatasetMessage:
            raise ProtocolError(f"refusing to send {type(message).__name__}; only NoisyDatasetMessage may leave a client")
        raw = message.to_bytes()
        self.audit_log.append(
            AuditEntry("NoisyDatasetMessage", message.client_id, len(raw), hashlib.sha256(raw).hexdigest())
        )
        self._deliver(raw)

    def receive_all(self) -> List[NoisyDatasetMessage]:
        return [NoisyDatasetMessage.from_bytes(raw) for raw in self._collect()]

    def _deliver(self, raw):
        raise NotImplementedError

    def _collect(self):
        raise NotImplementedError


class InProcessTransport(Transport):
    def __init__(self):
        super().__init__()
        self._queue = []

    def _deliver(self, raw):
        self._queue.append(raw)

    def _collect(self):
        out, self._queue = self._queue, []
        return out


class FileTransport(Transport):
    """One ``client_<id>.pfdm`` file per message in ``directory``."""

    def __init__(self, directory):
        super().__init__()
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _deliver(self, raw):
        cid = struct.unpack_from("<I", raw, 6)[0]
        path = self.directory / f"client_{cid}.pfdm"
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(raw)
        os.replace(tmp, path)

    def _collect(self):
        return [p.read_bytes() for p in sorted(self.directory.glob("client_*.pfdm"))]


def send_frame(sock: socket.socket, payload: bytes):
    sock.sendall(struct.pack("<Q", len(payload)) + payload)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one u64-length-prefixed frame; ``None`` on clean EOF."""
    head = _recv_exact(sock, 8)
    if head is None:
        return None
    (n,) = struct.unpack("<Q", head)
    payload = _recv_exact(sock, n)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return payload


class SocketTransport(Transport):
    """Sends frames on ``send_sock``; the server side reads from ``recv_sock``."""

    def __init__(self, send_sock=None, recv_sock=None):
        super().__init__()
        self.send_sock = send_sock
        self.recv_sock = recv_sock

    def _deliver(self, raw):
        send_frame(self.send_sock, raw)

    def _collect(self, expected=None):
        frames = []
        while expected is None or len(frames) < expected:
            frame = recv_frame(self.recv_sock)
            if frame is None:
                break
            frames.append(frame)
        return frames

    def receive(self, count):
        return [NoisyDatasetMessage.from_bytes(raw) for raw in self._collect(count)]


# -- actors ------------------------------------------------------------------


@dataclass
class ClientState:
    client_id: int
    data: SampleBatch
    t0: int
    schedule: object
    seed: int = 0
    denoiser: object = field(default=None, repr=False)
    released: set = field(default_factory=set, repr=False)
    training: object = field(default=None, repr=False)


def client_train_local(state: ClientState, config=None, oracle=None, n_labels=None) -> ClientState:
    """Train the secret denoiser on steps ``1..t0`` (or install ``oracle``).

    ``n_labels`` fixes the label vocabulary of a conditional model; it
    defaults to one past the largest label the client holds.
    """
    if len(state.data) == 0:
        raise ValueError("client dataset is empty")
    if oracle is not None:
        return replace(state, denoiser=oracle)
    if config.conditional:
        if state.data.labels is None:
            raise ValueError("conditional training needs labelled client data")
        n_labels = n_labels or int(state.data.labels.max()) + 1
    den = build_trainable_denoiser(config, state.data.shape, state.schedule.T, n_labels,
                                   metadata={"role": "local", "client_id": state.client_id, "t_max": state.t0})
    run = train_ddpm(state.data, state.t0, state.schedule, den, config)
    return replace(state, denoiser=run.denoiser, training=run)


def client_noisify(state: ClientState, n=None, seed=None) -> NoisyDatasetMessage:
    """Release ``n`` distinct, never-released points diffused to ``t0``."""
    total = len(state.data)
    available = np.setdiff1d(np.arange(total), np.fromiter(state.released, dtype=np.int64, count=len(state.released)))
    n = available.size if n is None else int(n)
    if n > available.size:
        raise ProtocolError(
            f"client {state.client_id} asked to release {n} points but only {available.size} were never released"
        )
    rng = stream(state.seed if seed is None else seed, "noisify", state.client_id)
    idx = rng.permutation(available)[:n]
    x0 = state.data.data[idx]
    z = rng.standard_normal(x0.shape)
    ab = float(state.schedule.alpha_bar(state.t0))
    noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z
    state.released.update(int(i) for i in idx)
    labels = None if state.data.labels is None else state.data.labels[idx]
    return NoisyDatasetMessage(state.client_id, state.t0, noisy, labels, state.schedule.fingerprint())


@dataclass
class ServerState:
    schedule: object
    shape: tuple
    messages: Dict[int, NoisyDatasetMessage] = field(default_factory=dict)
    denoiser: object = field(default=None, repr=False)
    training: object = field(default=None, repr=False)

    def receive(self, message: NoisyDatasetMessage):
        if message.fingerprint != self.schedule.fingerprint():
            raise ProtocolError(f"client {message.client_id} used a different noise schedule")
        if message.client_id in self.messages:
            raise ProtocolError(f"client {message.client_id} already sent its dataset")
        self.messages[message.client_id] = message

    def combined(self) -> SampleBatch:
        if not self.messages:
            raise ProtocolError("no client datasets received")
        msgs = [self.messages[k] for k in sorted(self.messages)]
        data = np.concatenate([m.samples for m in msgs]).astype(np.float64)
        have_labels = [m.labels is not None for m in msgs]
        if any(have_labels) and not all(have_labels):
            raise ProtocolError("either all or none of the clients must send labels")
        labels = np.concatenate([m.labels for m in msgs]).astype(np.int64) if all(have_labels) else None
        return SampleBatch(data, self.shape, labels)


def server_train_global(state: ServerState, config=None, oracle=None, n_labels=None) -> ServerState:
    """Train the shared denoiser on ``1..T`` treating the releases as clean data."""
    dataset = state.combined()
    if oracle is not None:
        return replace(state, denoiser=oracle)
    if config.conditional and n_labels is None:
        n_labels = int(dataset.labels.max()) + 1
    den = build_trainable_denoiser(config, state.shape, state.schedule.T, n_labels if config.conditional else None,
                                   metadata={"role": "global", "t_max": state.schedule.T})
    run = train_ddpm(dataset, state.schedule.T, state.schedule, den, config)
    return replace(state, denoiser=run.denoiser, training=run)


def pfdm_sample(global_denoiser, local_denoiser, schedule, t0, count, label=None, seed=0,
                coefficient="sqrt_one_minus_beta", trajectory=None, shape=None) -> SampleBatch:
    """Shared-model sampling from ``T`` followed by ``t0`` personal steps.

    ``trajectory`` (a list) receives ``("global", 0, x)`` for the shared output
    and ``("personal", t, x)`` after every personal step.
    """
    t0 = int(t0)
    if not 0 <= t0 <= schedule.T:
        raise ValueError(f"t0 must lie in [0, {schedule.T}]")
    shape = shape if shape is not None else global_denoiser.input_shape
    x = sample_ddpm(global_denoiser, schedule, schedule.T, count, label, seed=stream(seed, "global"), shape=shape)
    if trajectory is not None:
        trajectory.append(("global", 0, x.data.copy()))
    if t0 == 0:
        return x
    steps = [] if trajectory is not None else None
    x = reverse_chain(x, t0, local_denoiser, schedule, stream(seed, "personal"), coefficient, steps)
    if trajectory is not None:
        trajectory.extend(("personal", t, data) for t, data in steps)
    return x


@dataclass
class FederationResult:
    server: ServerState
    clients: List[ClientState]
    audit_log: List[AuditEntry]

    @property
    def global_denoiser(self):
        return self.server.denoiser

    def local(self, client_id):
        for c in self.clients:
            if c.client_id == client_id:
                return c.denoiser
        raise KeyError(client_id)

    def global_checkpoint(self) -> bytes:
        return dump_denoiser(self.server.denoiser)


def run_federation(clients: List[ClientState], local_config=None, global_config=None, transport=None,
                   n_release=None, local_oracles=None, global_oracle=None, n_labels=None) -> FederationResult:
    """Train locals, release noisy data, train the shared model.

    A failing client does not stop the others, but the server only starts
    once every configured client has delivered.
    """
    if not clients:
        raise ValueError("need at least one client")
    schedules = {c.schedule.fingerprint() for c in clients}
    if len(schedules) != 1:
        raise ProtocolError("clients were configured with different noise schedules")
    transport = transport or InProcessTransport()
    trained, failures = [], {}
    for client in clients:
        try:
            oracle = None if local_oracles is None else local_oracles[client.client_id]
            client = client_train_local(client, local_config, oracle, n_labels)
            n = None if n_release is None else n_release.get(client.client_id)
            transport.send(client_noisify(client, n))
            trained.append(client)
            logger.info("client %s released its noisy dataset", client.client_id)
        except Exception as exc:  # isolate: report every failing client together
            logger.error("client %s failed: %r", client.client_id, exc)
            failures[client.client_id] = exc
    if failures:
        raise FederationError(failures)
    server = ServerState(clients[0].schedule, clients[0].data.shape)
    for message in transport.receive_all():
        server.receive(message)
    missing = {c.client_id for c in clients} - set(server.messages)
    if missing:
        raise ProtocolError(f"cohort incomplete, missing clients {sorted(missing)}")
    server = server_train_global(server, global_config, global_oracle, n_labels)
    return FederationResult(server, trained, list(transport.audit_log))
