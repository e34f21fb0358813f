"""Central node / worker runtime for the ``parallel`` schedule over TCP.

Wire format: every frame is a 4-byte little-endian unsigned length followed
by a UTF-8 JSON object ``{"tag", "version", "body"}``.  Arrays travel as
``{"shape", "dtype", "data"}``; floats use Python's shortest round-trip repr,
so every binary64 value survives exactly.

Per pass the central node sends each worker only the blocks its
observations touch together with the Schur-complement statistics
(``T``, ``dt1``, ``d2``).  Workers refine their likelihood sites against
that snapshot and send back summed block changes.  Priors never leave the
central node.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from .ep import EPConfig, EPState, Posterior, model_code
from .model import Dataset, ModelSpec
from .quadrature import gauss_hermite
from .sparse import SparseGlobal

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 30
_LEN = struct.Struct("<I")


class ProtocolError(RuntimeError):
    """Malformed frame, unexpected message, version or pass mismatch."""


# ---------------------------------------------------------------------------
# messages


@dataclass
class Hello:
    version: int = PROTOCOL_VERSION
    worker_id: int = -1


@dataclass
class AssignShard:
    worker_id: int
    likelihood: str
    indices: np.ndarray
    y: np.ndarray
    extra: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group: np.ndarray
    n_groups: int
    H: int
    config: dict


@dataclass
class GlobalBroadcast:
    pass_no: int
    groups: np.ndarray
    B11: np.ndarray
    B12: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    T: np.ndarray
    dt1: np.ndarray
    sigma_Psi: np.ndarray
    sigma_nu: float


@dataclass
class SiteDeltas:
    pass_no: int
    worker_id: int
    groups: np.ndarray
    dB11: np.ndarray
    dB12: np.ndarray
    dB22: np.ndarray
    dd1: np.ndarray
    dd2: np.ndarray
    skips: np.ndarray
    max_change_r: float
    max_change_Q: float


@dataclass
class Converged:
    summary: dict = field(default_factory=dict)


@dataclass
class Shutdown:
    pass


@dataclass
class Error:
    message: str


MESSAGES = {cls.__name__: cls for cls in (Hello, AssignShard, GlobalBroadcast, SiteDeltas, Converged, Shutdown, Error)}


def _to_jsonable(v):
    if isinstance(v, np.ndarray):
        kind = "int64" if v.dtype.kind in "iu" else "float64"
        flat = v.ravel().tolist() if kind == "int64" else [float(x) for x in v.ravel()]
        return {"__array__": True, "shape": list(v.shape), "dtype": kind, "data": flat}
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


def _from_jsonable(v):
    if isinstance(v, dict):
        if v.get("__array__"):
            try:
                dtype = np.int64 if v["dtype"] == "int64" else np.float64
                return np.asarray(v["data"], dtype=dtype).reshape(v["shape"])
            except (KeyError, ValueError, TypeError) as e:
                raise ProtocolError(f"bad array payload: {e}") from None
        return {k: _from_jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_from_jsonable(x) for x in v]
    return v


def encode(msg) -> bytes:
    """Frame a message: length prefix plus JSON payload."""
    tag = type(msg).__name__
    if tag not in MESSAGES:
        raise ProtocolError(f"cannot encode {tag}")
    body = {f.name: _to_jsonable(getattr(msg, f.name)) for f in fields(msg)}
    payload = json.dumps({"tag": tag, "version": PROTOCOL_VERSION, "body": body},
                         separators=(",", ":"), allow_nan=True).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise ProtocolError("message too large")
    return _LEN.pack(len(payload)) + payload


def decode_payload(payload: bytes):
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed payload: {e}") from None
    if not isinstance(obj, dict) or "tag" not in obj or "body" not in obj:
        raise ProtocolError("payload is not a tagged message")
    if obj.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: got {obj.get('version')}, expected {PROTOCOL_VERSION}")
    cls = MESSAGES.get(obj["tag"])
    if cls is None:
        raise ProtocolError(f"unknown message tag {obj['tag']!r}")
    body = _from_jsonable(obj["body"])
    try:
        return cls(**body)
    except TypeError as e:
        raise ProtocolError(f"bad fields for {obj['tag']}: {e}") from None


def decode(frame: bytes):
    """Inverse of :func:`encode` for one complete frame."""
    if len(frame) < _LEN.size:
        raise ProtocolError("truncated frame header")
    (n,) = _LEN.unpack_from(frame)
    if n == 0:
        raise ProtocolError("zero-length frame")
    if len(frame) - _LEN.size != n:
        raise ProtocolError(f"frame length {n} does not match payload of {len(frame) - _LEN.size} bytes")
    return decode_payload(frame[_LEN.size:])


class Channel:
    """Framed message stream over a connected socket; counts bytes."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sent = 0
        self.received = 0

    def send(self, msg):
        data = encode(msg)
        self.sock.sendall(data)
        self.sent += len(data)
        return len(data)

    def _recv_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise ConnectionError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def recv(self):
        (n,) = _LEN.unpack(self._recv_exact(_LEN.size))
        if n == 0:
            raise ProtocolError("zero-length frame")
        if n > MAX_FRAME:
            raise ProtocolError(f"frame of {n} bytes exceeds limit")
        payload = self._recv_exact(n)
        self.received += _LEN.size + n
        return decode_payload(payload)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(addr):
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {addr!r}")
    return host, int(port)


def shard_indices(N: int, n_workers: int):
    """Contiguous partition of ``0..N-1`` into ``n_workers`` shards (some may be empty)."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    return np.array_split(np.arange(N, dtype=np.int64), n_workers)


# ---------------------------------------------------------------------------
# worker


def _local_global(msg: GlobalBroadcast) -> SparseGlobal:
    """A partial global holding only the worker's blocks plus shared statistics."""
    from scipy.linalg import cho_solve

    from .expfam import chol

    g = SparseGlobal.__new__(SparseGlobal)
    g.B11 = np.ascontiguousarray(msg.B11, dtype=float)
    g.B12 = np.ascontiguousarray(msg.B12, dtype=float)
    g.d1 = np.ascontiguousarray(msg.d1, dtype=float)
    g.d2 = np.ascontiguousarray(msg.d2, dtype=float)
    g.T = np.ascontiguousarray(msg.T, dtype=float)
    g.dt1 = np.ascontiguousarray(msg.dt1, dtype=float)
    g.L, g.Q = g.B11.shape[0], g.B11.shape[1]
    g.K = g.T.shape[0]
    Bt = np.empty_like(g.B12)
    for l in range(g.L):
        Bt[l] = cho_solve((chol(g.B11[l]), True), g.B12[l])
    g.Bt12 = Bt
    g.rollbacks = 0
    return g


class Worker:
    def __init__(self, shard: AssignShard, backend=None):
        self.id = shard.worker_id
        self.kern = kernels.get(backend)
        cfg = EPConfig(**shard.config)
        self.damping = cfg.damping
        self.rule = gauss_hermite(cfg.quad_order)
        self.model = model_code(shard.likelihood)
        self.y = np.ascontiguousarray(shard.y, dtype=float)
        self.extra = np.ascontiguousarray(shard.extra, dtype=float)
        n, m = self.y.size, 1 + shard.H
        self.X = np.ascontiguousarray(np.asarray(shard.X, dtype=float).reshape(n, -1) if n else shard.X, dtype=float)
        self.Z = np.ascontiguousarray(np.asarray(shard.Z, dtype=float).reshape(n, -1) if n else shard.Z, dtype=float)
        group = np.asarray(shard.group, dtype=np.int64)
        self.groups, local = np.unique(group, return_inverse=True)
        self.local_group = np.ascontiguousarray(local, dtype=np.int64)
        self.like_r = np.zeros((n, m))
        self.like_Q = np.tile(np.eye(m), (n, 1, 1))
        self.last_pass = 0

    def step(self, msg: GlobalBroadcast) -> SiteDeltas:
        if msg.pass_no <= self.last_pass:
            raise ProtocolError(f"pass number {msg.pass_no} not increasing (last {self.last_pass})")
        if not np.array_equal(np.asarray(msg.groups), self.groups):
            raise ProtocolError("broadcast blocks do not match the shard")
        self.last_pass = msg.pass_no
        g = _local_global(msg)
        k, Q, K = g.L, g.Q, g.K
        dB11, dB12, dB22 = np.zeros((k, Q, Q)), np.zeros((k, Q, K)), np.zeros((K, K))
        dd1, dd2 = np.zeros((k, Q)), np.zeros(K)
        n = self.y.size
        cr, cQ = np.zeros(n), np.zeros(n)
        idx = np.arange(n, dtype=np.int64)
        skips = self.kern.like_deltas_parallel(
            g, self.like_r, self.like_Q, self.y, self.extra, self.X, self.Z, self.local_group, idx,
            self.model, self.rule, self.damping, dB11, dB12, dB22, dd1, dd2, cr, cQ)
        return SiteDeltas(msg.pass_no, self.id, self.groups.copy(), dB11, dB12, dB22, dd1, dd2,
                          np.asarray(skips, dtype=np.int64), float(cr.max(initial=0.0)), float(cQ.max(initial=0.0)))


def run_worker(address, backend=None, connect_timeout: float = 30.0):
    """Connect to the central node and serve until ``Shutdown``.

    Returns the final summary carried by ``Converged`` (or ``None``).
    """
    host, port = parse_address(address)
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port))
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    ch = Channel(sock)
    worker = None
    summary = None
    try:
        ch.send(Hello())
        while True:
            try:
                msg = ch.recv()
            except ProtocolError as e:
                ch.send(Error(str(e)))
                raise
            if isinstance(msg, AssignShard):
                worker = Worker(msg, backend)
            elif isinstance(msg, GlobalBroadcast):
                if worker is None:
                    raise ProtocolError("broadcast before shard assignment")
                ch.send(worker.step(msg))
            elif isinstance(msg, Converged):
                summary = msg.summary
            elif isinstance(msg, Shutdown):
                return summary
            elif isinstance(msg, Error):
                raise ProtocolError(f"central node reported: {msg.message}")
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__}")
    finally:
        ch.close()


# ---------------------------------------------------------------------------
# central node


def _dump_state(path, state: EPState, reason: str):
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"reason": reason, "passes": state.passes, "global": json.loads(state.g.to_json()),
                   "sigma_Psi": state.sigma.Psi.tolist(), "sigma_nu": state.sigma.nu}, fh)


def serve_central(address, data: Dataset, spec: ModelSpec, cfg: EPConfig, n_workers: int,
                  on_pass=None, on_listen=None, dump_path=None, accept_timeout: float = 60.0) -> Posterior:
    """Run EP with likelihood sites distributed over ``n_workers`` TCP workers.

    Worker ids follow connection order; block changes are reduced in
    worker-id order, so results do not depend on timing.  ``on_listen`` is
    called with the bound ``(host, port)`` once the socket is listening.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if cfg.schedule != "parallel":
        cfg = EPConfig(**{**cfg.__dict__, "schedule": "parallel"})
    state = EPState(data, spec, cfg)
    host, port = parse_address(address)
    srv = socket.create_server((host, port))
    srv.settimeout(accept_timeout)
    if on_listen is not None:
        on_listen(srv.getsockname()[:2])
    chans = []
    shards = shard_indices(data.N, n_workers)
    try:
        for wid in range(n_workers):
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                raise ProtocolError(f"only {wid} of {n_workers} workers connected") from None
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            ch = Channel(conn)
            chans.append(ch)
            hello = ch.recv()
            if not isinstance(hello, Hello):
                raise ProtocolError(f"expected Hello, got {type(hello).__name__}")
            if hello.version != PROTOCOL_VERSION:
                ch.send(Error("protocol version mismatch"))
                raise ProtocolError(f"worker speaks protocol {hello.version}")
            idx = shards[wid]
            ch.send(AssignShard(
                worker_id=wid, likelihood=data.likelihood.value, indices=idx,
                y=data.y[idx], extra=data.extra[idx], X=data.X[idx], Z=data.Z[idx], group=data.group[idx],
                n_groups=data.L, H=spec.H, config=dict(cfg.__dict__)))
        shard_groups = [np.unique(data.group[idx]) for idx in shards]
        converged = False
        while state.passes < cfg.max_passes and not converged:
            t0 = time.perf_counter()
            pass_no = state.passes + 1
            g = state.g
            g.refresh_aux()
            for ch, grp in zip(chans, shard_groups):
                ch.send(GlobalBroadcast(pass_no, grp, g.B11[grp], g.B12[grp], g.d1[grp], g.d2, g.T, g.dt1,
                                        state.sigma.Psi, float(state.sigma.nu)))
            L, Q, K = g.L, g.Q, g.K
            agg = {"dB11": np.zeros((L, Q, Q)), "dB12": np.zeros((L, Q, K)), "dB22": np.zeros((K, K)),
                   "dd1": np.zeros((L, Q)), "dd2": np.zeros(K)}
            cr = cQ = 0.0
            skips = np.zeros(kernels.N_SKIP, dtype=np.int64)
            for wid, (ch, grp) in enumerate(zip(chans, shard_groups)):
                try:
                    msg = ch.recv()
                except (ConnectionError, OSError) as e:
                    _dump_state(dump_path, state, f"worker {wid} disconnected: {e}")
                    raise ProtocolError(f"worker {wid} disconnected in pass {pass_no}") from e
                if isinstance(msg, Error):
                    raise ProtocolError(f"worker {wid} reported: {msg.message}")
                if not isinstance(msg, SiteDeltas):
                    raise ProtocolError(f"expected SiteDeltas from worker {wid}, got {type(msg).__name__}")
                if msg.pass_no != pass_no or msg.worker_id != wid:
                    raise ProtocolError(f"desynchronised: worker {msg.worker_id} sent pass {msg.pass_no}, expected {wid}/{pass_no}")
                if not np.array_equal(msg.groups, grp):
                    raise ProtocolError(f"worker {wid} sent changes for blocks it does not own")
                agg["dB11"][grp] += msg.dB11
                agg["dB12"][grp] += msg.dB12
                agg["dd1"][grp] += msg.dd1
                agg["dB22"] += msg.dB22
                agg["dd2"] += msg.dd2
                skips += msg.skips
                cr, cQ = max(cr, msg.max_change_r), max(cQ, msg.max_change_Q)
            state.apply_like_deltas(agg)
            state.skips_like += skips
            converged = state.finish_pass((cr, cQ), t0)
            if on_pass is not None:
                on_pass(state)
        post = state.posterior(converged)
        labels, mean, sd = post.summary()
        summary = {"passes": post.passes, "converged": bool(converged), "labels": labels,
                   "mean": mean, "sd": sd}
        for ch in chans:
            ch.send(Converged(summary))
            ch.send(Shutdown())
        post.sites.like_r[:] = np.nan
        post.sites.like_Q[:] = np.nan
        post.bytes = {"sent": sum(c.sent for c in chans), "received": sum(c.received for c in chans)}
        return post
    except Exception as e:
        for ch in chans:
            try:
                ch.send(Error(str(e)))
            except OSError:
                pass
        raise
    finally:
        for ch in chans:
            ch.close()
        srv.close()
