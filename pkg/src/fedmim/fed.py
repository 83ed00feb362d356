"""Round-based federated masked-image pretraining.

The server only ever sees :class:`ClientUpdate` messages, which carry a
client id, the round number, encoder/decoder weights and an unlabeled
sample count. Labels, task kinds, dataset names and file paths live in the
client's :class:`~fedmim.data.DatasetManifest` and have no route into the
message codec.

Wire format (little-endian)::

    magic "FMIM" | version u16 | kind u8 (1 broadcast, 2 update) | round u32
    | client_id i32 (-1 = SERVER) | n_k u64 | payload_len u64
    | payload (checkpoint container, see fedmim.checkpoint) | crc32 u32
"""

from __future__ import annotations

import csv
import io
import logging
import math
import socket
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedmim import checkpoint, kernels, optim, vit
from fedmim import tensor as T
from fedmim.data import DatasetManifest, merge

log = logging.getLogger(__name__)

MSG_MAGIC = b"FMIM"
MSG_VERSION = 1
BROADCAST, UPDATE = 1, 2
SERVER_ID = -1
_MSG_HEADER = struct.Struct("<4sHBIiQQ")
WEIGHTINGS = ("sample-count", "uniform")
ENC_PREFIX, DEC_PREFIX = "encoder.", "decoder."


class FederationError(RuntimeError):
    pass


class SchemaMismatch(FederationError):
    pass


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_rounds: int = 5
    local_steps: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    weighting: str = "sample-count"
    participation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.participation != "full":
            raise ValueError("only full participation is supported")


# ---------------------------------------------------------------------------
# messages


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    weights: dict  # "encoder.*" / "decoder.*" -> float32 array
    n_k: int


def _frame(kind: int, rnd: int, client_id: int, n_k: int, weights: dict) -> bytes:
    payload = checkpoint.encode(weights)
    body = _MSG_HEADER.pack(MSG_MAGIC, MSG_VERSION, kind, rnd, client_id, n_k, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _unframe(blob: bytes, expect_kind: int):
    if len(blob) < _MSG_HEADER.size + 4:
        raise CodecError("message truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CodecError("message CRC mismatch")
    magic, version, kind, rnd, cid, n_k, plen = _MSG_HEADER.unpack_from(body)
    if magic != MSG_MAGIC or version != MSG_VERSION:
        raise CodecError(f"bad message magic/version {magic!r}/{version}")
    if kind != expect_kind:
        raise CodecError(f"expected message kind {expect_kind}, got {kind}")
    payload = body[_MSG_HEADER.size:]
    if len(payload) != plen:
        raise CodecError("payload length mismatch")
    _, weights = checkpoint.decode(payload)
    return rnd, cid, n_k, weights


def encode_update(update: ClientUpdate) -> bytes:
    return _frame(UPDATE, update.round, update.client_id, update.n_k, update.weights)


def decode_update(blob: bytes) -> ClientUpdate:
    rnd, cid, n_k, weights = _unframe(blob, UPDATE)
    return ClientUpdate(cid, rnd, weights, n_k)


def encode_broadcast(rnd: int, weights: dict) -> bytes:
    return _frame(BROADCAST, rnd, SERVER_ID, 0, weights)


def decode_broadcast(blob: bytes) -> tuple[int, dict]:
    rnd, _, _, weights = _unframe(blob, BROADCAST)
    return rnd, weights


# ---------------------------------------------------------------------------
# transports


class InProcessTransport:
    """Delivers encoded bytes directly; ``tap`` keeps every server-bound message."""

    def __init__(self, record: bool = False):
        self.record = record
        self.tap: list[bytes] = []

    def to_client(self, client_id: int, blob: bytes) -> bytes:
        return blob

    def to_server(self, client_id: int, blob: bytes) -> bytes:
        if self.record:
            self.tap.append(blob)
        return blob


class LoopbackSocketTransport(InProcessTransport):
    """Pushes every message through a local socket pair as a length-prefixed frame."""

    def _roundtrip(self, blob: bytes) -> bytes:
        a, b = socket.socketpair()
        try:
            sender = threading.Thread(target=a.sendall, args=(struct.pack("<Q", len(blob)) + blob,))
            sender.start()
            size = struct.unpack("<Q", _recv_exact(b, 8))[0]
            out = _recv_exact(b, size)
            sender.join()
            return out
        finally:
            a.close()
            b.close()

    def to_client(self, client_id: int, blob: bytes) -> bytes:
        return self._roundtrip(blob)

    def to_server(self, client_id: int, blob: bytes) -> bytes:
        out = self._roundtrip(blob)
        if self.record:
            self.tap.append(out)
        return out


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(1 << 20, n - len(buf)))
        if not chunk:
            raise CodecError("socket closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


# ---------------------------------------------------------------------------
# state


def split_weights(weights: dict) -> tuple[dict, dict]:
    enc = {k[len(ENC_PREFIX):]: v for k, v in weights.items() if k.startswith(ENC_PREFIX)}
    dec = {k[len(DEC_PREFIX):]: v for k, v in weights.items() if k.startswith(DEC_PREFIX)}
    return enc, dec


def join_weights(enc: dict, dec: dict) -> dict:
    out = {ENC_PREFIX + k: _arr(v) for k, v in enc.items()}
    out.update({DEC_PREFIX + k: _arr(v) for k, v in dec.items()})
    return out


def _arr(v):
    return v.data if isinstance(v, T.Tensor) else v


def client_seed(seed: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, client_id])


@dataclass
class ClientState:
    client_id: int
    manifest: DatasetManifest
    vit_config: vit.ViTConfig
    fed_config: FedConfig
    enc: dict = field(default_factory=dict)
    dec: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    opt: optim.OptimizerState | None = None
    images: np.ndarray | None = None
    _order: np.ndarray | None = None
    _cursor: int = 0
    losses: list = field(default_factory=list)

    @classmethod
    def create(cls, client_id: int, manifest: DatasetManifest, vit_config, fed_config) -> "ClientState":
        train = manifest.subset("train")
        if len(train) == 0:
            raise ValueError(f"client {client_id} has no training images")
        return cls(client_id, manifest, vit_config, fed_config,
                   rng=np.random.default_rng(client_seed(fed_config.seed, client_id)),
                   images=train.images())

    @property
    def num_samples(self) -> int:
        return int(self.images.shape[0])

    def next_batch(self) -> np.ndarray:
        n = self.num_samples
        size = min(self.fed_config.batch_size, n)
        out = []
        while len(out) < size:
            if self._order is None or self._cursor >= n:
                self._order = self.rng.permutation(n)
                self._cursor = 0
            take = min(size - len(out), n - self._cursor)
            out.extend(self._order[self._cursor:self._cursor + take])
            self._cursor += take
        return np.asarray(out)

    def load_global(self, weights: dict) -> None:
        enc, dec = split_weights(weights)
        exp_enc, exp_dec = vit.model_schemas(self.vit_config)
        _check_schema(exp_enc, vit.schema(enc), f"client {self.client_id} encoder")
        _check_schema(exp_dec, vit.schema(dec), f"client {self.client_id} decoder")
        self.enc = vit.to_tensors(enc, requires_grad=True)
        self.dec = vit.to_tensors(dec, requires_grad=True)
        if self.opt is None:
            self.opt = optim.init_optimizer(self.fed_config.optimizer, self.params(), lr=self.fed_config.lr,
                                            weight_decay=self.fed_config.weight_decay,
                                            **({"betas": (0.9, 0.95)} if self.fed_config.optimizer == "adamw"
                                               else {"momentum": 0.9}))

    def params(self) -> dict:
        return {**{ENC_PREFIX + k: v for k, v in self.enc.items()},
                **{DEC_PREFIX + k: v for k, v in self.dec.items()}}

    def train_step(self) -> tuple[float, np.ndarray]:
        idx = self.next_batch()
        images = self.images[idx]
        masks = [vit.sample_mask(self.vit_config.num_patches, self.vit_config.mask_ratio, self.rng)
                 for _ in range(len(idx))]
        params = self.params()
        T.zero_grad(params)
        _, loss = vit.mae_forward(images, self.enc, self.dec, self.vit_config, masks)
        T.backward(loss)
        optim.optimizer_step(self.opt, params)
        return loss.item(), idx


def _check_schema(expected, got, what: str) -> None:
    if list(expected) != list(got):
        exp_names = [n for n, _ in expected]
        got_names = [n for n, _ in got]
        diff = [n for n in exp_names if n not in got_names][:3] or [
            f"{n}: {s} vs {dict(got).get(n)}" for n, s in expected if dict(got).get(n) != s][:3]
        raise SchemaMismatch(f"{what}: parameter schema mismatch ({diff})")


def local_round(client: ClientState, global_weights: dict, rnd: int = 0) -> ClientUpdate:
    """Run ``local_steps`` optimiser steps from the received global weights."""
    client.load_global(global_weights)
    drawn = set()
    losses = []
    for _ in range(client.fed_config.local_steps):
        loss, idx = client.train_step()
        losses.append(loss)
        drawn.update(int(i) for i in idx)
    client.losses.append(float(np.mean(losses)))
    return ClientUpdate(client.client_id, rnd, join_weights(client.enc, client.dec), len(drawn))


def aggregate(updates: list[ClientUpdate], weighting: str = "sample-count") -> dict:
    """Weighted parameter average, summed in ascending client_id order."""
    if not updates:
        raise FederationError("aggregate: no client updates")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"aggregate: unknown weighting {weighting!r}")
    updates = sorted(updates, key=lambda u: u.client_id)
    ref = vit.schema(updates[0].weights)
    for u in updates[1:]:
        _check_schema(ref, vit.schema(u.weights), f"client {u.client_id} update")
    if weighting == "sample-count":
        if any(u.n_k <= 0 for u in updates):
            raise FederationError("aggregate: sample-count weighting needs n_k > 0 for every client")
        total = float(sum(u.n_k for u in updates))
        alphas = np.array([u.n_k / total for u in updates], dtype=np.float32)
    else:
        alphas = np.full(len(updates), 1.0 / len(updates), dtype=np.float32)
    out = {}
    for name, shape in ref:
        arrays = [u.weights[name] for u in updates]
        out[name] = kernels.weighted_sum(arrays, alphas).reshape(shape)
    return out


def weight_norm(weights: dict) -> float:
    return math.sqrt(sum(float(np.dot(a.ravel().astype(np.float64), a.ravel().astype(np.float64)))
                         for a in weights.values()))


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RoundLog:
    rows: list = field(default_factory=list)  # (round, client_id, mean_loss, n_k, global_weight_norm)
    alphas: list = field(default_factory=list)  # per round: {client_id: alpha}

    COLUMNS = ("round", "client_id", "mean_loss", "n_k", "global_weight_norm")

    def mean_loss(self, rnd: int) -> float:
        vals = [r[2] for r in self.rows if r[0] == rnd]
        return float(np.mean(vals))

    @property
    def rounds(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for rnd, cid, loss, n_k, norm in self.rows:
            w.writerow([rnd, cid, f"{loss:.8f}", n_k, f"{norm:.8f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class ServerState:
    weights: dict
    round: int = 0
    log: RoundLog = field(default_factory=RoundLog)

    @classmethod
    def initialize(cls, vit_config: vit.ViTConfig, seed: int) -> "ServerState":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        enc = vit.init_encoder(vit_config, rng)
        dec = vit.init_decoder(vit_config, rng)
        return cls(join_weights(enc, dec))

    @property
    def encoder(self) -> dict:
        return split_weights(self.weights)[0]


def encoder_checkpoint_config(vit_config: vit.ViTConfig) -> dict:
    return {"part": "encoder", "vit": vit_config.to_dict()}


def run_pretraining(clients: list[ClientState], server: ServerState, fed_config: FedConfig,
                    transport: InProcessTransport | None = None, jobs: int = 1,
                    checkpoint_path=None) -> tuple[dict, RoundLog]:
    """Synchronous FedAvg: broadcast, local rounds on every client, aggregate.

    Returns the final global encoder and the round log; writes the encoder
    checkpoint when ``checkpoint_path`` is given. Any client failure aborts.
    """
    if not clients:
        raise FederationError("run_pretraining needs at least one client")
    transport = transport or InProcessTransport()
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise FederationError("duplicate client ids")
    ref_schema = vit.schema(server.weights)

    def run_client(client: ClientState, blob: bytes, rnd: int) -> bytes:
        rnd_seen, weights = decode_broadcast(transport.to_client(client.client_id, blob))
        try:
            update = local_round(client, weights, rnd_seen)
        except Exception as exc:
            raise FederationError(f"client {client.client_id} failed in round {rnd}: {exc}") from exc
        return transport.to_server(client.client_id, encode_update(update))

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for rnd in range(1, fed_config.num_rounds + 1):
            blob = encode_broadcast(rnd, server.weights)
            if pool is None:
                replies = [run_client(c, blob, rnd) for c in clients]
            else:
                replies = list(pool.map(lambda c: run_client(c, blob, rnd), clients))
            updates = sorted((decode_update(r) for r in replies), key=lambda u: u.client_id)
            new_weights = aggregate(updates, fed_config.weighting)
            _check_schema(ref_schema, vit.schema(new_weights), "global model")
            server.weights = new_weights
            server.round = rnd
            norm = weight_norm(new_weights)
            total = sum(u.n_k for u in updates)
            server.log.alphas.append({u.client_id: (u.n_k / total if fed_config.weighting == "sample-count"
                                                    else 1.0 / len(updates)) for u in updates})
            by_id = {c.client_id: c for c in clients}
            for u in updates:
                # loss comes from the client's local telemetry, never from the wire message
                server.log.rows.append((rnd, u.client_id, by_id[u.client_id].losses[-1], u.n_k, norm))
            log.info("round %d: mean loss %.5f, |w| %.4f", rnd, server.log.mean_loss(rnd), norm)
    finally:
        if pool is not None:
            pool.shutdown()
    enc = server.encoder
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, enc, encoder_checkpoint_config(clients[0].vit_config))
    return enc, server.log


def run_centralized(manifests: list[DatasetManifest], vit_config: vit.ViTConfig, fed_config: FedConfig,
                    checkpoint_path=None) -> tuple[dict, RoundLog]:
    """Train one model on the pooled shards for ``num_rounds * local_steps`` steps.

    Uses the same client machinery with no aggregation, so a one-client
    federation reproduces it bitwise.
    """
    pooled = merge(manifests, owner=0)
    server = ServerState.initialize(vit_config, fed_config.seed)
    client = ClientState.create(0, pooled, vit_config, fed_config)
    client.load_global(server.weights)
    log_ = RoundLog()
    drawn: set = set()
    for rnd in range(1, fed_config.num_rounds + 1):
        losses = []
        drawn.clear()
        for _ in range(fed_config.local_steps):
            loss, idx = client.train_step()
            losses.append(loss)
            drawn.update(int(i) for i in idx)
        weights = join_weights(client.enc, client.dec)
        log_.rows.append((rnd, 0, float(np.mean(losses)), len(drawn), weight_norm(weights)))
    enc = {k: v.data for k, v in client.enc.items()}
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, enc, encoder_checkpoint_config(vit_config))
    return enc, log_


def build_clients(manifests: list[DatasetManifest], vit_config, fed_config) -> list[ClientState]:
    return [ClientState.create(m.owner if m.owner is not None else i, m, vit_config, fed_config)
            for i, m in enumerate(manifests)]
