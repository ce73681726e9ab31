"""Two-party training protocol: key owner (client) and compute server.

Frames are length-prefixed with a CRC over the payload:

    magic "MBT1" | version u8 | msg_type u8 | payload_len u64 LE | payload | crc32 u32 LE

Message types: 1 hello, 2 keys, 3 upload, 4 train, 5 refresh-req,
6 refresh-resp, 7 epoch-report, 8 infer-req, 9 infer-resp, 15 error.

The server never sees secret-key material: it receives public/evaluation/
rotation keys and ciphertext blobs only.  Noise management is interactive:
during training the server sends refresh requests back over the same
connection and blocks until the key owner returns re-encrypted blobs.
Re-encryption randomness is derived from the request content, so identical
sessions (and resumed ones) produce byte-identical transcripts.
"""

import hashlib
import io
import json
import os
import socket
import socketserver
import struct
import threading
import zlib

import numpy as np

from . import linalg, trainer
from .ckks import CkksContext, CkksError
from .linalg import deserialize_packed, serialize_packed
from .trainer import Batch, Hyperparams

FRAME_MAGIC = b"MBT1"
PROTOCOL_VERSION = 1
_FRAME_HEAD = struct.Struct("<4sBBQ")

MSG_HELLO = 1
MSG_KEYS = 2
MSG_UPLOAD = 3
MSG_TRAIN = 4
MSG_REFRESH_REQ = 5
MSG_REFRESH_RESP = 6
MSG_EPOCH = 7
MSG_INFER_REQ = 8
MSG_INFER_RESP = 9
MSG_ERROR = 15

ERR_MALFORMED = 1
ERR_BAD_STATE = 2
ERR_PARAMS_MISMATCH = 3
ERR_CRYPTO = 4
ERR_TOO_LARGE = 5

ROLE_TRAIN = 1
ROLE_VAL = 2
ROLE_TEST = 3

DEFAULT_MAX_FRAME = 1 << 30


class ProtocolError(Exception):
    def __init__(self, code, detail):
        super().__init__(f"[{code}] {detail}")
        self.code = code
        self.detail = detail


class RemoteError(Exception):
    """An ErrorFrame arrived from the peer."""

    def __init__(self, code, detail):
        super().__init__(f"peer error [{code}] {detail}")
        self.code = code
        self.detail = detail


# ----------------------------------------------------------------------
# framing
# ----------------------------------------------------------------------


def write_frame(stream, msg_type: int, payload: bytes):
    head = _FRAME_HEAD.pack(FRAME_MAGIC, PROTOCOL_VERSION, msg_type, len(payload))
    stream.write(head + payload + struct.pack("<I", zlib.crc32(payload)))
    stream.flush()


def read_frame(stream, max_len: int = DEFAULT_MAX_FRAME):
    head = stream.read(_FRAME_HEAD.size)
    if not head:
        raise EOFError("connection closed")
    if len(head) < _FRAME_HEAD.size:
        raise ProtocolError(ERR_MALFORMED, "truncated frame header")
    magic, ver, msg_type, ln = _FRAME_HEAD.unpack(head)
    if magic != FRAME_MAGIC:
        raise ProtocolError(ERR_MALFORMED, "bad frame magic")
    if ver != PROTOCOL_VERSION:
        raise ProtocolError(ERR_MALFORMED, f"unsupported protocol version {ver}")
    if ln > max_len:
        raise ProtocolError(ERR_TOO_LARGE, f"frame of {ln} bytes exceeds cap {max_len}")
    payload = stream.read(ln)
    if len(payload) < ln:
        raise ProtocolError(ERR_MALFORMED, "truncated payload")
    crc_raw = stream.read(4)
    if len(crc_raw) < 4:
        raise ProtocolError(ERR_MALFORMED, "missing crc")
    (crc,) = struct.unpack("<I", crc_raw)
    if crc != zlib.crc32(payload):
        raise ProtocolError(ERR_MALFORMED, "crc mismatch")
    return msg_type, payload


def _lp(blob: bytes) -> bytes:
    return struct.pack("<Q", len(blob)) + blob


def _read_lp(buf: io.BytesIO) -> bytes:
    raw = buf.read(8)
    if len(raw) < 8:
        raise ProtocolError(ERR_MALFORMED, "truncated length prefix")
    (ln,) = struct.unpack("<Q", raw)
    blob = buf.read(ln)
    if len(blob) < ln:
        raise ProtocolError(ERR_MALFORMED, "truncated blob")
    return blob


# ----------------------------------------------------------------------
# message payloads
# ----------------------------------------------------------------------


def encode_hello(params_hash: bytes, profile: str) -> bytes:
    name = profile.encode()
    return params_hash + struct.pack("<H", len(name)) + name


def decode_hello(payload: bytes):
    if len(payload) < 10:
        raise ProtocolError(ERR_MALFORMED, "short hello")
    h = payload[:8]
    (ln,) = struct.unpack_from("<H", payload, 8)
    return h, payload[10 : 10 + ln].decode()


def encode_error(code: int, detail: str) -> bytes:
    return struct.pack("<H", code) + detail.encode()


def decode_error(payload: bytes):
    (code,) = struct.unpack_from("<H", payload, 0)
    return code, payload[2:].decode(errors="replace")


def encode_refresh(entries) -> bytes:
    out = bytearray(struct.pack("<I", len(entries)))
    for cid, blob in entries:
        out += struct.pack("<I", cid)
        out += _lp(blob)
    return bytes(out)


def decode_refresh(payload: bytes):
    buf = io.BytesIO(payload)
    raw = buf.read(4)
    if len(raw) < 4:
        raise ProtocolError(ERR_MALFORMED, "short refresh payload")
    (count,) = struct.unpack("<I", raw)
    out = []
    for _ in range(count):
        cid_raw = buf.read(4)
        if len(cid_raw) < 4:
            raise ProtocolError(ERR_MALFORMED, "truncated refresh entry")
        (cid,) = struct.unpack("<I", cid_raw)
        out.append((cid, _read_lp(buf)))
    return out


# ----------------------------------------------------------------------
# server side
# ----------------------------------------------------------------------


class ChannelRefresher:
    """Refresh callback that round-trips ciphertexts to the key owner."""

    def __init__(self, session):
        self.session = session
        self.calls = 0

    def __call__(self, cts):
        self.calls += 1
        ctx = self.session.ctx
        entries = [(i, ctx.serialize_ciphertext(ct)) for i, ct in enumerate(cts)]
        write_frame(self.session.stream, MSG_REFRESH_REQ, encode_refresh(entries))
        msg_type, payload = read_frame(self.session.stream, self.session.server.max_frame)
        if msg_type == MSG_ERROR:
            code, detail = decode_error(payload)
            raise RemoteError(code, detail)
        if msg_type != MSG_REFRESH_RESP:
            raise ProtocolError(ERR_BAD_STATE, f"expected refresh response, got {msg_type}")
        got = dict(decode_refresh(payload))
        if sorted(got) != list(range(len(cts))):
            raise ProtocolError(ERR_MALFORMED, "refresh response ids mismatch")
        return [ctx.deserialize_ciphertext(got[i]) for i in range(len(cts))]


class _Session:
    """Per-connection server state; messages are handled strictly in order."""

    def __init__(self, server, stream):
        self.server = server
        self.stream = stream
        self.ctx: CkksContext = None
        self.evk = None
        self.rks = None
        self.datasets = {}
        self.hp = None
        self.model = None
        self.run = None

    @property
    def ready_to_train(self):
        return self.evk is not None and ROLE_TRAIN in self.datasets


class ComputeServer:
    """Threaded TCP server executing encrypted training/inference jobs.

    One session per connection; concurrent sessions are independent.  The
    server holds evaluation keys and ciphertexts only; a traffic recorder
    (record_traffic=True) lets tests audit every byte it ever received.
    """

    def __init__(
        self,
        ctx: CkksContext,
        host: str = "127.0.0.1",
        port: int = 0,
        max_frame: int = DEFAULT_MAX_FRAME,
        checkpoint_dir: str = None,
        record_traffic: bool = False,
        fail_after_epochs: int = None,
    ):
        self.ctx = ctx
        self.max_frame = max_frame
        self.checkpoint_dir = checkpoint_dir
        self.record_traffic = record_traffic
        self.received = []
        self.fail_after_epochs = fail_after_epochs
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer._handle(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = Server((host, port), Handler)
        self.address = self._tcp.server_address
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()
        return self.address

    def stop(self):
        self._tcp.shutdown()
        self._tcp.server_close()

    # ------------------------------------------------------------------

    def _handle(self, sock):
        stream = _RecordingStream(sock.makefile("rwb"), self) if self.record_traffic else sock.makefile("rwb")
        session = _Session(self, stream)
        try:
            while True:
                try:
                    msg_type, payload = read_frame(stream, self.max_frame)
                except ProtocolError as e:
                    try:
                        write_frame(stream, MSG_ERROR, encode_error(e.code, e.detail))
                    except OSError:
                        pass
                    if e.code in (ERR_TOO_LARGE,):
                        return  # cannot resync framing after an oversized frame
                    if e.code == ERR_MALFORMED and "crc" not in e.detail:
                        return  # framing lost
                    continue
                except EOFError:
                    return
                try:
                    done = self._dispatch(session, msg_type, payload)
                except ProtocolError as e:
                    write_frame(stream, MSG_ERROR, encode_error(e.code, e.detail))
                    if e.code == ERR_PARAMS_MISMATCH:
                        return
                    continue
                except (CkksError, linalg.LayoutError, trainer.TrainerError, ValueError) as e:
                    write_frame(stream, MSG_ERROR, encode_error(ERR_CRYPTO, str(e)))
                    continue
                if done:
                    return
        except (EOFError, OSError, RemoteError):
            return
        finally:
            try:
                stream.close()
            except OSError:
                pass

    def _dispatch(self, session, msg_type, payload):
        if msg_type == MSG_HELLO:
            h, profile = decode_hello(payload)
            if h != self.ctx.hash:
                raise ProtocolError(ERR_PARAMS_MISMATCH, "parameter hash mismatch")
            session.ctx = self.ctx
            write_frame(session.stream, MSG_HELLO, encode_hello(self.ctx.hash, profile))
            return False
        if session.ctx is None:
            raise ProtocolError(ERR_BAD_STATE, "hello required first")
        if msg_type == MSG_KEYS:
            buf = io.BytesIO(payload)
            _read_lp(buf)  # public key (unused server-side; accepted for completeness)
            session.evk = session.ctx.deserialize_kswitch(_read_lp(buf))
            session.rks = session.ctx.deserialize_rotation_set(_read_lp(buf))
            write_frame(session.stream, MSG_KEYS, b"")
            return False
        if msg_type == MSG_UPLOAD:
            self._handle_upload(session, payload)
            write_frame(session.stream, MSG_UPLOAD, b"")
            return False
        if msg_type == MSG_TRAIN:
            if not session.ready_to_train:
                raise ProtocolError(ERR_BAD_STATE, "training requires keys and a train set")
            self._handle_train(session, payload)
            return False
        if msg_type == MSG_INFER_REQ:
            buf = io.BytesIO(payload)
            X = deserialize_packed(session.ctx, _read_lp(buf))
            hp_json = _read_lp(buf)
            model = session.model
            if model is None and hp_json:
                # a fresh connection may point at a finished job's checkpoint
                session.hp = Hyperparams.from_json(hp_json.decode())
                path = self._checkpoint_path(session)
                if path and os.path.exists(path):
                    _, model = load_checkpoint(session.ctx, path)
            if model is None or session.evk is None:
                raise ProtocolError(ERR_BAD_STATE, "no trained model for this session or checkpoint")
            logits = trainer.encrypted_infer(session.ctx, model.W, X, session.evk, session.rks)
            write_frame(session.stream, MSG_INFER_RESP, _lp(serialize_packed(session.ctx, logits)))
            return False
        # unknown message type: report and keep the connection
        write_frame(session.stream, MSG_ERROR, encode_error(ERR_MALFORMED, f"unknown message type {msg_type}"))
        return False

    def _handle_upload(self, session, payload):
        buf = io.BytesIO(payload)
        head = buf.read(2)
        if len(head) < 2:
            raise ProtocolError(ERR_MALFORMED, "short upload payload")
        role, flags = head[0], head[1]
        if role not in (ROLE_TRAIN, ROLE_VAL, ROLE_TEST):
            raise ProtocolError(ERR_MALFORMED, f"unknown dataset role {role}")
        (count,) = struct.unpack("<I", buf.read(4))
        batches = []
        for _ in range(count):
            (rows,) = struct.unpack("<I", buf.read(4))
            X = deserialize_packed(session.ctx, _read_lp(buf))
            Xt = deserialize_packed(session.ctx, _read_lp(buf)) if flags & 1 else None
            Y = deserialize_packed(session.ctx, _read_lp(buf)) if flags & 2 else None
            batches.append(Batch(X=X, Xt=Xt, Y=Y, rows=rows))
        session.datasets[role] = batches

    def _checkpoint_path(self, session):
        if not self.checkpoint_dir:
            return None
        tag = hashlib.sha256(session.hp.to_json().encode() + self.ctx.hash).hexdigest()[:16]
        return os.path.join(self.checkpoint_dir, f"ckpt_{tag}.bin")

    def _handle_train(self, session, payload):
        req = json.loads(payload.decode())
        session.hp = Hyperparams.from_json(json.dumps(req["hyperparams"]))
        resume = bool(req.get("resume", False))
        ctx = session.ctx
        refresher = ChannelRefresher(session)
        start_epoch = 0
        state = None
        path = self._checkpoint_path(session)
        if resume and path and os.path.exists(path):
            start_epoch, state = load_checkpoint(ctx, path)
        if state is None:
            state = trainer.zero_model(ctx, session.hp)
        val = session.datasets.get(ROLE_VAL)
        send_val = bool(req.get("report_val_logits", val is not None))

        def on_epoch(epoch, st):
            if path:
                save_checkpoint(ctx, path, epoch + 1, st)
            metrics = {"epoch": epoch}
            body = bytearray(struct.pack("<IBB", epoch, int(epoch + 1 == session.hp.epochs), 0))
            if send_val and val:
                logits = trainer.encrypted_infer(ctx, st.W, val[0].X, session.evk, session.rks)
                body[5] = 1
                body += _lp(serialize_packed(ctx, logits))
            body += _lp(json.dumps(metrics).encode())
            write_frame(session.stream, MSG_EPOCH, bytes(body))
            if self.fail_after_epochs is not None and epoch + 1 >= self.fail_after_epochs:
                raise _InjectedFailure()

        try:
            run = trainer.train(
                ctx,
                state,
                session.datasets[ROLE_TRAIN],
                session.hp,
                session.evk,
                session.rks,
                refresher,
                epoch_callback=on_epoch,
                start_epoch=start_epoch,
            )
        except _InjectedFailure:
            raise EOFError("injected failure after checkpoint")
        session.model = run.state
        session.run = run


class _InjectedFailure(Exception):
    pass


def save_checkpoint(ctx, path, epoch, state):
    blob = bytearray(struct.pack("<IdI", epoch, state.lam, state.step))
    for pm in (state.W, state.V, state.W_prev):
        blob += _lp(serialize_packed(ctx, pm))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(ctx, path):
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    epoch, lam, step = struct.unpack("<IdI", buf.read(16))
    W = deserialize_packed(ctx, _read_lp(buf))
    V = deserialize_packed(ctx, _read_lp(buf))
    Wp = deserialize_packed(ctx, _read_lp(buf))
    return epoch, trainer.ModelState(W=W, V=V, W_prev=Wp, lam=lam, step=step)


class _RecordingStream:
    """Wraps a socket file to record every byte received (test auditing)."""

    def __init__(self, inner, server):
        self._inner = inner
        self._server = server

    def read(self, n):
        data = self._inner.read(n)
        self._server.received.append(data)
        return data

    def write(self, data):
        return self._inner.write(data)

    def flush(self):
        self._inner.flush()

    def close(self):
        self._inner.close()


# ----------------------------------------------------------------------
# client side (the key/data owner)
# ----------------------------------------------------------------------


class OwnerSession:
    """Drives a full session: keygen, provisioning, upload, training, inference.

    Owns the secret key; answers the server's refresh requests by decrypting
    and re-encrypting at full level.  All encryption randomness derives from
    ``seed`` plus content hashes, so a session transcript is reproducible.
    """

    def __init__(self, ctx: CkksContext, address, seed: int = 0, profile: str = "custom", max_frame=DEFAULT_MAX_FRAME):
        self.ctx = ctx
        self.seed = int(seed)
        self.profile = profile
        self.max_frame = max_frame
        self.sock = socket.create_connection(address)
        self.stream = self.sock.makefile("rwb")
        self.sk = self.pk = self.evk = self.rks = None
        self.epoch_reports = []
        self.refresh_responses = 0

    def close(self):
        try:
            self.stream.close()
            self.sock.close()
        except OSError:
            pass

    def _rpc(self, msg_type, payload, expect):
        write_frame(self.stream, msg_type, payload)
        got, resp = read_frame(self.stream, self.max_frame)
        if got == MSG_ERROR:
            raise RemoteError(*decode_error(resp))
        if got != expect:
            raise ProtocolError(ERR_BAD_STATE, f"expected {expect}, got {got}")
        return resp

    def hello(self):
        self._rpc(MSG_HELLO, encode_hello(self.ctx.hash, self.profile), MSG_HELLO)

    def keygen_and_provision(self, keys=None):
        """Generate (or adopt) keys and send the public material across."""
        if keys is None:
            keys = self.ctx.keygen(self.seed)
        self.sk, self.pk, self.evk, self.rks = keys
        payload = (
            _lp(self.ctx.serialize_public_key(self.pk))
            + _lp(self.ctx.serialize_kswitch(self.evk))
            + _lp(self.ctx.serialize_rotation_set(self.rks))
        )
        self._rpc(MSG_KEYS, payload, MSG_KEYS)

    def upload_train(self, X, y, hp: Hyperparams):
        batches = trainer.pack_batches(self.ctx, X, y, hp, self.pk, seed=self._derive_seed(b"train"))
        self.upload_train_batches(batches)

    def upload_train_batches(self, batches):
        payload = bytearray(bytes([ROLE_TRAIN, 3]))
        payload += struct.pack("<I", len(batches))
        for b in batches:
            payload += struct.pack("<I", b.rows)
            payload += _lp(serialize_packed(self.ctx, b.X))
            payload += _lp(serialize_packed(self.ctx, b.Xt))
            payload += _lp(serialize_packed(self.ctx, b.Y))
        self._rpc(MSG_UPLOAD, bytes(payload), MSG_UPLOAD)

    def upload_val(self, X, hp: Hyperparams):
        plan = linalg.plan_packing(X.shape[0], X.shape[1], self.ctx.slots, min_cols=hp.stride)
        pm = linalg.pack(self.ctx, X, plan, self.pk, self.ctx.params.scale, self._derive_seed(b"val"))
        payload = bytearray(bytes([ROLE_VAL, 0]))
        payload += struct.pack("<I", 1)
        payload += struct.pack("<I", X.shape[0])
        payload += _lp(serialize_packed(self.ctx, pm))
        self._rpc(MSG_UPLOAD, bytes(payload), MSG_UPLOAD)

    def train(self, hp: Hyperparams, resume: bool = False, on_epoch=None):
        """Send the train request, then serve refreshes until the last epoch."""
        req = {"hyperparams": json.loads(hp.to_json()), "resume": resume}
        write_frame(self.stream, MSG_TRAIN, json.dumps(req).encode())
        self.epoch_reports = []
        while True:
            msg_type, payload = read_frame(self.stream, self.max_frame)
            if msg_type == MSG_ERROR:
                raise RemoteError(*decode_error(payload))
            if msg_type == MSG_REFRESH_REQ:
                self._serve_refresh(payload)
                continue
            if msg_type == MSG_EPOCH:
                report = self._decode_epoch(payload)
                self.epoch_reports.append(report)
                if on_epoch:
                    on_epoch(report)
                if report["final"]:
                    return self.epoch_reports
                continue
            raise ProtocolError(ERR_BAD_STATE, f"unexpected message {msg_type} during training")

    def _serve_refresh(self, payload):
        entries = decode_refresh(payload)
        out = []
        for cid, blob in entries:
            ct = self.ctx.deserialize_ciphertext(blob)
            values = self.ctx.decode(self.ctx.decrypt(ct, self.sk))
            pt = self.ctx.encode(values, self.ctx.params.scale, self.ctx.L)
            rng = np.random.default_rng(self._derive_seed(b"refresh" + hashlib.sha256(blob).digest()))
            fresh = self.ctx.encrypt_pk(pt, self.pk, rng)
            out.append((cid, self.ctx.serialize_ciphertext(fresh)))
        self.refresh_responses += 1
        write_frame(self.stream, MSG_REFRESH_RESP, encode_refresh(out))

    def _decode_epoch(self, payload):
        buf = io.BytesIO(payload)
        epoch, final, has_logits = struct.unpack("<IBB", buf.read(6))
        report = {"epoch": epoch, "final": bool(final), "val_logits": None}
        if has_logits:
            pm = deserialize_packed(self.ctx, _read_lp(buf))
            report["val_logits"] = linalg.unpack(self.ctx, pm, self.sk)
        report["metrics"] = json.loads(_read_lp(buf).decode())
        return report

    def infer(self, X, hp: Hyperparams, from_checkpoint: bool = False) -> np.ndarray:
        plan = linalg.plan_packing(X.shape[0], X.shape[1], self.ctx.slots, min_cols=hp.stride)
        pm = linalg.pack(self.ctx, X, plan, self.pk, self.ctx.params.scale, self._derive_seed(b"infer"))
        hp_blob = hp.to_json().encode() if from_checkpoint else b""
        resp = self._rpc(MSG_INFER_REQ, _lp(serialize_packed(self.ctx, pm)) + _lp(hp_blob), MSG_INFER_RESP)
        logits = deserialize_packed(self.ctx, _read_lp(io.BytesIO(resp)))
        return linalg.unpack(self.ctx, logits, self.sk)

    def _derive_seed(self, tag: bytes) -> np.random.SeedSequence:
        digest = hashlib.sha256(tag + self.seed.to_bytes(8, "little", signed=True)).digest()
        return np.random.SeedSequence([self.seed, int.from_bytes(digest[:8], "little")])
