"""Framed TCP scan service.

Wire format (all lengths big-endian)::

    "MDSA" | version:u8 (=1) | command:u8 | payload_len:u32 | payload

Commands: 0x01 scan request, 0x81 scan response, 0x7F error. A request
payload is ``config_len:u32 | config JSON | raw dump bytes``; the response
payload is the canonical report JSON, identical to a local scan.
"""
from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import signal
import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path

from .dump import DumpError, MemoryDump, parse_manifest
from .pipeline import ScanConfig, run_scan

MAGIC = b"MDSA"
VERSION = 1
SCAN_REQUEST = 0x01
SCAN_RESPONSE = 0x81
ERROR = 0x7F
COMMANDS = (SCAN_REQUEST, SCAN_RESPONSE, ERROR)
HEADER = struct.Struct(">4sBBI")
HEADER_LEN = HEADER.size
MAX_PAYLOAD = 256 * 1024 * 1024
DEFAULT_BIND = "127.0.0.1:9470"
BIND_ENV = "MDSA_BIND"
REQUEST_KEYS = {"manifest", "base_address", "source_id"}

log = logging.getLogger(__name__)


class FrameError(ValueError):
    pass


class LengthOverflow(FrameError):
    pass


class ServiceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    command: int
    payload: bytes = b""
    version: int = VERSION


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise LengthOverflow("length overflow")
    return HEADER.pack(MAGIC, frame.version, frame.command, len(frame.payload)) + frame.payload


def parse_header(head: bytes) -> tuple[int, int]:
    """Validate a 10-byte header; return (command, payload_len)."""
    if len(head) < HEADER_LEN:
        raise FrameError("truncated header")
    magic, version, command, length = HEADER.unpack_from(head)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if command not in COMMANDS:
        raise FrameError(f"unknown command 0x{command:02x}")
    if length > MAX_PAYLOAD:
        raise LengthOverflow("length overflow")
    return command, length


def decode_frame(buf: bytes) -> Frame:
    command, length = parse_header(buf)
    if len(buf) < HEADER_LEN + length:
        raise FrameError("truncated payload")
    if len(buf) > HEADER_LEN + length:
        raise FrameError("trailing bytes after frame")
    return Frame(command, bytes(buf[HEADER_LEN:]))


def error_frame(message: str) -> bytes:
    return encode_frame(Frame(ERROR, message.encode("utf-8")))


def build_request(config: dict, data: bytes) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return struct.pack(">I", len(blob)) + blob + bytes(data)


def parse_request(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise FrameError("request shorter than config length field")
    (clen,) = struct.unpack_from(">I", payload)
    if clen > len(payload) - 4:
        raise FrameError("config length exceeds payload")
    try:
        config = json.loads(payload[4 : 4 + clen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"malformed config: {exc}") from exc
    if not isinstance(config, dict):
        raise FrameError("malformed config: expected a JSON object")
    return config, payload[4 + clen :]


def scan_bytes(config: dict, data: bytes, workers: int = 1) -> str:
    """Canonical report for a request config and raw dump bytes (shared by local and remote paths)."""
    extra = {k: config[k] for k in REQUEST_KEYS if k in config}
    scan_cfg = ScanConfig.from_dict({k: v for k, v in config.items() if k not in REQUEST_KEYS})
    manifest = parse_manifest(extra.get("manifest", ""))
    dump = MemoryDump(data, base_address=int(extra.get("base_address", 0)), source_id=str(extra.get("source_id", "")))
    return run_scan(dump, scan_cfg, workers=workers, manifest=manifest).canonical_json()


def handle_scan_request(payload: bytes, workers: int = 1) -> bytes:
    """Full reply frame (response or error) for a scan request payload."""
    try:
        config, data = parse_request(payload)
        if not data:
            raise DumpError("empty dump")
        report = scan_bytes(config, data, workers)
    except (FrameError, ValueError, TypeError, KeyError) as exc:
        return error_frame(str(exc) or type(exc).__name__)
    except Exception as exc:  # the server must answer, never drop the connection
        log.exception("scan failed")
        return error_frame(f"internal error: {exc}")
    return encode_frame(Frame(SCAN_RESPONSE, report.encode("utf-8")))


def parse_bind(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def default_bind() -> str:
    return os.environ.get(BIND_ENV, DEFAULT_BIND)


class ScanServer:
    """asyncio acceptor; at most ``max_concurrent`` connections are served at once."""

    def __init__(
        self,
        bind: str | None = None,
        max_concurrent: int = 4,
        workers: int = 1,
        log_path: str | Path | None = None,
        report_dir: str | Path | None = None,
    ) -> None:
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.host, self.port = parse_bind(bind or default_bind())
        self.max_concurrent = max_concurrent
        self.workers = workers
        self.log_path = Path(log_path) if log_path else None
        self.report_dir = Path(report_dir) if report_dir else None
        self._server: asyncio.AbstractServer | None = None
        self._slots: asyncio.Semaphore | None = None
        self._tasks: set[asyncio.Task] = set()
        self._busy: set[asyncio.Task] = set()
        self._closing = False

    async def start(self) -> int:
        self._slots = asyncio.Semaphore(self.max_concurrent)
        self._server = await asyncio.start_server(self._on_connect, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        """Stop accepting, drop idle connections, let in-flight requests finish."""
        self._closing = True
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in self._tasks - self._busy:
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        try:
            async with self._slots:
                await self._serve_connection(reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception:
            log.exception("connection handler failed")
        finally:
            self._tasks.discard(task)
            self._busy.discard(task)
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    async def _serve_connection(self, reader, writer) -> None:
        peer = writer.get_extra_info("peername")
        task = asyncio.current_task()
        while not self._closing:
            self._busy.discard(task)
            try:
                head = await reader.readexactly(HEADER_LEN)
            except asyncio.IncompleteReadError:
                return
            self._busy.add(task)
            try:
                command, length = parse_header(head)
            except FrameError as exc:
                writer.write(error_frame(str(exc)))
                await writer.drain()
                if isinstance(exc, LengthOverflow):
                    return  # cannot resynchronise without reading the oversized body
                continue
            payload = await reader.readexactly(length)
            if command != SCAN_REQUEST:
                writer.write(error_frame(f"unexpected command 0x{command:02x}"))
                await writer.drain()
                continue
            started = time.time()
            reply = await asyncio.get_running_loop().run_in_executor(None, handle_scan_request, payload, self.workers)
            writer.write(reply)
            await writer.drain()
            self._record(peer, payload, reply, started)

    def _record(self, peer, payload: bytes, reply: bytes, started: float) -> None:
        ok = reply[5] == SCAN_RESPONSE
        if self.report_dir is not None and ok:
            self.report_dir.mkdir(parents=True, exist_ok=True)
            digest = hashlib.sha256(payload).hexdigest()
            (self.report_dir / f"{digest}.json").write_bytes(reply[HEADER_LEN:])
        if self.log_path is None:
            return
        entry = {
            "time": round(started, 3),
            "peer": f"{peer[0]}:{peer[1]}" if peer else "",
            "request_bytes": len(payload),
            "request_sha256": hashlib.sha256(payload).hexdigest(),
            "status": "ok" if ok else "error",
            "seconds": round(time.time() - started, 3),
        }
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def serve(bind: str | None = None, max_concurrent: int = 4, workers: int = 1,
          log_path=None, report_dir=None, ready=None) -> int:
    """Run until SIGINT/SIGTERM; in-flight scans finish before exit."""

    async def main() -> None:
        server = ScanServer(bind, max_concurrent, workers, log_path, report_dir)
        port = await server.start()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        log.info("listening on %s:%d", server.host, port)
        if ready is not None:
            ready(server.host, port)
        await stop.wait()
        await server.stop()

    asyncio.run(main())
    return 0


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(1 << 20, n - len(buf)))
        if not chunk:
            raise ServiceError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    head = _recv_exact(sock, HEADER_LEN)
    command, length = parse_header(head)
    return Frame(command, _recv_exact(sock, length))


def request_scan(address: str, config: dict, data: bytes, timeout: float = 600.0) -> str:
    """Send one scan request; return the report JSON or raise ServiceError."""
    host, port = parse_bind(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(encode_frame(Frame(SCAN_REQUEST, build_request(config, data))))
        frame = read_frame(sock)
    if frame.command == ERROR:
        raise ServiceError(frame.payload.decode("utf-8", "replace"))
    if frame.command != SCAN_RESPONSE:
        raise ServiceError(f"unexpected reply command 0x{frame.command:02x}")
    return frame.payload.decode("utf-8")
