"""Connection handling over reliable byte streams.

The server accepts many clients; each client dials, introduces itself
with a ClientHello, then serves instructions in a loop. Two address
schemes satisfy the same contract:

    host:port        TCP, IPv6 literals in brackets ("[::]:8080")
    mem:NAME         in-process loopback (a socketpair under the hood)

The loopback scheme exists so the full stack, framing included, runs in
tests and single-process experiments without touching the network.

Concurrency: one outstanding instruction per connection at a time. The
accept loop spawns a thread per incoming connection only for the hello
handshake; after that the round loop owns the connection and performs
blocking request/response exchanges on it.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .protocol import (
    ClientHello,
    DisconnectRes,
    ErrorRes,
    EvaluateIns,
    EvaluateRes,
    FitIns,
    FitRes,
    FrameReader,
    GetWeightsIns,
    GetWeightsRes,
    Message,
    ProtocolError,
    ReconnectIns,
    encode_frame,
)

_RECV_SIZE = 65536
_SEND_CHUNK = 65536


class TransportError(Exception):
    pass


class BindError(TransportError):
    """Address cannot be bound (typically: port already in use)."""


class DialError(TransportError):
    """Connect refused or timed out; retriable."""


class ConnectionClosed(TransportError):
    pass


class LaggardError(TransportError):
    """Peer did not reply within the read timeout."""


class ClientError(TransportError):
    """Client answered with ErrorRes; the connection stays usable."""

    def __init__(self, code: int, detail: str):
        super().__init__(f"client error {code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass
class ServerEndpoint:
    bind_address: str
    max_clients: int = 100
    read_timeout_s: float = 600.0

    def __post_init__(self) -> None:
        if self.max_clients < 1:
            raise ValueError("max_clients must be >= 1")


def parse_address(address: str) -> tuple[str, str, int] | tuple[str, str]:
    """Split an address into ("tcp", host, port) or ("mem", name)."""
    if address.startswith("mem:"):
        name = address[4:]
        if not name:
            raise ValueError("mem: address needs a name")
        return ("mem", name)
    if address.startswith("["):
        end = address.find("]")
        if end < 0 or not address[end + 1 :].startswith(":"):
            raise ValueError(f"malformed IPv6 address {address!r}")
        host = address[1:end]
        port_text = address[end + 2 :]
    else:
        host, sep, port_text = address.rpartition(":")
        if not sep:
            raise ValueError(f"address {address!r} missing port")
    try:
        port = int(port_text)
    except ValueError:
        raise ValueError(f"bad port in address {address!r}") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range in address {address!r}")
    return ("tcp", host, port)


class Connection:
    """One framed message stream. Thread-safe sends; counted bytes."""

    def __init__(self, sock: socket.socket, peer: str, on_close: Optional[Callable[["Connection"], None]] = None):
        self._sock = sock
        self.peer = peer
        self._close_callbacks: list[Callable[["Connection"], None]] = []
        if on_close is not None:
            self._close_callbacks.append(on_close)
        self._reader = FrameReader()
        self._send_lock = threading.Lock()
        self._closed = False
        self.bytes_sent = 0
        self.bytes_received = 0
        # Set by the server after a valid hello.
        self.client_name: str | None = None
        self.capabilities: dict = {}
        # Optional outbound shaper installed by sim-tools: an object with
        # shape(nbytes, first_chunk) that sleeps to model a slow link.
        self.link_shaper = None

    @property
    def closed(self) -> bool:
        return self._closed

    def add_close_callback(self, callback: Callable[["Connection"], None]) -> None:
        """Run ``callback(self)`` once when the connection closes."""
        run_now = False
        if self._closed:
            run_now = True
        else:
            self._close_callbacks.append(callback)
        if run_now:
            callback(self)

    def send(self, m: Message) -> int:
        frame = encode_frame(m)
        with self._send_lock:
            if self._closed:
                raise ConnectionClosed(f"send on closed connection to {self.peer}")
            try:
                shaper = self.link_shaper
                if shaper is None:
                    self._sock.sendall(frame)
                else:
                    view = memoryview(frame)
                    for i in range(0, len(frame), _SEND_CHUNK):
                        chunk = view[i : i + _SEND_CHUNK]
                        shaper.shape(len(chunk), first_chunk=(i == 0))
                        self._sock.sendall(chunk)
            except OSError as exc:
                self._close_quietly()
                raise ConnectionClosed(f"send to {self.peer} failed: {exc}") from None
            self.bytes_sent += len(frame)
        return len(frame)

    def receive(self, timeout: float | None = None) -> Message:
        """Block until one full message arrives.

        Raises LaggardError when ``timeout`` elapses first, ConnectionClosed
        on EOF, and ProtocolError (after closing) on malformed bytes.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                m = self._reader.next_message()
            except ProtocolError:
                self.close()
                raise
            if m is not None:
                return m
            if self._closed:
                raise ConnectionClosed(f"connection to {self.peer} is closed")
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LaggardError(f"no reply from {self.peer} within {timeout:.3f}s")
                self._sock.settimeout(remaining)
            else:
                self._sock.settimeout(None)
            try:
                data = self._sock.recv(_RECV_SIZE)
            except socket.timeout:
                raise LaggardError(f"no reply from {self.peer} within {timeout:.3f}s") from None
            except OSError as exc:
                self._close_quietly()
                raise ConnectionClosed(f"receive from {self.peer} failed: {exc}") from None
            if not data:
                self._close_quietly()
                raise ConnectionClosed(f"{self.peer} closed the connection")
            self.bytes_received += len(data)
            self._reader.feed(data)

    def close(self) -> None:
        self._close_quietly()

    def _close_quietly(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        callbacks, self._close_callbacks = self._close_callbacks, []
        for callback in callbacks:
            callback(self)


_EXPECTED_REPLY: dict[type, type] = {
    GetWeightsIns: GetWeightsRes,
    FitIns: FitRes,
    EvaluateIns: EvaluateRes,
    ReconnectIns: DisconnectRes,
}


def request(conn: Connection, ins: Message, timeout: float | None = None) -> Message:
    """Send one instruction and block for its result.

    ErrorRes raises ClientError and leaves the connection open. A timeout
    raises LaggardError and closes the connection: with no request ids a
    late reply could otherwise be matched to the next instruction.
    """
    expected = _EXPECTED_REPLY.get(type(ins))
    if expected is None:
        raise TypeError(f"{type(ins).__name__} is not an instruction")
    conn.send(ins)
    try:
        reply = conn.receive(timeout)
    except LaggardError:
        conn.close()
        raise
    if isinstance(reply, expected):
        return reply
    if isinstance(reply, ErrorRes):
        raise ClientError(reply.code, reply.detail)
    if isinstance(reply, DisconnectRes):
        conn.close()
        raise ConnectionClosed(f"{conn.peer} disconnected ({reply.reason.name})")
    conn.close()
    raise ProtocolError(
        f"expected {expected.__name__} from {conn.peer}, got {type(reply).__name__}"
    )


class _MemListener:
    def __init__(self, name: str):
        self.name = name
        self.address = f"mem:{name}"
        self._incoming: queue.Queue = queue.Queue()
        self._closed = False

    def connect(self) -> socket.socket:
        if self._closed:
            raise DialError(f"no listener at {self.address}")
        server_side, client_side = socket.socketpair()
        self._incoming.put(server_side)
        return client_side

    def accept(self) -> tuple[socket.socket, str]:
        sock = self._incoming.get()
        if sock is None:
            raise OSError("listener closed")
        return sock, f"{self.address}#peer"

    def close(self) -> None:
        self._closed = True
        self._incoming.put(None)


_loopback_registry: dict[str, _MemListener] = {}
_loopback_lock = threading.Lock()


class _TcpListener:
    def __init__(self, host: str, port: int):
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        self._sock = socket.socket(family, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise BindError(f"cannot bind {host}:{port}: {exc}") from None
        self._sock.listen(128)
        actual_port = self._sock.getsockname()[1]
        self.address = f"[{host}]:{actual_port}" if family == socket.AF_INET6 else f"{host}:{actual_port}"

    def accept(self) -> tuple[socket.socket, str]:
        sock, addr = self._sock.accept()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock, f"{addr[0]}:{addr[1]}"

    def close(self) -> None:
        # shutdown() wakes a blocked accept(); close() alone does not.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class ServerHandle:
    """Running acceptor plus the set of live, hello-validated connections."""

    def __init__(self, endpoint: ServerEndpoint, listener, on_connect: Callable[[Connection], None]):
        self.endpoint = endpoint
        self.address = listener.address
        self._listener = listener
        self._on_connect = on_connect
        self._conns: set[Connection] = set()
        self._lock = threading.Lock()
        self._stopping = False
        self._accept_thread = threading.Thread(target=self._accept_loop, name=f"accept:{self.address}", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(sock, peer), name=f"hello:{peer}", daemon=True).start()

    def _handshake(self, sock: socket.socket, peer: str) -> None:
        with self._lock:
            if self._stopping or len(self._conns) >= self.endpoint.max_clients:
                sock.close()
                return
        conn = Connection(sock, peer, on_close=self._forget)
        try:
            hello = conn.receive(timeout=self.endpoint.read_timeout_s)
        except (TransportError, ProtocolError):
            conn.close()
            return
        if not isinstance(hello, ClientHello):
            conn.close()
            return
        conn.client_name = hello.client_name
        conn.capabilities = dict(hello.capabilities)
        with self._lock:
            if self._stopping:
                conn.close()
                return
            self._conns.add(conn)
        try:
            self._on_connect(conn)
        except Exception:
            conn.close()

    def _forget(self, conn: Connection) -> None:
        with self._lock:
            self._conns.discard(conn)

    def connection_count(self) -> int:
        with self._lock:
            return len(self._conns)

    def shutdown(self) -> None:
        """Stop accepting, tell every client to disconnect for good, close."""
        with self._lock:
            if self._stopping:
                return
            self._stopping = True
            conns = list(self._conns)
        self._listener.close()
        for conn in conns:
            try:
                conn.send(ReconnectIns(seconds=0))
            except TransportError:
                pass
        for conn in conns:
            conn.close()
        if self._listener.address.startswith("mem:"):
            with _loopback_lock:
                _loopback_registry.pop(self._listener.address[4:], None)
        self._accept_thread.join(timeout=5)


def serve(endpoint: ServerEndpoint, on_connect: Callable[[Connection], None]) -> ServerHandle:
    """Bind and start accepting. on_connect runs once per validated client."""
    parsed = parse_address(endpoint.bind_address)
    if parsed[0] == "mem":
        name = parsed[1]
        with _loopback_lock:
            if name in _loopback_registry:
                raise BindError(f"mem:{name} already in use")
            listener = _MemListener(name)
            _loopback_registry[name] = listener
    else:
        _, host, port = parsed
        listener = _TcpListener(host, port)
    return ServerHandle(endpoint, listener, on_connect)


def dial(address: str, hello: ClientHello, connect_timeout: float = 10.0) -> Connection:
    """Connect, send the hello, return the ready connection."""
    parsed = parse_address(address)
    if parsed[0] == "mem":
        with _loopback_lock:
            listener = _loopback_registry.get(parsed[1])
        if listener is None:
            raise DialError(f"no listener at {address}")
        sock = listener.connect()
    else:
        _, host, port = parsed
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise DialError(f"cannot connect to {address}: {exc}") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = Connection(sock, peer=address)
    conn.send(hello)
    return conn
