"""Client/server retrieval over a length-prefixed binary protocol.

The server owns an :class:`~factormatch.matcher.ObjectIndex` and answers
queries that carry quantized PCA and NMF loading blobs; the client runs the
full extraction pipeline (model order, both factorizations, quantization)
and ships the blobs. Transport is a plain TCP stream of frames:

    frame    := u32 length (little-endian) | payload
    query    := "QRY1" | u8 version=1 | u16 eta | u16 alpha
                | u32 len | pca QFL1 blob | u32 len | nmf QFL1 blob
    response := "RSP1" | u8 status | u16 count
                | count * (u16 id_len | object_id | f32 score | u16 rank)
                | u16 err_len | error_text

Status 0 = ok, 1 = malformed frame, 2 = invalid parameters, 3 = query failed.
A bad query never kills the connection; only an oversized declared frame
closes it (the stream can no longer be trusted).
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

from . import codec
from .codec import QuantizedLoadings
from .descriptors import DescriptorMatrix
from .factorization import FactorLoadings, nmf_loadings, pca_loadings
from .matcher import (
    IndexedImage,
    ObjectIndex,
    RankedEntry,
    RankedList,
    retrieve_combined,
)
from .model_order import estimate_order

QUERY_MAGIC = b"QRY1"
RESPONSE_MAGIC = b"RSP1"
INDEX_MAGIC = b"IDX1"
PROTOCOL_VERSION = 1

STATUS_OK = 0
STATUS_MALFORMED = 1
STATUS_INVALID_PARAMS = 2
STATUS_QUERY_FAILED = 3

DEFAULT_MAX_FRAME = 1 << 20  # 1 MiB
DEFAULT_TIMEOUT = 30.0


class ProtocolError(ValueError):
    """Raised when a frame payload does not parse."""


class ServerReportedError(RuntimeError):
    """Raised client-side when the server answers with a non-zero status."""

    def __init__(self, status: int, message: str):
        super().__init__(f"server status {status}: {message}")
        self.status = status


# --- index construction ---------------------------------------------------


def nmf_seed(image_id: str, base_seed: int = 0) -> int:
    """Stable per-image NMF seed (crc32 of the id mixed with a base seed)."""
    return (zlib.crc32(image_id.encode("utf-8")) ^ (base_seed & 0xFFFFFFFF)) & 0xFFFFFFFF


def factorize_image(
    m: DescriptorMatrix, k_max: int | None = None, base_seed: int = 0
) -> tuple[FactorLoadings, FactorLoadings, int]:
    """Estimate the model order of one image and compute both loadings at it."""
    profile = estimate_order(m, k_max)
    k_star = profile.k_star
    pca, svd = pca_loadings(m, k_star)
    nmf, _, _ = nmf_loadings(m, k_star, seed=nmf_seed(m.image_id, base_seed))
    return pca, nmf, k_star


def client_blobs(
    m: DescriptorMatrix,
    bits: int,
    k_max: int | None = None,
    base_seed: int = 0,
) -> tuple[QuantizedLoadings, QuantizedLoadings]:
    """Client-side pipeline: model order, factorize, quantize both loadings."""
    pca, nmf, _ = factorize_image(m, k_max, base_seed)
    return codec.quantize(pca, bits), codec.quantize(nmf, bits)


@dataclass(frozen=True)
class IndexRecord:
    """One stored image: object id plus the two quantized loading blobs."""

    object_id: str
    pca: QuantizedLoadings
    nmf: QuantizedLoadings

    def stored_bytes(self) -> int:
        return len(codec.encode(self.pca)) + len(codec.encode(self.nmf))


def quantized_records(
    corpus: Sequence[DescriptorMatrix],
    k_max: int | None = None,
    bits: int = 5,
    base_seed: int = 0,
) -> list[IndexRecord]:
    """Factorize and quantize every corpus image for storage."""
    records = []
    for m in corpus:
        pca, nmf, _ = factorize_image(m, k_max, base_seed)
        records.append(IndexRecord(
            object_id=m.object_id,
            pca=codec.quantize(pca, bits),
            nmf=codec.quantize(nmf, bits),
        ))
    return records


def index_from_records(records: Sequence[IndexRecord]) -> ObjectIndex:
    images = {}
    for rec in records:
        pca = codec.dequantize(rec.pca)
        nmf = codec.dequantize(rec.nmf)
        images[rec.pca.image_id] = IndexedImage(
            image_id=rec.pca.image_id, object_id=rec.object_id,
            pca=pca, nmf=nmf, k_star=rec.pca.k,
        )
    return ObjectIndex(images=images)


def build_index(
    corpus: Sequence[DescriptorMatrix],
    k_max: int | None = None,
    bits: int | None = 5,
    base_seed: int = 0,
) -> ObjectIndex:
    """Build the in-memory database from a descriptor corpus.

    With ``bits`` set, stored loadings go through a quantize/dequantize round
    trip, mirroring what a server reading quantized uploads would hold;
    ``bits=None`` keeps full precision (reference mode).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if bits is not None:
        return index_from_records(quantized_records(corpus, k_max, bits, base_seed))
    images = {}
    for m in corpus:
        pca, nmf, k_star = factorize_image(m, k_max, base_seed)
        images[m.image_id] = IndexedImage(
            image_id=m.image_id, object_id=m.object_id,
            pca=pca, nmf=nmf, k_star=k_star,
        )
    return ObjectIndex(images=images)


# --- index persistence ----------------------------------------------------


def write_index(path: str | Path, records: Sequence[IndexRecord]) -> None:
    """Persist quantized records: ``IDX1`` | u32 count | per image
    (u16 obj_len | object_id | u32 len | pca blob | u32 len | nmf blob)."""
    out = bytearray()
    out += INDEX_MAGIC
    out += struct.pack("<I", len(records))
    for rec in records:
        obj = rec.object_id.encode("utf-8")
        out += struct.pack("<H", len(obj)) + obj
        for blob in (codec.encode(rec.pca), codec.encode(rec.nmf)):
            out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def read_index(path: str | Path) -> ObjectIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise ProtocolError(f"not an index file: magic {data[:4]!r}")
    pos = 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records = []
    for _ in range(count):
        (obj_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        object_id = data[pos:pos + obj_len].decode("utf-8")
        pos += obj_len
        blobs = []
        for _ in range(2):
            (blob_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            blobs.append(codec.decode(data[pos:pos + blob_len]))
            pos += blob_len
        records.append(IndexRecord(object_id=object_id, pca=blobs[0], nmf=blobs[1]))
    return index_from_records(records)


# --- wire encoding --------------------------------------------------------


def encode_query(eta: int, alpha: int, pca_blob: bytes, nmf_blob: bytes) -> bytes:
    return (
        QUERY_MAGIC
        + struct.pack("<BHH", PROTOCOL_VERSION, eta, alpha)
        + struct.pack("<I", len(pca_blob)) + pca_blob
        + struct.pack("<I", len(nmf_blob)) + nmf_blob
    )


def decode_query(payload: bytes) -> tuple[int, int, int, bytes, bytes]:
    """Split a query payload into (version, eta, alpha, pca_blob, nmf_blob)."""
    if len(payload) < 4 or payload[:4] != QUERY_MAGIC:
        raise ProtocolError(f"bad query magic {payload[:4]!r}")
    if len(payload) < 9:
        raise ProtocolError("truncated query header")
    version, eta, alpha = struct.unpack_from("<BHH", payload, 4)
    pos = 9
    blobs = []
    for name in ("pca", "nmf"):
        if len(payload) < pos + 4:
            raise ProtocolError(f"truncated {name} blob length")
        (blob_len,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if len(payload) < pos + blob_len:
            raise ProtocolError(f"truncated {name} blob")
        blobs.append(payload[pos:pos + blob_len])
        pos += blob_len
    if pos != len(payload):
        raise ProtocolError(f"{len(payload) - pos} trailing bytes after query")
    return version, eta, alpha, blobs[0], blobs[1]


def encode_response(
    status: int,
    entries: Sequence[tuple[str, float]] = (),
    error_text: str = "",
) -> bytes:
    out = bytearray()
    out += RESPONSE_MAGIC
    out += struct.pack("<BH", status, len(entries))
    for rank, (object_id, score) in enumerate(entries, start=1):
        obj = object_id.encode("utf-8")
        out += struct.pack("<H", len(obj)) + obj
        out += struct.pack("<fH", score, rank)
    err = error_text.encode("utf-8")
    out += struct.pack("<H", len(err)) + err
    return bytes(out)


def decode_response(payload: bytes) -> tuple[int, list[tuple[str, float, int]], str]:
    """Split a response payload into (status, [(object_id, score, rank)], error)."""
    if len(payload) < 4 or payload[:4] != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic {payload[:4]!r}")
    if len(payload) < 7:
        raise ProtocolError("truncated response header")
    status, count = struct.unpack_from("<BH", payload, 4)
    pos = 7
    entries = []
    for _ in range(count):
        if len(payload) < pos + 2:
            raise ProtocolError("truncated response entry")
        (id_len,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        if len(payload) < pos + id_len + 6:
            raise ProtocolError("truncated response entry")
        object_id = payload[pos:pos + id_len].decode("utf-8")
        pos += id_len
        score, rank = struct.unpack_from("<fH", payload, pos)
        pos += 6
        entries.append((object_id, float(score), rank))
    if len(payload) < pos + 2:
        raise ProtocolError("truncated error field")
    (err_len,) = struct.unpack_from("<H", payload, pos)
    pos += 2
    error_text = payload[pos:pos + err_len].decode("utf-8")
    return status, entries, error_text


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    stream.write(struct.pack("<I", len(payload)) + payload)
    stream.flush()


def read_frame(stream: BinaryIO, max_frame: int = DEFAULT_MAX_FRAME) -> bytes | None:
    """Read one length-prefixed frame; None on clean EOF at a frame boundary."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise ProtocolError("stream ended inside a frame header")
    (length,) = struct.unpack("<I", header)
    if length > max_frame:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_frame}")
    payload = b""
    while len(payload) < length:
        chunk = stream.read(length - len(payload))
        if not chunk:
            raise ProtocolError("stream ended inside a frame payload")
        payload += chunk
    return payload


# --- server ---------------------------------------------------------------


def answer_query(index: ObjectIndex, payload: bytes) -> bytes:
    """Process one query payload into a response payload (pure function)."""
    try:
        version, eta, alpha, pca_blob, nmf_blob = decode_query(payload)
        query_pca = codec.dequantize(codec.decode(pca_blob))
        query_nmf = codec.dequantize(codec.decode(nmf_blob))
    except (ProtocolError, codec.CodecError) as exc:
        return encode_response(STATUS_MALFORMED, error_text=f"malformed frame: {exc}")
    if version != PROTOCOL_VERSION:
        return encode_response(
            STATUS_INVALID_PARAMS, error_text=f"unsupported protocol version {version}"
        )
    if eta < 1 or alpha > eta:
        return encode_response(
            STATUS_INVALID_PARAMS, error_text=f"invalid parameters: eta={eta}, alpha={alpha}"
        )
    if query_pca.T != query_nmf.T:
        return encode_response(
            STATUS_INVALID_PARAMS,
            error_text=f"blob descriptor dims differ: {query_pca.T} vs {query_nmf.T}",
        )
    try:
        ranked = retrieve_combined(query_pca, query_nmf, index, eta=eta, alpha=alpha)
    except Exception as exc:  # noqa: BLE001 - reported to the client, not fatal
        return encode_response(STATUS_QUERY_FAILED, error_text=f"query failed: {exc}")
    return encode_response(
        STATUS_OK, [(e.object_id, e.score) for e in ranked.entries]
    )


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        index = self.server.index  # type: ignore[attr-defined]
        max_frame = self.server.max_frame  # type: ignore[attr-defined]
        while True:
            try:
                payload = read_frame(self.rfile, max_frame)
            except ProtocolError as exc:
                # Oversized or truncated stream: report and drop the
                # connection, since frame boundaries are lost.
                try:
                    write_frame(self.wfile, encode_response(
                        STATUS_MALFORMED, error_text=f"malformed frame: {exc}"))
                except OSError:
                    pass
                return
            if payload is None:
                return
            try:
                write_frame(self.wfile, answer_query(index, payload))
            except OSError:
                return


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class RetrievalServer:
    """Running server handle; use as a context manager or call close()."""

    def __init__(
        self,
        index: ObjectIndex,
        endpoint: tuple[str, int] = ("127.0.0.1", 0),
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self._server = _ThreadingServer(endpoint, _Handler)
        self._server.index = index  # type: ignore[attr-defined]
        self._server.max_frame = max_frame  # type: ignore[attr-defined]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="factormatch-server", daemon=True
        )

    def start(self) -> "RetrievalServer":
        self._thread.start()
        return self

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        """Block in the calling thread (CLI mode)."""
        self._server.serve_forever()

    def __enter__(self) -> "RetrievalServer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def serve(
    index: ObjectIndex,
    endpoint: tuple[str, int] = ("127.0.0.1", 0),
    max_frame: int = DEFAULT_MAX_FRAME,
) -> RetrievalServer:
    """Bind and start serving; returns the running handle."""
    return RetrievalServer(index, endpoint, max_frame).start()


# --- client ---------------------------------------------------------------


def send_query(
    endpoint: tuple[str, int],
    pca_blob: bytes,
    nmf_blob: bytes,
    eta: int,
    alpha: int,
    timeout: float = DEFAULT_TIMEOUT,
) -> tuple[int, list[tuple[str, float, int]], str]:
    """Send prebuilt blobs; returns the raw (status, entries, error) triple."""
    payload = encode_query(eta, alpha, pca_blob, nmf_blob)
    with socket.create_connection(endpoint, timeout=timeout) as sock:
        stream = sock.makefile("rwb")
        try:
            write_frame(stream, payload)
            response = read_frame(stream)
        finally:
            stream.close()
    if response is None:
        raise ProtocolError("server closed the connection without responding")
    return decode_response(response)


def query_remote(
    endpoint: tuple[str, int],
    m: DescriptorMatrix,
    eta: int = 20,
    alpha: int = 2,
    bits: int = 5,
    k_max: int | None = None,
    base_seed: int = 0,
    timeout: float = DEFAULT_TIMEOUT,
) -> RankedList:
    """Full client pipeline: factorize, quantize, upload, parse the ranking.

    The response carries object metadata only, so entries come back with an
    empty ``image_id``.
    """
    q_pca, q_nmf = client_blobs(m, bits, k_max, base_seed)
    status, entries, error_text = send_query(
        endpoint, codec.encode(q_pca), codec.encode(q_nmf), eta, alpha, timeout
    )
    if status != STATUS_OK:
        raise ServerReportedError(status, error_text)
    return RankedList(
        entries=tuple(RankedEntry(obj, "", score) for obj, score, _ in entries),
        eta=eta,
    )
