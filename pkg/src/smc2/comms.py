"""SPMD worker groups with explicit message-passing collectives.

A group of P workers (P a power of two) runs the same program over private
memories.  Workers exchange data only through the `Communicator` handed to
them at spawn time; there is no shared mutable state.  The default backend
runs ranks as threads inside this process, connected by blocking queues,
which keeps runs deterministic and debuggable.  Setting SMC2_BACKEND to
"mpi-like" selects a multi-process transport with the same interface.

Every payload crosses rank boundaries as an opaque byte sequence in a
length-prefixed little-endian format (64-bit floats and integers), so the
two transports are bit-compatible and a sender can never alias memory held
by a receiver.

Reductions merge per-rank contributions by pairing ranks at distances
1, 2, 4, ... (a fixed binary tree), so floating-point results are
reproducible run to run and, combined with the block-local tree folds in
`numerics`, independent of how many ranks the data is split over.

The communicator counts one "round" per parallel communication step:
log2(P) for each collective, exactly 1 for an exchange_at_distance.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

_POLL_SECONDS = 0.05
_MAX_GROUP_SIZE = 128

_ENV_BACKEND = "SMC2_BACKEND"
_BACKENDS = ("inprocess", "mpi-like")


class CommError(RuntimeError):
    """Misuse of the communication layer (bad sizes, distances, payloads)."""


class GroupAborted(RuntimeError):
    """Raised inside surviving ranks after another rank failed."""


# ---------------------------------------------------------------------------
# Payload codec: length-prefixed little-endian frames.

_T_NONE = b"N"
_T_TRUE = b"T"
_T_FALSE = b"F"
_T_INT = b"I"
_T_FLOAT = b"D"
_T_STR = b"S"
_T_BYTES = b"B"
_T_ARR_F8 = b"f"
_T_ARR_I8 = b"i"
_T_LIST = b"L"
_T_TUPLE = b"U"

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def pack_payload(obj) -> bytes:
    """Serialize a payload to bytes.

    Supported: None, bool, int, float, str, bytes, int64/float64 ndarrays,
    and lists/tuples of supported values.
    """
    out = bytearray()
    _pack_into(out, obj)
    return bytes(out)


def _pack_into(out: bytearray, obj) -> None:
    if obj is None:
        out += _T_NONE
    elif isinstance(obj, bool):
        out += _T_TRUE if obj else _T_FALSE
    elif isinstance(obj, (int, np.integer)):
        out += _T_INT
        out += _I64.pack(int(obj))
    elif isinstance(obj, (float, np.floating)):
        out += _T_FLOAT
        out += _F64.pack(float(obj))
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += _T_STR
        out += _U64.pack(len(raw))
        out += raw
    elif isinstance(obj, bytes):
        out += _T_BYTES
        out += _U64.pack(len(obj))
        out += obj
    elif isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            tag, dtype = _T_ARR_F8, "<f8"
        elif obj.dtype.kind in "iu":
            tag, dtype = _T_ARR_I8, "<i8"
        else:
            raise CommError(f"unsupported array dtype {obj.dtype}")
        arr = np.ascontiguousarray(obj, dtype=dtype)
        out += tag
        out += _U64.pack(arr.ndim)
        for s in arr.shape:
            out += _U64.pack(s)
        out += arr.tobytes()
    elif isinstance(obj, (list, tuple)):
        out += _T_LIST if isinstance(obj, list) else _T_TUPLE
        out += _U64.pack(len(obj))
        for item in obj:
            _pack_into(out, item)
    else:
        raise CommError(f"unsupported payload type {type(obj).__name__}")


def unpack_payload(raw: bytes):
    """Inverse of pack_payload.  Arrays come back as fresh writable copies."""
    obj, offset = _unpack_from(raw, 0)
    if offset != len(raw):
        raise CommError("trailing bytes in payload")
    return obj


def _unpack_from(raw: bytes, offset: int):
    tag = raw[offset:offset + 1]
    offset += 1
    if tag == _T_NONE:
        return None, offset
    if tag == _T_TRUE:
        return True, offset
    if tag == _T_FALSE:
        return False, offset
    if tag == _T_INT:
        return _I64.unpack_from(raw, offset)[0], offset + 8
    if tag == _T_FLOAT:
        return _F64.unpack_from(raw, offset)[0], offset + 8
    if tag in (_T_STR, _T_BYTES):
        (n,) = _U64.unpack_from(raw, offset)
        offset += 8
        chunk = raw[offset:offset + n]
        offset += n
        return (chunk.decode("utf-8") if tag == _T_STR else chunk), offset
    if tag in (_T_ARR_F8, _T_ARR_I8):
        (ndim,) = _U64.unpack_from(raw, offset)
        offset += 8
        shape = []
        for _ in range(ndim):
            (s,) = _U64.unpack_from(raw, offset)
            offset += 8
            shape.append(s)
        dtype = "<f8" if tag == _T_ARR_F8 else "<i8"
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).copy(), offset
    if tag in (_T_LIST, _T_TUPLE):
        (n,) = _U64.unpack_from(raw, offset)
        offset += 8
        items = []
        for _ in range(n):
            item, offset = _unpack_from(raw, offset)
            items.append(item)
        return (items if tag == _T_LIST else tuple(items)), offset
    raise CommError(f"unknown payload tag {tag!r}")


# ---------------------------------------------------------------------------
# Data distribution bookkeeping.


@dataclass(frozen=True)
class GlobalSlice:
    """A rank's contiguous block of a logical global array.

    total:        global item count N
    local_items:  block length n = N / P
    global_offset: index of the block's first item, rank * n
    """

    total: int
    local_items: int
    global_offset: int

    @classmethod
    def for_rank(cls, total: int, size: int, rank: int) -> "GlobalSlice":
        if total % size != 0:
            raise CommError(f"cannot split {total} items over {size} ranks")
        n = total // size
        return cls(total=total, local_items=n, global_offset=rank * n)

    def global_indices(self) -> np.ndarray:
        return np.arange(self.global_offset, self.global_offset + self.local_items)


# ---------------------------------------------------------------------------
# In-process backend: one thread per rank, queue channels.


class _ThreadGroup:
    def __init__(self, size: int):
        self.size = size
        self.channels = [[queue.SimpleQueue() for _ in range(size)] for _ in range(size)]
        self._abort = threading.Event()
        self._error_lock = threading.Lock()
        self.error: BaseException | None = None

    def abort(self, exc: BaseException) -> None:
        with self._error_lock:
            if self.error is None:
                self.error = exc
        self._abort.set()

    def send(self, src: int, dst: int, raw: bytes) -> None:
        self.channels[src][dst].put(raw)

    def recv(self, src: int, dst: int) -> bytes:
        chan = self.channels[src][dst]
        while True:
            try:
                return chan.get(timeout=_POLL_SECONDS)
            except queue.Empty:
                if self._abort.is_set():
                    raise GroupAborted("another rank failed") from None


class Communicator:
    """Per-rank handle for collectives within one worker group."""

    def __init__(self, group, rank: int):
        self._group = group
        self.size = group.size
        self.rank = rank
        self.round_counter = 0
        self._stages = self.size.bit_length() - 1  # log2(P)

    # -- raw point-to-point, used only by the collectives below ------------

    def _send(self, dst: int, obj) -> None:
        self._group.send(self.rank, dst, pack_payload(obj))

    def _recv(self, src: int):
        return unpack_payload(self._group.recv(src, self.rank))

    # -- round accounting ---------------------------------------------------

    def reset_round_counter(self) -> None:
        self.round_counter = 0

    def read_round_counter(self) -> int:
        return self.round_counter

    # -- collectives ---------------------------------------------------------

    def all_reduce_sum(self, value):
        """Elementwise sum of `value` over all ranks, identical on each rank.

        Contributions merge in a fixed binary-tree order (partner distance
        1, 2, 4, ...), each stage adding the lower-ranked block first, so
        the result is bitwise reproducible.
        """
        acc, was_scalar, kind = _as_reduction_array(value)
        for level in range(self._stages):
            d = 1 << level
            partner = self.rank ^ d
            self._send(partner, acc)
            other = self._recv(partner)
            if self.rank & d:
                acc = other + acc
            else:
                acc = acc + other
        self.round_counter += self._stages
        return _from_reduction_array(acc, was_scalar, kind)

    def all_reduce_max(self, value):
        """Elementwise max over all ranks (exact, order-free)."""
        acc, was_scalar, kind = _as_reduction_array(value)
        for level in range(self._stages):
            partner = self.rank ^ (1 << level)
            self._send(partner, acc)
            other = self._recv(partner)
            acc = np.maximum(acc, other)
        self.round_counter += self._stages
        return _from_reduction_array(acc, was_scalar, kind)

    def exclusive_scan_with_total(self, value):
        """Exclusive prefix sum over ranks, plus the grand total.

        Rank p receives the elementwise sum of the values on ranks 0..p-1
        (zero on rank 0) together with the sum over all ranks.  Prefixes
        accumulate left-sibling blocks from the largest down, continuing
        the same summation tree `all_reduce_sum` uses.
        """
        totals, was_scalar, kind = _as_reduction_array(value)
        partner_blocks = []
        for level in range(self._stages):
            d = 1 << level
            partner = self.rank ^ d
            self._send(partner, totals)
            other = self._recv(partner)
            partner_blocks.append((d, other))
            if self.rank & d:
                totals = other + totals
            else:
                totals = totals + other
        prefix = np.zeros_like(totals)
        for d, block in reversed(partner_blocks):
            if self.rank & d:
                prefix = prefix + block
        self.round_counter += self._stages
        return (
            _from_reduction_array(prefix, was_scalar, kind),
            _from_reduction_array(totals, was_scalar, kind),
        )

    def exclusive_scan_sum(self, local_total):
        """Sum of local_total over ranks below this one (zero on rank 0)."""
        prefix, _ = self.exclusive_scan_with_total(local_total)
        return prefix

    def broadcast(self, root: int, payload):
        """Send `payload` from `root` to every rank via a binary tree."""
        if not (0 <= root < self.size):
            raise CommError(f"broadcast root {root} out of range")
        if self.size == 1:
            return unpack_payload(pack_payload(payload))
        vrank = (self.rank - root) % self.size
        current = payload if vrank == 0 else None
        for level in range(self._stages):
            d = 1 << level
            if vrank < d:
                self._send((vrank + d + root) % self.size, current)
            elif vrank < 2 * d:
                current = self._recv((vrank - d + root) % self.size)
        self.round_counter += self._stages
        if vrank == 0:
            current = unpack_payload(pack_payload(current))
        return current

    def exchange_at_distance(self, d: int, outgoing, direction: str = "down"):
        """Rotate payloads between ranks at distance d in one round.

        direction "down": this rank's payload arrives at (rank - d) mod P
        and the returned payload comes from (rank + d) mod P.  "up" is the
        mirror image.  Costs exactly one round.
        """
        if direction not in ("down", "up"):
            raise CommError(f"direction must be 'down' or 'up', got {direction!r}")
        if not (1 <= d < self.size):
            raise CommError(f"distance {d} invalid for group size {self.size}")
        if direction == "down":
            dst = (self.rank - d) % self.size
            src = (self.rank + d) % self.size
        else:
            dst = (self.rank + d) % self.size
            src = (self.rank - d) % self.size
        self._send(dst, outgoing)
        incoming = self._recv(src)
        self.round_counter += 1
        return incoming


def _as_reduction_array(value):
    """Coerce a reduction operand to a float64 or int64 ndarray."""
    was_scalar = np.isscalar(value) or (isinstance(value, np.ndarray) and value.ndim == 0)
    arr = np.atleast_1d(np.asarray(value))
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.int64)
        kind = "i"
    elif arr.dtype.kind == "f":
        arr = arr.astype(np.float64, copy=True)
        kind = "f"
    else:
        raise CommError(f"cannot reduce dtype {arr.dtype}")
    return arr, was_scalar, kind


def _from_reduction_array(arr, was_scalar: bool, kind: str):
    if was_scalar:
        return int(arr[0]) if kind == "i" else float(arr[0])
    return arr


def _validate_size(size: int) -> None:
    if size < 1 or (size & (size - 1)) != 0:
        raise CommError(f"group size must be a power of two, got {size}")
    if size > _MAX_GROUP_SIZE:
        raise CommError(f"group size {size} exceeds limit {_MAX_GROUP_SIZE}")


def _spawn_threads(size: int, worker, root_seed: int) -> list:
    group = _ThreadGroup(size)
    results = [None] * size

    def runner(rank: int) -> None:
        comm = Communicator(group, rank)
        try:
            results[rank] = worker(comm, root_seed)
        except GroupAborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - must unblock peers
            group.abort(exc)

    threads = [
        threading.Thread(target=runner, args=(r,), name=f"smc2-rank{r}", daemon=True)
        for r in range(size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if group.error is not None:
        raise group.error
    return results


def spawn_group(size: int, worker, root_seed: int = 0) -> list:
    """Run `worker(comm, root_seed)` on `size` ranks; return results by rank.

    The transport comes from the SMC2_BACKEND environment variable:
    "inprocess" (default) runs ranks as threads of this process, "mpi-like"
    runs them as separate processes.  A failure on any rank aborts the
    group and re-raises the first error in the caller.
    """
    _validate_size(size)
    backend = os.environ.get(_ENV_BACKEND, "inprocess")
    if backend == "inprocess":
        return _spawn_threads(size, worker, root_seed)
    if backend == "mpi-like":
        from . import mp_backend

        return mp_backend.spawn_processes(size, worker, root_seed)
    raise CommError(
        f"unknown backend {backend!r} in {_ENV_BACKEND}; expected one of {_BACKENDS}"
    )
