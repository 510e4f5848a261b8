"""Multi-process worker group: one forked process per rank, pipe channels.

Selected with SMC2_BACKEND=mpi-like.  Ranks run the same collectives as the
in-process backend; the transport is one unidirectional OS pipe per ordered
rank pair, carrying the same byte frames, so results are bit-compatible
with the thread backend.

Workers are ordinary closures, so the backend requires the fork start
method (Linux).  Worker return values cross back to the parent through a
per-rank result pipe and must be picklable.
"""

from __future__ import annotations

import multiprocessing
import traceback

from .comms import CommError, Communicator, GroupAborted, _validate_size

_JOIN_SECONDS = 600.0


class _PipeGroup:
    """Pipe-backed counterpart of the thread group's send/recv/abort."""

    def __init__(self, size: int, recv_conns: dict, send_conns: dict):
        self.size = size
        self._recv_conns = recv_conns
        self._send_conns = send_conns

    def abort(self, exc: BaseException) -> None:
        # This process holds the only write end of each of its outgoing
        # channels, so closing them delivers EOF to every blocked peer.
        for conn in self._send_conns.values():
            conn.close()
        for conn in self._recv_conns.values():
            conn.close()

    def send(self, src: int, dst: int, raw: bytes) -> None:
        try:
            self._send_conns[dst].send_bytes(raw)
        except (BrokenPipeError, OSError):
            raise GroupAborted("peer channel closed") from None

    def recv(self, src: int, dst: int) -> bytes:
        try:
            return self._recv_conns[src].recv_bytes()
        except (EOFError, OSError):
            raise GroupAborted("another rank failed") from None


def _run_rank(rank, size, channels, result_conn, worker, root_seed):
    recv_conns = {}
    send_conns = {}
    # keep only the ends this rank owns; close every inherited copy so a
    # peer closing its write end actually produces EOF here
    for i in range(size):
        for j in range(size):
            if i == j:
                continue
            reader, writer = channels[i][j]
            if i == rank:
                send_conns[j] = writer
                reader.close()
            elif j == rank:
                recv_conns[i] = reader
                writer.close()
            else:
                reader.close()
                writer.close()
    group = _PipeGroup(size, recv_conns, send_conns)
    comm = Communicator(group, rank)
    try:
        outcome = ("ok", worker(comm, root_seed))
    except GroupAborted:
        outcome = ("aborted", None)
    except BaseException:  # noqa: BLE001 - report, then unblock peers
        group.abort(None)
        outcome = ("error", traceback.format_exc())
    try:
        result_conn.send(outcome)
    finally:
        result_conn.close()


def spawn_processes(size: int, worker, root_seed: int = 0) -> list:
    """Run `worker(comm, root_seed)` on `size` forked ranks.

    Returns worker results ordered by rank, like the thread backend.  The
    first failing rank's traceback is re-raised as a RuntimeError; original
    exception objects stay in the child.
    """
    _validate_size(size)
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        raise CommError("the mpi-like backend requires the fork start method") from None

    channels = [
        [ctx.Pipe(duplex=False) if i != j else None for j in range(size)]
        for i in range(size)
    ]
    result_pipes = [ctx.Pipe(duplex=False) for _ in range(size)]
    procs = []
    for rank in range(size):
        proc = ctx.Process(
            target=_run_rank,
            args=(rank, size, channels, result_pipes[rank][1], worker, root_seed),
            name=f"smc2-rank{rank}",
        )
        proc.start()
        procs.append(proc)
    # parent must drop its copies or peers never observe EOF on abort
    for i in range(size):
        for j in range(size):
            if i != j:
                channels[i][j][0].close()
                channels[i][j][1].close()
    for _, writer in result_pipes:
        writer.close()

    outcomes: list = [None] * size
    try:
        for rank, (reader, _) in enumerate(result_pipes):
            if reader.poll(_JOIN_SECONDS):
                outcomes[rank] = reader.recv()
            else:
                raise RuntimeError(f"rank {rank} produced no result "
                                   f"within {_JOIN_SECONDS:.0f}s")
    finally:
        for reader, _ in result_pipes:
            reader.close()
        for proc in procs:
            proc.join(timeout=5.0)
        for proc in procs:
            if proc.is_alive():
                proc.terminate()
                proc.join()

    for rank, outcome in enumerate(outcomes):
        status, payload = outcome
        if status == "error":
            raise RuntimeError(f"rank {rank} failed:\n{payload}")
    return [payload for _, payload in outcomes]
