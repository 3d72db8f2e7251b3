import dataclasses
import threading
import time

import numpy as np
import pytest

from qkd_twin.encoding import FrameBatch, pack_symbols
from qkd_twin.memory import StreamId, Underrun
from qkd_twin.network import BoardServer, CommandClient, PcClient, SessionError, send_report
from qkd_twin.rng_source import DetectionReport
from qkd_twin.stream_engine import RingBufferConfig
from qkd_twin.transport import HEADER_SIZE, DataFrame, EndpointConfig, encode_frame

SMALL = RingBufferConfig(block_bytes=256, n_blocks=3, chunk_bytes=64)
SLOTS_PER_BLOCK = 1024


def wait_until(predicate, timeout=10):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise TimeoutError("condition not reached")
        time.sleep(0.01)


def block_codes(stream, seq):
    rng = np.random.default_rng([int(stream), seq])
    return rng.integers(0, 3, SLOTS_PER_BLOCK, dtype=np.uint8)


@pytest.fixture()
def board():
    batches = []
    server = BoardServer(
        EndpointConfig(command_port=0, pol_port=0, decoy_port=0, detections_port=0, token="k"),
        SMALL,
        sink=batches.append,
    )
    server.batches = batches
    server.listen()
    yield server
    server.close()


@pytest.fixture()
def pc(board):
    requests = []
    reports = []
    client = PcClient(
        board.endpoint,
        on_need_block=lambda stream, seq: requests.append((stream, seq)),
        on_detections=reports.append,
    )
    client.requests = requests
    client.reports = reports
    client.open()
    yield client
    client.close()


def occupancy(client, stream="pol"):
    return client.request("STATUS").params["counters"][stream]["occupancy"]


def test_bad_token(board):
    endpoint = dataclasses.replace(board.endpoint, token="wrong")
    client = PcClient(endpoint, on_need_block=lambda stream, seq: None)
    with pytest.raises(SessionError, match="token"):
        client.open()
    client.close()


def test_start_requires_preload(pc):
    with pytest.raises(SessionError, match="NotReady"):
        pc.request("START")


def test_unknown_parameter(pc):
    with pytest.raises(SessionError, match="Unknown"):
        pc.request("SET_PARAM", gain=2)
    with pytest.raises(SessionError):
        pc.request("SET_PARAM", slot_ticks=2)


def test_full_session(board, pc):
    # the board asks for the whole buffer after the handshake
    wait_until(lambda: len(pc.requests) == 6)
    assert sorted(pc.requests) == [(s, q) for s in StreamId for q in range(3)]
    for stream, seq in pc.requests:
        pc.send_frame(DataFrame(stream, seq, pack_symbols(block_codes(stream, seq))))
    wait_until(lambda: occupancy(pc) == 3 and occupancy(pc, "decoy") == 3)

    reply = pc.request("SET_PARAM", run_slots=2 * SLOTS_PER_BLOCK, pol_offset=2)
    assert reply.params["run_slots"] == 2 * SLOTS_PER_BLOCK
    pc.request("START")
    assert board.finished.wait(10)
    status = pc.request("STATUS").params
    assert status["slot_index"] == 2 * SLOTS_PER_BLOCK
    assert not status["running"]
    assert status["underruns"] == 0
    assert status["errors"] == []

    emitted = FrameBatch.concatenate(board.batches)
    expected = np.concatenate([block_codes(StreamId.POL, q) for q in range(2)])
    np.testing.assert_array_equal(emitted.pol, expected)
    # both consumed blocks were requested again
    wait_until(lambda: len(pc.requests) == 10)

    with pytest.raises(SessionError, match="locked"):
        pc.request("SET_PARAM", pol_offset=0)
    wire_bytes, control_bytes = board.traffic()
    assert sum(board.data_bytes.values()) == 6 * SMALL.block_bytes
    assert wire_bytes == 6 * (HEADER_SIZE + SMALL.block_bytes)
    assert control_bytes > 0


def test_sequence_gap_aborts(board, pc):
    wait_until(lambda: len(pc.requests) == 6)
    pc.send_frame(DataFrame(StreamId.POL, 1, bytes(SMALL.block_bytes)))
    wait_until(lambda: board.sequence_gaps == 1)
    assert "aborted" in board.errors[0]


def test_detections_relayed(board, pc):
    receiver = CommandClient(board.endpoint.host, board.endpoint.detections_port, name="rx")
    receiver.connect()
    try:
        reply = send_report(receiver, DetectionReport([3, 8], basis=[0, 1], covered_until=10))
        assert reply.params["count"] == 2
        wait_until(lambda: len(pc.reports) == 1)
    finally:
        receiver.close()
    report = pc.reports[0]
    assert report.indices.tolist() == [3, 8]
    assert report.covered_until == 10


def test_frames_before_gap_ingested(board, pc):
    wait_until(lambda: len(pc.requests) == 6)
    frames = [
        DataFrame(StreamId.POL, seq, pack_symbols(block_codes(StreamId.POL, seq)))
        for seq in (0, 1, 5)
    ]
    pc.data[StreamId.POL].sendall(b"".join(encode_frame(f) for f in frames))
    wait_until(lambda: board.sequence_gaps == 1)
    engine = board.pair[StreamId.POL]
    assert engine.ingest.delivered == 2
    assert engine.buffer.occupancy() == 2
    assert board.data_bytes[StreamId.POL] == 2 * SMALL.block_bytes


def send_block(client, stream, seq):
    client.send_frame(DataFrame(stream, seq, pack_symbols(block_codes(stream, seq))))


@pytest.fixture()
def feeder(pc):
    """Answers every block request from a thread, the way the source node does."""
    stop = threading.Event()

    def serve():
        served = 0
        while not stop.is_set():
            try:
                while served < len(pc.requests):
                    send_block(pc, *pc.requests[served])
                    served += 1
            except OSError:
                return
            time.sleep(1e-3)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    wait_until(lambda: occupancy(pc) == 3 and occupancy(pc, "decoy") == 3)
    yield pc
    stop.set()
    thread.join(1)


class TestRunControl:
    def test_stop_mid_run(self, board, feeder):
        held = threading.Event()
        release = threading.Event()

        def held_sink(batch):
            board.batches.append(batch)
            if len(board.batches) == 8:
                held.set()
                release.wait(5)

        board.sink = held_sink
        feeder.request("START")
        assert held.wait(10)
        t0 = time.perf_counter()
        status = feeder.request("STOP").params
        # the emulator is still inside its last batch
        assert time.perf_counter() - t0 < 0.1
        assert not status["running"]
        assert not status["finished"]
        release.set()
        wait_until(lambda: feeder.request("STATUS").params["finished"])

        status = feeder.request("STATUS").params
        slots = status["slot_index"]
        assert slots == 8 * 256 == len(FrameBatch.concatenate(board.batches).pol)
        halves_read = slots // 256

        def settled():
            counters = feeder.request("STATUS").params["counters"]
            return all(c["chunks_fed"] == halves_read + 2 for c in counters.values())

        wait_until(settled)
        wait_until(lambda: all(e.ingest.delivered == 5 for e in board.pair))
        for name, c in feeder.request("STATUS").params["counters"].items():
            # two blocks of four chunks went through the memory
            assert c["blocks_consumed"] == 2, name
            assert c["requested"] == c["blocks_ingested"] == c["delivered"] == 5
            assert c["occupancy"] == 3
            assert c["underruns"] == 0
        assert board.underruns == 0

    def test_connection_loss_aborts_run(self, board, feeder):
        feeder.request("START")
        wait_until(lambda: len(board.batches) > 4)
        feeder.close()
        assert board.finished.wait(10)
        assert not board.pair.qsc.state.running
        assert any("Command session lost" in e for e in board.errors)
        assert board.pair.qsc.state.slot_index > 0

    def test_status_latency_under_load(self, board, feeder):
        feeder.request("START")
        wait_until(lambda: len(board.batches) > 4)
        latencies = []
        for _ in range(20):
            t0 = time.perf_counter()
            status = feeder.request("STATUS").params
            latencies.append(time.perf_counter() - t0)
            assert status["running"]
            time.sleep(0.01)
        assert max(latencies) < 0.1
        # the data plane kept moving while STATUS was answered
        assert board.pair[StreamId.POL].ingest.delivered > 3
        feeder.request("STOP")


def test_buffer_full_throttles_sender(board, pc):
    wait_until(lambda: len(pc.requests) == 6)
    for seq in range(6):
        for stream in StreamId:
            send_block(pc, stream, seq)
    wait_until(lambda: occupancy(pc) == 3 and occupancy(pc, "decoy") == 3)
    time.sleep(0.2)
    # the reader holds the fourth block back instead of dropping or overwriting
    for engine in board.pair:
        assert engine.ingest.delivered == 3
        assert engine.buffer.occupancy() == 3
    assert board.errors == []

    pc.request("SET_PARAM", run_slots=6 * SLOTS_PER_BLOCK)
    pc.request("START")
    assert board.finished.wait(10)
    assert board.errors == []
    emitted = FrameBatch.concatenate(board.batches)
    for stream, codes in ((StreamId.POL, emitted.pol), (StreamId.DECOY, emitted.decoy)):
        expected = np.concatenate([block_codes(stream, q) for q in range(6)])
        np.testing.assert_array_equal(codes, expected)


class TestRealTimeEmulator:
    # 128-byte blocks are two chunks, so priming empties the first block
    CFG = RingBufferConfig(block_bytes=128, n_blocks=3, chunk_bytes=64)

    def primed(self, n_blocks):
        board = BoardServer(EndpointConfig(), self.CFG, real_time=True)
        for engine in board.pair:
            for seq in range(n_blocks):
                engine.ingest.on_frame(seq, pack_symbols(block_codes(engine.stream_id, seq)[:512]))
        board.pair.qsc.state = board._qsc_state(board.params)
        board.pair.prime()
        board.pair.qsc.start()
        # read both primed halves, so the memories wait for a refill
        for _ in range(2):
            board.pair.qsc.advance(board.pair.qsc.slots_per_half)
        return board

    def test_late_refill_is_waited_for(self):
        board = self.primed(n_blocks=3)

        def late_feed():
            time.sleep(0.05)
            for engine in board.pair:
                engine.feed.process_interrupts()

        thread = threading.Thread(target=late_feed)
        thread.start()
        t0 = time.perf_counter()
        assert board._await_halves()
        assert time.perf_counter() - t0 >= 0.04
        thread.join()
        assert all(e.buffer.underruns == 0 for e in board.pair)

    def test_empty_buffer_underruns(self):
        board = self.primed(n_blocks=1)
        with pytest.raises(Underrun, match="staging buffer is empty"):
            board._await_halves()
        assert board.pair[StreamId.POL].buffer.underruns == 1

    def test_logical_time_waits_for_data(self):
        board = self.primed(n_blocks=1)
        board.real_time = False
        timer = threading.Timer(0.05, board.pair.qsc.stop)
        timer.start()
        # an empty buffer only holds the emulator back until the run is stopped
        assert not board._await_halves()
        timer.join()
        assert all(e.buffer.underruns == 0 for e in board.pair)
