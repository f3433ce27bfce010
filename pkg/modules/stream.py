"""Real-time classification of framed two-channel PCM.

Wire format of one message, all little-endian:

    "GPUF" | n: uint32 | n acoustic int16 | n vibration int16

Messages are decoded, featurised and classified strictly in arrival order.
Every message yields one NDJSON line on the output: a prediction, or an
error record carrying the byte offset where the bad message began.
"""

import json
import logging
import socket
import struct
import time
from dataclasses import dataclass

from modules.dsp import extract_features
from modules.errors import DiagnosisError, ModelMismatchError, ParameterError
from modules.neuralnet import predict
from modules.signals import (
    DEFAULT_FRAME_LEN,
    DEFAULT_SAMPLE_RATE,
    FULL_SCALE_VOLTS,
    N_FEATURES,
    Channel,
    FramePair,
    encode_pcm,
    ingest_pcm,
    is_power_of_two,
)

logger = logging.getLogger(__name__)

MAGIC = b"GPUF"
HEADER = struct.Struct("<4sI")
CHUNK_SIZE = 1 << 16


@dataclass(frozen=True)
class FrameMessage:
    index: int
    offset: int
    n: int
    payload: bytes


@dataclass(frozen=True)
class StreamFault:
    """A message the decoder had to skip; index is None for bytes outside any message"""

    index: int
    kind: str
    offset: int

    def to_dict(self):
        return {"frame": self.index, "error": self.kind, "offset": self.offset}


def encode_message(pair, full_scale_volts=FULL_SCALE_VOLTS):
    """Serialise a frame pair as one wire message"""
    n = len(pair.acoustic)
    return (
        HEADER.pack(MAGIC, n)
        + encode_pcm(pair.acoustic, full_scale_volts)
        + encode_pcm(pair.vibration, full_scale_volts)
    )


class StreamDecoder:
    """Incremental message decoder with magic-marker resynchronisation.

    A truncated message is detected when a valid header appears inside the
    payload it claims; decoding resumes at that header. A payload that
    happens to contain such a header is misread the same way.
    """

    def __init__(self, max_frame_len=DEFAULT_FRAME_LEN):
        if not is_power_of_two(max_frame_len) or max_frame_len < 2:
            raise ParameterError(f"max_frame_len must be a power of two >= 2, got {max_frame_len}")
        self.max_frame_len = max_frame_len
        self._buffer = bytearray()
        self._offset = 0
        self._next_index = 0
        self._in_garbage = False

    @property
    def frames_seen(self):
        return self._next_index

    def _valid_length(self, n):
        return 2 <= n <= self.max_frame_len and is_power_of_two(n)

    def _consume(self, count):
        del self._buffer[:count]
        self._offset += count

    def _take_index(self):
        index = self._next_index
        self._next_index += 1
        return index

    def _resync_point(self, size, final):
        """Position of the first valid header inside the claimed payload.

        -1 when there is none, None when more bytes are needed to decide.
        """
        buf = self._buffer
        pos = buf.find(MAGIC, HEADER.size, size)
        while pos != -1:
            if pos + HEADER.size > len(buf):
                return -1 if final else None
            _, n = HEADER.unpack_from(buf, pos)
            if self._valid_length(n):
                return pos
            pos = buf.find(MAGIC, pos + 1, size)
        return -1

    def _skip_garbage(self, final):
        """Drop bytes before the next magic marker; returns faults to report"""
        buf = self._buffer
        pos = buf.find(MAGIC)
        if pos == 0:
            self._in_garbage = False
            return []
        if pos == -1:
            keep = 0
            if not final:
                keep = next((k for k in range(len(MAGIC) - 1, 0, -1) if buf.endswith(MAGIC[:k])), 0)
            pos = len(buf) - keep
        if pos == 0:
            return []
        faults = []
        if not self._in_garbage:
            faults.append(StreamFault(None, "bad_magic", self._offset))
            self._in_garbage = True
        self._consume(pos)
        return faults

    def _drain(self, final):
        events = []
        while self._buffer:
            events.extend(self._skip_garbage(final))
            if not self._buffer.startswith(MAGIC) or len(self._buffer) < HEADER.size:
                break
            _, n = HEADER.unpack_from(self._buffer, 0)
            if not self._valid_length(n):
                events.append(StreamFault(self._take_index(), "bad_length", self._offset))
                self._consume(len(MAGIC))
                # the rest of this message is reported by the fault above
                self._in_garbage = True
                continue
            size = HEADER.size + 4 * n
            resync = self._resync_point(size, final)
            if resync is None:
                break
            if resync > 0:
                events.append(StreamFault(self._take_index(), "truncated", self._offset))
                self._consume(resync)
                continue
            if len(self._buffer) < size:
                break
            payload = bytes(self._buffer[HEADER.size:size])
            events.append(FrameMessage(self._take_index(), self._offset, n, payload))
            self._consume(size)
        return events

    def feed(self, data):
        """Append bytes; return every message or fault that is now complete"""
        self._buffer.extend(data)
        return self._drain(final=False)

    def finish(self):
        """End of stream: flush what is decidable and report any leftover bytes"""
        events = self._drain(final=True)
        if self._buffer:
            if self._buffer.startswith(MAGIC):
                events.append(StreamFault(self._take_index(), "truncated", self._offset))
            elif not self._in_garbage:
                events.append(StreamFault(None, "bad_magic", self._offset))
            self._consume(len(self._buffer))
        return events


class StreamClassifier:
    """Featurise and classify decoded messages with a loaded model"""

    def __init__(self, model, sample_rate=DEFAULT_SAMPLE_RATE, full_scale_volts=FULL_SCALE_VOLTS,
                 max_frame_len=DEFAULT_FRAME_LEN, clock=time.perf_counter_ns):
        if model.architecture.raw_width != N_FEATURES:
            raise ModelMismatchError(
                f"Model expects {model.architecture.raw_width} inputs; stream frames yield {N_FEATURES} features"
            )
        self.model = model
        self.sample_rate = sample_rate
        self.full_scale_volts = full_scale_volts
        self.max_frame_len = max_frame_len
        self._clock = clock

    def decoder(self):
        return StreamDecoder(self.max_frame_len)

    def classify(self, message):
        started = self._clock()
        half = 2 * message.n
        pair = FramePair(
            ingest_pcm(message.payload[:half], Channel.ACOUSTIC, self.sample_rate, self.full_scale_volts),
            ingest_pcm(message.payload[half:], Channel.VIBRATION, self.sample_rate, self.full_scale_volts),
        )
        label, probs = predict(self.model, extract_features(pair))
        return {
            "frame": message.index,
            "label": label.text,
            "probs": [float(p) for p in probs],
            "latency_us": (self._clock() - started) // 1000,
        }

    def handle(self, event):
        """One output record for a decoder event"""
        if isinstance(event, StreamFault):
            logger.warning("Skipped stream bytes: %s at offset %d (frame %s)", event.kind, event.offset, event.index)
            return event.to_dict()
        try:
            return self.classify(event)
        except DiagnosisError as e:
            logger.warning("Frame %d failed: %s", event.index, e)
            return {"frame": event.index, "error": type(e).__name__, "offset": event.offset}

    def run(self, chunks, out):
        """Classify a byte-chunk iterable, writing one NDJSON line per message"""
        decoder = self.decoder()
        stats = {"frames": 0, "errors": 0}

        def emit(events):
            for event in events:
                record = self.handle(event)
                stats["errors" if "error" in record else "frames"] += 1
                out.write(json.dumps(record) + "\n")
            out.flush()

        for chunk in chunks:
            emit(decoder.feed(chunk))
        emit(decoder.finish())
        logger.info("Stream closed: %d frames classified, %d errors", stats["frames"], stats["errors"])
        return stats


def read_chunks(stream, chunk_size=CHUNK_SIZE):
    """Yield whatever is available, up to chunk_size bytes, until EOF"""
    read = getattr(stream, "read1", stream.read)
    while True:
        chunk = read(chunk_size)
        if not chunk:
            return
        yield chunk


def serve_stdin(classifier, stream, out):
    return classifier.run(read_chunks(stream), out)


def serve_tcp(classifier, host, port, out, max_connections=None, on_listen=None):
    """Accept one connection at a time; each is a separate stream with its own frame numbering"""
    served = []
    with socket.create_server((host, port)) as server:
        bound = server.getsockname()[:2]
        logger.info("Listening on %s:%d", *bound)
        if on_listen is not None:
            on_listen(bound)
        while max_connections is None or len(served) < max_connections:
            conn, peer = server.accept()
            logger.info("Connection from %s:%d", *peer[:2])
            with conn, conn.makefile("rb") as reader:
                served.append(classifier.run(read_chunks(reader), out))
    return served
