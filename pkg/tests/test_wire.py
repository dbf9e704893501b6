import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fuzz import VARIANTS, random_message
from _transcript import DOC, frames_from_doc, session
from vmguard.detection import Verdict
from vmguard.errors import IncompleteFrame, MalformedPayload, OversizeFrame
from vmguard.wire import (
    Ack,
    AccessDenied,
    FrameDecoder,
    InfectionReport,
    canonical_bytes,
    decode_frame,
    encode_frame,
    message_from_dict,
    message_to_dict,
    parse_message,
)


@pytest.mark.parametrize("cls", VARIANTS, ids=lambda c: c.__name__)
def test_round_trip_every_variant(cls):
    r = random.Random(cls.__name__)
    for _ in range(50):
        msg = random_message(r, cls)
        decoded, rest = decode_frame(encode_frame(msg))
        assert decoded == msg and rest == b""


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_fuzzed(seed):
    msg = random_message(random.Random(seed))
    assert decode_frame(encode_frame(msg))[0] == msg


def test_frame_layout():
    frame = encode_frame(Ack(seq=1, sender="x", ref_id=3))
    body = b'{"detail":"","ref_id":3,"sender":"x","seq":1,"type":"Ack"}'
    assert frame == struct.pack(">I", len(body)) + body


def test_truncated_frame():
    buf = struct.pack(">I", 100) + b"x" * 40
    with pytest.raises(IncompleteFrame):
        decode_frame(buf)


@pytest.mark.parametrize("n", [0, 1, 3])
def test_short_header(n):
    with pytest.raises(IncompleteFrame):
        decode_frame(b"\x00" * n)


def test_concatenated_frames():
    a = encode_frame(Ack(seq=1, sender="s", ref_id=1))
    b = encode_frame(AccessDenied(seq=2, sender="s", node_id="n", reason="UnknownKey"))
    msg, rest = decode_frame(a + b)
    assert msg == Ack(seq=1, sender="s", ref_id=1)
    assert rest == b


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.binary(min_size=1, max_size=16))
def test_decode_stops_at_declared_length(seed, sentinel):
    msg = random_message(random.Random(seed))
    decoded, rest = decode_frame(encode_frame(msg) + sentinel)
    assert decoded == msg and rest == sentinel


def test_oversize_declared_length():
    with pytest.raises(OversizeFrame):
        decode_frame(struct.pack(">I", 1025) + b"{}", max_size=1024)


def test_oversize_encode():
    with pytest.raises(OversizeFrame):
        encode_frame(Ack(detail="x" * 200), max_size=100)


@pytest.mark.parametrize(
    "body",
    [
        b"not json",
        b"[1,2]",
        b'{"type":"Nope","seq":1,"sender":""}',
        b'{"type":"Ack","seq":1,"sender":""}',
        b'{"type":"Ack","seq":"1","sender":"","ref_id":1,"detail":""}',
        b'{"type":"Ack","seq":1,"sender":"","ref_id":1,"detail":"","extra":0}',
        b'{"type":"AttestationReport","seq":1,"sender":"","node_id":"n","security_vm_hash":"zz","signature":""}',
        b"\xff\xfe",
    ],
)
def test_malformed_payload(body):
    with pytest.raises(MalformedPayload):
        decode_frame(struct.pack(">I", len(body)) + body)


def test_field_order_does_not_matter():
    a = InfectionReport(seq=4, sender="n1", node_id="n1", vm_id="v", verdict=Verdict(True, "W1"), halt_tick=7)
    b = InfectionReport(halt_tick=7, verdict=Verdict(True, "W1"), vm_id="v", node_id="n1", sender="n1", seq=4)
    d = message_to_dict(a)
    permuted = {k: d[k] for k in reversed(list(d))}
    assert canonical_bytes(a) == canonical_bytes(b) == canonical_bytes(message_from_dict(permuted))


def test_non_canonical_input_still_parses():
    body = b'{ "type": "Ack", "seq": 1, "sender": "", "detail": "", "ref_id": 2 }'
    assert parse_message(body) == Ack(seq=1, ref_id=2)


class TestFrameDecoder:
    def test_byte_at_a_time(self):
        msgs = [random_message(random.Random(i)) for i in range(5)]
        stream = b"".join(encode_frame(m) for m in msgs)
        dec, out = FrameDecoder(), []
        for i in range(len(stream)):
            out += dec.feed(stream[i:i + 1])
        assert out == msgs and dec.pending == 0

    def test_partial_frame_is_buffered(self):
        frame = encode_frame(Ack(ref_id=1))
        dec = FrameDecoder()
        assert dec.feed(frame[:-1]) == []
        assert dec.pending == len(frame) - 1
        assert dec.feed(frame[-1:]) == [Ack(ref_id=1)]


class TestGoldenTranscript:
    def test_bytes_match_document(self):
        frames = frames_from_doc(DOC.read_text())
        produced = [encode_frame(m) for _, m in session()]
        assert len(frames) == len(produced) == 8
        for i, (doc, now) in enumerate(zip(frames, produced), 1):
            assert doc == now, f"frame {i} differs"

    def test_document_frames_decode(self):
        expected = [m for _, m in session()]
        assert [decode_frame(f)[0] for f in frames_from_doc(DOC.read_text())] == expected

    def test_sequence_numbers_increase_per_sender(self):
        last: dict[str, int] = {}
        for _, msg in session():
            if msg.sender in last:
                assert msg.seq > last[msg.sender]
            last[msg.sender] = msg.seq
