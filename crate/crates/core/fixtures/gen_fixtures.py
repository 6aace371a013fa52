#!/usr/bin/env python3
"""Regenerates the capture and knowledge-base fixtures in this directory.

Only the standard library is used so the fixtures do not depend on the code
under test. Run from any directory: python3 gen_fixtures.py
"""

import json
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))

CLIENT = "10.0.0.5"
PLC = "10.0.0.10"
WEB = "10.0.0.20"


def ip_bytes(addr):
    return bytes(int(p) for p in addr.split("."))


def checksum(data):
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def packet(src, sport, dst, dport, payload, seq=1, flags=0x18):
    tcp = struct.pack("!HHIIBBHHH", sport, dport, seq, 0, 5 << 4, flags, 8192, 0, 0)
    total = 20 + len(tcp) + len(payload)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, 6, 0, ip_bytes(src), ip_bytes(dst))
    ip = ip[:10] + struct.pack("!H", checksum(ip)) + ip[12:]
    eth = b"\x00\x11\x22\x33\x44\x55" + b"\x66\x77\x88\x99\xaa\xbb" + b"\x08\x00"
    return eth + ip + tcp + payload


def write_pcap(path, records):
    """records: list of (timestamp_us, frame_bytes), written in the given order."""
    with open(path, "wb") as f:
        f.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        for ts, frame in records:
            f.write(struct.pack("<IIII", ts // 1_000_000, ts % 1_000_000, len(frame), len(frame)))
            f.write(frame)


def mbap(tid, unit, pdu):
    return struct.pack("!HHHB", tid, 0, len(pdu) + 1, unit) + pdu


def read_req(fc, addr, qty):
    return struct.pack("!BHH", fc, addr, qty)


def write_single(fc, addr, value):
    return struct.pack("!BHH", fc, addr, value)


def write_coils(addr, qty):
    nbytes = (qty + 7) // 8
    data = bytes((0x55 ^ i) & 0xFF for i in range(nbytes))
    return struct.pack("!BHHB", 15, addr, qty, nbytes) + data


def write_registers(addr, values):
    data = b"".join(struct.pack("!H", v) for v in values)
    return struct.pack("!BHHB", 16, addr, len(values), len(data)) + data


def reply_for(tid, unit, pdu):
    fc = pdu[0]
    if fc in (1, 2):
        qty = struct.unpack("!H", pdu[3:5])[0]
        n = (qty + 7) // 8
        body = bytes([fc, n]) + bytes(n)
    elif fc in (3, 4):
        qty = struct.unpack("!H", pdu[3:5])[0]
        body = bytes([fc, 2 * qty]) + bytes(2 * qty)
    elif fc in (5, 6):
        body = pdu[:5]
    elif fc in (15, 16):
        body = pdu[:5]
    else:
        body = bytes([fc | 0x80, 1])
    return mbap(tid, unit, body)


def modbus_requests():
    """50 requests from an HMI polling and writing a PLC."""
    reqs = []
    tid = 0
    plan = [
        (1, read_req(3, 0, 10)),
        (1, read_req(3, 0, 10)),
        (1, read_req(3, 100, 1)),
        (1, read_req(3, 1000, 125)),
        (1, read_req(3, 40000, 20)),
        (1, read_req(1, 0, 16)),
        (1, read_req(1, 500, 2000)),
        (1, read_req(2, 0, 8)),
        (1, read_req(2, 2000, 64)),
        (1, read_req(4, 0, 2)),
        (1, read_req(4, 30000, 50)),
        (1, write_single(5, 10, 0xFF00)),
        (1, write_single(5, 10, 0x0000)),
        (1, write_single(6, 1, 1234)),
        (1, write_single(6, 4000, 0)),
        (1, write_coils(20, 10)),
        (1, write_coils(0, 1)),
        (1, write_registers(200, [1, 2])),
        (1, write_registers(5000, list(range(10)))),
        (0, write_single(6, 7, 99)),
        (17, read_req(3, 0, 4)),
        (247, read_req(4, 12, 3)),
        (1, bytes([0x2B, 0x0E, 0x01, 0x00])),  # device identification, outside the spec
        (1, read_req(3, 10, 1)),
        (1, read_req(3, 11, 1)),
    ]
    while len(reqs) < 50:
        unit, pdu = plan[len(reqs) % len(plan)]
        if len(reqs) == 1:
            tid_used = 0  # same field map as request 0 once the transaction id repeats
        else:
            tid_used = tid
        reqs.append(mbap(tid_used, unit, pdu))
        tid = tid + 1 if len(reqs) < 40 else tid + 301
    return reqs


def gen_modbus_pcap():
    records = []
    ts = 1_700_000_000_000_000
    for i, req in enumerate(modbus_requests()):
        sport = 50000 + i
        if i % 10 == 0:
            records.append((ts, packet(CLIENT, sport, PLC, 502, b"", seq=0, flags=0x02)))
            ts += 200
        records.append((ts, packet(CLIENT, sport, PLC, 502, req)))
        ts += 1500
        tid, _, _, unit = struct.unpack("!HHHB", req[:7])
        records.append((ts, packet(PLC, 502, CLIENT, sport, reply_for(tid, unit, req[7:]))))
        ts += 98_500
    # two requests written out of order to exercise timestamp sorting
    records[3], records[5] = records[5], records[3]
    write_pcap(os.path.join(HERE, "modbus_50.pcap"), records)
    return records


def gen_mixed_pcap():
    records = []
    ts = 1_700_000_100_000_000
    reqs = modbus_requests()[:10]
    for i in range(10):
        records.append((ts, packet(CLIENT, 51000 + i, PLC, 502, reqs[i])))
        ts += 1000
        if i % 2 == 0:
            http = b"GET /status HTTP/1.1\r\nHost: plc\r\n\r\n"
            records.append((ts, packet(CLIENT, 52000 + i, WEB, 80, http)))
            ts += 1000
            records.append((ts, packet(WEB, 80, CLIENT, 52000 + i, b"HTTP/1.1 200 OK\r\n\r\n")))
            ts += 1000
    write_pcap(os.path.join(HERE, "mixed_ports.pcap"), records)


def gen_hexlines():
    lines = ["# timestamp_ms src dst hex"]
    for i, req in enumerate(modbus_requests()[:12]):
        lines.append("%d %s:%d %s:502 %s" % (1000 + 100 * i, CLIENT, 53000 + i, PLC, req.hex()))
    lines.append("2300 %s:80 %s:53100 485454502f312e31" % (WEB, CLIENT))
    with open(os.path.join(HERE, "modbus_capture.hexlines"), "w") as f:
        f.write("\n".join(lines) + "\n")


FUNCTION_CODES = [
    (1, "Read Coils", "Reads 1 to 2000 contiguous coil states starting at start_address. The request PDU is function code, start address (2 bytes) and quantity of coils (2 bytes). The reply packs coil states into ceil(quantity/8) bytes."),
    (2, "Read Discrete Inputs", "Reads 1 to 2000 contiguous discrete inputs. Request layout matches Read Coils; the reply packs input states into ceil(quantity/8) bytes."),
    (3, "Read Holding Registers", "Reads the contents of 1 to 125 contiguous holding registers. The request specifies the starting register address and the number of registers; the reply carries 2 bytes per register."),
    (4, "Read Input Registers", "Reads 1 to 125 contiguous input registers. Request layout matches Read Holding Registers."),
    (5, "Write Single Coil", "Forces a single coil ON or OFF. The value field must be 0xFF00 for ON or 0x0000 for OFF; any other value is illegal. The normal reply echoes the request."),
    (6, "Write Single Register", "Writes one 16-bit holding register. The normal reply echoes the request."),
    (15, "Write Multiple Coils", "Forces 1 to 1968 coils. byte_count must equal ceil(quantity/8) and the data field must carry exactly byte_count bytes."),
    (16, "Write Multiple Registers", "Writes 1 to 123 contiguous registers. byte_count must equal 2 x quantity and the data field must carry exactly byte_count bytes."),
]

FIELD_RULES = [
    ("protocol", "Protocol identifier", "The MBAP protocol identifier is always 0 for Modbus. Frames with any other value are not Modbus/TCP."),
    ("function_code", "Function code", "Public function codes handled by the target are 01-06, 15 and 16. Codes with the high bit set are reserved for exception replies."),
    ("start_address", "Start address", "Zero-based data address. start_address plus quantity must not exceed 65536."),
    ("quantity", "Quantity", "Number of items to read or write: up to 2000 coils or inputs, 125 registers on reads, 1968 coils or 123 registers on writes."),
    ("value", "Single write value", "Register value for function 06; for function 05 only 0x0000 and 0xFF00 are legal."),
    ("byte_count", "Byte count", "Number of data bytes following in write-multiple requests."),
    ("data", "Write payload", "Packed coil bits or big-endian register values, exactly byte_count bytes long."),
    ("length", "MBAP length", "Counts the unit identifier plus the PDU, in bytes. A request for function 03 has length 6."),
    ("unit", "Unit identifier", "Addresses a device behind a gateway. 0 is broadcast (writes only), 1-247 are device addresses, 248-255 are reserved."),
    ("transaction", "Transaction identifier", "Chosen by the client and echoed by the server to pair replies with requests."),
]


def kb_entries():
    out = []
    for fc, name, body in FUNCTION_CODES:
        out.append({
            "id": "modbus-fc%02d" % fc,
            "protocol_id": "modbus_tcp",
            "kind": "command-format",
            "title": "Function Code %02d: %s" % (fc, name),
            "body": body,
            "keywords": ["protocol", "rules", "modbus_tcp", "function_code", "%02d" % fc, "fc%02d" % fc] + name.lower().split(),
            "source": "Modbus Application Protocol Specification V1.1b3",
        })
    for field, title, body in FIELD_RULES:
        out.append({
            "id": "modbus-field-%s" % field,
            "protocol_id": "modbus_tcp",
            "kind": "field-constraint",
            "title": title,
            "body": body,
            "keywords": ["field", "constraint", "modbus_tcp", field],
            "source": "Modbus Messaging on TCP/IP Implementation Guide V1.0b",
        })
    out.append({
        "id": "modbus-identify",
        "protocol_id": "modbus_tcp",
        "kind": "field-constraint",
        "title": "Identifying Modbus/TCP traffic",
        "body": "Modbus/TCP servers listen on TCP port 502. The MBAP header starts with a 2-byte transaction identifier followed by a protocol identifier of 0.",
        "keywords": ["protocol", "identify", "modbus_tcp", "port", "502", "magic"],
        "source": "Modbus Messaging on TCP/IP Implementation Guide V1.0b",
    })
    out.append({
        "id": "modbus-exceptions",
        "protocol_id": "modbus_tcp",
        "kind": "command-format",
        "title": "Exception responses",
        "body": "An exception reply sets the high bit of the function code and carries one exception code: 01 illegal function, 02 illegal data address, 03 illegal data value, 04 server device failure.",
        "keywords": ["exception", "code", "modbus_tcp", "reply"],
        "source": "Modbus Application Protocol Specification V1.1b3",
    })
    notes = [
        ("vuln-session-exhaustion", "Unreleased sessions exhaust the connection pool",
         "Some PLC firmware allocates a session per TCP connection and never frees it when the peer leaves a request incomplete. Enough stale sessions make the device refuse new connections until it is power cycled.",
         ["vulnerability", "session", "exhaustion", "modbus_tcp", "length", "connection"]),
        ("vuln-length-overflow", "MBAP length larger than the payload",
         "Declaring an MBAP length beyond the bytes actually sent makes naive stacks wait for or read past the missing bytes. Implementations that trust the length field can crash.",
         ["vulnerability", "length", "overflow", "modbus_tcp", "mbap", "crash"]),
        ("vuln-write-burst", "Bursts of malformed register writes",
         "Rapid sequences of malformed function 16 writes have been observed to halt I/O modules until restart.",
         ["vulnerability", "burst", "write", "modbus_tcp", "fc16", "16", "byte_count"]),
        ("vuln-broadcast", "Broadcast unit identifier",
         "Unit 0 requests are processed by every device on a gateway without a reply, which hides failures from the client.",
         ["vulnerability", "broadcast", "unit", "modbus_tcp"]),
    ]
    for id_, title, body, kw in notes:
        out.append({"id": id_, "protocol_id": "modbus_tcp", "kind": "vulnerability-note", "title": title,
                    "body": body, "keywords": kw, "source": "public advisories"})
    strategies = [
        ("strategy-length-fields", "Mutate length and count fields", "Length and byte count fields are the most productive targets for semantic anomalies: desynchronize them from the payload.",
         ["strategy", "modbus_tcp", "length", "byte_count", "semantic"]),
        ("strategy-boundaries", "Probe address boundaries", "Addresses near 0 and 65535 combined with large quantities exercise range checks.",
         ["strategy", "modbus_tcp", "start_address", "quantity", "boundary"]),
        ("strategy-stability", "Back off on unstable targets", "When the target stops answering probes, reduce mutation density and favour well-formed requests until it recovers.",
         ["strategy", "modbus_tcp", "stability", "density"]),
    ]
    for id_, title, body, kw in strategies:
        out.append({"id": id_, "protocol_id": "modbus_tcp", "kind": "strategy-record", "title": title,
                    "body": body, "keywords": kw, "source": "campaign notes"})
    return out


def gen_kb():
    with open(os.path.join(HERE, "modbus_kb.jsonl"), "w") as f:
        for e in kb_entries():
            f.write(json.dumps(e, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    gen_modbus_pcap()
    gen_mixed_pcap()
    gen_hexlines()
    gen_kb()
