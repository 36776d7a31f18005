#!/usr/bin/env python3
"""Writes tests/data/pcap/ethernet.pcap and a hex text dump of the IPv4 datagram in each frame.

The dump lists "<ts_us> <hex>" per IPv4 frame, in file order; non-IPv4 frames are listed as
"# skipped <ethertype>". It is produced independently of the C++ reader.
"""
import struct
import sys
from pathlib import Path


def checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ipv4(src, dst, proto, segment, ident):
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(segment), ident, 0x4000, 64, proto, 0,
                      bytes(src), bytes(dst))
    hdr = hdr[:10] + struct.pack("!H", checksum(hdr)) + hdr[12:]
    return hdr + segment


def udp(src, dst, sport, dport, payload):
    seg = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    pseudo = bytes(src) + bytes(dst) + struct.pack("!BBH", 0, 17, len(seg))
    c = checksum(pseudo + seg) or 0xFFFF
    return seg[:6] + struct.pack("!H", c) + seg[8:]


def tcp(src, dst, sport, dport, seq, ack, flags, payload):
    seg = struct.pack("!HHIIBBHHH", sport, dport, seq, ack, 5 << 4, flags, 65535, 0, 0) + payload
    pseudo = bytes(src) + bytes(dst) + struct.pack("!BBH", 0, 6, len(seg))
    return seg[:16] + struct.pack("!H", checksum(pseudo + seg)) + seg[18:]


MAC_A = bytes.fromhex("020000000001")
MAC_B = bytes.fromhex("020000000002")
HOST = (10, 0, 0, 2)
DNS = (192, 168, 1, 1)
WEB = (93, 184, 216, 34)


def main(out_dir: Path):
    frames = []  # (ts_us, frame bytes)
    base = 1_700_000_000_000_000
    q = bytes.fromhex("123401000001000000000000076578616d706c6503636f6d0000010001")
    frames.append((base, MAC_B + MAC_A + b"\x08\x00" + ipv4(HOST, DNS, 17, udp(HOST, DNS, 5353, 53, q), 1)))
    frames.append((base + 1500, MAC_B + MAC_A + b"\x08\x06" + bytes(28)))  # ARP
    syn = tcp(HOST, WEB, 40000, 80, 1000, 0, 0x02, b"")
    frames.append((base + 2750, MAC_B + MAC_A + b"\x81\x00\x00\x07\x08\x00" + ipv4(HOST, WEB, 6, syn, 2)))
    data = tcp(HOST, WEB, 40000, 80, 1001, 5001, 0x18, b"GET / HTTP/1.1\r\nHost: example.com\r\n\r\n")
    frames.append((base + 1_000_004, MAC_B + MAC_A + b"\x08\x00" + ipv4(HOST, WEB, 6, data, 3)))
    back = tcp(WEB, HOST, 80, 40000, 5001, 1039, 0x10, b"")
    frames.append((base + 1_000_900, MAC_A + MAC_B + b"\x08\x00" + ipv4(WEB, HOST, 6, back, 4)))

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ethernet.pcap", "wb") as f:
        f.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        for ts, frame in frames:
            f.write(struct.pack("<IIII", ts // 1_000_000, ts % 1_000_000, len(frame), len(frame)))
            f.write(frame)
    with open(out_dir / "ethernet.dump", "w") as f:
        for ts, frame in frames:
            off = 12
            while frame[off:off + 2] in (b"\x81\x00", b"\x88\xa8"):
                off += 4
            ethertype = frame[off:off + 2].hex()
            if ethertype != "0800":
                f.write(f"# skipped {ethertype}\n")
                continue
            f.write(f"{ts} {frame[off + 2:].hex()}\n")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests/data/pcap")
