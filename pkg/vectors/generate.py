"""Regenerate stamp_vectors.json.

Every byte string here is assembled from hex literals field by field, and the
UDP checksums come from a modular-arithmetic oracle that shares no code with
the package.  The output is frozen in git; rerunning must give identical JSON.

    python vectors/generate.py > vectors/stamp_vectors.json
"""

import ipaddress
import json


def h(n, width):
    return format(n, f"0{width * 2}x")


def addr(a):
    return ipaddress.IPv6Address(a).packed.hex()


def oracle_checksum(src_hex, dst_hex, udp_hex):
    """RFC 1071 checksum via the identity: folded one's complement sum == sum mod 0xFFFF."""
    data = bytes.fromhex(src_hex + dst_hex + h(len(udp_hex) // 2, 4) + "000000" + "11" + udp_hex)
    if len(data) % 2:
        data += b"\0"
    total = sum(int.from_bytes(data[i:i + 2], "big") for i in range(0, len(data), 2))
    folded = total % 0xFFFF
    if folded == 0 and total:
        folded = 0xFFFF
    c = 0xFFFF - folded
    return c or 0xFFFF


def sender_payload(seq, sec, frac, ee, ssid, mbz="00" * 28):
    return h(seq, 4) + h(sec, 4) + h(frac, 4) + h(ee, 2) + h(ssid, 2) + mbz


def reflector_payload(seq, t3, ee, ssid, t2, sseq, t1, see, ttl):
    return (h(seq, 4) + h(t3[0], 4) + h(t3[1], 4) + h(ee, 2) + h(ssid, 2) + h(t2[0], 4) + h(t2[1], 4)
            + h(sseq, 4) + h(t1[0], 4) + h(t1[1], 4) + h(see, 2) + "0000" + h(ttl, 1) + "000000")


def srh(next_header, segments_left, path, flags=0, tag=0):
    n = len(path)
    return (h(next_header, 1) + h(2 * n, 1) + "04" + h(segments_left, 1) + h(n - 1, 1) + h(flags, 1)
            + h(tag, 2) + "".join(addr(a) for a in reversed(path)))


def datagram(src, dst, payload_hex, sport, dport, hop, path=None):
    udp_len = 8 + len(payload_hex) // 2
    udp_nock = h(sport, 2) + h(dport, 2) + h(udp_len, 2) + "0000" + payload_hex
    final = path[-1] if path else dst
    csum = oracle_checksum(addr(src), addr(final), udp_nock)
    udp = udp_nock[:12] + h(csum, 2) + udp_nock[16:]
    ext = srh(17, len(path) - 1, path) if path else ""
    nh = 43 if path else 17
    ip = "60000000" + h(len(ext) // 2 + udp_len, 2) + h(nh, 1) + h(hop, 1) + addr(src) + addr(dst)
    return ip + ext + udp, csum


def ts(sec, frac):
    return {"seconds": sec, "fraction": frac}


def ee(s, z, scale, mult):
    return {"s_bit": s, "z_bit": z, "scale": scale, "multiplier": mult}


def main():
    vecs = []

    vecs.append({
        "name": "sender-baseline",
        "kind": "sender_payload",
        "hex": sender_payload(0, 0, 0, 0x0001, 1),
        "fields": {"sequence_number": 0, "timestamp": ts(0, 0), "error_estimate": ee(False, False, 0, 1),
                   "ssid": 1, "mbz_nonzero": False},
    })
    vecs.append({
        "name": "sender-typical",
        "kind": "sender_payload",
        "hex": sender_payload(0x0000002A, 0xE9A0C7F1, 0x80000000, 0x8101, 0x1234),
        "fields": {"sequence_number": 42, "timestamp": ts(0xE9A0C7F1, 0x80000000),
                   "error_estimate": ee(True, False, 1, 1), "ssid": 0x1234, "mbz_nonzero": False},
    })
    vecs.append({
        "name": "sender-max-fields",
        "kind": "sender_payload",
        "hex": sender_payload(0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFF, 0xFFFF),
        "fields": {"sequence_number": 0xFFFFFFFF, "timestamp": ts(0xFFFFFFFF, 0xFFFFFFFF),
                   "error_estimate": ee(True, True, 63, 255), "ssid": 0xFFFF, "mbz_nonzero": False},
    })
    vecs.append({
        "name": "sender-mbz-flagged",
        "kind": "sender_payload",
        "hex": sender_payload(7, 1, 2, 0x0001, 9, mbz="00" * 10 + "ff" + "00" * 17),
        "fields": {"sequence_number": 7, "timestamp": ts(1, 2), "error_estimate": ee(False, False, 0, 1),
                   "ssid": 9, "mbz_nonzero": True},
    })
    vecs.append({
        "name": "reflector-baseline-ttl64",
        "kind": "reflector_payload",
        "hex": reflector_payload(0, (0, 0), 0x0001, 1, (0, 0), 0, (0, 0), 0x0001, 64),
        "fields": {"sequence_number": 0, "timestamp": ts(0, 0), "error_estimate": ee(False, False, 0, 1),
                   "ssid": 1, "receive_timestamp": ts(0, 0), "sender_sequence_number": 0,
                   "sender_timestamp": ts(0, 0), "sender_error_estimate": ee(False, False, 0, 1),
                   "sender_ttl": 64, "mbz_nonzero": False},
        "checks": {"byte_40": "40"},
    })
    vecs.append({
        "name": "reflector-typical",
        "kind": "reflector_payload",
        "hex": reflector_payload(17, (0xE9A0C7F2, 0x00100000), 0x8001, 0x002A, (0xE9A0C7F2, 0x00000000),
                                 17, (0xE9A0C7F1, 0xFFF00000), 0x0001, 63),
        "fields": {"sequence_number": 17, "timestamp": ts(0xE9A0C7F2, 0x00100000),
                   "error_estimate": ee(True, False, 0, 1), "ssid": 42,
                   "receive_timestamp": ts(0xE9A0C7F2, 0), "sender_sequence_number": 17,
                   "sender_timestamp": ts(0xE9A0C7F1, 0xFFF00000), "sender_error_estimate": ee(False, False, 0, 1),
                   "sender_ttl": 63, "mbz_nonzero": False},
    })
    vecs.append({
        "name": "srh-one-segment",
        "kind": "srh",
        "hex": srh(17, 0, ["2001:db8::1"]),
        "fields": {"segment_list": ["2001:db8::1"], "segments_left": 0, "next_header": 17, "flags": 0, "tag": 0,
                   "last_entry": 0, "hdr_ext_len": 2},
    })
    vecs.append({
        "name": "srh-two-segments",
        "kind": "srh",
        "hex": srh(17, 1, ["fc00::a", "fc00::2"]),
        "fields": {"segment_list": ["fc00::a", "fc00::2"], "segments_left": 1, "next_header": 17, "flags": 0,
                   "tag": 0, "last_entry": 1, "hdr_ext_len": 4},
    })
    vecs.append({
        "name": "srh-three-segments-tagged",
        "kind": "srh",
        "hex": srh(17, 2, ["fcff:1::100", "fcff:2::100", "fcff:3::1"], flags=0, tag=0xBEEF),
        "fields": {"segment_list": ["fcff:1::100", "fcff:2::100", "fcff:3::1"], "segments_left": 2,
                   "next_header": 17, "flags": 0, "tag": 0xBEEF, "last_entry": 2, "hdr_ext_len": 6},
    })

    pl = sender_payload(0, 0xE9A0C7F1, 0, 0x0001, 42)
    hx, c = datagram("fc00::1", "fc00::2", pl, 50001, 862, 64)
    vecs.append({
        "name": "datagram-sender-plain",
        "kind": "sender_datagram",
        "hex": hx,
        "fields": {"src_addr": "fc00::1", "dst_addr": "fc00::2", "src_port": 50001, "dst_port": 862,
                   "hop_limit": 64, "srh": None, "checksum": c, "length": 92,
                   "payload": {"sequence_number": 0, "timestamp": ts(0xE9A0C7F1, 0), "ssid": 42,
                               "error_estimate": ee(False, False, 0, 1)}},
    })
    hx, c = datagram("fc00::1", "fc00::a", pl, 50001, 862, 64, path=["fc00::a", "fc00::2"])
    vecs.append({
        "name": "datagram-sender-srh2",
        "kind": "sender_datagram",
        "hex": hx,
        "fields": {"src_addr": "fc00::1", "dst_addr": "fc00::a", "src_port": 50001, "dst_port": 862,
                   "hop_limit": 64, "srh": ["fc00::a", "fc00::2"], "checksum": c, "length": 132,
                   "payload": {"sequence_number": 0, "timestamp": ts(0xE9A0C7F1, 0), "ssid": 42,
                               "error_estimate": ee(False, False, 0, 1)}},
    })
    rp = reflector_payload(5, (0xE9A0C7F2, 7), 0x0001, 42, (0xE9A0C7F2, 3), 5, (0xE9A0C7F1, 0), 0x0001, 61)
    hx, c = datagram("fc00::2", "fc00::b", rp, 862, 50001, 64, path=["fc00::b", "fc00::1"])
    vecs.append({
        "name": "datagram-reflector-srh2",
        "kind": "reflector_datagram",
        "hex": hx,
        "fields": {"src_addr": "fc00::2", "dst_addr": "fc00::b", "src_port": 862, "dst_port": 50001,
                   "hop_limit": 64, "srh": ["fc00::b", "fc00::1"], "checksum": c, "length": 132,
                   "payload": {"sequence_number": 5, "ssid": 42, "sender_sequence_number": 5, "sender_ttl": 61}},
    })

    # NTP conversions: unix ns -> (seconds, fraction), fraction truncated.
    vecs.append({"name": "ntp-unix-epoch", "kind": "ntp", "unix_ns": 0, "fields": ts(2208988800, 0)})
    vecs.append({"name": "ntp-half-second", "kind": "ntp", "unix_ns": 500_000_000,
                 "fields": ts(2208988800, 0x80000000)})
    vecs.append({"name": "ntp-one-ns", "kind": "ntp", "unix_ns": 1, "fields": ts(2208988800, 4)})
    vecs.append({"name": "ntp-2023-11-14", "kind": "ntp", "unix_ns": 1_700_000_000_123_456_789,
                 "fields": ts(1_700_000_000 + 2208988800, (123_456_789 << 32) // 10**9)})
    vecs.append({"name": "error-estimate-s-z-scale-mult", "kind": "error_estimate", "hex": "c5ff",
                 "fields": ee(True, True, 5, 255)})

    json.dump({"format": 1, "vectors": vecs}, __import__("sys").stdout, indent=1, sort_keys=True)
    print()


if __name__ == "__main__":
    main()
