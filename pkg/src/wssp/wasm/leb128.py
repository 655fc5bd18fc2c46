"""LEB128 variable-length integers as used by the WebAssembly binary format.

Encoders always emit the canonical (shortest) form.  Decoders accept padded
forms but enforce the per-width byte limit and reject set bits that fall
outside the target width.
"""


class LEBError(ValueError):
    pass


def encode_unsigned(value):
    if value < 0:
        raise ValueError("unsigned LEB128 of negative value %d" % value)
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def encode_signed(value):
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        done = (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40)
        if done:
            out.append(byte)
            return bytes(out)
        out.append(byte | 0x80)


def decode_unsigned(data, pos, bits=32):
    """Decode an unsigned LEB128 at ``data[pos]``; return ``(value, new_pos)``."""
    result = shift = 0
    max_bytes = (bits + 6) // 7
    for i in range(max_bytes):
        if pos + i >= len(data):
            raise LEBError("truncated LEB128")
        byte = data[pos + i]
        result |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            if result >> bits:
                raise LEBError("LEB128 value exceeds u%d" % bits)
            return result, pos + i + 1
    raise LEBError("LEB128 longer than %d bytes" % max_bytes)


def decode_signed(data, pos, bits=32):
    """Decode a signed LEB128 at ``data[pos]``; return ``(value, new_pos)``."""
    result = shift = 0
    max_bytes = (bits + 6) // 7
    for i in range(max_bytes):
        if pos + i >= len(data):
            raise LEBError("truncated LEB128")
        byte = data[pos + i]
        result |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            if byte & 0x40:
                result -= 1 << shift
            if not -(1 << (bits - 1)) <= result < (1 << (bits - 1)):
                raise LEBError("LEB128 value exceeds s%d" % bits)
            return result, pos + i + 1
    raise LEBError("LEB128 longer than %d bytes" % max_bytes)
