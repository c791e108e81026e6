"""CRC-32C (Castagnoli) and the masked variant used by TFRecord framing."""

try:
    from emlio._crc32c import crc32c as _crc32c_native
except ImportError:  # extension not built; fall back to the table version
    _crc32c_native = None

_POLY = 0x82F63B78
_MASK_DELTA = 0xA282EAD8


def _make_table():
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _make_table()


def _crc32c_py(data, crc=0):
    crc ^= 0xFFFFFFFF
    table = _TABLE
    for b in bytes(data):
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def crc32c(data, crc: int = 0) -> int:
    """CRC-32C of ``data`` (any bytes-like object), optionally continuing ``crc``."""
    if _crc32c_native is not None:
        return _crc32c_native(data, crc)
    return _crc32c_py(data, crc)


def mask(crc: int) -> int:
    """Rotate right by 15 bits and add the TFRecord mask delta (mod 2**32)."""
    return (((crc >> 15) | (crc << 17)) + _MASK_DELTA) & 0xFFFFFFFF


def unmask(masked: int) -> int:
    rot = (masked - _MASK_DELTA) & 0xFFFFFFFF
    return ((rot >> 17) | (rot << 15)) & 0xFFFFFFFF


def masked_crc32c(data) -> int:
    return mask(crc32c(data))


def native_available() -> bool:
    return _crc32c_native is not None
