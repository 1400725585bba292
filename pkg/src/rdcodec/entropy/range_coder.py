"""Byte-oriented range coder with carry propagation.

The coder works on integer cumulative frequency tables whose total is a power
of two (``2 ** precision``). Every symbol needs a frequency of at least one.
Out-of-alphabet values are handled one level up, in :mod:`.tables`, via an
escape symbol followed by bypass-coded bits.
"""

from __future__ import annotations

from bisect import bisect_right

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    """Raised for corrupt or truncated range-coded payloads."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._used = False

    def encode(self, start: int, freq: int, precision: int) -> None:
        """Narrow the interval to ``[start, start + freq) / 2**precision``."""
        r = self._range >> precision
        self._low += r * start
        self._range = r * freq
        self._used = True
        while self._range < _TOP:
            self._range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, cdf: list[int], precision: int) -> None:
        start = cdf[symbol]
        self.encode(start, cdf[symbol + 1] - start, precision)

    def encode_bits(self, value: int, nbits: int) -> None:
        """Equiprobable bits, most significant first."""
        for i in range(nbits - 1, -1, -1):
            self.encode((value >> i) & 1, 1, 1)

    def _shift_low(self) -> None:
        low = self._low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        """Flush and return the payload. An unused encoder yields ``b""``."""
        if not self._used:
            return b""
        for _ in range(5):
            self._shift_low()
        # the first emitted byte is always the zero initial cache
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._r = 0
        self._started = False

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("truncated range-coded payload", self._pos)
        b = self._data[self._pos]
        self._pos += 1
        return b

    def _start(self) -> None:
        code = 0
        for _ in range(4):
            code = (code << 8) | self._next_byte()
        self._code = code
        self._started = True

    def decode_freq(self, precision: int) -> int:
        if not self._started:
            self._start()
        self._r = self._range >> precision
        value = self._code // self._r
        if value >> precision:
            raise DecodeError("corrupt range-coded payload", self._pos)
        return value

    def update(self, start: int, freq: int) -> None:
        self._code -= self._r * start
        self._range = self._r * freq
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range <<= 8

    def decode_symbol(self, cdf: list[int], precision: int) -> int:
        value = self.decode_freq(precision)
        symbol = bisect_right(cdf, value) - 1
        if symbol >= len(cdf) - 1 or cdf[symbol + 1] == cdf[symbol]:
            raise DecodeError("decoded value outside the frequency table", self._pos)
        self.update(cdf[symbol], cdf[symbol + 1] - cdf[symbol])
        return symbol

    def decode_bits(self, nbits: int) -> int:
        value = 0
        for _ in range(nbits):
            bit = self.decode_freq(1)
            self.update(bit, 1)
            value = (value << 1) | bit
        return value

    @property
    def position(self) -> int:
        return self._pos
