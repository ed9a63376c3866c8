"""AES-128 primitives backing the aesenc/aesenclast instruction semantics.

Register values are plain integers; a 16-byte block maps to an integer
little-endian, exactly as a 128-bit load from memory would fill a SIMD
register (block byte 0 is the register's least significant byte).
"""

from __future__ import annotations

M128 = (1 << 128) - 1


def _gmul(a: int, b: int) -> int:
    """Multiply in GF(2^8) with the AES reduction polynomial x^8+x^4+x^3+x+1."""
    p = 0
    for _ in range(8):
        if b & 1:
            p ^= a
        b >>= 1
        a <<= 1
        if a & 0x100:
            a ^= 0x11B
    return p & 0xFF


def _make_sbox() -> tuple[int, ...]:
    # Multiplicative inverse followed by the affine transform (constant 0x63).
    inverse = [0] * 256
    for x in range(1, 256):
        if inverse[x]:
            continue
        for y in range(1, 256):
            if _gmul(x, y) == 1:
                inverse[x] = y
                inverse[y] = x
                break
    box = []
    for x in range(256):
        b = inverse[x]
        s = 0
        for i in range(8):
            bit = (
                (b >> i) ^ (b >> ((i + 4) % 8)) ^ (b >> ((i + 5) % 8))
                ^ (b >> ((i + 6) % 8)) ^ (b >> ((i + 7) % 8)) ^ (0x63 >> i)
            ) & 1
            s |= bit << i
        box.append(s)
    return tuple(box)


SBOX = _make_sbox()

RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


def block_to_int(block: bytes) -> int:
    """16-byte block, as held in a SIMD register loaded from memory."""
    if len(block) != 16:
        raise ValueError(f"expected a 16-byte block, got {len(block)} bytes")
    return int.from_bytes(block, "little")


def int_to_block(value: int) -> bytes:
    return (value & M128).to_bytes(16, "little")


def _sub_bytes(state: list[int]) -> list[int]:
    return [SBOX[b] for b in state]


def _shift_rows(state: list[int]) -> list[int]:
    # State byte i sits in row i % 4, column i // 4; row r rotates left by r.
    out = [0] * 16
    for col in range(4):
        for row in range(4):
            out[4 * col + row] = state[4 * ((col + row) % 4) + row]
    return out


def _mix_columns(state: list[int]) -> list[int]:
    out = [0] * 16
    for col in range(4):
        a = state[4 * col:4 * col + 4]
        out[4 * col + 0] = _gmul(a[0], 2) ^ _gmul(a[1], 3) ^ a[2] ^ a[3]
        out[4 * col + 1] = a[0] ^ _gmul(a[1], 2) ^ _gmul(a[2], 3) ^ a[3]
        out[4 * col + 2] = a[0] ^ a[1] ^ _gmul(a[2], 2) ^ _gmul(a[3], 3)
        out[4 * col + 3] = _gmul(a[0], 3) ^ a[1] ^ a[2] ^ _gmul(a[3], 2)
    return out


def aes_round(state: int, round_key: int, last: bool = False) -> int:
    """One AES encryption round on 128-bit integer operands.

    ShiftRows, SubBytes, MixColumns (skipped on the final round), then the
    round-key XOR: the semantics of aesenc/aesenclast on the low 128 bits
    of their SIMD operands.
    """
    b = list(int_to_block(state))
    b = _sub_bytes(_shift_rows(b))
    if not last:
        b = _mix_columns(b)
    return block_to_int(bytes(b)) ^ (round_key & M128)


def expand_key_128(cipher_key: bytes) -> list[bytes]:
    """AES-128 key schedule: the cipher key plus ten derived round keys."""
    if len(cipher_key) != 16:
        raise ValueError(f"AES-128 key must be 16 bytes, got {len(cipher_key)}")
    words = [list(cipher_key[4 * i:4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        prev = list(words[i - 1])
        if i % 4 == 0:
            prev = prev[1:] + prev[:1]
            prev = [SBOX[b] for b in prev]
            prev[0] ^= RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], prev)])
    return [bytes(sum(words[4 * r:4 * r + 4], [])) for r in range(11)]


def encrypt_block(cipher_key: bytes, plaintext: bytes) -> bytes:
    """Full AES-128 encryption, chained from aes_round; used by the demo path."""
    keys = [block_to_int(k) for k in expand_key_128(cipher_key)]
    state = block_to_int(plaintext) ^ keys[0]
    for r in range(1, 10):
        state = aes_round(state, keys[r])
    state = aes_round(state, keys[10], last=True)
    return int_to_block(state)
