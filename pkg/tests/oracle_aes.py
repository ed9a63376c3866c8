"""Independent AES oracles for the test suite.

Everything here is deliberately written against different structure than
the package's own AES code: the key schedule is word-oriented (32-bit
words, big-endian within a word, as the standard tables it is checked
against), and block encryption goes through the `cryptography` library.
Known-answer vectors from FIPS-197 appendices are frozen below.
"""

from __future__ import annotations

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

# FIPS-197 Appendix A/B key and Appendix B plaintext/ciphertext.
FIPS_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
FIPS_PLAINTEXT = bytes.fromhex("3243f6a8885a308d313198a2e0370734")
FIPS_CIPHERTEXT = bytes.fromhex("3925841d02dc09fbdc118597196a0b32")

# FIPS-197 Appendix A.1: the full AES-128 schedule for FIPS_KEY.
FIPS_ROUND_KEYS = [bytes.fromhex(h) for h in (
    "2b7e151628aed2a6abf7158809cf4f3c",
    "a0fafe1788542cb123a339392a6c7605",
    "f2c295f27a96b9435935807a7359f67f",
    "3d80477d4716fe3e1e237e446d7a883b",
    "ef44a541a8525b7fb671253bdb0bad00",
    "d4d1c6f87c839d87caf2b8bc11f915bc",
    "6d88a37a110b3efddbf98641ca0093fd",
    "4e54f70e5f5fc9f384a64fb24ea6dc4f",
    "ead27321b58dbad2312bf5607f8d292f",
    "ac7766f319fadc2128d12941575c006e",
    "d014f9a8c9ee2589e13f0cc8b6630ca6",
)]

_SBOX = bytes.fromhex(
    "637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0"
    "b7fd9326363ff7cc34a5e5f171d8311504c723c31896059a071280e2eb27b275"
    "09832c1a1b6e5aa0523bd6b329e32f8453d100ed20fcb15b6acbbe394a4c58cf"
    "d0efaafb434d338545f9027f503c9fa851a3408f929d38f5bcb6da2110fff3d2"
    "cd0c13ec5f974417c4a77e3d645d197360814fdc222a908846eeb814de5e0bdb"
    "e0323a0a4906245cc2d3ac629195e479e7c8376d8dd54ea96c56f4ea657aae08"
    "ba78252e1ca6b4c6e8dd741f4bbd8b8a703eb5664803f60e613557b986c11d9e"
    "e1f8981169d98e949b1e87e9ce5528df8ca1890dbfe6426841992d0fb054bb16")

_RCON = (0x01000000, 0x02000000, 0x04000000, 0x08000000, 0x10000000,
         0x20000000, 0x40000000, 0x80000000, 0x1B000000, 0x36000000)


def _sub_word(word: int) -> int:
    return int.from_bytes(bytes(_SBOX[b] for b in word.to_bytes(4, "big")), "big")


def _rot_word(word: int) -> int:
    return ((word << 8) | (word >> 24)) & 0xFFFFFFFF


def key_schedule(cipher_key: bytes) -> list[bytes]:
    """Word-oriented AES-128 key expansion (FIPS-197 pseudocode shape)."""
    assert len(cipher_key) == 16
    w = [int.from_bytes(cipher_key[4 * i:4 * i + 4], "big") for i in range(4)]
    for i in range(4, 44):
        temp = w[i - 1]
        if i % 4 == 0:
            temp = _sub_word(_rot_word(temp)) ^ _RCON[i // 4 - 1]
        w.append(w[i - 4] ^ temp)
    return [b"".join(w[4 * r + c].to_bytes(4, "big") for c in range(4))
            for r in range(11)]


def encrypt_block(cipher_key: bytes, plaintext: bytes) -> bytes:
    """Single-block AES-128 via the cryptography library (ECB, one block)."""
    encryptor = Cipher(algorithms.AES(cipher_key), modes.ECB()).encryptor()
    return encryptor.update(plaintext) + encryptor.finalize()
