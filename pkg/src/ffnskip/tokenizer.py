"""Dependency-free byte-level tokenizer.

Ids 0-255 are raw byte values, 256 is BOS, 257 is EOS. Any model vocabulary
of at least 258 entries works; ids beyond 257 carry no text and decode to
nothing. encode/decode round-trip arbitrary byte strings exactly.
"""

from __future__ import annotations

BOS_ID = 256
EOS_ID = 257
BASE_VOCAB = 258


class TokenIdError(ValueError):
    """Id outside the tokenizer vocabulary."""


class ByteTokenizer:
    def __init__(self, vocab_size: int = BASE_VOCAB):
        if vocab_size < BASE_VOCAB:
            raise ValueError(f"vocab_size must be >= {BASE_VOCAB}, got {vocab_size}")
        self.vocab_size = vocab_size
        self.bos_id = BOS_ID
        self.eos_id = EOS_ID

    def encode(self, text: str | bytes) -> list[int]:
        """Byte values of the input; BOS is prepended by the decode driver,
        never here."""
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(raw)

    def decode(self, ids: list[int]) -> bytes:
        out = bytearray()
        for token_id in ids:
            if not 0 <= token_id < self.vocab_size:
                raise TokenIdError(
                    f"token id {token_id} outside vocabulary of size {self.vocab_size}"
                )
            if token_id < 256:
                out.append(token_id)
        return bytes(out)

    def decode_text(self, ids: list[int]) -> str:
        """Lossy UTF-8 view of decode(), for printing."""
        return self.decode(ids).decode("utf-8", errors="replace")
