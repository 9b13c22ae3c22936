"""Error types for the hcc codec."""


class CodecError(Exception):
    """Raised for malformed streams, model mismatches and failed encodes."""
