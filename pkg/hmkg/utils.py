import hashlib


def stable_hash(text: str) -> str:
    """sha256 hex digest; unlike hash() this does not change between interpreter runs."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def stable_seed(*parts: object) -> int:
    """Derive a 63-bit generator seed from any printable parts."""
    return int(stable_hash(":".join(str(p) for p in parts))[:15], 16)
