"""Separation-of-duties web ballot system.

Blind-signature credentials, anonymized casting, verifiable receipts, and
an offline cross-check tally. Each trust boundary runs as its own process
with its own keypair and on-disk state.
"""

__version__ = "0.1.0"
