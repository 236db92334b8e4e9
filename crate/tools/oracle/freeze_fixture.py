"""Independent encoder for the certificate fixture.

Rebuilds the canonical form, digest, signatures and QR envelope of a fixed
certificate without touching the Rust code, and writes the results to
crates/core/tests/fixtures/presentation_fixture.json.
"""
import base64
import hashlib
import json
import pathlib
import struct

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

B58 = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"


def b58(data: bytes) -> str:
    n = int.from_bytes(data, "big")
    out = ""
    while n:
        n, r = divmod(n, 58)
        out = B58[r] + out
    pad = len(data) - len(data.lstrip(b"\0"))
    return "1" * pad + out


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode().rstrip("=")


def lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def sha(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def did_of(digest: bytes) -> str:
    return "did:cov:" + b58(digest)


def derive_did(doc: str, salt: bytes) -> str:
    return did_of(sha(b"\x01" + lp(doc.encode()) + salt))


def commit(name: str, value: bytes, salt: bytes) -> bytes:
    return sha(b"\x02" + lp(name.encode()) + lp(value) + salt)


def compact(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def main():
    issuer_key = Ed25519PrivateKey.from_private_bytes(bytes([0x11] * 32))
    holder_key = Ed25519PrivateKey.from_private_bytes(bytes([0x22] * 32))
    issuer = derive_did("GPHC-1040221", bytes([0xA1] * 16))
    holder = derive_did("DL1234567", bytes([0xB2] * 16))
    cert_id = did_of(sha(b"fixture-certificate"))
    issued_at = 1700000000
    photo = b"\x89PNG\r\n\x1a\nfixture-photo"

    # Salts are handed out in claim order, photo last.
    claims = [
        ("test_type", {"text": "antigen"}, "antigen".encode()),
        ("result", {"text": "negative"}, "negative".encode()),
        ("name", {"text": "Alex Example"}, "Alex Example".encode()),
        ("photo", {"bytes": b64url(photo)}, photo),
    ]
    salts = {name: bytes([i + 1] * 16) for i, (name, _, _) in enumerate(claims)}
    commitments = sorted(
        ((name, commit(name, raw, salts[name]).hex()) for name, _, raw in claims),
        key=lambda c: c[0].encode(),
    )

    canonical = compact(
        [cert_id, issuer, holder, issued_at, "issued", True, [[n, d] for n, d in commitments]]
    ).encode()
    digest = sha(canonical)
    issuer_sig = issuer_key.sign(digest)
    holder_sig = holder_key.sign(digest)
    anchor = f"anchor://covcert-local/{cert_id}"

    certificate = {
        "id": cert_id,
        "issuer": issuer,
        "holder": holder,
        "issued_at": issued_at,
        "status": "issued",
        "photo_bound": True,
        "commitments": [{"name": n, "digest": d} for n, d in commitments],
        "issuer_signature": {"signer": issuer, "value": b64url(issuer_sig)},
        "holder_signature": {"signer": holder, "value": b64url(holder_sig)},
        "lab_endorsement": None,
        "anchor_url": anchor,
    }
    by_name = {name: value for name, value, _ in claims}
    revealed = [
        {"name": n, "value": {"inline": by_name[n]}, "salt": b64url(salts[n])}
        for n in sorted(["photo", "result", "test_type"])
    ]
    payload = {
        "version": 1,
        "kind": "presentation",
        "body": {"certificate": certificate, "revealed": revealed, "anchor_url": anchor},
        "anchor_url": anchor,
    }
    body = compact(payload).encode()
    envelope = f"COVC1.{b64url(body)}.{b64url(sha(body)[:8])}"

    out = {
        "issuer_did": issuer,
        "holder_did": holder,
        "cert_id": cert_id,
        "canonical_form": canonical.decode(),
        "digest": digest.hex(),
        "issuer_signature": b64url(issuer_sig),
        "holder_signature": b64url(holder_sig),
        "envelope": envelope,
    }
    target = pathlib.Path(__file__).resolve().parents[2] / "crates/core/tests/fixtures/presentation_fixture.json"
    target.write_text(json.dumps(out, indent=2) + "\n")
    print(target)


if __name__ == "__main__":
    main()
