"""Epoch checkpoints: digest agreement and the GC trigger.

At an epoch boundary every replica has the same per-instance block
window and (after the drain) the same object store, so a digest over
(clamped state vector, per-instance block digests, store digest) is a
directly comparable summary of everything the epoch decided.  Replicas
broadcast the digest signed; 2f+1 matching signatures make the epoch
stable, at which point the memory backing it can be dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codec import (
    Authenticator,
    Cursor,
    KIND_REPLICA,
    KeyRing,
    digest32,
    enc_bytes,
    enc_seq,
    enc_u32,
    enc_u64,
)
from .core import ObjectKey, ValidationError, store_digest
from .orderer import Orderer

CKPT_SIGN_PREFIX = b"ckptmsg:"


def checkpoint_digest(orderer: Orderer, store: dict[ObjectKey, int],
                      epoch: int) -> bytes:
    """Digest of one closed epoch: ordering outcome plus execution state.

    Raises ValidationError("EPOCH_OPEN") unless every instance log has
    delivered contiguously through the epoch's last sequence number.
    """
    end = orderer.epoch_window_end(epoch)
    for log in orderer.logs:
        if log.frontier < end:
            raise ValidationError("EPOCH_OPEN")
    sv = orderer.epoch_state_vector(epoch)
    parts = [enc_u64(epoch), enc_bytes(sv.encode())]
    for log in orderer.logs:
        digests = [enc_bytes(log.blocks[sn].digest())
                   for sn in range(epoch * orderer.epoch_len, end + 1)]
        parts.append(enc_bytes(enc_seq(digests)))
    parts.append(enc_bytes(store_digest(store)))
    return digest32(b"ckpt:" + b"".join(parts))


@dataclass(frozen=True)
class CheckpointMsg:
    epoch: int
    digest: bytes
    replica: int
    auth: Authenticator | None = None

    def body(self) -> bytes:
        return enc_u64(self.epoch) + self.digest + enc_u32(self.replica)

    def encode(self) -> bytes:
        assert self.auth is not None
        return self.body() + self.auth.encode()

    @classmethod
    def decode(cls, cur: Cursor) -> "CheckpointMsg":
        epoch = cur.u64()
        digest = cur.raw(32)
        replica = cur.u32()
        auth = Authenticator.decode(cur)
        return cls(epoch, digest, replica, auth)


@dataclass(frozen=True)
class StableCheckpoint:
    epoch: int
    digest: bytes
    certificate: tuple[CheckpointMsg, ...]


class CheckpointKeeper:
    """Collects checkpoint votes and reports stability once per epoch.

    One vote per (epoch, replica) is counted; later votes from the same
    replica are ignored, so an equivocating signer contributes to at
    most one digest.
    """

    def __init__(self, n: int, f: int, replica_id: int, keyring: KeyRing):
        self.n = n
        self.f = f
        self.replica_id = replica_id
        self.keyring = keyring
        self.votes: dict[int, dict[int, CheckpointMsg]] = {}
        self.stable: dict[int, StableCheckpoint] = {}

    def make(self, epoch: int, digest: bytes) -> CheckpointMsg:
        bare = CheckpointMsg(epoch, digest, self.replica_id)
        auth = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                 CKPT_SIGN_PREFIX + bare.body())
        return CheckpointMsg(epoch, digest, self.replica_id, auth)

    def on_msg(self, msg: CheckpointMsg) -> StableCheckpoint | None:
        auth = msg.auth
        if auth is None or auth.kind != KIND_REPLICA or auth.party != msg.replica:
            return None
        if not self.keyring.verify(auth, CKPT_SIGN_PREFIX + msg.body()):
            return None
        if msg.epoch in self.stable:
            return None
        per_epoch = self.votes.setdefault(msg.epoch, {})
        if msg.replica in per_epoch:
            return None
        per_epoch[msg.replica] = msg
        matching = tuple(sorted((v for v in per_epoch.values()
                                 if v.digest == msg.digest),
                                key=lambda v: v.replica))
        if len(matching) >= 2 * self.f + 1:
            st = StableCheckpoint(msg.epoch, msg.digest, matching)
            self.stable[msg.epoch] = st
            del self.votes[msg.epoch]
            return st
        return None
