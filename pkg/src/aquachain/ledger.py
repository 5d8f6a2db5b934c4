"""Minimal proof-of-authority ledger on a virtual clock.

Blocks are sealed at exact 1-second ticks by a fixed validator set in
round-robin order, drain the pending pool FIFO up to a 15M gas limit, and
execute their payload calls against the contract. Authentication is
simulation-grade: SHA-256 everywhere, with keyed hashes (HMAC) standing in
for signatures. The security properties under test are the authorization
and integrity logic, not cryptographic strength.

Chain persistence uses an append-only file of length-prefixed block records.
Byte layout (all integers little-endian, hashes 32 bytes):

    file   := magic "AQCHAIN1" , record*
    record := u32 length , block
    block  := u64 height , hash32 parent_hash , u64 timestamp ,
              str sealer , u32 n_txs , tx* , u64 gas_used ,
              hash32 block_hash , hash32 seal_sig
    tx     := hash32 tx_id , str sender , u64 nonce , f64 submitted_at ,
              u64 gas , u32 n_calls , call*
    call   := str fn , u16 n_args , arg*
    arg    := u8 tag , ( tag 0: i64 | tag 1: str )
    str    := u16 length , utf-8 bytes

``block_hash`` is the SHA-256 of the encoded fields that precede it, so any
byte flip in a stored record is caught either by re-hashing or by the seal
MAC check; undecodable records count as corruption too.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from aquachain.contract import CallContext, ContractRevert, VillageWaterSystem

GAS_LIMIT = 15_000_000
BLOCK_INTERVAL = 1
FINALITY_DEPTH = 2
CHAIN_MAGIC = b"AQCHAIN1"
ZERO_HASH = bytes(32)

Call = tuple[str, tuple]


class ChainDecodeError(Exception):
    """The chain file cannot be parsed back into blocks."""


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    sender: str
    nonce: int
    submitted_at: float
    gas: int
    calls: tuple[Call, ...]
    sig: bytes


@dataclass(frozen=True)
class Block:
    height: int
    parent_hash: bytes
    timestamp: int
    sealer: str
    transactions: tuple[Transaction, ...]
    gas_used: int
    block_hash: bytes
    seal_sig: bytes


@dataclass(frozen=True)
class Receipt:
    tx_id: bytes
    submitted_at: float
    sealed_at: int
    height: int
    gas: int
    statuses: tuple[str, ...]  # "ok" or "revert:<reason>" per call
    results: tuple

    @property
    def inclusion_latency(self) -> float:
        return self.sealed_at - self.submitted_at


class Keyring:
    """Deterministic key registry: key id -> secret, derived from a seed."""

    def __init__(self, network_seed: int = 0):
        self.network_seed = network_seed
        self._secrets: dict[str, bytes] = {}

    def register(self, key_id: str) -> None:
        material = f"aquachain-key:{self.network_seed}:{key_id}".encode()
        self._secrets[key_id] = hashlib.sha256(material).digest()

    def knows(self, key_id: str) -> bool:
        return key_id in self._secrets

    def mac(self, key_id: str, payload: bytes) -> bytes:
        return hmac.new(self._secrets[key_id], payload, hashlib.sha256).digest()

    def verify(self, key_id: str, payload: bytes, sig: bytes) -> bool:
        return self.knows(key_id) and hmac.compare_digest(self.mac(key_id, payload), sig)


# -- canonical encoding ------------------------------------------------------

def _enc_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for codec")
    return struct.pack("<H", len(raw)) + raw


def _enc_call(call: Call) -> bytes:
    fn, args = call
    out = [_enc_str(fn), struct.pack("<H", len(args))]
    for arg in args:
        if isinstance(arg, bool):
            raise ValueError("bool arguments are not part of the call ABI")
        if isinstance(arg, int):
            out.append(b"\x00" + struct.pack("<q", arg))
        elif isinstance(arg, str):
            out.append(b"\x01" + _enc_str(arg))
        else:
            raise ValueError(f"unsupported call argument type: {type(arg)!r}")
    return b"".join(out)


def encode_tx_body(sender: str, nonce: int, submitted_at: float, gas: int,
                   calls: Sequence[Call]) -> bytes:
    out = [_enc_str(sender), struct.pack("<Q", nonce), struct.pack("<d", submitted_at),
           struct.pack("<Q", gas), struct.pack("<I", len(calls))]
    out.extend(_enc_call(c) for c in calls)
    return b"".join(out)


def tx_payload_hash(sender: str, calls: Sequence[Call], submitted_at: float,
                    nonce: int) -> bytes:
    blob = _enc_str(sender) + b"".join(_enc_call(c) for c in calls) \
        + struct.pack("<d", submitted_at) + struct.pack("<Q", nonce)
    return hashlib.sha256(blob).digest()


def encode_tx(tx: Transaction) -> bytes:
    return tx.tx_id + encode_tx_body(tx.sender, tx.nonce, tx.submitted_at,
                                     tx.gas, tx.calls) + tx.sig


def block_header_bytes(height: int, parent_hash: bytes, timestamp: int,
                       sealer: str, transactions: Sequence[Transaction],
                       gas_used: int) -> bytes:
    out = [struct.pack("<Q", height), parent_hash, struct.pack("<Q", timestamp),
           _enc_str(sealer), struct.pack("<I", len(transactions))]
    out.extend(encode_tx(tx) for tx in transactions)
    out.append(struct.pack("<Q", gas_used))
    return b"".join(out)


def encode_block(block: Block) -> bytes:
    return block_header_bytes(block.height, block.parent_hash, block.timestamp,
                              block.sealer, block.transactions,
                              block.gas_used) + block.block_hash + block.seal_sig


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChainDecodeError("truncated record")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        try:
            return self.take(self.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChainDecodeError("invalid utf-8 in record") from exc


def decode_block(data: bytes) -> Block:
    cur = _Cursor(data)
    height = cur.u64()
    parent_hash = cur.take(32)
    timestamp = cur.u64()
    sealer = cur.string()
    txs = []
    for _ in range(cur.u32()):
        tx_id = cur.take(32)
        sender = cur.string()
        nonce = cur.u64()
        submitted_at = cur.f64()
        gas = cur.u64()
        calls = []
        for _ in range(cur.u32()):
            fn = cur.string()
            args = []
            for _ in range(cur.u16()):
                tag = cur.u8()
                if tag == 0:
                    args.append(cur.i64())
                elif tag == 1:
                    args.append(cur.string())
                else:
                    raise ChainDecodeError(f"unknown argument tag {tag}")
            calls.append((fn, tuple(args)))
        sig = cur.take(32)
        txs.append(Transaction(tx_id=tx_id, sender=sender, nonce=nonce,
                               submitted_at=submitted_at, gas=gas,
                               calls=tuple(calls), sig=sig))
    gas_used = cur.u64()
    block_hash = cur.take(32)
    seal_sig = cur.take(32)
    if cur.pos != len(data):
        raise ChainDecodeError("trailing bytes in block record")
    return Block(height=height, parent_hash=parent_hash, timestamp=timestamp,
                 sealer=sealer, transactions=tuple(txs), gas_used=gas_used,
                 block_hash=block_hash, seal_sig=seal_sig)


def write_chain(blocks: Sequence[Block], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHAIN_MAGIC)
        for block in blocks:
            raw = encode_block(block)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def read_chain(path) -> list[Block]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHAIN_MAGIC:
        raise ChainDecodeError("bad chain file magic")
    blocks = []
    pos = 8
    while pos < len(data):
        if pos + 4 > len(data):
            raise ChainDecodeError("truncated record length")
        (length,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        if pos + length > len(data):
            raise ChainDecodeError("truncated block record")
        blocks.append(decode_block(data[pos:pos + length]))
        pos += length
    return blocks


# -- the ledger --------------------------------------------------------------

class Ledger:
    """Append-only PoA chain plus FIFO pending pool and per-tx receipts."""

    def __init__(self, validators: Sequence[str] = ("V0", "V1", "V2"),
                 keyring: Optional[Keyring] = None,
                 contract: Optional[VillageWaterSystem] = None,
                 genesis_time: int = 0, gas_limit: int = GAS_LIMIT,
                 block_interval: int = BLOCK_INTERVAL,
                 finality_depth: int = FINALITY_DEPTH):
        if not validators:
            raise ValueError("validator set must be nonempty")
        self.authorities = list(validators)
        self.keyring = keyring or Keyring()
        for vid in self.authorities:
            if not self.keyring.knows(vid):
                self.keyring.register(vid)
        self.known_senders: set[str] = set(self.authorities)
        self.contract = contract
        self.gas_limit = gas_limit
        self.block_interval = block_interval
        self.finality_depth = finality_depth
        self.blocks: list[Block] = []
        self.pending: deque[Transaction] = deque()
        self.receipts: dict[bytes, Receipt] = {}
        self.receipt_order: list[bytes] = []
        self.rejected_submissions: list[tuple[bytes, str]] = []
        self._seal(genesis_time)  # genesis block, height 0

    @classmethod
    def from_blocks(cls, blocks: Sequence[Block], keyring: Keyring,
                    authorities: Sequence[str],
                    contract: Optional[VillageWaterSystem] = None,
                    gas_limit: int = GAS_LIMIT,
                    finality_depth: int = FINALITY_DEPTH) -> "Ledger":
        """Wrap an already-sealed chain (e.g. loaded from disk) in a ledger.

        The chain must verify against the given authority set; call
        ``verify_chain`` first when the provenance is untrusted.
        """
        ledger = cls.__new__(cls)
        ledger.authorities = list(authorities)
        ledger.keyring = keyring
        ledger.known_senders = set(authorities) | {tx.sender for b in blocks
                                                   for tx in b.transactions}
        ledger.contract = contract
        ledger.gas_limit = gas_limit
        ledger.block_interval = BLOCK_INTERVAL
        ledger.finality_depth = finality_depth
        ledger.blocks = list(blocks)
        ledger.pending = deque()
        ledger.receipts = {}
        ledger.receipt_order = []
        ledger.rejected_submissions = []
        return ledger

    # -- submission ----------------------------------------------------------

    def register_sender(self, key_id: str) -> None:
        if not self.keyring.knows(key_id):
            self.keyring.register(key_id)
        self.known_senders.add(key_id)

    def make_transaction(self, sender: str, calls: Sequence[Call],
                         submitted_at: float, gas: int, nonce: int) -> Transaction:
        """Build a signed transaction for a key held in this network's keyring."""
        tx_id = tx_payload_hash(sender, calls, submitted_at, nonce)
        body = tx_id + encode_tx_body(sender, nonce, submitted_at, gas, calls)
        sig = self.keyring.mac(sender, body)
        return Transaction(tx_id=tx_id, sender=sender, nonce=nonce,
                           submitted_at=submitted_at, gas=gas,
                           calls=tuple(calls), sig=sig)

    def submit_tx(self, tx: Transaction) -> str:
        """Queue a transaction FIFO, or reject it before any contract logic.

        Returns "queued", "auth-rejected" (unknown or bad signer) or
        "oversized-rejected" (gas above the block limit).
        """
        if tx.sender not in self.known_senders:
            self.rejected_submissions.append((tx.tx_id, "auth-rejected"))
            return "auth-rejected"
        body = tx.tx_id + encode_tx_body(tx.sender, tx.nonce, tx.submitted_at,
                                         tx.gas, tx.calls)
        if not self.keyring.verify(tx.sender, body, tx.sig):
            self.rejected_submissions.append((tx.tx_id, "auth-rejected"))
            return "auth-rejected"
        if tx.gas <= 0 or tx.gas > self.gas_limit:
            self.rejected_submissions.append((tx.tx_id, "oversized-rejected"))
            return "oversized-rejected"
        self.pending.append(tx)
        return "queued"

    # -- sealing ---------------------------------------------------------------

    def seal_block(self, now: int) -> Block:
        """Seal the block for tick ``now`` with the scheduled validator.

        Drains the pool in FIFO order until the next transaction would push
        gas past the limit (head-of-line blocking, no reordering), executes
        every payload call and records receipts.
        """
        if self.blocks and now <= self.blocks[-1].timestamp:
            raise ValueError("block timestamps must strictly increase")
        return self._seal(now)

    def _seal(self, now: int) -> Block:
        height = len(self.blocks)
        sealer = self.authorities[height % len(self.authorities)]
        selected: list[Transaction] = []
        gas_used = 0
        while self.pending and gas_used + self.pending[0].gas <= self.gas_limit:
            tx = self.pending.popleft()
            selected.append(tx)
            gas_used += tx.gas

        parent_hash = self.blocks[-1].block_hash if self.blocks else ZERO_HASH
        for tx in selected:
            statuses, results = self._execute(tx, height, now)
            receipt = Receipt(tx_id=tx.tx_id, submitted_at=tx.submitted_at,
                              sealed_at=now, height=height, gas=tx.gas,
                              statuses=statuses, results=results)
            self.receipts[tx.tx_id] = receipt
            self.receipt_order.append(tx.tx_id)

        header = block_header_bytes(height, parent_hash, now, sealer,
                                    selected, gas_used)
        block_hash = hashlib.sha256(header).digest()
        block = Block(height=height, parent_hash=parent_hash, timestamp=now,
                      sealer=sealer, transactions=tuple(selected),
                      gas_used=gas_used, block_hash=block_hash,
                      seal_sig=self.keyring.mac(sealer, block_hash))
        self.blocks.append(block)
        return block

    def _execute(self, tx: Transaction, height: int, now: int):
        """Run each call independently; one bad reading never voids its batch."""
        statuses, results = [], []
        ctx = CallContext(sender=tx.sender, block_height=height,
                          block_time=now, tx_id=tx.tx_id)
        for call in tx.calls:
            if self.contract is None:
                statuses.append("ok")
                results.append(None)
                continue
            try:
                results.append(self.contract.execute(call, ctx))
                statuses.append("ok")
            except ContractRevert as exc:
                results.append(None)
                statuses.append(f"revert:{exc.message}")
        return tuple(statuses), tuple(results)

    # -- inspection --------------------------------------------------------------

    @property
    def finalized_height(self) -> int:
        """Highest height with ``finality_depth`` sealed successors (-1 if none)."""
        return len(self.blocks) - 1 - self.finality_depth

    def has_pending_work(self) -> bool:
        """True while sealing another tick would still make progress."""
        if self.pending:
            return True
        last_nonempty = max((b.height for b in self.blocks if b.transactions),
                            default=None)
        if last_nonempty is None:
            return False
        return len(self.blocks) - 1 - last_nonempty < self.finality_depth

    def final_time(self, receipt: Receipt) -> Optional[int]:
        h = receipt.height + self.finality_depth
        return self.blocks[h].timestamp if h < len(self.blocks) else None

    def verify(self) -> Optional[int]:
        return verify_chain(self.blocks, self.authorities, self.keyring,
                            self.gas_limit)


def verify_chain(blocks: Sequence[Block], authorities: Sequence[str],
                 keyring: Keyring, gas_limit: int = GAS_LIMIT) -> Optional[int]:
    """Recompute every hash, link, schedule and seal; return the first bad height.

    ``None`` means the chain is intact.
    """
    for i, block in enumerate(blocks):
        if block.height != i:
            return i
        expected_parent = blocks[i - 1].block_hash if i else ZERO_HASH
        if block.parent_hash != expected_parent:
            return i
        if block.sealer != authorities[i % len(authorities)]:
            return i
        if i and block.timestamp <= blocks[i - 1].timestamp:
            return i
        if block.gas_used != sum(tx.gas for tx in block.transactions):
            return i
        if block.gas_used > gas_limit:
            return i
        header = block_header_bytes(block.height, block.parent_hash,
                                    block.timestamp, block.sealer,
                                    block.transactions, block.gas_used)
        if hashlib.sha256(header).digest() != block.block_hash:
            return i
        if not keyring.verify(block.sealer, block.block_hash, block.seal_sig):
            return i
    return None


def admit_peer(local: Ledger, candidate_blocks: Sequence[Block],
               validator_id: str) -> tuple[bool, str]:
    """Static-authority peer admission: known id, valid chain, matching prefix.

    The candidate must present a chain that verifies in full and agrees with
    every finalized local block; anything else is blocked.
    """
    if validator_id not in local.authorities:
        return False, "unknown validator id"
    if verify_chain(candidate_blocks, local.authorities, local.keyring,
                    local.gas_limit) is not None:
        return False, "candidate chain fails verification"
    for h in range(local.finalized_height + 1):
        if h >= len(candidate_blocks):
            return False, "candidate missing finalized blocks"
        if candidate_blocks[h].block_hash != local.blocks[h].block_hash:
            return False, f"divergent finalized prefix at height {h}"
    return True, "accepted"


def replay_chain(blocks: Sequence[Block],
                 contract_factory: Callable[[], VillageWaterSystem]) -> VillageWaterSystem:
    """Re-execute a sealed chain against a fresh contract instance."""
    contract = contract_factory()
    for block in blocks:
        for tx in block.transactions:
            ctx = CallContext(sender=tx.sender, block_height=block.height,
                              block_time=block.timestamp, tx_id=tx.tx_id)
            for call in tx.calls:
                try:
                    contract.execute(call, ctx)
                except ContractRevert:
                    pass
    return contract


def receipts_to_csv_rows(ledger: Ledger) -> list[list]:
    rows = [["tx_id", "submit_t", "seal_t", "final_t", "height", "status", "gas"]]
    for tx_id in ledger.receipt_order:
        receipt = ledger.receipts[tx_id]
        final_t = ledger.final_time(receipt)
        status = "ok" if all(s == "ok" for s in receipt.statuses) else "partial"
        rows.append([tx_id.hex(), repr(receipt.submitted_at), receipt.sealed_at,
                     "" if final_t is None else final_t, receipt.height,
                     status, receipt.gas])
    return rows
