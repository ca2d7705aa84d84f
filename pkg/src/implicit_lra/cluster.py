"""Star-topology cluster simulator with a word-accounting ledger.

Server 1 is the central processor (CP). One word is one 64-bit quantity: a
real, an index or a seed coefficient. Accounting conventions:

* ``send`` between server 1 and another server bills the payload once; a
  send between two non-CP servers is relayed through server 1 and bills
  ``2 * (words + 1)`` (payload plus destination id, twice).
* ``broadcast`` from server 1 bills ``(s - 1) * words``.
* ``gather`` bills every server's upload, server 1's own share included, so
  that "each server sends its slice" costs ``s * words``.
* ``announce`` bills a CP-published index list once.

Fan-out traffic is logged as one aggregated message: a broadcast is a
record from 1 to destination 0 ("every other server") carrying
``(s - 1) * words``; a uniform gather is a record from source 0 ("every
server") to 1 carrying ``s * words``. Long sampling runs would otherwise
keep millions of identical records.
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np


class ProtocolError(RuntimeError):
    pass


class Message(NamedTuple):
    round: int
    source: int
    destination: int
    words: int
    tag: str


def word_count(payload):
    """Words in a payload. A bare integer is itself a word count; inside a
    list or tuple every scalar is one word and every array its size."""
    if isinstance(payload, (int, np.integer)):
        return int(payload)
    return _words(payload)


def _words(item):
    if isinstance(item, np.ndarray):
        return int(item.size)
    if isinstance(item, (list, tuple)):
        return sum(_words(p) for p in item)
    if isinstance(item, (int, float, np.integer, np.floating)):
        return 1
    raise TypeError(f"cannot count words of {type(item).__name__}")


@dataclass
class CommLedger:
    messages: List[Message] = field(default_factory=list)
    total_words: int = 0

    def record(self, rnd, src, dst, words, tag):
        if words < 0:
            raise ValueError("negative word count")
        self.messages.append(Message(rnd, src, dst, int(words), tag))
        self.total_words += int(words)

    def words_by_tag(self, prefix=""):
        out = {}
        for m in self.messages:
            if m.tag.startswith(prefix):
                out[m.tag] = out.get(m.tag, 0) + m.words
        return out

    def words_for(self, tag):
        return sum(m.words for m in self.messages if m.tag == tag)

    def canonical(self):
        return sorted(self.messages, key=lambda m: (m.round, m.source, m.tag))

    def to_lines(self):
        lines = ["round,source,destination,words,tag"]
        lines += [f"{m.round},{m.source},{m.destination},{m.words},{m.tag}" for m in self.messages]
        return "\n".join(lines) + "\n"


def server_rng(seed, server):
    """Per-server generator: ``seed XOR server`` keys a Philox counter generator."""
    key = (int(seed) ^ int(server)) & ((1 << 64) - 1)
    return np.random.Generator(np.random.Philox(key=key))


class Cluster:
    """``s`` servers holding equally shaped local arrays; server 1 is the CP."""

    def __init__(self, local_data, seed=0):
        data = [np.asarray(x, dtype=np.float64) for x in local_data]
        if not data:
            raise ValueError("need at least one server")
        shape = data[0].shape
        for t, x in enumerate(data, start=1):
            if x.shape != shape:
                raise ValueError(f"server {t} holds shape {x.shape}, expected {shape}")
        self.local_data = data
        self.seed = int(seed)
        self.ledger = CommLedger()
        self.round = 0
        self._rngs = {}

    @property
    def s(self):
        return len(self.local_data)

    @property
    def shape(self):
        return self.local_data[0].shape

    def rng(self, server=1):
        if server not in self._rngs:
            self._check(server)
            self._rngs[server] = server_rng(self.seed, server)
        return self._rngs[server]

    def next_round(self):
        self.round += 1
        return self.round

    def _check(self, server):
        if not (isinstance(server, (int, np.integer)) and 1 <= server <= self.s):
            raise ProtocolError(f"invalid server id {server!r} (s={self.s})")

    def send(self, src, dst, payload, tag):
        self._check(src)
        self._check(dst)
        if src == dst:
            raise ProtocolError("send requires distinct endpoints")
        w = word_count(payload)
        if src == 1 or dst == 1:
            self.ledger.record(self.round, src, dst, w, tag)
        else:
            self.ledger.record(self.round, src, 1, w + 1, tag)
            self.ledger.record(self.round, 1, dst, w + 1, tag)

    def broadcast(self, payload, tag):
        w = word_count(payload)
        if self.s > 1:
            self.ledger.record(self.round, 1, 0, (self.s - 1) * w, tag)

    def gather(self, payload, tag):
        """Every server uploads ``payload`` words (or a per-server list) to server 1."""
        if isinstance(payload, (list, tuple)) and len(payload) == self.s:
            for t, p in enumerate(payload, start=1):
                self.ledger.record(self.round, t, 1, word_count(p), tag)
        else:
            self.ledger.record(self.round, 0, 1, self.s * word_count(payload), tag)

    def announce(self, payload, tag):
        self.ledger.record(self.round, 1, 0, word_count(payload), tag)

    def total_words(self):
        return self.ledger.total_words

    def aggregate(self):
        """Central ``sum_t A^t`` in server order. Measurement only; never billed."""
        acc = self.local_data[0].copy()
        for x in self.local_data[1:]:
            acc += x
        return acc

    def stacked(self):
        """Local data flattened to an ``s x l`` array (row t = server t+1)."""
        return np.stack([x.ravel() for x in self.local_data])


def ledger_total_words(cluster):
    return cluster.total_words()
