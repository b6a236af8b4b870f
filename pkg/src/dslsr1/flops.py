"""Self-charged flop accounting for the master role.

Every master-side linear-algebra call in the drivers charges the meter with
its closed-form cost at the call site, giving a per-iteration inventory of
master work.  The point of the record is scaling: the communication-
efficient variant's master must stay within a small multiple of m^3 + d per
iteration and never execute a single operation whose cost grows like m*d.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopRecord:
    iteration: int
    op: str
    flops: int


class FlopMeter:
    def __init__(self):
        self.records = []
        self.iteration = 0

    def charge(self, op, flops):
        self.records.append(FlopRecord(int(self.iteration), op, int(flops)))

    def iteration_total(self, k):
        return sum(r.flops for r in self.records if r.iteration == k)

    def max_single_op(self, k=None):
        costs = [r.flops for r in self.records if k is None or r.iteration == k]
        return max(costs, default=0)

    def total(self):
        return sum(r.flops for r in self.records)

    def by_op(self, k=None):
        out = {}
        for r in self.records:
            if k is None or r.iteration == k:
                out[r.op] = out.get(r.op, 0) + r.flops
        return out
