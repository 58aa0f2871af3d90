"""Per-queue token bucket.

The bucket never reads a clock: every operation takes ``now`` (integer
milliseconds on a monotonic timeline) and returns a new bucket. Refill is
lazy, computed from ``last_refill`` on access, at one token per
``refill_interval_ms``. Partial progress toward the next token is kept
between calls, except while the bucket is full.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True, slots=True)
class TokenBucket:
    capacity: int
    refill_interval_ms: int
    tokens: int
    last_refill: int

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        if self.refill_interval_ms < 1:
            raise ValueError(f"refill_interval_ms must be >= 1, got {self.refill_interval_ms}")
        if not 0 <= self.tokens <= self.capacity:
            raise ValueError(f"tokens {self.tokens} outside [0, {self.capacity}]")

    @classmethod
    def full(cls, capacity: int, refill_interval_ms: int, now: int) -> TokenBucket:
        """A freshly created bucket starts full."""
        return cls(capacity, refill_interval_ms, capacity, now)

    def refill(self, now: int) -> TokenBucket:
        if now < self.last_refill:
            raise ValueError("clock went backwards")
        if self.tokens >= self.capacity:
            if now == self.last_refill:
                return self
            return replace(self, last_refill=now)
        added = (now - self.last_refill) // self.refill_interval_ms
        if added == 0:
            return self
        if self.tokens + added >= self.capacity:
            # progress does not accumulate once the bucket is full
            return replace(self, tokens=self.capacity, last_refill=now)
        return replace(
            self,
            tokens=self.tokens + added,
            last_refill=self.last_refill + added * self.refill_interval_ms,
        )

    def try_acquire(self, now: int) -> tuple[bool, TokenBucket]:
        bucket = self.refill(now)
        if bucket.tokens >= 1:
            return True, replace(bucket, tokens=bucket.tokens - 1)
        return False, bucket

    def next_available(self, now: int) -> int:
        """Earliest time >= now at which try_acquire would grant."""
        bucket = self.refill(now)
        if bucket.tokens >= 1:
            return now
        return bucket.last_refill + bucket.refill_interval_ms
