"""Minute-level aggregation of raw events into four-channel tokens.

All events of one seller inside one minute collapse into a single
MinuteToken carrying behavior, geo, time-point, and time-lag channels.
Failed repeatable operations aggregate into their own "<Behavior>Fail"
parts (ordered right after the successful part of the same behavior), so
operation outcomes stay visible to the sequence encoder; that is this
artifact's reading of per-minute aggregation, since its raw schema
carries an explicit success flag.
"""

import enum
from dataclasses import dataclass

from .corpus import BEHAVIORS, LOGIN_LIKE, ONE_TIME, POST_LIKE

MINUTES_PER_MONTH = 43200

PAD, MASK, CLS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<mask>", "<cls>", "<unk>")

MAX_GEO_PARTS = 4

LAG_BUCKETS = (
    "start", "1", "2", "3-4", "5-8", "9-16", "17-32", "33-64",
    "65-128", "129-256", "257-512", "513-1440", ">1440",
)
_LAG_EDGES = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1440)

HOUR_TOKENS = tuple(str(h) for h in range(24))


class FuzzyLevel(enum.Enum):
    L = "L"
    M = "M"
    H = "H"


@dataclass(frozen=True)
class MinuteToken:
    minute_index: int
    behavior_token: str
    geo_token: str
    time_point_token: int
    time_lag_token: str


def fuzzy_level(behavior, count):
    """Map a per-minute occurrence count to L/M/H for one behavior.

    Login-like behaviors saturate at 3 per minute, post-like at 5; the
    two one-time behaviors carry no level at all and are rejected here.
    """
    if behavior in ONE_TIME:
        raise ValueError(f"fuzzy_level: one-time behavior {behavior} carries no level")
    if behavior not in BEHAVIORS:
        raise ValueError(f"fuzzy_level: unknown behavior {behavior!r}")
    if count < 1:
        raise ValueError(f"fuzzy_level: count must be >= 1, got {count}")
    if behavior in LOGIN_LIKE:
        if count == 1:
            return FuzzyLevel.L
        return FuzzyLevel.M if count == 2 else FuzzyLevel.H
    assert behavior in POST_LIKE
    if count == 1:
        return FuzzyLevel.L
    return FuzzyLevel.M if count < 5 else FuzzyLevel.H


def time_lag_bucket(gap_minutes):
    """Bucket a positive gap (minutes since previous active minute)."""
    if gap_minutes < 1:
        raise ValueError(f"time_lag_bucket: gap must be >= 1, got {gap_minutes}")
    for label, edge in zip(LAG_BUCKETS[1:], _LAG_EDGES):
        if gap_minutes <= edge:
            return label
    return LAG_BUCKETS[-1]


def aggregate_minute(events, month_start_epoch=0, prev_minute=None):
    """Collapse one minute of events (same seller, same minute) into a token.

    Behavior parts follow the canonical behavior order, successful part
    before the failed part; geo parts are distinct regions sorted
    lexicographically with no counts, collapsing to the UNK token when
    more than four regions appear within the minute.
    """
    if not events:
        raise ValueError("aggregate_minute: empty event list")
    minutes = {e.timestamp // 60 for e in events}
    if len(minutes) != 1:
        raise ValueError(f"aggregate_minute: events span {len(minutes)} minutes")
    sellers = {e.seller_id for e in events}
    if len(sellers) != 1:
        raise ValueError("aggregate_minute: events from multiple sellers")
    abs_minute = minutes.pop()
    minute_index = abs_minute - month_start_epoch // 60

    counts = {}
    for e in events:
        key = (e.behavior, e.success)
        counts[key] = counts.get(key, 0) + 1
    parts = []
    for behavior in BEHAVIORS:
        for success in (True, False):
            n = counts.get((behavior, success))
            if n is None:
                continue
            name = behavior if success else behavior + "Fail"
            if behavior in ONE_TIME:
                parts.append(name)
            else:
                parts.append(name + fuzzy_level(behavior, n).value)

    geos = sorted({e.geo for e in events})
    geo_token = "_".join(geos) if len(geos) <= MAX_GEO_PARTS else RESERVED_TOKENS[UNK]

    if prev_minute is None:
        lag = LAG_BUCKETS[0]
    else:
        lag = time_lag_bucket(minute_index - prev_minute)

    return MinuteToken(
        minute_index=minute_index,
        behavior_token="_".join(parts),
        geo_token=geo_token,
        time_point_token=(abs_minute // 60) % 24,
        time_lag_token=lag,
    )


def tokenize_month(events, month_start_epoch):
    """One MinuteToken per active minute of a seller-month, time-ordered.

    Minutes at offset >= 43,200 (tail of 31-day months) are dropped so
    every month view fits the fixed 30-day grid.
    """
    by_minute = {}
    for e in events:
        offset = e.timestamp // 60 - month_start_epoch // 60
        if offset < 0:
            raise ValueError("tokenize_month: event before month start")
        if offset >= MINUTES_PER_MONTH:
            continue
        by_minute.setdefault(offset, []).append(e)
    tokens = []
    prev = None
    for offset in sorted(by_minute):
        tokens.append(aggregate_minute(by_minute[offset], month_start_epoch, prev))
        prev = offset
    return tokens


class Vocabulary:
    """Dense token-to-id map with four reserved ids at the front."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            tokens = list(RESERVED_TOKENS) + tokens
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("Vocabulary: duplicate tokens")

    @classmethod
    def from_observed(cls, observed):
        body = sorted(set(observed) - set(RESERVED_TOKENS))
        return cls(list(RESERVED_TOKENS) + body)

    def id_for(self, token):
        return self.index.get(token, UNK)

    def token_for(self, idx):
        return self.tokens[idx]

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def to_text(self):
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls(text.splitlines())


CHANNELS = ("behavior", "geo", "time_point", "time_lag")


def build_vocab(corpus):
    """Per-channel vocabularies over every token observed in the corpus.

    Hour and lag channels enumerate their full closed token sets; behavior
    and geo channels collect what the corpus actually produced, and unseen
    tokens map to UNK at lookup time.
    """
    behavior_tokens = set()
    geo_tokens = set()
    for sid in corpus.sellers:
        for m in range(corpus.n_months):
            start, _ = corpus.month_bounds(m)
            for tok in tokenize_month(corpus.month_slice(sid, m), start):
                behavior_tokens.add(tok.behavior_token)
                geo_tokens.add(tok.geo_token)
    return {
        "behavior": Vocabulary.from_observed(behavior_tokens),
        "geo": Vocabulary.from_observed(geo_tokens),
        "time_point": Vocabulary(list(RESERVED_TOKENS) + list(HOUR_TOKENS)),
        "time_lag": Vocabulary(list(RESERVED_TOKENS) + list(LAG_BUCKETS)),
    }


def token_ids(token, vocabs):
    """Four channel ids for one MinuteToken, UNK for out-of-vocabulary."""
    return (
        vocabs["behavior"].id_for(token.behavior_token),
        vocabs["geo"].id_for(token.geo_token),
        vocabs["time_point"].id_for(str(token.time_point_token)),
        vocabs["time_lag"].id_for(token.time_lag_token),
    )
