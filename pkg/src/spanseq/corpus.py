"""Synthetic seller-behavior corpora and event-log ingestion.

The raw log schema here is an invention of this artifact (tab-separated
seller_id, timestamp, behavior, geo, success); real marketplace logs were
never in scope. Generated populations plant two archetypes. Normal sellers
are diverse manual operators with minority quirks (promo posting bursts,
clumsy logins, night owls) and a per-seller failure habit spanning the whole
range from flawless to error-prone. Abnormal sellers behave like scripted
automation: behavior cycles from a small canonical script family, metronomic
minute gaps, and same-minute event pileups, on top of one subtype marker each
(rapid region alternation, bulk posting bursts, or bulk operation failures).
Population means of failure counts, region switching, and burst minutes are
elevated on the abnormal side by the configured separation factor, but each
marginal statistic overlaps a normal minority, so the archetypes differ in
joint and temporal structure more than in any single aggregate.
"""

import calendar
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import NamedTuple

import numpy as np

BEHAVIORS = ("Register", "OpenShop", "Login", "Verify", "Modify", "Buy", "Post", "Edit", "Sell")
ONE_TIME = ("Register", "OpenShop")
REPEATABLE = tuple(b for b in BEHAVIORS if b not in ONE_TIME)
LOGIN_LIKE = ("Login", "Verify", "Modify", "Buy")
POST_LIKE = ("Post", "Edit", "Sell")
FAILURE_KINDS = ("Login", "Verify", "Modify")

REGIONS = (
    "Anhui", "Beijing", "Chongqing", "Dalian", "Fujian", "Gansu", "Guangdong",
    "Guangxi", "Guizhou", "Hainan", "Hebei", "Heilongjiang", "Henan", "HongKong",
    "Hubei", "Hunan", "InnerMongolia", "Jiangsu", "Jiangxi", "Jilin", "Liaoning",
    "Macau", "Ningbo", "Ningxia", "Qingdao", "Qinghai", "Shaanxi", "Shandong",
    "Shanghai", "Shanxi", "Shenzhen", "Sichuan", "Suzhou", "Taiwan", "Tianjin",
    "Tibet", "Xiamen", "Xinjiang", "Yunnan", "Zhejiang",
)

MINUTES_PER_MONTH = 43200


class RawEvent(NamedTuple):
    seller_id: str
    timestamp: int
    behavior: str
    geo: str
    success: bool


@dataclass(frozen=True)
class SellerProfile:
    seller_id: str
    archetype: str  # "Normal" or "Abnormal"
    subtype: str
    events_per_session: float
    sessions_per_day: tuple
    hour_blocks: tuple  # (start_hour, end_hour) pairs, end exclusive, may wrap
    geo_set: tuple
    fail_probs: dict  # behavior -> probability, for Login/Verify/Modify
    burst_rate: float  # expected burst minutes per month
    burst_size: tuple  # inclusive range of Post count per burst minute
    active_day_prob: float
    behavior_weights: dict
    event_geo_switch: float  # probability a single event toggles between the two primary regions
    zero_gap_prob: float  # probability the next event lands in the same minute
    fail_target: float = 0.0  # expected failed operations per month, all kinds combined
    script: tuple = None  # fixed behavior cycle; None draws from behavior_weights
    cadence: tuple = None  # (base_gap_minutes, jitter_prob); None draws loose gaps
    second_geo_prob: float = 0.0  # chance a session opens from the second region

    def __post_init__(self):
        for b, p in self.fail_probs.items():
            if not 0 <= p <= 1:
                raise ValueError(f"fail prob for {b} outside [0,1]: {p}")
        if self.events_per_session <= 0 or self.burst_rate < 0:
            raise ValueError("rates must be positive")
        if self.fail_target < 0:
            raise ValueError(f"fail target must be >= 0, got {self.fail_target}")


@dataclass
class IngestStats:
    rows: int = 0
    malformed: int = 0
    defaulted_success: int = 0


class Corpus:
    """Events grouped per seller and time-sorted, plus labels and the window."""

    def __init__(self, events, labels, window):
        self.events = {sid: sorted(evs, key=lambda e: e.timestamp) for sid, evs in events.items()}
        self.labels = dict(labels)
        self.window = (int(window[0]), int(window[1]))
        self._months = _month_bounds(self.window)
        if len(self._months) < 1:
            raise ValueError("corpus window must contain at least one calendar month")

    @property
    def sellers(self):
        return sorted(self.events)

    @property
    def n_months(self):
        return len(self._months)

    def month_bounds(self, month_index):
        if not 0 <= month_index < len(self._months):
            raise IndexError(
                f"month_index {month_index} outside corpus window with {len(self._months)} months"
            )
        return self._months[month_index]

    def month_slice(self, seller_id, month_index):
        """Events of one seller inside one calendar month, order preserved."""
        start, end = self.month_bounds(month_index)
        return [e for e in self.events.get(seller_id, []) if start <= e.timestamp < end]


def _month_start(year, month):
    return int(datetime(year, month, 1, tzinfo=timezone.utc).timestamp())


def _month_bounds(window):
    start, end = window
    dt = datetime.fromtimestamp(start, tz=timezone.utc)
    year, month = dt.year, dt.month
    bounds = []
    while True:
        s = _month_start(year, month)
        if s >= end:
            break
        year2, month2 = (year + 1, 1) if month == 12 else (year, month + 1)
        e = min(_month_start(year2, month2), end)
        bounds.append((s, e))
        year, month = year2, month2
    return bounds


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GeneratorConfig:
    sellers: int = 500
    months: int = 2
    abnormal_fraction: float = 0.05
    seed: int = 7
    start_month: str = "2021-04"
    separation_factor: float = 3.0
    normal_fail_prob: "float | None" = None
    abnormal_fail_prob: "float | None" = None

    def __post_init__(self):
        if self.sellers < 1:
            raise ValueError("sellers must be >= 1")
        if self.months < 2:
            raise ValueError("window too short: the cross-month task needs >= 2 calendar months")
        if not 0 <= self.abnormal_fraction <= 1:
            raise ValueError(f"archetype mix invalid: abnormal fraction {self.abnormal_fraction}")
        if self.separation_factor <= 0:
            raise ValueError("separation_factor must be positive")
        datetime.strptime(self.start_month, "%Y-%m")


# monthly failed-operation targets and their draw weights, per habit tier
_NORMAL_FAIL_TIERS = ((0.0, 1.0, 2.0, 4.0, 6.0), (0.30, 0.22, 0.17, 0.17, 0.14))
_ABNORMAL_FAIL_TIERS = {
    "geo_hopper": ((3.0, 8.0), (0.5, 0.5)),
    "burst_spammer": ((3.0, 8.0, 25.0), (0.35, 0.40, 0.25)),
    "account_farmer": ((25.0, 70.0), (0.6, 0.4)),
}
_HEAVY_FAIL_TARGET = 15.0  # at or above this, failures arrive in chained retries
_SCRIPT_FIDELITY = 0.85  # share of scripted sellers' events that follow the cycle

# Canonical automation cycles. All three share one composition (Buy 3, Post 3,
# Edit 2, Sell 2, Verify 1, Modify 1 per 12 steps) that matches the population
# -mean behavior shares, so per-kind monthly counts stay aligned with normal
# sellers; what the scripts share is order, and that order plus the metronomic
# cadence is what makes scripted sellers look like copies of each other.
_BOT_SCRIPTS = (
    ("Buy", "Post", "Edit", "Sell", "Buy", "Post", "Verify", "Edit", "Buy", "Post", "Sell", "Modify"),
    ("Post", "Buy", "Sell", "Edit", "Post", "Buy", "Modify", "Sell", "Post", "Buy", "Edit", "Verify"),
    ("Buy", "Sell", "Post", "Edit", "Buy", "Post", "Verify", "Sell", "Buy", "Edit", "Post", "Modify"),
)


def _draw_hour_blocks(rng):
    """Two daily activity blocks; one seller in ten is a night owl."""
    if rng.random() < 0.10:
        return ((22, 2), (2, 6))
    s1 = int(rng.integers(7, 11))
    s2 = int(rng.integers(13, 19))
    return ((s1, s1 + int(rng.integers(2, 5))), (s2, s2 + int(rng.integers(2, 6))))


def _draw_weights(rng):
    return {
        "Buy": rng.uniform(0.5, 2.0), "Post": rng.uniform(0.5, 2.0),
        "Edit": rng.uniform(0.3, 1.5), "Sell": rng.uniform(0.3, 1.5),
        "Verify": rng.uniform(0.2, 0.8), "Modify": rng.uniform(0.2, 0.8),
    }


def _draw_script(rng):
    """Assign one of the canonical automation cycles."""
    return _BOT_SCRIPTS[int(rng.integers(len(_BOT_SCRIPTS)))]


def _fail_probs_from_target(target, active_day_prob, events_per_session, weights, script):
    """Per-attempt failure probability that realizes ~target fails per month.

    Attempts are one login per session plus every Verify/Modify event; the
    delivery multiplier accounts for paired (light) or chained (heavy) retries.
    """
    if target <= 0:
        return {b: 0.0 for b in FAILURE_KINDS}
    if script is not None:
        p_like = sum(1 for b in script if b in FAILURE_KINDS) / len(script)
    else:
        total = sum(weights.values())
        p_like = (weights["Verify"] + weights["Modify"]) / total
    attempts = active_day_prob * 30.0 * 2.0 * (1.0 + events_per_session * p_like)
    multiplier = 2.5 if target >= _HEAVY_FAIL_TARGET else 1.25
    p = min(0.45, target / (attempts * multiplier))
    return {b: float(p) for b in FAILURE_KINDS}


def _sample_profile(sid, archetype, rng, config):
    """Draw one seller's habit parameters.

    Both archetypes share the same session-volume, hour-block, and behavior
    -weight distributions, so single activity aggregates overlap heavily.
    Normal sellers spread over failure-habit tiers from flawless to clumsy
    and include a promo-poster minority; abnormal sellers follow a scripted
    cycle at a metronomic cadence with frequent same-minute pileups, and each
    subtype elevates one marker family (region alternation, posting bursts,
    or bulk failures) far enough that population means separate clearly.
    """
    sep = config.separation_factor / 3.0
    events_per_session = float(rng.uniform(3, 8))
    blocks = _draw_hour_blocks(rng)
    weights = _draw_weights(rng)
    if archetype == "Normal":
        promo = rng.random() < 0.18
        tiers, tier_p = _NORMAL_FAIL_TIERS
        target = float(rng.choice(tiers, p=tier_p))
        active_day_prob = float(rng.uniform(0.6, 0.95))
        n_geo = 1 if rng.random() < 0.6 else 2
        return SellerProfile(
            seller_id=sid, archetype=archetype, subtype="normal",
            events_per_session=events_per_session,
            sessions_per_day=(1, 3),
            hour_blocks=blocks,
            geo_set=tuple(rng.choice(REGIONS, size=n_geo, replace=False)),
            fail_probs=_fail_probs_from_target(
                target, active_day_prob, events_per_session, weights, None),
            burst_rate=float(rng.uniform(0.5, 2.0)) if promo else float(rng.uniform(0.0, 0.1)),
            burst_size=(5, 9),
            active_day_prob=active_day_prob,
            behavior_weights=weights,
            event_geo_switch=0.0,
            zero_gap_prob=float(rng.uniform(0.05, 0.15)),
            fail_target=target,
            second_geo_prob=0.10 if n_geo == 2 else 0.0,
        )

    subtype = rng.choice(("geo_hopper", "burst_spammer", "account_farmer"), p=(0.4, 0.3, 0.3))
    tiers, tier_p = _ABNORMAL_FAIL_TIERS[subtype]
    target = float(rng.choice(tiers, p=tier_p)) * sep
    active_day_prob = float(rng.uniform(0.65, 0.95))
    script = _draw_script(rng)
    return SellerProfile(
        seller_id=sid, archetype="Abnormal", subtype=str(subtype),
        events_per_session=events_per_session,
        sessions_per_day=(1, 3),
        hour_blocks=blocks,
        geo_set=tuple(rng.choice(REGIONS, size=int(rng.integers(3, 7)), replace=False)),
        fail_probs=_fail_probs_from_target(
            target, active_day_prob, events_per_session, weights, script),
        burst_rate=float(rng.uniform(3.0, 7.0)) * sep if subtype == "burst_spammer"
        else float(rng.uniform(0.0, 0.3)),
        burst_size=(5, 9),
        active_day_prob=active_day_prob,
        behavior_weights=weights,
        event_geo_switch=float(rng.uniform(0.35, 0.60)) if subtype == "geo_hopper" else 0.0,
        zero_gap_prob=float(rng.uniform(0.16, 0.22)),
        fail_target=target,
        script=script,
        cadence=(3, 0.25),
        second_geo_prob=0.10 if subtype == "geo_hopper" else 0.0,
    )


def _apply_fail_override(profile, prob):
    if prob is None:
        return profile
    return SellerProfile(**{
        **{f: getattr(profile, f) for f in profile.__dataclass_fields__},
        "fail_probs": {b: float(prob) for b in FAILURE_KINDS},
    })


def _minute_in_block(block, rng):
    start, end = block
    span = (end - start) % 24 or 24
    hour = (start + int(rng.integers(span))) % 24
    return hour * 60 + int(rng.integers(60))


def _simulate_seller(profile, window_start, n_days, rng):
    """Emit one seller's events over the whole window, minute-resolved."""
    events = []
    total_minutes = n_days * 1440
    behaviors = list(profile.behavior_weights)
    w = np.array([profile.behavior_weights[b] for b in behaviors], dtype=float)
    w /= w.sum()
    heavy_fail = profile.fail_target >= _HEAVY_FAIL_TARGET
    home = profile.geo_set[0]

    def emit(minute, behavior, geo, success):
        if 0 <= minute < total_minutes:
            ts = window_start + minute * 60 + int(rng.integers(60))
            events.append(RawEvent(profile.seller_id, ts, behavior, geo, success))

    def session_geo():
        if profile.second_geo_prob > 0 and rng.random() < profile.second_geo_prob:
            return profile.geo_set[1]
        return home

    def fail_run(minute, behavior, geo):
        """Failed attempts before a success; returns the success minute.

        Light failers leave singles or same-minute pairs so the exact count
        stays legible after aggregation; heavy failers retry in chains.
        """
        if heavy_fail:
            for _ in range(int(rng.integers(1, 5))):
                emit(minute, behavior, geo, False)
                if rng.random() < 0.5:
                    minute += int(rng.integers(1, 3))
        else:
            for _ in range(1 if rng.random() < 0.75 else 2):
                emit(minute, behavior, geo, False)
        return minute + int(rng.integers(1, 3))

    def next_gap(run):
        """Minutes to the next event, capping same-minute runs at three events."""
        if run < 2 and rng.random() < profile.zero_gap_prob:
            return 0, run + 1
        if profile.cadence is not None:
            base, jitter_prob = profile.cadence
            jitter = int(rng.integers(-1, 2)) if rng.random() < jitter_prob else 0
            return max(1, base + jitter), 0
        return int(rng.integers(1, 25)), 0

    active_days = [d for d in range(n_days) if rng.random() < profile.active_day_prob]
    if not active_days:
        active_days = [int(rng.integers(n_days))]

    first = active_days[0]
    reg_minute = first * 1440 + _minute_in_block(profile.hour_blocks[0], rng)
    emit(reg_minute, "Register", home, True)
    emit(reg_minute + int(rng.integers(1, 40)), "OpenShop", home, True)

    lo, hi = profile.sessions_per_day
    script_pos = 0
    for day in active_days:
        for _ in range(int(rng.integers(lo, hi + 1))):
            block = profile.hour_blocks[int(rng.integers(len(profile.hour_blocks)))]
            minute = day * 1440 + _minute_in_block(block, rng)
            geo = session_geo()
            if rng.random() < profile.fail_probs["Login"]:
                minute = fail_run(minute, "Login", geo)
            emit(minute, "Login", geo, True)
            run = 0
            n_events = rng.poisson(profile.events_per_session)
            for _ in range(n_events):
                gap, run = next_gap(run)
                minute += gap
                if minute >= (day + 1) * 1440 + 120:
                    break
                if profile.script is not None and rng.random() < _SCRIPT_FIDELITY:
                    behavior = profile.script[script_pos % len(profile.script)]
                    script_pos += 1
                else:
                    behavior = behaviors[int(rng.choice(len(behaviors), p=w))]
                if profile.event_geo_switch > 0 and rng.random() < profile.event_geo_switch:
                    geo = profile.geo_set[1] if geo == profile.geo_set[0] else profile.geo_set[0]
                if behavior in FAILURE_KINDS and rng.random() < profile.fail_probs[behavior]:
                    minute = fail_run(minute, behavior, geo)
                    run = 0
                emit(minute, behavior, geo, True)

    months = max(1, n_days // 30)
    n_bursts = rng.poisson(profile.burst_rate * months)
    for _ in range(n_bursts):
        day = active_days[int(rng.integers(len(active_days)))]
        block = profile.hour_blocks[int(rng.integers(len(profile.hour_blocks)))]
        minute = day * 1440 + _minute_in_block(block, rng)
        geo = session_geo()
        for _ in range(int(rng.integers(profile.burst_size[0], profile.burst_size[1] + 1))):
            emit(minute, "Post", geo, True)
        for _ in range(int(rng.integers(0, 5))):
            emit(minute, "Edit", geo, True)
    return events


def generate(config):
    """Build a deterministic synthetic corpus from a GeneratorConfig."""
    year, month = (int(p) for p in config.start_month.split("-"))
    start = _month_start(year, month)
    y_end, m_end = year, month
    for _ in range(config.months):
        y_end, m_end = (y_end + 1, 1) if m_end == 12 else (y_end, m_end + 1)
    end = _month_start(y_end, m_end)
    n_days = (end - start) // 86400

    master = np.random.default_rng([config.seed, 0xC0FFEE])
    n_abnormal = int(round(config.sellers * config.abnormal_fraction))
    flags = np.zeros(config.sellers, dtype=bool)
    flags[master.permutation(config.sellers)[:n_abnormal]] = True

    events = {}
    labels = {}
    for i in range(config.sellers):
        sid = f"s{config.seed}-{i:05d}"
        archetype = "Abnormal" if flags[i] else "Normal"
        rng = np.random.default_rng([config.seed, 1, i])
        profile = _sample_profile(sid, archetype, rng, config)
        override = config.abnormal_fail_prob if flags[i] else config.normal_fail_prob
        profile = _apply_fail_override(profile, override)
        events[sid] = _simulate_seller(profile, start, n_days, rng)
        labels[sid] = 1 if flags[i] else 0
    return Corpus(events, labels, (start, end))


# ---------------------------------------------------------------------------
# event-log files


def _format_timestamp(ts):
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S+00:00")


def _parse_timestamp(text):
    if text.isdigit() or (text.startswith("-") and text[1:].isdigit()):
        return int(text)
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def write_events(corpus, path):
    """Tab-separated event log: seller_id, ISO-8601 UTC, behavior, geo, success."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid in corpus.sellers:
            for e in corpus.events[sid]:
                fh.write(
                    f"{e.seller_id}\t{_format_timestamp(e.timestamp)}\t{e.behavior}"
                    f"\t{e.geo}\t{1 if e.success else 0}\n"
                )


def write_labels(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sid in corpus.sellers:
            if sid in corpus.labels:
                fh.write(f"{sid}\t{corpus.labels[sid]}\n")


def read_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, _, value = line.partition("\t")
            labels[sid] = int(value)
    return labels


def ingest(events_path, labels_path=None, strict=True):
    """Parse an event log into a Corpus; returns (corpus, IngestStats).

    Strict mode raises on the first malformed row (naming the line); lenient
    mode skips and counts. A missing success column defaults to true and is
    counted separately. The window is inferred as the smallest whole span
    of calendar months covering the data.
    """
    stats = IngestStats()
    events = {}
    min_ts, max_ts = None, None
    with open(events_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            stats.rows += 1
            parts = line.split("\t")
            try:
                if len(parts) == 4:
                    sid, ts_text, behavior, geo = parts
                    success = True
                    stats.defaulted_success += 1
                elif len(parts) == 5:
                    sid, ts_text, behavior, geo, flag = parts
                    if flag not in ("0", "1"):
                        raise ValueError(f"success flag must be 0 or 1, got {flag!r}")
                    success = flag == "1"
                else:
                    raise ValueError(f"expected 4 or 5 tab-separated fields, got {len(parts)}")
                if behavior not in BEHAVIORS:
                    raise ValueError(f"unknown behavior {behavior!r}")
                if not sid or not geo:
                    raise ValueError("empty seller_id or geo")
                ts = _parse_timestamp(ts_text)
            except ValueError as exc:
                if strict:
                    raise ValueError(f"{events_path}:{lineno}: {exc}") from None
                stats.malformed += 1
                continue
            events.setdefault(sid, []).append(RawEvent(sid, ts, behavior, geo, success))
            min_ts = ts if min_ts is None else min(min_ts, ts)
            max_ts = ts if max_ts is None else max(max_ts, ts)

    labels = read_labels(labels_path) if labels_path else {}
    if min_ts is None:
        now = datetime.now(tz=timezone.utc)
        start = _month_start(now.year, now.month)
        return Corpus({}, labels, (start, start + 1)), stats
    d0 = datetime.fromtimestamp(min_ts, tz=timezone.utc)
    d1 = datetime.fromtimestamp(max_ts, tz=timezone.utc)
    start = _month_start(d0.year, d0.month)
    y, m = (d1.year + 1, 1) if d1.month == 12 else (d1.year, d1.month + 1)
    end = _month_start(y, m)
    return Corpus(events, labels, (start, end)), stats
