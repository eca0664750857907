"""Events, catalog, file I/O, time windows and the synthetic corpus."""
from __future__ import annotations

import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, UnknownOffer

EVENT_HEADER = ("ts", "user_id", "shop_id", "offer_id", "action", "region_id", "price")
CATALOG_HEADER = ("offer_id", "shop_id", "name", "name_cats", "brand",
                  "market_model", "market_category", "market_vendor", "price")

DAY = 86_400
WEEK = 7 * DAY
EPOCH_BASE = 1_500_000_000


class Action(enum.IntEnum):
    CLICK = 0
    DETAIL = 1
    ADD = 2
    PURCHASE = 3

    @property
    def token(self):
        return self.name.lower()

    @classmethod
    def parse(cls, token):
        try:
            return cls[token.upper()] if token == token.lower() else None
        except KeyError:
            return None


ACTION_TOKENS = tuple(a.token for a in Action)


class EmptyPartitionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Event:
    ts: int
    user_id: int
    shop_id: int
    offer_id: int
    action: Action
    region_id: int
    price: float

    def __post_init__(self):
        if self.ts < 0:
            raise ValueError("ts must be non-negative")
        if self.price < 0 or not math.isfinite(self.price):
            raise ValueError("price must be a finite non-negative number")


@dataclass(frozen=True)
class OfferMeta:
    offer_id: int
    shop_id: int
    offer_name: str
    offer_name_cats: tuple
    offer_brand: str
    market_model: int
    market_category: int
    market_vendor: int
    price: float


class EventLog:
    """Columnar, ts-sorted event sequence.

    Rows are ordered by ``(ts, user_id, offer_id, action)``; rows equal on
    all four keep their input order.
    """

    COLUMNS = ("ts", "user", "shop", "offer", "action", "region", "price")

    def __init__(self, ts, user, shop, offer, action, region, price, *, presorted=False):
        cols = dict(
            ts=np.asarray(ts, np.int64), user=np.asarray(user, np.int64),
            shop=np.asarray(shop, np.int64), offer=np.asarray(offer, np.int64),
            action=np.asarray(action, np.int8), region=np.asarray(region, np.int64),
            price=np.asarray(price, np.float64),
        )
        n = cols["ts"].shape[0]
        if any(c.shape != (n,) for c in cols.values()):
            raise ValueError("event columns must be 1-d and equally long")
        if not presorted:
            order = canonical_order(cols["ts"], cols["user"], cols["offer"], cols["action"])
            cols = {k: v[order] for k, v in cols.items()}
        for k, v in cols.items():
            v.setflags(write=False)
            setattr(self, k, v)

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, presorted=True)

    @classmethod
    def from_events(cls, events: Iterable[Event]):
        events = list(events)
        if not events:
            return cls.empty()
        return cls(
            [e.ts for e in events], [e.user_id for e in events], [e.shop_id for e in events],
            [e.offer_id for e in events], [int(e.action) for e in events],
            [e.region_id for e in events], [e.price for e in events],
        )

    def __len__(self):
        return int(self.ts.shape[0])

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)

    def event(self, i) -> Event:
        return Event(int(self.ts[i]), int(self.user[i]), int(self.shop[i]), int(self.offer[i]),
                     Action(int(self.action[i])), int(self.region[i]), float(self.price[i]))

    def select(self, mask) -> "EventLog":
        """Sub-log of the rows picked by a boolean mask or ascending index array."""
        return EventLog(*(getattr(self, c)[mask] for c in self.COLUMNS), presorted=True)

    def is_sorted(self):
        if len(self) < 2:
            return True
        order = canonical_order(self.ts, self.user, self.offer, self.action)
        return bool(np.all(order == np.arange(len(self))))

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in self.COLUMNS)

    def __repr__(self):
        return f"EventLog(n={len(self)})"


def canonical_order(ts, user, offer, action):
    # lexsort is stable and treats the last key as primary
    return np.lexsort((action, offer, user, ts))


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------

class Catalog:
    """Offer metadata with dense integer codes for every content dimension."""

    def __init__(self, offers: Sequence[OfferMeta]):
        offers = sorted(offers, key=lambda o: o.offer_id)
        ids = np.array([o.offer_id for o in offers], np.int64)
        if ids.size and np.any(ids[1:] == ids[:-1]):
            dup = ids[1:][ids[1:] == ids[:-1]][0]
            raise ValueError(f"duplicate offer_id {dup} in catalog")
        self.offers = tuple(offers)
        self.offer_id = ids
        self.shop = np.array([o.shop_id for o in offers], np.int64)
        self.price = np.array([o.price for o in offers], np.float64)
        self.model = np.array([o.market_model for o in offers], np.int64)
        self.category = np.array([o.market_category for o in offers], np.int64)
        self.vendor = np.array([o.market_vendor for o in offers], np.int64)
        self.brands = tuple(sorted({o.offer_brand for o in offers}))
        brand_code = {b: i for i, b in enumerate(self.brands)}
        self.brand = np.array([brand_code[o.offer_brand] for o in offers], np.int64)
        self.tags = tuple(sorted({t for o in offers for t in o.offer_name_cats}))
        tag_code = {t: i for i, t in enumerate(self.tags)}
        tag_rows, tag_vals, primary = [], [], []
        for r, o in enumerate(offers):
            codes = [tag_code[t] for t in o.offer_name_cats]
            primary.append(codes[0] if codes else -1)
            tag_rows.extend([r] * len(codes))
            tag_vals.extend(codes)
        self.tag_row = np.array(tag_rows, np.int64)
        self.tag_code = np.array(tag_vals, np.int64)
        self.primary_tag = np.array(primary, np.int64)
        self.shops = np.unique(self.shop)

    def __len__(self):
        return len(self.offers)

    def rows(self, offer_ids, strict=True):
        """Catalog row for each offer id; -1 (or UnknownOffer) when absent."""
        offer_ids = np.asarray(offer_ids, np.int64)
        pos = np.searchsorted(self.offer_id, offer_ids)
        pos_c = np.minimum(pos, max(len(self) - 1, 0))
        ok = (pos < len(self)) & (self.offer_id[pos_c] == offer_ids) if len(self) else np.zeros(offer_ids.shape, bool)
        if strict and not np.all(ok):
            bad = offer_ids[~ok].ravel()[0]
            raise UnknownOffer(f"offer {bad} is not in the catalog")
        return np.where(ok, pos_c, -1)

    def meta(self, offer_id) -> OfferMeta:
        return self.offers[int(self.rows([offer_id])[0])]

    def shop_offers(self, shop_id):
        return self.offer_id[self.shop == shop_id]

    def __eq__(self, other):
        return isinstance(other, Catalog) and self.offers == other.offers


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def _open_lines(path):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError:
        raise
    return text.split("\n")


def _skip_comments(lines):
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        i += 1
    return i


def read_comment_header(path):
    """Leading ``#`` lines of an artifact file, without the marker."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            out.append(line[1:].strip())
    return out


def _parse_int(tok, line, col, what, path):
    if tok == "":
        raise ParseError(line, col, f"empty {what}", path)
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(line, col, f"bad {what} {tok!r}", path) from None
    if v < 0:
        raise ParseError(line, col, f"negative {what} {tok!r}", path)
    return v


def _parse_price(tok, line, col, path):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(line, col, f"bad price {tok!r}", path) from None
    if not math.isfinite(v) or v < 0 or "e" in tok.lower():
        raise ParseError(line, col, f"bad price {tok!r}", path)
    return v


def load_event_log(path) -> EventLog:
    """Parse a tab-separated event file; out-of-order rows are stably re-sorted."""
    path = str(path)
    lines = _open_lines(path)
    start = _skip_comments(lines)
    if start >= len(lines) or tuple(lines[start].rstrip("\r").split("\t")) != EVENT_HEADER:
        raise ParseError(start + 1, 1, "missing or malformed header", path)
    cols = [[] for _ in EVENT_HEADER]
    for i in range(start + 1, len(lines)):
        raw = lines[i].rstrip("\r")
        if raw == "":
            if i == len(lines) - 1:
                break
            raise ParseError(i + 1, 1, "blank line", path)
        parts = raw.split("\t")
        if len(parts) != len(EVENT_HEADER):
            raise ParseError(i + 1, 1, f"expected {len(EVENT_HEADER)} fields, got {len(parts)}", path)
        ln = i + 1
        cols[0].append(_parse_int(parts[0], ln, 1, "ts", path))
        cols[1].append(_parse_int(parts[1], ln, 2, "user_id", path))
        cols[2].append(_parse_int(parts[2], ln, 3, "shop_id", path))
        cols[3].append(_parse_int(parts[3], ln, 4, "offer_id", path))
        act = Action.parse(parts[4])
        if act is None:
            raise ParseError(ln, 5, f"unknown action {parts[4]!r}", path)
        cols[4].append(int(act))
        cols[5].append(_parse_int(parts[5], ln, 6, "region_id", path))
        cols[6].append(_parse_price(parts[6], ln, 7, path))
    return EventLog(*cols)


def format_price(p):
    return f"{p:.2f}"


def write_event_log(log: EventLog, path, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write("\t".join(EVENT_HEADER) + "\n")
    tokens = ACTION_TOKENS
    for t, u, s, o, a, r, p in zip(log.ts.tolist(), log.user.tolist(), log.shop.tolist(),
                                   log.offer.tolist(), log.action.tolist(), log.region.tolist(),
                                   log.price.tolist()):
        buf.write(f"{t}\t{u}\t{s}\t{o}\t{tokens[a]}\t{r}\t{p:.2f}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_catalog(path) -> Catalog:
    path = str(path)
    lines = _open_lines(path)
    start = _skip_comments(lines)
    if start >= len(lines) or tuple(lines[start].rstrip("\r").split("\t")) != CATALOG_HEADER:
        raise ParseError(start + 1, 1, "missing or malformed catalog header", path)
    offers = []
    for i in range(start + 1, len(lines)):
        raw = lines[i].rstrip("\r")
        if raw == "":
            if i == len(lines) - 1:
                break
            raise ParseError(i + 1, 1, "blank line", path)
        p = raw.split("\t")
        if len(p) != len(CATALOG_HEADER):
            raise ParseError(i + 1, 1, f"expected {len(CATALOG_HEADER)} fields, got {len(p)}", path)
        ln = i + 1
        offers.append(OfferMeta(
            offer_id=_parse_int(p[0], ln, 1, "offer_id", path),
            shop_id=_parse_int(p[1], ln, 2, "shop_id", path),
            offer_name=p[2],
            offer_name_cats=tuple(t for t in p[3].split("|") if t),
            offer_brand=p[4],
            market_model=_parse_int(p[5], ln, 6, "market_model", path),
            market_category=_parse_int(p[6], ln, 7, "market_category", path),
            market_vendor=_parse_int(p[7], ln, 8, "market_vendor", path),
            price=_parse_price(p[8], ln, 9, path),
        ))
    try:
        return Catalog(offers)
    except ValueError as exc:
        raise ParseError(0, 1, str(exc), path) from None


def write_catalog(catalog: Catalog, path, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write("\t".join(CATALOG_HEADER) + "\n")
    for o in catalog.offers:
        buf.write("\t".join((str(o.offer_id), str(o.shop_id), o.offer_name, "|".join(o.offer_name_cats),
                             o.offer_brand, str(o.market_model), str(o.market_category),
                             str(o.market_vendor), format_price(o.price))) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# time windows
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeWindow:
    feature_end: int
    train_end: int

    def __post_init__(self):
        if not self.feature_end < self.train_end:
            raise ConfigError(f"feature_end ({self.feature_end}) must be < train_end ({self.train_end})")

    @classmethod
    def from_ratios(cls, log: EventLog, features=12, train=1, test=1):
        """Place the two boundaries so the log span splits features:train:test."""
        if len(log) == 0:
            raise ConfigError("cannot derive a time window from an empty log")
        t0, t1 = int(log.ts[0]), int(log.ts[-1]) + 1
        total = features + train + test
        span = t1 - t0
        fe = t0 + span * features // total
        te = t0 + span * (features + train) // total
        return cls(fe, te)


def split_time_window(log: EventLog, w: TimeWindow):
    """Return (past, future): ts < feature_end and feature_end <= ts < train_end."""
    past = log.select(log.ts < w.feature_end)
    future = log.select((log.ts >= w.feature_end) & (log.ts < w.train_end))
    if len(past) == 0 or len(future) == 0:
        side = "past" if len(past) == 0 else "future"
        warnings.warn(f"time window leaves the {side} partition empty", EmptyPartitionWarning, stacklevel=2)
    return past, future


def held_out(log: EventLog, w: TimeWindow) -> EventLog:
    return log.select(log.ts >= w.train_end)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 5000
    n_offers: int = 2000
    n_shops: int = 8
    n_regions: int = 20
    duration_days: int = 90
    n_events: int = 100_000
    latent_dim: int = 8
    seed: int = 0
    action_mix: tuple = (0.215, 0.058, 0.624, 0.103)
    n_categories: int = 24
    n_brands: int = 60
    mean_session_len: float = 5.0
    affinity_scale: float = 2.0

    def validate(self):
        for name in ("n_users", "n_offers", "n_shops", "n_regions", "duration_days",
                     "n_events", "latent_dim", "n_categories", "n_brands"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.action_mix) != 4 or any(p < 0 for p in self.action_mix):
            raise ConfigError("action_mix must hold four non-negative probabilities")
        if abs(sum(self.action_mix) - 1.0) > 1e-9:
            raise ConfigError(f"action_mix sums to {sum(self.action_mix)!r}, expected 1")
        if self.mean_session_len < 1:
            raise ConfigError("mean_session_len must be >= 1")
        if self.n_offers < self.n_shops:
            raise ConfigError("need at least one offer per shop")


def _region_weights(n):
    # two dominant regions, then a decaying tail
    w = np.empty(n)
    w[0] = 0.35
    if n > 1:
        w[1] = 0.2
    if n > 2:
        tail = 1.0 / np.arange(1, n - 1) ** 0.8
        w[2:] = 0.45 * tail / tail.sum()
    return w / w.sum()


def synth_generate(cfg: SynthConfig):
    """Deterministic planted-preference corpus: returns (EventLog, Catalog).

    Users and offers get latent vectors; offers cluster by category.  Each
    session draws its offers from a softmax over the shop's catalog scored
    by session intent (user vector plus noise), regional category taste,
    price-band fit and a weekly trend.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.latent_dim
    dur = cfg.duration_days * DAY

    # offers
    n_o = cfg.n_offers
    shop = rng.permutation(np.arange(n_o) % cfg.n_shops)
    centroids = rng.normal(size=(cfg.n_categories, d))
    category = rng.integers(cfg.n_categories, size=n_o)
    offer_vec = centroids[category] + 0.5 * rng.normal(size=(n_o, d))
    brand = (category * 3 + rng.integers(3, size=n_o)) % cfg.n_brands
    style = rng.integers(8, size=n_o)
    has_style = rng.random(n_o) < 0.5
    price = np.round(10.0 ** rng.uniform(0.0, 6.0, size=n_o), 2)
    price = np.maximum(price, 1.0)
    price[np.argmax(price)] = 1e6  # closed upper end, so the top price bin is never empty
    phase = rng.uniform(0, 2 * np.pi, size=n_o)
    amp = rng.uniform(0, 1.0, size=n_o)

    offers = []
    for o in range(n_o):
        cats = (f"cat{category[o]:02d}",) + ((f"style{style[o]}",) if has_style[o] else ())
        offers.append(OfferMeta(
            offer_id=o, shop_id=int(shop[o]), offer_name=f"offer {o} b{brand[o]:03d}",
            offer_name_cats=cats, offer_brand=f"brand{brand[o]:03d}", market_model=o // 2,
            market_category=int(category[o]), market_vendor=int(brand[o] // 2), price=float(price[o]),
        ))
    catalog = Catalog(offers)

    # users
    n_u = cfg.n_users
    user_vec = rng.normal(size=(n_u, d))
    activity = rng.lognormal(0.0, 1.0, size=n_u)
    activity /= activity.sum()
    home_region = rng.choice(cfg.n_regions, size=n_u, p=_region_weights(cfg.n_regions))
    region_taste = rng.normal(scale=0.7, size=(cfg.n_regions, cfg.n_categories))
    price_pref = rng.uniform(0.0, 6.0, size=n_u)
    home_shop = rng.integers(cfg.n_shops, size=n_u)
    second_shop = rng.integers(cfg.n_shops, size=n_u)
    has_second = rng.random(n_u) < 0.3

    shop_rows = [np.flatnonzero(shop == s) for s in range(cfg.n_shops)]
    log_price = np.log10(price)
    scale = cfg.affinity_scale / math.sqrt(d)

    ts_parts, user_parts, offer_parts = [], [], []
    produced = 0
    while produced < cfg.n_events:
        u = int(rng.choice(n_u, p=activity))
        s = int(second_shop[u] if (has_second[u] and rng.random() < 0.4) else home_shop[u])
        rows = shop_rows[s]
        if rows.size == 0:
            continue
        t0 = float(rng.uniform(0, dur))
        intent = user_vec[u] + 0.5 * rng.normal(size=d)
        logits = (scale * (offer_vec[rows] @ intent)
                  + region_taste[home_region[u], category[rows]]
                  - 0.6 * np.abs(log_price[rows] - price_pref[u])
                  + amp[rows] * np.sin(2 * np.pi * t0 / WEEK + phase[rows]))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        length = min(int(rng.geometric(1.0 / cfg.mean_session_len)), cfg.n_events - produced)
        picks = rows[rng.choice(rows.size, size=length, p=p)]
        gaps = np.minimum(rng.exponential(120.0, size=length), 1500.0)
        gaps[0] = 0.0
        times = np.floor(t0 + np.cumsum(gaps)).astype(np.int64)
        times = np.minimum(times, dur - 1)
        ts_parts.append(times)
        user_parts.append(np.full(length, u, np.int64))
        offer_parts.append(picks)
        produced += length

    ts = np.concatenate(ts_parts) + EPOCH_BASE
    users = np.concatenate(user_parts)
    offs = np.concatenate(offer_parts)
    action = rng.choice(4, size=ts.size, p=np.asarray(cfg.action_mix, float))
    log = EventLog(ts, users, shop[offs], offs, action, home_region[users], price[offs])
    return log, catalog
