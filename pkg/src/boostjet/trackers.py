"""Tracker aggregates: keys, schema, map-reduce computation, store, lookup.

A tracker key names an action filter, a tuple of dimensions and either a
backward time window or a time statistic, e.g. ``clicks:shop,user:lastweek``.
``aggregate`` runs one map (emit each event under its dimension tuple) and
one reduce (count, earliest ts, latest ts) per distinct key; shards are
merged with a commutative combine so any sharding yields the same store.
"""
from __future__ import annotations

import enum
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .datamodel import DAY, Catalog, EventLog, OfferMeta
from .errors import ArityError, SchemaError, UnknownOffer

N_PRICE_BINS = 7
MISSING_BIN = -1


class Dim(enum.IntEnum):
    SHOP = 0
    USER = 1
    OFFER = 2
    BRAND = 3
    NAMECAT = 4
    MODEL = 5
    CATEGORY = 6
    VENDOR = 7
    REGION = 8
    PRICEBIN = 9


DIM_TOKENS = ("shop", "user", "offer", "brand", "namecat", "model", "category", "vendor",
              "region", "pricebin")
CONTENT_DIMS = (Dim.BRAND, Dim.NAMECAT, Dim.MODEL, Dim.CATEGORY, Dim.VENDOR)


class ActionFilter(enum.IntEnum):
    CLICK = 0
    DETAIL = 1
    ADD = 2
    PURCHASE = 3
    ANY = 4


ACTION_FILTER_TOKENS = ("clicks", "details", "adds", "purchases", "any")


class Window(enum.IntEnum):
    LASTDAY = 0
    LASTWEEK = 1
    LASTMONTH = 2
    ALLTIME = 3


WINDOW_TOKENS = ("lastday", "lastweek", "lastmonth", "alltime")
WINDOW_SPAN = (DAY, 7 * DAY, 30 * DAY, None)


class TimeStat(enum.IntEnum):
    SINCEFIRST = 0
    SINCEPREV = 1


TIME_STAT_TOKENS = ("sincefirst", "sinceprev")


class RegionBin(enum.IntEnum):
    BIN_A = 0
    BIN_B = 1
    OTHER = 2


# --------------------------------------------------------------------------
# binning
# --------------------------------------------------------------------------

def price_bin(price, n_bins=N_PRICE_BINS):
    """clamp(floor(log10(price)), 0, n_bins-1); zero price is MISSING_BIN."""
    if price < 0:
        raise ValueError("price must be non-negative")
    if price == 0:
        return MISSING_BIN
    return int(min(max(math.floor(math.log10(price)), 0), n_bins - 1))


def price_bins(prices, n_bins=N_PRICE_BINS):
    prices = np.asarray(prices, np.float64)
    out = np.full(prices.shape, MISSING_BIN, np.int64)
    pos = prices > 0
    with np.errstate(divide="ignore"):
        b = np.floor(np.log10(prices[pos]))
    out[pos] = np.clip(b, 0, n_bins - 1).astype(np.int64)
    return out


@dataclass(frozen=True)
class RegionBinning:
    """Two configured region ids get their own bins; all others share one."""
    bin_a: int | None = 0
    bin_b: int | None = 1

    def __call__(self, region_id):
        if self.bin_a is not None and region_id == self.bin_a:
            return RegionBin.BIN_A
        if self.bin_b is not None and region_id == self.bin_b:
            return RegionBin.BIN_B
        return RegionBin.OTHER

    def bins(self, region_ids):
        r = np.asarray(region_ids, np.int64)
        out = np.full(r.shape, int(RegionBin.OTHER), np.int64)
        if self.bin_b is not None:
            out[r == self.bin_b] = RegionBin.BIN_B
        if self.bin_a is not None:
            out[r == self.bin_a] = RegionBin.BIN_A
        return out


def region_bin(region_id, binning: RegionBinning = RegionBinning()):
    return binning(region_id)


# --------------------------------------------------------------------------
# keys and specs
# --------------------------------------------------------------------------

def _token(table, tok, what):
    try:
        return table.index(tok)
    except ValueError:
        raise SchemaError(f"unknown {what} {tok!r}") from None


@dataclass(frozen=True)
class TrackerKey:
    action: ActionFilter
    dims: tuple
    window: Window | None = None
    time_stat: TimeStat | None = None

    def __post_init__(self):
        dims = tuple(Dim(d) for d in self.dims)
        if not dims:
            raise SchemaError("tracker key needs at least one dimension")
        if len(set(dims)) != len(dims):
            raise SchemaError(f"duplicate dimension in {dims}")
        if self.window is not None and self.time_stat is not None:
            raise SchemaError("a tracker key takes a window or a time statistic, not both")
        object.__setattr__(self, "dims", tuple(sorted(dims)))
        object.__setattr__(self, "action", ActionFilter(self.action))
        if self.window is not None:
            object.__setattr__(self, "window", Window(self.window))
        if self.time_stat is not None:
            object.__setattr__(self, "time_stat", TimeStat(self.time_stat))

    @property
    def effective_window(self):
        return Window.ALLTIME if self.window is None else self.window

    @property
    def base(self):
        """The stored table this key reads from (time stats live on all-time tables)."""
        return TrackerKey(self.action, self.dims, self.effective_window)

    def canonical(self):
        parts = [ACTION_FILTER_TOKENS[self.action], ",".join(DIM_TOKENS[d] for d in self.dims)]
        if self.time_stat is not None:
            parts.append(TIME_STAT_TOKENS[self.time_stat])
        else:
            parts.append(WINDOW_TOKENS[self.effective_window])
        return ":".join(parts)

    def __str__(self):
        return self.canonical()

    @classmethod
    def parse(cls, text):
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise SchemaError(f"bad tracker key {text!r}")
        action = ActionFilter(_token(ACTION_FILTER_TOKENS, parts[0], "action"))
        dims = tuple(Dim(_token(DIM_TOKENS, d, "dimension")) for d in parts[1].split(","))
        window = time_stat = None
        if len(parts) == 3:
            if parts[2] in TIME_STAT_TOKENS:
                time_stat = TimeStat(TIME_STAT_TOKENS.index(parts[2]))
            else:
                window = Window(_token(WINDOW_TOKENS, parts[2], "window"))
        key = cls(action, dims, window, time_stat)
        return key.base if time_stat is None else key


class Kind(enum.Enum):
    COUNT = "count"
    RATIO = "ratio"
    DELTA = "delta"
    PATTERN = "pattern"


FEATURE_TYPES = ("content", "temporal", "demographic", "price", "pattern")


@dataclass(frozen=True)
class TrackerSpec:
    kind: Kind
    key: TrackerKey | None = None
    denominator: TrackerKey | None = None
    feature_name: str = ""

    def __post_init__(self):
        if self.kind is Kind.PATTERN:
            name = self.feature_name or "pattern"
        elif self.kind is Kind.COUNT:
            if self.key is None or self.key.time_stat is not None:
                raise SchemaError("count needs a windowed key")
            name = self.feature_name or f"count:{self.key.canonical()}"
        elif self.kind is Kind.DELTA:
            if self.key is None or self.key.time_stat is None:
                raise SchemaError("delta needs a sincefirst/sinceprev key")
            name = self.feature_name or f"delta:{self.key.canonical()}"
        else:
            num, den = self.key, self.denominator
            if num is None or den is None or num.time_stat is not None or den.time_stat is not None:
                raise SchemaError("ratio needs two windowed keys")
            if not set(den.dims) <= set(num.dims):
                raise SchemaError(f"ratio {num}/{den}: numerator dims must contain denominator dims")
            if not (num.action == den.action or den.action == ActionFilter.ANY):
                raise SchemaError(f"ratio {num}/{den}: numerator action not within denominator action")
            spans = [WINDOW_SPAN[k.effective_window] or math.inf for k in (num, den)]
            if spans[0] > spans[1]:
                raise SchemaError(f"ratio {num}/{den}: numerator window wider than denominator")
            name = self.feature_name or f"ratio:{num.canonical()}/{den.canonical()}"
        object.__setattr__(self, "feature_name", name)

    @property
    def keys(self):
        return tuple(k for k in (self.key, self.denominator) if k is not None)

    @property
    def dims(self):
        return self.key.dims if self.key is not None else ()

    @property
    def feature_type(self):
        if self.kind is Kind.PATTERN:
            return "pattern"
        keys = self.keys
        if self.kind is Kind.DELTA or any(k.effective_window != Window.ALLTIME for k in keys):
            return "temporal"
        dims = {d for k in keys for d in k.dims}
        if Dim.REGION in dims:
            return "demographic"
        if Dim.PRICEBIN in dims:
            return "price"
        return "content"

    @property
    def personalized(self):
        return self.kind is Kind.PATTERN or any(Dim.USER in k.dims for k in self.keys)

    def to_line(self):
        if self.kind is Kind.PATTERN:
            return "pattern"
        k = self.key
        side = lambda key: f"{ACTION_FILTER_TOKENS[key.action]} {','.join(DIM_TOKENS[d] for d in key.dims)}"
        if self.kind is Kind.COUNT:
            return f"count {side(k)} {WINDOW_TOKENS[k.effective_window]}"
        if self.kind is Kind.DELTA:
            return f"delta {side(k)} {TIME_STAT_TOKENS[k.time_stat]}"
        d = self.denominator
        return (f"ratio {side(k)} {WINDOW_TOKENS[k.effective_window]} / "
                f"{side(d)} {WINDOW_TOKENS[d.effective_window]}")


def count(action, dims, window=Window.ALLTIME):
    return TrackerSpec(Kind.COUNT, TrackerKey(action, dims, window))


def ratio(num_action, num_dims, den_action, den_dims, num_window=Window.ALLTIME, den_window=None):
    den_window = num_window if den_window is None else den_window
    return TrackerSpec(Kind.RATIO, TrackerKey(num_action, num_dims, num_window),
                       TrackerKey(den_action, den_dims, den_window))


def delta(action, dims, stat):
    return TrackerSpec(Kind.DELTA, TrackerKey(action, dims, None, stat))


PATTERN = TrackerSpec(Kind.PATTERN)


# --------------------------------------------------------------------------
# schema file
# --------------------------------------------------------------------------

def _parse_side(tokens, lineno):
    if len(tokens) < 2:
        raise SchemaError(f"line {lineno}: expected '<action> <dims> [window]'")
    action = ActionFilter(_token(ACTION_FILTER_TOKENS, tokens[0], "action"))
    dims = tuple(Dim(_token(DIM_TOKENS, d, "dimension")) for d in tokens[1].split(",") if d)
    rest = tokens[2:]
    if len(rest) > 1:
        raise SchemaError(f"line {lineno}: trailing tokens {rest[1:]}")
    return action, dims, (rest[0] if rest else None)


def parse_schema_line(line, lineno=0) -> TrackerSpec:
    toks = line.split()
    head, args = toks[0], toks[1:]
    if head == "pattern":
        if args:
            raise SchemaError(f"line {lineno}: pattern takes no arguments")
        return PATTERN
    if head == "count":
        action, dims, win = _parse_side(args, lineno)
        window = Window(_token(WINDOW_TOKENS, win, "window")) if win else Window.ALLTIME
        return TrackerSpec(Kind.COUNT, TrackerKey(action, dims, window))
    if head == "delta":
        action, dims, stat = _parse_side(args, lineno)
        if stat is None:
            raise SchemaError(f"line {lineno}: delta needs sincefirst or sinceprev")
        return TrackerSpec(Kind.DELTA, TrackerKey(action, dims, None,
                                                  TimeStat(_token(TIME_STAT_TOKENS, stat, "time statistic"))))
    if head == "ratio":
        if "/" not in args:
            raise SchemaError(f"line {lineno}: ratio needs '/'")
        cut = args.index("/")
        na, nd, nw = _parse_side(args[:cut], lineno)
        da, dd, dw = _parse_side(args[cut + 1:], lineno)
        # a side without a window inherits the other side's
        nw, dw = nw or dw, dw or nw
        nwin = Window(_token(WINDOW_TOKENS, nw, "window")) if nw else Window.ALLTIME
        dwin = Window(_token(WINDOW_TOKENS, dw, "window")) if dw else Window.ALLTIME
        return TrackerSpec(Kind.RATIO, TrackerKey(na, nd, nwin), TrackerKey(da, dd, dwin))
    raise SchemaError(f"line {lineno}: unknown spec kind {head!r}")


class FeatureSchema:
    """Ordered feature specs; the position of a spec is its column index."""

    def __init__(self, specs: Sequence[TrackerSpec]):
        self.specs = tuple(specs)
        names = [s.feature_name for s in self.specs]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature in schema")
        self.names = tuple(names)
        self.types = tuple(s.feature_type for s in self.specs)
        self.personalized = np.array([s.personalized for s in self.specs], bool)
        pat = [i for i, s in enumerate(self.specs) if s.kind is Kind.PATTERN]
        self.pattern_index = pat[0] if pat else None

    def __len__(self):
        return len(self.specs)

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.specs == other.specs

    def keys(self):
        """Distinct stored tables the schema reads, in first-use order."""
        seen = {}
        for s in self.specs:
            for k in s.keys:
                seen.setdefault(k.base, None)
        return list(seen)

    def without_type(self, feature_type):
        if feature_type not in FEATURE_TYPES:
            raise SchemaError(f"unknown feature type {feature_type!r}")
        return FeatureSchema([s for s in self.specs if s.feature_type != feature_type])

    def hash(self):
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    def to_text(self):
        return "".join(s.to_line() + "\n" for s in self.specs)

    @classmethod
    def parse(cls, text):
        specs = []
        for i, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                specs.append(parse_schema_line(line, i))
        return cls(specs)

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def default_schema(n_trackers=249, with_pattern=True) -> FeatureSchema:
    """Reconstructed ~250-feature schema crossing actions, dimension sets and windows."""
    A = ActionFilter
    S, U, O, B, N, Mo, C, V, R, P = (Dim.SHOP, Dim.USER, Dim.OFFER, Dim.BRAND, Dim.NAMECAT,
                                      Dim.MODEL, Dim.CATEGORY, Dim.VENDOR, Dim.REGION, Dim.PRICEBIN)
    user_sets = [(S, U, O), (S, U), (S, U, B), (S, U, C), (S, U, P), (S, U, N), (S, U, V)]
    offer_sets = [(S, O), (S, B), (S, C), (S, V), (S, Mo), (S, N)]
    region_sets = [(S, O, R), (S, R), (S, C, R), (S, B, R)]
    price_sets = [(S, P), (S, P, R), (S, C, P)]
    all_sets = user_sets + offer_sets + region_sets + price_sets
    actions = [A.ANY, A.CLICK, A.DETAIL, A.ADD, A.PURCHASE]

    specs = []
    for dims in all_sets:
        for a in actions:
            specs.append(count(a, dims))
    for stat in (TimeStat.SINCEPREV, TimeStat.SINCEFIRST):
        for a in (A.ANY, A.CLICK, A.PURCHASE):
            for dims in [(S, U, O), (S, U), (S, U, B), (S, U, C), (S, O)]:
                specs.append(delta(a, dims, stat))
    shares = [((S, O, B), (S, B)), ((S, O, C), (S, C)), ((S, O, R), (S, R)), ((S, P, R), (S, R))]
    shares += [(dims, (S, U)) for dims in user_sets if dims != (S, U)]
    for a in (A.ANY, A.CLICK, A.PURCHASE):
        for num, den in shares:
            specs.append(ratio(a, num, a, den))
    for a in (A.CLICK, A.ADD, A.PURCHASE):
        for dims in [(S, U, O), (S, U), (S, O), (S, B), (S, C), (S, O, R)]:
            specs.append(ratio(a, dims, A.ANY, dims))
    trend_windows = [(Window.LASTDAY, Window.LASTWEEK), (Window.LASTWEEK, Window.LASTMONTH),
                     (Window.LASTMONTH, Window.ALLTIME)]
    for a in (A.ANY, A.CLICK):
        for dims in [(S, O), (S, U), (S, U, C), (S, C), (S, O, R)]:
            for nw, dw in trend_windows:
                specs.append(ratio(a, dims, a, dims, nw, dw))
    for w in (Window.LASTWEEK, Window.LASTDAY, Window.LASTMONTH):
        for a in actions:
            for dims in all_sets:
                specs.append(count(a, dims, w))
    specs = specs[:n_trackers]
    if with_pattern:
        specs.append(PATTERN)
    return FeatureSchema(specs)


# --------------------------------------------------------------------------
# dimension space and the store
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DimensionSpace:
    """Per-dimension cardinalities used to pack a value tuple into one int64."""
    cards: tuple

    @classmethod
    def build(cls, log: EventLog, catalog: Catalog | None, n_price_bins=N_PRICE_BINS):
        def top(*arrays):
            m = -1
            for a in arrays:
                if a is not None and len(a):
                    m = max(m, int(np.max(a)))
            return m + 1
        cat = catalog
        cards = [
            top(log.shop, cat.shop if cat else None),
            top(log.user),
            top(log.offer, cat.offer_id if cat else None),
            len(cat.brands) if cat else 0,
            len(cat.tags) if cat else 0,
            top(cat.model) if cat else 0,
            top(cat.category) if cat else 0,
            top(cat.vendor) if cat else 0,
            len(RegionBin),
            n_price_bins,
        ]
        return cls(tuple(max(c, 1) for c in cards))

    def card(self, dim):
        return self.cards[dim]

    def encode(self, dims, values):
        """Pack value columns; rows with any out-of-range value get code -1."""
        dims = tuple(dims)
        n = len(values[0]) if values else 0
        size = 1
        for d in dims:
            size *= self.cards[d]
        if size >= 2 ** 62:
            raise SchemaError(f"dimension tuple {dims} too large to pack")
        ok = np.ones(n, bool)
        code = np.zeros(n, np.int64)
        for d, v in zip(dims, values):
            v = np.asarray(v, np.int64)
            ok &= (v >= 0) & (v < self.cards[d])
            code = code * self.cards[d] + np.where(ok, v, 0)
        return np.where(ok, code, -1)

    def decode(self, dims, codes):
        out = []
        rem = np.asarray(codes, np.int64).copy()
        for d in reversed(tuple(dims)):
            out.append(rem % self.cards[d])
            rem //= self.cards[d]
        return out[::-1]


@dataclass
class KeyTable:
    codes: np.ndarray
    count: np.ndarray
    first: np.ndarray
    last: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0, np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    def find(self, codes):
        codes = np.asarray(codes, np.int64)
        if self.codes.size == 0:
            return np.full(codes.shape, -1, np.int64)
        pos = np.searchsorted(self.codes, codes)
        pc = np.minimum(pos, self.codes.size - 1)
        hit = (pos < self.codes.size) & (self.codes[pc] == codes) & (codes >= 0)
        return np.where(hit, pc, -1)

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("codes", "count", "first", "last"))


class TrackerStore:
    """Pre-aggregated tables keyed by the canonical name of their base key."""

    def __init__(self, as_of, space: DimensionSpace, tables=None, region_binning=RegionBinning()):
        self.as_of = int(as_of)
        self.space = space
        self.tables: dict[str, KeyTable] = dict(tables or {})
        self.region_binning = region_binning

    def table(self, key: TrackerKey):
        return self.tables.get(key.base.canonical())

    def __eq__(self, other):
        return (isinstance(other, TrackerStore) and self.as_of == other.as_of
                and self.space == other.space and self.region_binning == other.region_binning
                and self.tables.keys() == other.tables.keys()
                and all(self.tables[k] == other.tables[k] for k in self.tables))

    def max_ts(self):
        m = None
        for t in self.tables.values():
            if t.last.size:
                v = int(t.last.max())
                m = v if m is None else max(m, v)
        return m

    # -- lookups --------------------------------------------------------
    def _rows(self, key, values):
        t = self.table(key)
        if t is None:
            raise SchemaError(f"store has no table for {key.base.canonical()}")
        return t, t.find(self.space.encode(key.dims, values))

    def counts(self, key, values):
        t, idx = self._rows(key, values)
        return np.where(idx >= 0, t.count[np.maximum(idx, 0)] if t.count.size else 0, 0)

    def timestamps(self, key, values, which):
        t, idx = self._rows(key, values)
        arr = t.first if which == "first" else t.last
        return np.where(idx >= 0, arr[np.maximum(idx, 0)] if arr.size else 0, -1)

    # -- combine ----------------------------------------------------------
    def combine(self, other: "TrackerStore") -> "TrackerStore":
        """Merge two partial stores: counts add, first is min, last is max."""
        if other.space != self.space or other.as_of != self.as_of:
            raise SchemaError("cannot combine stores over different spaces or as_of")
        out = {}
        for name in sorted(set(self.tables) | set(other.tables)):
            a = self.tables.get(name, KeyTable.empty())
            b = other.tables.get(name, KeyTable.empty())
            codes = np.concatenate([a.codes, b.codes])
            order = np.argsort(codes, kind="stable")
            sc = codes[order]
            if sc.size == 0:
                out[name] = KeyTable.empty()
                continue
            starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
            out[name] = KeyTable(
                sc[starts],
                np.add.reduceat(np.concatenate([a.count, b.count])[order], starts),
                np.minimum.reduceat(np.concatenate([a.first, b.first])[order], starts),
                np.maximum.reduceat(np.concatenate([a.last, b.last])[order], starts),
            )
        return TrackerStore(self.as_of, self.space, out, self.region_binning)

    # -- persistence --------------------------------------------------------
    def dump(self, path=None, comment=None):
        """Sorted key/value text dump; ``load`` reproduces the store exactly."""
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        buf.write("boostjet-trackers\t1\n")
        buf.write(f"as_of\t{self.as_of}\n")
        buf.write("space\t" + ",".join(str(c) for c in self.space.cards) + "\n")
        rb = self.region_binning
        buf.write(f"regions\t{'' if rb.bin_a is None else rb.bin_a}\t{'' if rb.bin_b is None else rb.bin_b}\n")
        for name in sorted(self.tables):
            t = self.tables[name]
            key = TrackerKey.parse(name)
            cols = self.space.decode(key.dims, t.codes)
            buf.write(f"table\t{name}\t{t.codes.size}\n")
            if t.codes.size:
                vals = np.stack(cols, axis=1).tolist()
                lines = [f"{','.join(map(str, v))}\t{c}\t{f}\t{l}"
                         for v, c, f, l in zip(vals, t.count.tolist(), t.first.tolist(), t.last.tolist())]
                buf.write("\n".join(lines) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        i = 0
        while i < len(lines) and lines[i].startswith("#"):
            i += 1
        if lines[i] != "boostjet-trackers\t1":
            raise SchemaError(f"{path}: not a tracker dump")
        as_of = int(lines[i + 1].split("\t")[1])
        space = DimensionSpace(tuple(int(c) for c in lines[i + 2].split("\t")[1].split(",")))
        _, ra, rb = lines[i + 3].split("\t")
        binning = RegionBinning(int(ra) if ra else None, int(rb) if rb else None)
        i += 4
        tables = {}
        while i < len(lines) and lines[i]:
            _, name, n = lines[i].split("\t")
            n = int(n)
            key = TrackerKey.parse(name)
            block = lines[i + 1:i + 1 + n]
            if n:
                arr = np.array([l.replace(",", "\t").split("\t") for l in block], np.int64)
                k = len(key.dims)
                codes = space.encode(key.dims, [arr[:, j] for j in range(k)])
                tables[name] = KeyTable(codes, arr[:, k].copy(), arr[:, k + 1].copy(), arr[:, k + 2].copy())
            else:
                tables[name] = KeyTable.empty()
            i += 1 + n
        return cls(as_of, space, tables, binning)


# --------------------------------------------------------------------------
# map / reduce
# --------------------------------------------------------------------------

def event_dims(log: EventLog, catalog: Catalog | None, binning: RegionBinning, n_price_bins, needed):
    """Dimension value columns for every event (map-phase inputs)."""
    cols = {Dim.SHOP: log.shop, Dim.USER: log.user, Dim.OFFER: log.offer}
    if Dim.REGION in needed:
        cols[Dim.REGION] = binning.bins(log.region)
    if Dim.PRICEBIN in needed:
        cols[Dim.PRICEBIN] = price_bins(log.price, n_price_bins)
    if any(d in needed for d in CONTENT_DIMS):
        if catalog is None:
            missing = [DIM_TOKENS[d] for d in CONTENT_DIMS if d in needed]
            raise SchemaError(f"dimensions {missing} need a catalog")
        rows = catalog.rows(log.offer)
        cols[Dim.BRAND] = catalog.brand[rows]
        cols[Dim.MODEL] = catalog.model[rows]
        cols[Dim.CATEGORY] = catalog.category[rows]
        cols[Dim.VENDOR] = catalog.vendor[rows]
        cols["rows"] = rows
    return cols


def _map_key(log, cols, catalog, key: TrackerKey, as_of, space):
    mask = np.ones(len(log), bool)
    if key.action != ActionFilter.ANY:
        mask &= log.action == int(key.action)
    span = WINDOW_SPAN[key.effective_window]
    if span is not None:
        mask &= (log.ts >= as_of - span) & (log.ts < as_of)
    idx = np.flatnonzero(mask)
    if Dim.NAMECAT in key.dims:
        # one emitted record per (event, name tag)
        rows = cols["rows"][idx]
        per_offer = np.bincount(catalog.tag_row, minlength=len(catalog))
        offer_start = np.cumsum(per_offer) - per_offer
        n_tags = per_offer[rows]
        rep = np.repeat(np.arange(idx.size), n_tags)
        within = np.arange(rep.size) - np.repeat(np.cumsum(n_tags) - n_tags, n_tags)
        tag = catalog.tag_code[offer_start[rows[rep]] + within]
        idx = idx[rep]
        values = [tag if d == Dim.NAMECAT else cols[d][idx] for d in key.dims]
    else:
        values = [cols[d][idx] for d in key.dims]
    codes = space.encode(key.dims, values)
    keep = codes >= 0
    return codes[keep], log.ts[idx][keep]


def map_reduce_shard(log: EventLog, keys, as_of, space, catalog=None, binning=RegionBinning(),
                     n_price_bins=N_PRICE_BINS) -> TrackerStore:
    needed = {d for k in keys for d in k.dims}
    cols = event_dims(log, catalog, binning, n_price_bins, needed)
    tables = {}
    for key in keys:
        codes, ts = _map_key(log, cols, catalog, key, as_of, space)
        tables[key.base.canonical()] = KeyTable(*kernels.group_reduce(codes, ts))
    return TrackerStore(as_of, space, tables, binning)


def aggregate(past: EventLog, specs, as_of, catalog: Catalog | None = None,
              binning: RegionBinning = RegionBinning(), n_price_bins=N_PRICE_BINS,
              extra_keys=(), shards=1, threads=1, space: DimensionSpace | None = None) -> TrackerStore:
    """Compute every table the specs need over ``past`` as seen at ``as_of``.

    ``shards`` splits the log into contiguous pieces that are mapped and
    reduced independently (on ``threads`` workers) and then combined.
    """
    if isinstance(specs, FeatureSchema):
        keys = specs.keys()
    else:
        keys = list(dict.fromkeys(k.base for s in specs for k in s.keys))
    keys += [k.base for k in extra_keys if k.base not in keys]
    if len(past) and as_of < int(past.ts[-1]):
        raise ValueError(f"as_of {as_of} precedes the last event at {int(past.ts[-1])}")
    needed = {d for k in keys for d in k.dims}
    if catalog is None and any(d in needed for d in CONTENT_DIMS):
        raise SchemaError("content dimensions need a catalog")
    if space is None:
        space = DimensionSpace.build(past, catalog, n_price_bins)
    shards = max(1, int(shards))
    bounds = np.linspace(0, len(past), shards + 1).astype(int)
    pieces = [past.select(np.arange(bounds[i], bounds[i + 1])) for i in range(shards)]
    work = lambda piece: map_reduce_shard(piece, keys, as_of, space, catalog, binning, n_price_bins)
    if threads > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partial = list(pool.map(work, pieces))
    else:
        partial = [work(p) for p in pieces]
    store = partial[0]
    for p in partial[1:]:
        store = store.combine(p)
    return store


# --------------------------------------------------------------------------
# lookup and feature assembly
# --------------------------------------------------------------------------

def pair_dims(catalog: Catalog, users, offer_rows, user_region_bins, n_price_bins=N_PRICE_BINS):
    """Dimension values of (user, offer) pairs for tracker lookups."""
    offer_rows = np.asarray(offer_rows, np.int64)
    return {
        Dim.SHOP: catalog.shop[offer_rows],
        Dim.USER: np.asarray(users, np.int64),
        Dim.OFFER: catalog.offer_id[offer_rows],
        Dim.BRAND: catalog.brand[offer_rows],
        Dim.NAMECAT: catalog.primary_tag[offer_rows],
        Dim.MODEL: catalog.model[offer_rows],
        Dim.CATEGORY: catalog.category[offer_rows],
        Dim.VENDOR: catalog.vendor[offer_rows],
        Dim.REGION: np.asarray(user_region_bins, np.int64),
        Dim.PRICEBIN: price_bins(catalog.price[offer_rows], n_price_bins),
    }


def lookup_many(store: TrackerStore, spec: TrackerSpec, dims_values) -> np.ndarray:
    """Vectorized lookup; ``dims_values`` maps Dim -> column of values."""
    if spec.kind is Kind.PATTERN:
        raise SchemaError("the pattern feature is not stored in trackers")
    key = spec.key
    vals = [dims_values[d] for d in key.dims]
    if spec.kind is Kind.COUNT:
        return store.counts(key, vals).astype(np.float64)
    if spec.kind is Kind.RATIO:
        num = store.counts(key, vals).astype(np.float64)
        den = store.counts(spec.denominator, [dims_values[d] for d in spec.denominator.dims]).astype(np.float64)
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=den > 0)
        return out
    which = "first" if key.time_stat == TimeStat.SINCEFIRST else "last"
    ts = store.timestamps(key, vals, which)
    return np.where(ts >= 0, (store.as_of - ts).astype(np.float64), np.nan)


def lookup(store: TrackerStore, spec: TrackerSpec, values) -> float:
    """Single-tuple lookup; ``values`` follow the spec key's canonical dim order."""
    if spec.kind is Kind.PATTERN:
        raise SchemaError("the pattern feature is not stored in trackers")
    values = tuple(values)
    if len(values) != len(spec.key.dims):
        raise ArityError(f"{spec.feature_name} takes {len(spec.key.dims)} values, got {len(values)}")
    dv = {d: np.array([v], np.int64) for d, v in zip(spec.key.dims, values)}
    if spec.denominator is not None:
        missing = [d for d in spec.denominator.dims if d not in dv]
        if missing:
            raise ArityError("denominator dims must be a subset of numerator dims")
    return float(lookup_many(store, spec, dv)[0])


def tracker_matrix(schema: FeatureSchema, store: TrackerStore, catalog: Catalog, users, offer_rows,
                   user_region_bins, pattern=None, columns=None, n_price_bins=N_PRICE_BINS):
    """Feature matrix (rows x selected columns) for (user, offer-row) pairs."""
    columns = range(len(schema)) if columns is None else columns
    columns = list(columns)
    n = len(offer_rows)
    dv = pair_dims(catalog, users, offer_rows, user_region_bins, n_price_bins)
    out = np.empty((n, len(columns)))
    for j, c in enumerate(columns):
        spec = schema.specs[c]
        if spec.kind is Kind.PATTERN:
            out[:, j] = np.nan if pattern is None else pattern
        else:
            out[:, j] = lookup_many(store, spec, dv)
    return out


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema: tuple

    def __post_init__(self):
        if len(self.values) != len(self.schema):
            raise ValueError("feature vector length differs from its schema")

    def __len__(self):
        return len(self.values)

    def __getitem__(self, name):
        return self.values[self.schema.index(name)]


def feature_vector(user, offer: OfferMeta, store: TrackerStore, pattern, schema: FeatureSchema,
                   catalog: Catalog, user_region_bin=RegionBin.OTHER, n_price_bins=N_PRICE_BINS) -> FeatureVector:
    row = catalog.rows([offer.offer_id], strict=False)[0]
    if row < 0:
        raise UnknownOffer(f"offer {offer.offer_id} is not in the catalog")
    pat = np.nan if pattern is None else float(pattern)
    vals = tracker_matrix(schema, store, catalog, [user], [row], [int(user_region_bin)],
                          pattern=pat, n_price_bins=n_price_bins)[0]
    return FeatureVector(vals, schema.names)
