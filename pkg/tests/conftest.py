import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from boostjet.datamodel import Catalog, EventLog, OfferMeta, SynthConfig, synth_generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

T0 = 1_600_000_000


def make_catalog(n_offers=12, n_shops=2, seed=0):
    rng = np.random.default_rng(seed)
    offers = []
    for o in range(n_offers):
        cats = tuple(f"tag{t}" for t in sorted(rng.choice(5, size=rng.integers(0, 3), replace=False)))
        offers.append(OfferMeta(o, o % n_shops, f"offer {o}", cats, f"brand{o % 3}", o // 2,
                                int(rng.integers(3)), int(rng.integers(2)),
                                float(np.round(10 ** rng.uniform(0, 6), 2))))
    return Catalog(offers)


def random_log(rng, catalog, n_events=60, n_users=4, span=40 * 86_400, n_regions=4):
    offers = rng.integers(len(catalog), size=n_events)
    return EventLog(
        ts=T0 + rng.integers(span, size=n_events),
        user=rng.integers(n_users, size=n_events),
        shop=catalog.shop[offers],
        offer=catalog.offer_id[offers],
        action=rng.integers(4, size=n_events),
        region=rng.integers(n_regions, size=n_events),
        price=catalog.price[offers],
    )


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(n_users=400, n_offers=160, n_shops=2, n_regions=5, duration_days=30,
                      n_events=8000, seed=3)
    return synth_generate(cfg)


# acceptance criteria register (name, passed, detail) here; the summary prints one line each
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
