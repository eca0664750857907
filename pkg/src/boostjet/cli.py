"""``boostjet`` command line: one subcommand per stage plus ``run-all`` and ``experiment``."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gbm, offer2vec, pipeline, trackers
from .datamodel import (TimeWindow, held_out, load_catalog, load_event_log, read_comment_header,
                        split_time_window, synth_generate, write_catalog, write_event_log)
from .errors import BoostJetError, ConfigError, NoTestUsers, StaleArtifact
from .trackers import FeatureSchema

log = logging.getLogger("boostjet")

STAGE_EXIT = {"gen": 10, "trackers": 11, "embed": 12, "pool": 13, "train": 14, "recommend": 15,
              "eval": 16, "experiment": 17}
EXIT_CONFIG = 2
EXIT_STALE = 3

ARTIFACTS = {
    "trackers": ("trackers.txt", "trackers_eval.txt"),
    "embed": ("embeddings", "embeddings_eval"),
    "pool": ("pool.tsv",),
    "train": ("model.txt", "train_curve.tsv"),
    "recommend": ("recommendations.tsv",),
    "eval": ("results.tsv",) + tuple(f"per_user_{s}.tsv" for s in pipeline.SYSTEMS),
}
REC_HEADER = ("system", "user_id", "shop_id", "rank", "offer_id", "probability")


class StageFailed(Exception):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


# --------------------------------------------------------------------------
# artifact helpers
# --------------------------------------------------------------------------

@contextlib.contextmanager
def atomic(path: Path):
    """Yield a ``.partial`` sibling; it replaces ``path`` only if the block succeeds."""
    tmp = path.with_name(path.name + ".partial")
    if tmp.is_dir():
        shutil.rmtree(tmp)
    yield tmp
    if path.is_dir():
        shutil.rmtree(path)
    os.replace(tmp, path)


def header_hash(path: Path):
    """config_hash recorded in an artifact's comment header (None if absent)."""
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
        if not files:
            return None
        hashes = {header_hash(f) for f in files}
        return hashes.pop() if len(hashes) == 1 else None
    if not path.exists():
        return None
    for line in read_comment_header(path):
        for tok in line.split():
            if tok.startswith("config_hash="):
                return tok.split("=", 1)[1]
    return None


def content_hash(*paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


class Runner:
    """Stage execution against one work directory with hash-checked caching."""

    def __init__(self, cfg: config_mod.RunConfig):
        self.cfg = cfg
        self.work = cfg.work
        self._expected = {}
        self._data = None

    # -- hashes --------------------------------------------------------------
    def expected(self, stage):
        if stage not in self._expected:
            if stage == "gen" and self.external_inputs():
                self._expected[stage] = content_hash(self.cfg.events_path, self.cfg.catalog_path)
            else:
                ups = config_mod.STAGE_INPUTS[stage][1]
                self._expected[stage] = self.cfg.stage_hash(stage, {u: self.expected(u) for u in ups})
        return self._expected[stage]

    def external_inputs(self):
        """Event files supplied by the user rather than written by ``gen``."""
        p = self.cfg.events_path
        return bool(self.cfg.events) and p.exists() and header_hash(p) is None

    def paths(self, stage):
        if stage == "gen":
            return (self.cfg.events_path, self.cfg.catalog_path)
        return tuple(self.work / a for a in ARTIFACTS[stage])

    def fresh(self, stage):
        if stage == "gen" and self.external_inputs():
            return self.cfg.catalog_path.exists()
        want = self.expected(stage)
        return all(header_hash(p) == want for p in self.paths(stage))

    def require(self, stage):
        for up in config_mod.STAGE_INPUTS[stage][1]:
            if not self.fresh(up):
                missing = [str(p) for p in self.paths(up) if not p.exists()]
                why = f"missing {', '.join(missing)}" if missing else "built under a different config hash"
                raise StaleArtifact(f"{stage} needs fresh '{up}' artifacts ({why}); rerun '{up}' first")

    def comment(self, stage):
        return f"boostjet stage={stage} config_hash={self.expected(stage)}"

    # -- shared inputs -----------------------------------------------------------
    def data(self):
        if self._data is None:
            cfg = self.cfg
            events = load_event_log(cfg.events_path)
            catalog = load_catalog(cfg.catalog_path)
            w = cfg.window
            if w.feature_end is not None and w.train_end is not None:
                window = TimeWindow(w.feature_end, w.train_end)
            else:
                window = TimeWindow.from_ratios(events, *w.ratios)
            schema = FeatureSchema.parse(cfg.schema_text())
            past, future = split_time_window(events, window)
            upto = events.select(events.ts < window.train_end)
            self._data = dict(events=events, catalog=catalog, window=window, schema=schema, past=past,
                              future=future, upto=upto, test=held_out(events, window))
        return self._data

    def builder(self, which):
        d = self.data()
        suffix = "" if which == "train" else "_eval"
        past = d["past"] if which == "train" else d["upto"]
        store = trackers.TrackerStore.load(self.work / f"trackers{suffix}.txt")
        emb = offer2vec.load_models(self.work / f"embeddings{suffix}")
        return pipeline.FeatureBuilder.from_parts(past, d["catalog"], d["schema"], store, emb, self.cfg.pipeline)

    # -- stages ------------------------------------------------------------------
    def run(self, stage):
        t0 = time.perf_counter()
        if stage != "gen":
            self.require(stage)
        try:
            getattr(self, "stage_" + stage)()
        except (StaleArtifact, ConfigError):
            raise
        except (BoostJetError, OSError, ValueError) as e:
            raise StageFailed(stage, e) from e
        log.info("stage %s done in %.1fs (config_hash=%s)", stage, time.perf_counter() - t0, self.expected(stage))

    def stage_gen(self):
        if self.external_inputs():
            log.info("using supplied event log %s", self.cfg.events_path)
            return
        events, catalog = synth_generate(self.cfg.synth_config())
        c = self.comment("gen")
        for path, write, obj in ((self.cfg.events_path, write_event_log, events),
                                 (self.cfg.catalog_path, write_catalog, catalog)):
            path.parent.mkdir(parents=True, exist_ok=True)
            with atomic(path) as tmp:
                write(obj, tmp, comment=c)
        log.info("generated %d events over %d offers", len(events), len(catalog))

    def stage_trackers(self):
        d, cfg = self.data(), self.cfg
        c = self.comment("trackers")
        for name, past, as_of in (("trackers.txt", d["past"], d["window"].feature_end),
                                  ("trackers_eval.txt", d["upto"], d["window"].train_end)):
            store = pipeline.aggregate_store(past, d["catalog"], d["schema"], as_of, cfg.pipeline,
                                             threads=cfg.threads, shards=cfg.threads)
            with atomic(self.work / name) as tmp:
                store.dump(tmp, comment=c)

    def stage_embed(self):
        d, cfg = self.data(), self.cfg
        c = self.comment("embed")
        for name, past, as_of in (("embeddings", d["past"], d["window"].feature_end),
                                  ("embeddings_eval", d["upto"], d["window"].train_end)):
            models = pipeline.train_embeddings(past, cfg.embed, cfg.pipeline, cfg.seed, cfg.threads, as_of)
            with atomic(self.work / name) as tmp:
                offer2vec.save_models(models, tmp, comment=c)

    def stage_pool(self):
        d, cfg = self.data(), self.cfg
        b = self.builder("train")
        pool = pipeline.build_pool(d["future"], b, cfg.pipeline.n_neg, pipeline.stage_rng(cfg.seed, "pool"),
                                   cfg.pipeline.k_init, d["window"].feature_end)
        log.info("pool: %d rows, %d positives", len(pool), int(pool.y.sum()))
        with atomic(self.work / "pool.tsv") as tmp:
            pool.save(tmp, comment=self.comment("pool"))

    def stage_train(self):
        cfg = self.cfg
        pool = gbm.TrainPool.load(self.work / "pool.tsv")
        model = pipeline.train_model(pool, cfg.gbm, cfg.pipeline, cfg.seed, cfg.threads)
        c = self.comment("train")
        with atomic(self.work / "model.txt") as tmp:
            gbm.save_model(model, tmp, comment=c)
        with atomic(self.work / "train_curve.tsv") as tmp:
            pipeline.write_curve(tmp, model, comment=c)
        log.info("train loss %.6f -> %.6f; eval LLP %s", model.train_loss[0], model.train_loss[-1],
                 f"{model.eval_llp[-1]:.6f}" if model.eval_llp else "n/a")

    def _cases(self, b):
        d = self.data()
        return pipeline.test_cases(d["test"], b, self.cfg.pipeline.delta)

    def stage_recommend(self):
        cfg = self.cfg
        model = gbm.load_model(self.work / "model.txt")
        b = self.builder("eval")
        cases = self._cases(b)
        rows = []
        for system in pipeline.SYSTEMS:
            recs = pipeline.system_recommendations(system, cases, b, model, cfg.pipeline)
            for case, r in zip(cases, recs):
                probs = r.probabilities or (float("nan"),) * len(r.offers)
                for k, (o, p) in enumerate(zip(r.offers, probs), 1):
                    rows.append((system, case.user_id, case.shop_id, k, o, p))
        log.info("recommendations for %d test users", len(cases))
        with atomic(self.work / "recommendations.tsv") as tmp:
            _write_rows(tmp, REC_HEADER, rows, self.comment("recommend"))

    def stage_eval(self):
        b = self.builder("eval")
        cases = self._cases(b)
        if not cases:
            raise NoTestUsers("no test user has a click in the held-out region")
        ranked = {}
        text = (self.work / "recommendations.tsv").read_text(encoding="utf-8").split("\n")
        for line in text:
            if not line or line.startswith("#") or line.startswith("system\t"):
                continue
            system, user, _, rank, offer, _ = line.split("\t")
            ranked.setdefault((system, int(user)), []).append((int(rank), int(offer)))
        c = self.comment("eval")
        summary = []
        for system in pipeline.SYSTEMS:
            per_user = []
            for case in cases:
                offers = [o for _, o in sorted(ranked.get((system, case.user_id), []))]
                per_user.append((case.user_id, pipeline.dcg(offers, case.relevant)))
            mean = float(np.mean([v for _, v in per_user]))
            summary.append((system, mean, len(per_user)))
            with atomic(self.work / f"per_user_{system}.tsv") as tmp:
                _write_rows(tmp, ("user_id", "dcg"), per_user, c)
            log.info("%-13s mean DCG %.5f over %d users", system, mean, len(per_user))
        with atomic(self.work / "results.tsv") as tmp:
            _write_rows(tmp, ("system", "mean_dcg", "n_users"), summary, c)


def _write_rows(path, header, rows, comment):
    def fmt(v):
        return f"{v:.17g}" if isinstance(v, float) else str(v)
    lines = [f"# {comment}", "\t".join(header)] + ["\t".join(fmt(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def run_all(runner: Runner, stages=None):
    """Run every stage in order, reusing fresh cached artifacts.

    ``stages`` forces a rerun from the earliest listed stage onwards; the
    stages before it must already be fresh.
    """
    order = config_mod.STAGES
    start = min(order.index(s) for s in stages) if stages else None
    for i, stage in enumerate(order):
        if start is not None and i >= start:
            runner.run(stage)
        elif runner.fresh(stage):
            log.info("stage %s cached", stage)
        elif start is not None:
            raise StaleArtifact(f"stage {stage} is stale but --stages starts at {order[start]}")
        else:
            runner.run(stage)


def run_experiment_cmd(runner: Runner, name):
    cfg = runner.cfg
    d = runner.data()
    prep = pipeline.Prepared.create(d["events"], d["catalog"], d["schema"], cfg.pipeline, cfg.embed,
                                    d["window"], cfg.seed, cfg.threads)
    out = runner.work / "experiments"
    header, rows, _ = pipeline.run_experiment(name, prep, cfg.gbm, out)
    print("\t".join(header))
    for r in rows:
        print("\t".join(pipeline._fmt(v) for v in r))


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--work-dir", help="artifact directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="boostjet", description="Tracker + embedding + boosted-tree recommender")
    sub = p.add_subparsers(dest="command", required=True)
    for name in config_mod.STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    ra = sub.add_parser("run-all", parents=[common], help="run every stage with caching")
    ra.add_argument("--stages", help="comma-separated stages to force (reruns from the earliest)")
    ex = sub.add_parser("experiment", parents=[common], help="parameter and ablation studies")
    ex.add_argument("name", help="|".join(pipeline.EXPERIMENTS))
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        for key, val in (("seed", args.seed), ("threads", args.threads), ("work_dir", args.work_dir)):
            if val is not None:
                overrides[key] = str(val)
        cfg = config_mod.load(args.config, overrides)
        stages = None
        if getattr(args, "stages", None):
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            bad = [s for s in stages if s not in config_mod.STAGES]
            if bad:
                raise ConfigError(f"unknown stage(s) {', '.join(bad)}")
        if args.command == "experiment" and args.name not in pipeline.EXPERIMENTS:
            raise ConfigError(f"unknown experiment {args.name!r}; choose from {', '.join(pipeline.EXPERIMENTS)}")
    except ConfigError as e:
        print(f"boostjet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    cfg.work.mkdir(parents=True, exist_ok=True)
    (cfg.work / "config.effective.txt").write_text(cfg.to_text(), encoding="utf-8")
    log.info("seed = %d, threads = %d, backend = %s", cfg.seed, cfg.threads, _backend())
    runner = Runner(cfg)
    try:
        if args.command == "run-all":
            run_all(runner, stages)
        elif args.command == "experiment":
            run_experiment_cmd(runner, args.name)
        else:
            runner.run(args.command)
    except StaleArtifact as e:
        print(f"boostjet: {e}", file=sys.stderr)
        return EXIT_STALE
    except ConfigError as e:
        print(f"boostjet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as e:
        print(f"boostjet: {e}", file=sys.stderr)
        return STAGE_EXIT[e.stage]
    except BoostJetError as e:
        stage = "experiment" if args.command == "experiment" else args.command
        print(f"boostjet: {stage} failed: {e}", file=sys.stderr)
        return STAGE_EXIT.get(stage, 1)
    return 0


def _backend():
    from . import _jit
    return _jit.backend_name()


if __name__ == "__main__":
    sys.exit(main())
