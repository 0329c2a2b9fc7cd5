"""Command-line entry point: ``dfl synth|train|backtest|interpret|graph-stats``.

A run is described by a JSON config (see ``DEFAULT_CONFIG``) with optional
``--set section.key=value`` overrides.  Every command writes under ``--out``
and finishes with a ``manifest.json`` listing the files it produced.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import BacktestConfig, run_backtest, write_report
from .baselines import EWModel
from .data import MarketPanel, SplitPlan, forward_returns, load_dir, make_split_plan, write_panel
from .dataset import build_sections, group_sections, select
from .graph import build_industry_mask, edge_stats, industry_proportions
from .model import NEURAL_MODELS, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .objective import TrainConfig, fit
from .synthetic import PlantedFixture, SyntheticSpec, generate_synthetic

logger = logging.getLogger("dfl")

MODEL_KINDS = ("dmfm", "linear", "ew", "mlp", "mgat")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {"source": "planted", "planted": {}, "synthetic": {}, "dir": None},
    "model": {},
    "train": {},
    "backtest": {},
    "split": {"first_test_start": "2020-07-01", "group_count": 1, "period_months": 6,
              "gap_months": 1, "train_start": None},
    "models": ["dmfm", "linear", "ew"],
    "interpret_model": "dmfm",
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(config: dict, assignment: str) -> None:
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def _checked(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**values)


def resolve_config(path=None, overrides=(), env=None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then DFL_SEED."""
    env = os.environ if env is None else env
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            config = _merge(config, json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        apply_override(config, item)
    if env.get("DFL_SEED"):
        config["seed"] = int(env["DFL_SEED"])
    unknown = set(config) - set(DEFAULT_CONFIG) - {"out"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    bad = [m for m in config["models"] if m not in MODEL_KINDS]
    if bad:
        raise ConfigError(f"unknown models {bad}; choose from {MODEL_KINDS}")
    if config["data"]["source"] not in ("planted", "synthetic", "dir"):
        raise ConfigError("data.source must be one of planted, synthetic, dir")
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps({k: v for k, v in config.items() if k != "out"}, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def model_config(config: dict) -> ModelConfig:
    return _checked(ModelConfig, {"seed": config["seed"], **config["model"]}, "model")


def train_config(config: dict) -> TrainConfig:
    return _checked(TrainConfig, {"seed": config["seed"], **config["train"]}, "train")


def backtest_config(config: dict) -> BacktestConfig:
    return _checked(BacktestConfig, dict(config["backtest"]), "backtest")


# ---------------------------------------------------------------------------
# shared pipeline pieces

def load_data(config: dict) -> MarketPanel:
    data = config["data"]
    if data["source"] == "dir":
        if not data.get("dir"):
            raise ConfigError("data.source=dir needs data.dir")
        return load_dir(data["dir"])
    if data["source"] == "planted":
        fixture = _checked(PlantedFixture, {"seed": config["seed"], **data["planted"]}, "data.planted")
        return generate_synthetic(fixture.spec())
    return generate_synthetic(_checked(SyntheticSpec, {"seed": config["seed"], **data["synthetic"]},
                                       "data.synthetic"))


def split_plan(config: dict, panel: MarketPanel, max_horizon: int) -> SplitPlan:
    s = config["split"]
    return make_split_plan(panel.calendar, s["first_test_start"], int(s["group_count"]),
                           max_horizon=max_horizon, train_start=s.get("train_start"),
                           period_months=int(s.get("period_months", 6)),
                           gap_months=int(s.get("gap_months", 1)))


class Pipeline:
    """Data, cleaned sections and split plan shared by the commands."""

    def __init__(self, config: dict):
        self.config = config
        self.mcfg = model_config(config)
        self.panel = load_data(config)
        self.returns = forward_returns(self.panel.prices, self.panel.calendar, self.mcfg.horizons)
        self.sections, self.warnings = build_sections(self.panel, self.mcfg.horizons, self.returns)
        self.max_h = max(self.mcfg.horizons)
        self.plan = split_plan(config, self.panel, self.max_h)

    def group(self, g: int):
        return group_sections(self.sections, self.plan.groups[g], self.panel.calendar, self.max_h)

    def scoring_sections(self, g: int):
        """Test sections of group ``g`` plus the trading date just before them."""
        cal = self.panel.calendar
        test = self.plan.groups[g].test
        first = cal.between(*test)[0]
        start = cal[max(first - 1, 0)]
        return select(self.sections, start, test[1])


def _ckpt_path(out: Path, g: int, kind: str) -> Path:
    return out / "checkpoints" / f"group{g:02d}" / f"{kind}.json"


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_synth(config: dict, out: Path) -> list[Path]:
    if config["data"]["source"] == "dir":
        raise ConfigError("synth needs a planted or synthetic data source")
    panel = load_data(config)
    files = write_panel(panel, out / "data")
    files.append(_write_json(out / "data" / "spec.json", panel.meta.get("spec", {})))
    return files


def cmd_train(config: dict, out: Path) -> list[Path]:
    pipe = Pipeline(config)
    tcfg = train_config(config)
    files = []
    for g, grp in enumerate(pipe.plan.groups):
        train, valid, _ = pipe.group(g)
        logger.info("group %d: %d train / %d validation dates", g, len(train), len(valid))
        for kind in config["models"]:
            if kind == "ew":
                continue
            model = build_model(kind, pipe.panel.factors.m, pipe.mcfg)
            meta = {"group": g, "train": list(grp.train), "valid": list(grp.valid),
                    "test": list(grp.test), "factor_names": list(pipe.panel.factors.names)}
            if kind in NEURAL_MODELS:
                res = fit(model, train, valid, tcfg)
                meta.update(best_epoch=res.best_epoch, best_valid_loss=res.best_valid_loss)
                files.append(_write_csv(
                    out / "history" / f"group{g:02d}_{kind}.csv",
                    ["epoch", "train_loss", "valid_loss", "valid_mean_ic_k20"],
                    [[h["epoch"], _fmt(h["train_loss"]), _fmt(h["valid_loss"]),
                      _fmt(h["valid_mean_ic_k20"])] for h in res.history]))
                logger.info("group %d %s: best epoch %d valid loss %.6f", g, kind,
                            res.best_epoch, res.best_valid_loss)
            else:
                model.fit(train)
            files.append(save_checkpoint(model, _ckpt_path(out, g, kind), meta))
    return files


def _group_model(kind: str, pipe: Pipeline, g: int, ckpt_dir: Path):
    if kind == "ew":
        return EWModel(pipe.panel.factors.m, horizon=pipe.max_h).fit(pipe.group(g)[0])
    path = _ckpt_path(ckpt_dir, g, kind)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint for {kind}, group {g}: {path}")
    return load_checkpoint(path)


def collect_scores(kind: str, pipe: Pipeline, ckpt_dir: Path, horizon: int) -> dict:
    scores = {}
    for g in range(len(pipe.plan)):
        model = _group_model(kind, pipe, g, ckpt_dir)
        for s in pipe.scoring_sections(g):
            scores[s.date] = (s.ids, model.score(s, horizon))
    return scores


def cmd_backtest(config: dict, out: Path, ckpt_dir: Path | None = None) -> list[Path]:
    pipe = Pipeline(config)
    bcfg = backtest_config(config)
    ckpt_dir = ckpt_dir or out
    start, end = pipe.plan.groups[0].test[0], pipe.plan.groups[-1].test[1]
    files, rows = [], []
    for kind in config["models"]:
        scores = collect_scores(kind, pipe, ckpt_dir, bcfg.horizon)
        report = run_backtest(scores, pipe.panel.prices, pipe.panel.calendar, start, end, bcfg,
                              universes=pipe.panel.universes, returns=pipe.returns)
        files += write_report(report, out / "backtest" / kind, {"model": kind})
        m = report.metrics()
        rows.append([kind, _fmt(m["alpha"]), _fmt(m["icir"]), _fmt(m["ir"]), _fmt(m["sr"]),
                     _fmt(m["avg_turnover"]), _fmt(report.net_value[-1])])
        logger.info("%s: alpha %.4f icir %.3f ir %.3f sr %.3f", kind, m["alpha"], m["icir"],
                    m["ir"], m["sr"])
        for w in report.warnings:
            logger.warning("%s backtest: %s", kind, w)
    files.append(_write_csv(out / "backtest" / "comparison.csv",
                            ["model", "alpha", "icir", "ir", "sr", "avg_turnover", "final_net_value"],
                            rows))
    return files


def cmd_interpret(config: dict, out: Path, ckpt_dir: Path | None = None) -> list[Path]:
    pipe = Pipeline(config)
    kind = config.get("interpret_model", "dmfm")
    if kind != "dmfm":
        raise ConfigError("interpretation needs the dmfm model (factor attention)")
    names, groups = pipe.panel.factors.names, pipe.panel.factors.groups
    group_names = sorted(set(groups))
    by_factor, by_group = [], []
    sums_f: dict[int, np.ndarray] = {}
    sums_g: dict[int, dict[str, float]] = {}
    count = 0
    for g, grp in enumerate(pipe.plan.groups):
        model = _group_model("dmfm", pipe, g, ckpt_dir or out)
        for s in select(pipe.sections, *grp.test):
            dfs = model.deep_factor_set(s)
            count += 1
            for k in model.config.horizons:
                a = dfs.attention[k]
                sums_f[k] = sums_f.get(k, 0.0) + a
                for name, w in zip(names, a):
                    by_factor.append([s.date, k, name, _fmt(w)])
                agg = {gn: float(sum(w for w, gg in zip(a, groups) if gg == gn)) for gn in group_names}
                sg = sums_g.setdefault(k, {gn: 0.0 for gn in group_names})
                for gn in group_names:
                    sg[gn] += agg[gn]
                    by_group.append([s.date, k, gn, _fmt(agg[gn])])
    if count == 0:
        raise ConfigError("no test dates to interpret")
    d = out / "interpret"
    return [
        _write_csv(d / "attn_by_factor.csv", ["date", "k", "factor_name", "weight"], by_factor),
        _write_csv(d / "attn_by_group.csv", ["date", "k", "group", "weight"], by_group),
        _write_csv(d / "attn_by_factor_mean.csv", ["k", "factor_name", "weight"],
                   [[k, n, _fmt(w / count)] for k in sorted(sums_f) for n, w in zip(names, sums_f[k])]),
        _write_csv(d / "attn_by_group_mean.csv", ["k", "group", "weight"],
                   [[k, gn, _fmt(sums_g[k][gn] / count)] for k in sorted(sums_g) for gn in group_names]),
    ]


def cmd_graph_stats(config: dict, out: Path) -> list[Path]:
    panel = load_data(config)
    snaps = [build_industry_mask(u) for u in panel.universes if u.n > 0]
    d = out / "graph"
    return [
        _write_csv(d / "edges.csv", ["date", "avg_edges"], [[dt, _fmt(v)] for dt, v in edge_stats(snaps)]),
        _write_csv(d / "industry_share.csv", ["date", "industry_id", "share"],
                   [[dt, ind, _fmt(v)] for dt, props in industry_proportions(snaps)
                    for ind, v in props.items()]),
    ]


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "backtest": cmd_backtest,
            "interpret": cmd_interpret, "graph-stats": cmd_graph_stats}


# ---------------------------------------------------------------------------
# entry point

class _ErrorCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.ERROR)
        self.count = 0

    def emit(self, record):
        self.count += 1


def write_manifest(out: Path, command: str, config: dict, files: list[Path]) -> Path:
    """Record this command's files; entries from other commands are kept."""
    path = out / "manifest.json"
    doc = {"version": __version__, "commands": {}}
    if path.exists():
        try:
            doc["commands"] = json.loads(path.read_text(encoding="utf-8")).get("commands", {})
        except json.JSONDecodeError:
            logger.warning("replacing unreadable manifest %s", path)
    doc["commands"][command] = {
        "config_hash": config_hash(config),
        "files": sorted(f.relative_to(out).as_posix() for f in set(files)),
    }
    listed = sorted({f for c in doc["commands"].values() for f in c["files"]} | {"config.json", "run.log"})
    doc["sha256"] = {f: hashlib.sha256((out / f).read_bytes()).hexdigest()
                     for f in listed if (out / f).exists()}
    return _write_json(path, doc)


def run(command: str, config: dict, out: Path, ckpt_dir: Path | None = None) -> list[Path]:
    fn = COMMANDS[command]
    if command in ("backtest", "interpret"):
        return fn(config, out, ckpt_dir)
    return fn(config, out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dfl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5")
    parser.add_argument("--out", help="output directory (default: config 'out' or ./dfl-out)")
    parser.add_argument("--checkpoints", help="directory holding checkpoints/ (default: --out)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    try:
        config = resolve_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"dfl: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or config.get("out") or "dfl-out")
    out.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    level = root.level
    root.setLevel(logging.INFO)
    handlers = [logging.FileHandler(out / "run.log", mode="a", encoding="utf-8"),
                logging.StreamHandler(sys.stderr), _ErrorCounter()]
    handlers[0].setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handlers[1].setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handlers[1].setLevel(logging.INFO if args.verbose else logging.WARNING)
    for h in handlers:
        root.addHandler(h)
    try:
        _write_json(out / "config.json", config)
        logger.info("dfl %s %s, config hash %s", __version__, args.command, config_hash(config))
        ckpt = Path(args.checkpoints) if args.checkpoints else None
        files = run(args.command, config, out, ckpt)
    except Exception as exc:  # reported through the log and the exit code
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        files = []
    finally:
        for h in handlers:
            h.flush()
    errors = handlers[2].count
    for h in handlers:
        root.removeHandler(h)
        h.close()
    root.setLevel(level)
    write_manifest(out, args.command, config, [f for f in files if f.exists()])
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
