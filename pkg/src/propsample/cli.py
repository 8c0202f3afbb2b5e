"""Command-line driver for the simulate → estimate → train → A/B pipeline.

Every subcommand reads one JSON config and writes into ``--out``.  Artifacts
are recorded in ``manifest.json`` with their sha256, the config hash, the
seed and the hashes of the inputs they were built from.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .core import ConfigError, DataError, PipelineError, PropensityCurve, atomic_output, derive_seed, read_sessions
from .debias import SamplingMode, TrainingDataset, prepare_training
from .embed import EmbeddingTable, build_sequences, session_similarity, train_skipgram
from .evalab import evaluate_model, logging_policy_scorer, simulated_abtest
from .propensity import curves, estimate_propensity_detailed
from .ranker import RankerParams, deserialize, fit, mean_ndcg, model_hash, serialize
from .simclick import HotelUniverse, UserModelConfig, gen_universe, ground_truth, simulate_log, write_json, write_log

DEFAULTS = {
    "seed": None,
    "out": "run",
    "threads": 1,
    "universe": {"num_geos": 50, "hotels_per_geo": 100, "feature_dimension": 6,
                 "logging_policy_noise": 0.1, "logging_deal_weight": 0.15},
    "user": {"model_kind": "pbm", "eta": 1.0, "click_sharpness": 6.0,
             "booking_page_prob": 0.4, "booking_prob": 0.25},
    "log": {"train_sessions": 50_000, "heldout_sessions": 5_000},
    "modes": ["control", "fixed:0.8", "propensity"],
    "ranker": {"num_trees": 300, "learning_rate": 0.1, "max_leaves": 31,
               "min_examples_per_leaf": 20, "ndcg_truncation": 30, "sigma": 1.0},
    "embedding": {"dim": 32, "window": 5, "negatives_per_positive": 5, "epochs": 5,
                  "learning_rate": 0.025, "batch_size": 64, "personalize": False},
    "abtest": {"sessions": 20_000, "arms": ["control", "fixed:0.8", "propensity"],
               "m": None, "bootstrap_samples": 1000, "confidence": 0.95},
}
# Scalars that do not change any artifact and so stay out of the config hash.
_UNHASHED = ("out", "threads")


class CliError(PipelineError):
    module = "cli"


# -- config -----------------------------------------------------------------

def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        raise ConfigError("--config is required")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(DEFAULTS, raw)


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for key in ("seed", "threads", "out"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed is mandatory and must be a non-negative integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    for m in cfg["modes"] + cfg["abtest"]["arms"]:
        SamplingMode.parse(m, PropensityCurve((1.0,)))
    if "control" not in cfg["abtest"]["arms"]:
        raise ConfigError("abtest.arms must include control")
    missing = [a for a in cfg["abtest"]["arms"] if a not in cfg["modes"]]
    if missing:
        raise ConfigError(f"abtest arm {missing[0]} is not among the prepared modes")
    return cfg


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]


def slug(mode: str) -> str:
    return mode.replace(":", "-")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- run state --------------------------------------------------------------

PRODUCERS = {
    "universe.json": "simulate", "train_log.jsonl": "simulate", "heldout_log.jsonl": "simulate",
    "ground_truth.json": "simulate", "curves.csv": "estimate", "propensity.json": "estimate",
    "embeddings.json": "embed", "evaluation.json": "evaluate", "abtest.json": "abtest",
    "plot_data.csv": "plot-data",
}


class Run:
    def __init__(self, cfg: dict, force: bool = False, lenient: bool = False):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.force = force
        self.strict = not lenient
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.threads = cfg["threads"]
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            try:
                m = json.loads(self.manifest_path.read_text(encoding="utf-8"))
                if isinstance(m, dict) and isinstance(m.get("artifacts"), dict):
                    return m
            except json.JSONDecodeError:
                pass
        return {"artifacts": {}}

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            producer = PRODUCERS.get(name) or ("prepare" if name.startswith("dataset_") else "train")
            raise CliError(f"missing input {p} (run `{producer}` first)")
        return p

    def guard(self, *names: str) -> None:
        if self.force:
            return
        for name in names:
            if self.path(name).exists():
                raise CliError(f"{self.path(name)} exists; pass --force to overwrite")

    def input_hashes(self, *names: str) -> dict:
        return {n: sha256_file(self.path(n)) for n in names}

    def record(self, step: str, outputs: list[str], inputs: list[str]) -> None:
        ins = self.input_hashes(*inputs)
        for name in outputs:
            self.manifest["artifacts"][name] = {
                "step": step, "sha256": sha256_file(self.path(name)), "config_hash": self.hash,
                "seed": self.seed, "inputs": ins,
            }
        self.save_manifest()

    def save_manifest(self) -> None:
        self.manifest["config_hash"] = self.hash
        self.manifest["seed"] = self.seed
        self.manifest["version"] = __version__
        self.manifest["artifacts"] = dict(sorted(self.manifest["artifacts"].items()))
        with atomic_output(self.manifest_path) as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def universe(self) -> HotelUniverse:
        with open(self.require("universe.json"), encoding="utf-8") as fh:
            return HotelUniverse.from_dict(json.load(fh))

    def user(self) -> UserModelConfig:
        return UserModelConfig(**self.cfg["user"])

    def log(self, name: str):
        return read_sessions(self.require(name), strict=self.strict)

    def curve(self) -> PropensityCurve:
        with open(self.require("propensity.json"), encoding="utf-8") as fh:
            return PropensityCurve.from_dict(json.load(fh))

    def personalization(self):
        if not self.cfg["embedding"]["personalize"]:
            return None, []
        return session_similarity(EmbeddingTable.load(self.require("embeddings.json"))), ["embeddings.json"]


# -- steps ------------------------------------------------------------------

def step_simulate(run: Run, args=None) -> None:
    outputs = ["universe.json", "train_log.jsonl", "heldout_log.jsonl", "ground_truth.json"]
    run.guard(*outputs)
    u = run.cfg["universe"]
    universe = gen_universe(u["num_geos"], u["hotels_per_geo"], u["feature_dimension"], run.sub_seed("universe"),
                            logging_policy_noise=u["logging_policy_noise"],
                            logging_deal_weight=u["logging_deal_weight"])
    user = run.user()
    write_json(universe.to_dict(), run.path("universe.json"))
    write_log(simulate_log(universe, user, run.cfg["log"]["train_sessions"], run.sub_seed("train-log")),
              run.path("train_log.jsonl"))
    write_log(simulate_log(universe, user, run.cfg["log"]["heldout_sessions"], run.sub_seed("heldout-log")),
              run.path("heldout_log.jsonl"))
    write_json(ground_truth(universe, user), run.path("ground_truth.json"))
    run.record("simulate", outputs, [])


def step_estimate(run: Run, args=None) -> None:
    outputs = ["curves.csv", "propensity.json"]
    inputs = ["train_log.jsonl", "universe.json"]
    run.require("train_log.jsonl")
    run.guard(*outputs)
    universe = run.universe()
    click, relevance = curves(run.log("train_log.jsonl"), universe.bookings(), universe.page_size)
    est = estimate_propensity_detailed(click, relevance)
    est.to_csv(run.path("curves.csv"))
    write_json(est.curve.to_dict(), run.path("propensity.json"))
    run.record("estimate", outputs, inputs)


def _modes(run: Run, args) -> list[str]:
    mode = getattr(args, "mode", None)
    return [mode] if mode else list(run.cfg["modes"])


def step_prepare(run: Run, args=None) -> None:
    modes = _modes(run, args)
    run.require("train_log.jsonl")
    needs_curve = any(m == "propensity" for m in modes)
    curve = run.curve() if needs_curve else None
    extra, extra_inputs = run.personalization()
    for m in modes:
        name = f"dataset_{slug(m)}.jsonl"
        manifest = f"dataset_{slug(m)}.manifest.json"
        run.guard(name, manifest)
        inputs = ["train_log.jsonl"] + (["propensity.json"] if m == "propensity" else []) + extra_inputs
        ds = prepare_training(run.log("train_log.jsonl"), SamplingMode.parse(m, curve),
                              run.sub_seed("prepare"), extra_features=extra)
        ds.meta.update({"config_hash": run.hash, "inputs": run.input_hashes(*inputs)})
        ds.write(run.path(name), run.path(manifest))
        run.record("prepare", [name, manifest], inputs)


def _ranker_params(run: Run) -> RankerParams:
    return RankerParams(**run.cfg["ranker"])


def step_train(run: Run, args=None) -> None:
    for m in _modes(run, args):
        data = f"dataset_{slug(m)}.jsonl"
        run.require(data)
        name, metrics = f"model_{slug(m)}.json", f"metrics_{slug(m)}.json"
        run.guard(name, metrics)
        ds = TrainingDataset.read(run.path(data))
        if len(ds) == 0:
            raise DataError(f"{data} has no rows")
        ds.meta = {"mode": m, "dataset_sha256": sha256_file(run.path(data)), "config_hash": run.hash}
        model = fit(ds, _ranker_params(run), seed=run.sub_seed("ranker"), threads=run.threads)
        with atomic_output(run.path(name), "wb") as fh:
            fh.write(serialize(model))
        k = run.cfg["ranker"]["ndcg_truncation"]
        scores = model.train_scores
        report = {"mode": m, "model_hash": model_hash(model), "rows": len(ds), "groups": ds.num_groups,
                  "train": {f"ndcg@{c}": mean_ndcg(ds.labels, scores, ds.group_offsets, c)
                            for c in sorted({5, 10, k})}}
        write_json(report, run.path(metrics))
        run.record("train", [name, metrics], [data])


def step_embed(run: Run, args=None) -> None:
    run.require("train_log.jsonl")
    run.guard("embeddings.json")
    universe = run.universe()
    e = run.cfg["embedding"]
    geo_of = {h: hotel.geo_id for h, hotel in universe.by_id.items()}
    table = train_skipgram(build_sequences(run.log("train_log.jsonl")), geo_of, dim=e["dim"], window=e["window"],
                           negatives_per_positive=e["negatives_per_positive"], epochs=e["epochs"],
                           seed=run.sub_seed("embed"), learning_rate=e["learning_rate"],
                           batch_size=e["batch_size"])
    table.save(run.path("embeddings.json"))
    run.record("embed", ["embeddings.json"], ["train_log.jsonl", "universe.json"])


def _load_model(run: Run, mode: str):
    return deserialize(run.require(f"model_{slug(mode)}.json").read_bytes())


def step_evaluate(run: Run, args=None) -> None:
    run.require("heldout_log.jsonl")
    modes = _modes(run, args)
    run.guard("evaluation.json")
    universe = run.universe()
    extra, extra_inputs = run.personalization()
    report = {"logging_policy": evaluate_model(logging_policy_scorer, run.log("heldout_log.jsonl"), universe)}
    for m in modes:
        report[m] = evaluate_model(_load_model(run, m), run.log("heldout_log.jsonl"), universe,
                                   extra_features=extra)
    write_json(report, run.path("evaluation.json"))
    run.record("evaluate", ["evaluation.json"],
               ["heldout_log.jsonl", "universe.json"] + [f"model_{slug(m)}.json" for m in modes] + extra_inputs)


def step_abtest(run: Run, args=None) -> None:
    ab = run.cfg["abtest"]
    if run.cfg["embedding"]["personalize"]:
        raise ConfigError("abtest ranks pages without session context; disable embedding.personalize")
    arms = {m: _load_model(run, m) for m in ab["arms"]}
    run.guard("abtest.json")
    report = simulated_abtest(arms, run.universe(), run.user(), ab["sessions"], run.sub_seed("abtest"),
                              m=ab["m"], confidence=ab["confidence"], bootstrap_samples=ab["bootstrap_samples"])
    report.config["config_hash"] = run.hash
    with atomic_output(run.path("abtest.json")) as fh:
        fh.write(report.to_json())
    print(report.table())
    run.record("abtest", ["abtest.json"], ["universe.json"] + [f"model_{slug(m)}.json" for m in ab["arms"]])


def step_plot_data(run: Run, args=None) -> None:
    """Click curve and propensity curve, both relative to position 1."""
    run.require("curves.csv")
    run.guard("plot_data.csv")
    with open(run.path("curves.csv"), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    c1 = float(rows[0]["click_rate"])
    with atomic_output(run.path("plot_data.csv")) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "click_curve", "propensity_curve"])
        for r in rows:
            click = repr(float(r["click_rate"]) / c1) if r["click_rate"] else ""
            w.writerow([r["position"], click, r["propensity"]])
    run.record("plot-data", ["plot_data.csv"], ["curves.csv"])


STEPS = {
    "simulate": step_simulate,
    "estimate": step_estimate,
    "embed": step_embed,
    "prepare": step_prepare,
    "train": step_train,
    "evaluate": step_evaluate,
    "abtest": step_abtest,
    "plot-data": step_plot_data,
}


def _up_to_date(run: Run) -> bool:
    m = run.manifest
    if not m.get("complete") or m.get("config_hash") != run.hash:
        return False
    for name, entry in m["artifacts"].items():
        p = run.path(name)
        if not p.exists() or sha256_file(p) != entry["sha256"]:
            return False
    return True


def step_pipeline(run: Run, args=None) -> None:
    if not run.force and _up_to_date(run):
        print(f"{run.out}: up to date (config {run.hash})")
        return
    run.manifest["complete"] = False
    for name, step in STEPS.items():
        step(run, None)
    run.manifest["complete"] = True
    run.save_manifest()


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (seed is mandatory)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, help="worker threads for training")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--lenient", action="store_true", help="ignore unknown keys in session logs")
    parser = argparse.ArgumentParser(prog="propsample", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STEPS) + ["pipeline"]:
        p = sub.add_parser(name, parents=[common])
        if name in ("prepare", "train", "evaluate"):
            p.add_argument("--mode", help="control | fixed:R | truncate | propensity")
    return parser


def raising_module(exc: BaseException) -> str:
    """Short name of the deepest package module on the traceback."""
    module = "cli"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith(__package__ + "."):
            module = name.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return module


def error_message(exc: BaseException) -> str:
    return json.dumps({"error": {"module": raising_module(exc), "type": type(exc).__name__, "cause": str(exc)}})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        if getattr(args, "mode", None):
            SamplingMode.parse(args.mode, PropensityCurve((1.0,)))
        run = Run(cfg, force=args.force, lenient=args.lenient)
        run.out.mkdir(parents=True, exist_ok=True)
        (step_pipeline if args.command == "pipeline" else STEPS[args.command])(run, args)
    except (PipelineError, OSError, MemoryError) as exc:
        print(error_message(exc), file=sys.stderr)
        return 1
    return 0


def bundled_config(name: str = "small.json") -> Path:
    """Path of a config shipped with the package."""
    return Path(str(resources.files("propsample").joinpath("configs", name)))


if __name__ == "__main__":
    sys.exit(main())
