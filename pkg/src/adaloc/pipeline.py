"""End-to-end experiment: pretrain, localize, lock, adapt per strategy, unlock, evaluate, check bounds."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import TrainConfig, curves_csv, finetune, grad_accumulation_profile, in_practical_set
from .bounds import (
    VarianceProfile,
    estimate_constants,
    gradient_ordering_check,
    mc_output_variance,
    ordering_statistics,
    slack_report,
    variance_bound,
)
from .data import Dataset, evaluate, gen_blobs, load_csv, load_idx, mnist_splits
from .errors import AdalocError, AdaptabilityViolation, ContractError, ParseError, StaleKeyError
from .keying import KeySpec, build_key, encode_key, key_fraction, unit_fractions, units_to_select
from .locking import drift_outside, lock, refresh_key, unlock
from .network import NetworkSpec, ParameterStore, encode_model, init_network, model_hash
from .serialize import atomic_write, canonical_json, parse_json, pretty_json, sha256_hex

SEED_ENV = "ADALOC_SEED"
STRATEGY_KINDS = {"key-top": "top", "key-pool": "pool-sample", "key-random": "random", "key-bottom": "bottom"}
CHANCE_MARGIN = 0.03


class PipelineError(AdalocError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Manifest:
    """Parsed experiment manifest; ``raw`` keeps the JSON for hashing."""

    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        env = os.environ.get(SEED_ENV)
        return int(env) if env not in (None, "") else int(self.raw.get("seed", 0))

    @property
    def output_dir(self) -> Path:
        return self.base_dir / self.raw.get("output_dir", "runs")

    def strategies(self) -> list[dict]:
        items = self.raw.get("strategies", [{"name": "key-top"}])
        names = [s.get("label", s["name"]) for s in items]
        if len(set(names)) != len(names):
            raise ContractError(f"strategy labels must be unique: {names}")
        for s in items:
            if s["name"] not in STRATEGY_KINDS:
                raise ContractError(f"unknown strategy {s['name']!r}")
        return items


def load_manifest(path) -> Manifest:
    path = Path(path)
    raw = parse_json(path.read_bytes(), str(path))
    if not isinstance(raw, dict):
        raise ParseError("manifest must be a JSON object")
    for field in ("network", "source", "target_train", "target_test"):
        if field not in raw:
            raise ParseError(f"manifest is missing '{field}'")
    manifest = Manifest(raw, path.parent)
    manifest.strategies()
    for field in ("source", "target_train", "target_test"):
        cfg = raw[field]
        for name in ("images", "labels", "path"):
            if name in cfg and not (manifest.base_dir / cfg[name]).exists():
                raise ContractError(f"{field}: file {cfg[name]} does not exist")
    return manifest


def network_from_config(cfg: dict) -> NetworkSpec:
    if "layers" in cfg:
        return NetworkSpec.from_dict(cfg)
    return NetworkSpec.mlp(int(cfg["input_dim"]), [int(h) for h in cfg["hidden"]], int(cfg["class_count"]))


_MNIST_CACHE: dict[tuple, dict[str, Dataset]] = {}


def load_dataset(cfg: dict, base_dir: Path = Path("."), split: str = "train") -> Dataset:
    """Build a dataset from a config of kind ``blobs``, ``idx``, ``csv`` or ``bundled-mnist``."""
    kind = cfg.get("kind")
    if kind == "blobs":
        return gen_blobs(int(cfg["class_count"]), int(cfg["dim"]), int(cfg["per_class"]), float(cfg["spread"]),
                         int(cfg["seed"]), cfg.get("sample_seed"), cfg.get("max_norm"), split)
    if kind == "idx":
        return load_idx(base_dir / cfg["images"], base_dir / cfg["labels"], cfg.get("class_count"), split)
    if kind == "csv":
        return load_csv(base_dir / cfg["path"], cfg.get("class_count"), split)
    if kind == "bundled-mnist":
        sizes = (int(cfg.get("source", 2000)), int(cfg.get("train", 2000)), int(cfg.get("test", 1000)),
                 int(cfg.get("seed", 0)))
        if sizes not in _MNIST_CACHE:
            _MNIST_CACHE[sizes] = mnist_splits(*sizes)
        ds = _MNIST_CACHE[sizes][cfg["part"]]
        return Dataset(ds.X, ds.y, ds.class_count, split, dict(ds.provenance))
    raise ParseError(f"unknown dataset kind {kind!r}")


def dataset_hash(ds: Dataset) -> str:
    return sha256_hex(ds.X.astype("<f8").tobytes(), ds.y.astype("<i8").tobytes())


def train_config(cfg: dict, seed: int, strategy: str) -> TrainConfig:
    return TrainConfig(
        eta=float(cfg.get("eta", 0.1)),
        epochs=int(cfg.get("epochs", 10)),
        batch_size=int(cfg.get("batch_size", 32)),
        seed=seed,
        strategy=strategy,
        momentum=float(cfg.get("momentum", 0.0)),
        weight_decay=float(cfg.get("weight_decay", 0.0)),
    )


def reset_head(params: ParameterStore) -> ParameterStore:
    """Zero the final layer's weights and bias, the usual start for a new task head."""
    spec = params.spec
    w0, _, end = spec.offsets(spec.depth - 1)
    flat = params.flat.copy()
    flat[w0:end] = 0.0
    return params.with_flat(flat)


def _mean(values) -> float:
    return float(np.mean(values))


class _Stages:
    """Runs named stages, converting failures into PipelineError."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except (AdalocError, ValueError, ArithmeticError, OSError) as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def run_pipeline(manifest: Manifest, output_dir: Path | None = None) -> dict:
    """Execute the manifest and write report.json, curves.csv and model/key artifacts.

    The returned report is also what report.json contains.  It holds no
    timestamps or absolute paths, so the same manifest and seed reproduce it
    byte for byte; wall-clock timings go to timings.json instead.
    """
    raw = manifest.raw
    seed = manifest.seed
    out = Path(output_dir) if output_dir is not None else manifest.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages()
    manifest_hash = sha256_hex(canonical_json(raw))
    artifacts: dict[str, str] = {}
    curves: list[dict] = []

    def emit(name: str, payload: bytes) -> None:
        atomic_write(out / name, payload)
        artifacts[name] = sha256_hex(payload)

    def emit_model(name: str, params: ParameterStore, extra: dict | None = None) -> None:
        header = {"inputs": {"manifest": manifest_hash, "seed": seed}}
        header.update(extra or {})
        emit(name, encode_model(params, header))

    spec = stages.run("network", network_from_config, raw["network"])
    source = stages.run("data", load_dataset, raw["source"], manifest.base_dir, "train")
    train = stages.run("data", load_dataset, raw["target_train"], manifest.base_dir, "train")
    test = stages.run("data", load_dataset, raw["target_test"], manifest.base_dir, "test")
    k = spec.class_count
    chance = 1.0 / k

    # pretraining on the source task
    theta0 = init_network(spec, seed)
    pre_cfg = stages.run("pretrain", train_config, raw.get("pretrain", {}), seed, "full")
    theta_star, pre_rows = stages.run("pretrain", finetune, theta0, source, pre_cfg, tag="pretrained", record=False)
    emit_model("pretrained.adlm", theta_star)
    source_acc = evaluate(spec, theta_star, source).accuracy

    key_cfg = raw.get("key", {})
    rho = float(key_cfg.get("rho", 0.05))

    # static lock of the pretrained model, before any adaptation
    static_key = stages.run("localize", build_key, theta_star, KeySpec(rho=rho, strategy="top", seed=seed))
    static_locked = stages.run("lock", lock, theta_star, static_key)
    static = {
        "source_accuracy": source_acc,
        "locked_source_accuracy": evaluate(spec, static_locked.params, source).accuracy,
        "reference_accuracy_note": "locked pretrained model keeps its source head",
    }

    base = reset_head(theta_star) if raw.get("reset_head", True) else theta_star
    emit_model("base.adlm", base)
    adapt_cfg = raw.get("adapt", {})

    # full fine-tuning, profiled
    full_cfg = train_config(adapt_cfg, seed, "full")
    if full_cfg.epochs:
        profiles, theta_hat, full_rows = stages.run("full-finetune", grad_accumulation_profile, base, train, full_cfg,
                                                    test)
    else:
        profiles = []
        theta_hat, full_rows = stages.run("full-finetune", finetune, base, train, full_cfg, eval_set=test)
    emit_model("full-finetuned.adlm", theta_hat)
    curves.extend({"strategy": "full", "seed": seed, **r} for r in full_rows)
    full_acc = evaluate(spec, theta_hat, test).accuracy

    strategies_report: dict[str, dict] = {}
    compactness: dict = {}
    masking_ok = True
    first_top: tuple | None = None
    for entry in manifest.strategies():
        label = entry.get("label", entry["name"])
        runs = int(entry.get("runs", 1))
        run_rows = []
        for r in range(runs):
            run_seed = seed + r
            kspec = KeySpec(rho=rho, pool_fraction=float(entry.get("pool_fraction", rho)),
                            strategy=STRATEGY_KINDS[entry["name"]], seed=run_seed)
            key = stages.run("localize", build_key, base, kspec)
            locked = stages.run("lock", lock, base, key)
            cfg = train_config(adapt_cfg, run_seed, entry["name"])
            tilde, rows = stages.run("adapt", finetune, base, train, cfg, key, test)
            curves.extend({"strategy": label, "seed": run_seed, **row} for row in rows)
            drift = drift_outside(tilde, base, key)
            if drift.size:
                masking_ok = False
                raise PipelineError("adapt", AdaptabilityViolation(f"{drift.size} non-key coordinates changed"))
            refreshed = stages.run("refresh-key", refresh_key, tilde, key)
            restored = stages.run("unlock", unlock, locked, refreshed, "key-finetuned")
            authorized = evaluate(spec, restored, test).accuracy
            unauthorized = evaluate(spec, locked.params, test).accuracy
            distance, member = in_practical_set(tilde, theta_hat, float(raw.get("bounds", {}).get("epsilon", 1.0)))
            run_rows.append({
                "seed": run_seed,
                "authorized": authorized,
                "unauthorized": unauthorized,
                "key_entries": len(key),
                "key_fraction": key_fraction(key, spec),
                "masking_exact": True,
                "unlock_matches_adapted": restored == tilde,
                "distance_to_full": distance,
                "in_practical_set": member,
                "locked_hash": locked.fingerprint,
            })
            if entry["name"] == "key-top" and first_top is None:
                first_top = (key, refreshed, locked, tilde)
                emit("key-top.adak", encode_key(key))
                emit("key-top-refreshed.adak", encode_key(refreshed))
                emit_model("locked.adlm", locked.params,
                           {"fingerprint": locked.fingerprint, "source_tag": locked.source_tag})
                emit_model("key-finetuned.adlm", tilde)
                fractions = unit_fractions(key, spec)
                expected = {layer: units_to_select(rho, spec.layers[layer].units) / spec.layers[layer].units
                            for layer in fractions}
                compactness = {
                    "unit_fractions": {str(l): f for l, f in fractions.items()},
                    "expected_unit_fractions": {str(l): f for l, f in expected.items()},
                    "unit_fractions_exact": fractions == expected,
                    "key_entries": len(key),
                    "param_count": spec.param_count,
                    "param_fraction": key_fraction(key, spec),
                    "param_fraction_ok": key_fraction(key, spec) <= 0.15,
                }
        strategies_report[label] = {
            "strategy": entry["name"],
            "pool_fraction": float(entry.get("pool_fraction", rho)),
            "runs": run_rows,
            "mean_authorized": _mean([x["authorized"] for x in run_rows]),
            "mean_unauthorized": _mean([x["unauthorized"] for x in run_rows]),
        }

    # a key is bound to one locked artifact
    stale = {"rejected": False}
    if first_top is not None:
        try:
            lock(theta_hat, first_top[0])
        except StaleKeyError as exc:
            stale = {"rejected": True, "error": type(exc).__name__}

    bounds_cfg = raw.get("bounds", {})
    bounds_report = stages.run("bounds", _bounds_section, spec, theta_star, static_key, theta_hat, first_top,
                               train, test, bounds_cfg, seed)

    grad_profile = {
        "layers": [{"layer": p.layer, "spearman": p.spearman} for p in profiles],
        "mean_spearman": _mean([p.spearman for p in profiles if p.spearman is not None])
        if any(p.spearman is not None for p in profiles) else None,
    }

    top = strategies_report.get("key-top")
    checks = {"masking_exact": masking_ok}
    if compactness:
        checks["compactness"] = bool(compactness["unit_fractions_exact"] and compactness["param_fraction_ok"])
    if top is not None:
        checks["authorized_within_3_of_full"] = top["mean_authorized"] >= full_acc - 0.03
        all_unauth = [r["unauthorized"] for s in strategies_report.values() for r in s["runs"]]
        checks["unauthorized_near_chance"] = all(abs(u - chance) <= CHANCE_MARGIN for u in all_unauth)
        bottom = strategies_report.get("key-bottom")
        if bottom is not None:
            checks["bottom_10_below_top"] = bottom["mean_authorized"] <= top["mean_authorized"] - 0.10
        pools = {n: s for n, s in strategies_report.items() if s["strategy"] == "key-pool"}
        if pools:
            checks["pool_within_5_of_top"] = all(
                s["mean_authorized"] >= top["mean_authorized"] - 0.05 for s in pools.values()
            )
        checks["unlock_matches_adapted"] = all(r["unlock_matches_adapted"] for s in strategies_report.values()
                                               for r in s["runs"])

    report = {
        "manifest_sha256": manifest_hash,
        "seed": seed,
        "inputs": {"source": dataset_hash(source), "target_train": dataset_hash(train),
                   "target_test": dataset_hash(test)},
        "network": spec.to_dict(),
        "param_count": spec.param_count,
        "chance_accuracy": chance,
        "pretrain": {"config": pre_cfg.to_dict(), "source_accuracy": source_acc,
                     "model_hash": model_hash(theta_star)},
        "static_lock": static,
        "full_finetune": {"config": full_cfg.to_dict(), "accuracy": full_acc, "model_hash": model_hash(theta_hat)},
        "strategies": strategies_report,
        "compactness": compactness,
        "stale_key": stale,
        "gradient_profile": grad_profile,
        "bounds": bounds_report,
        "checks": checks,
    }
    emit("curves.csv", curves_csv(curves))
    report["artifacts"] = dict(sorted(artifacts.items()))
    payload = pretty_json(report)
    atomic_write(out / "report.json", payload)
    atomic_write(out / "timings.json", pretty_json({"generated_at": time.time(), "stages": stages.timings}))
    return report


def _bounds_section(spec, theta_star, static_key, theta_hat, first_top, train, test, cfg, seed) -> dict:
    epsilon = float(cfg.get("epsilon", 1.0))
    section: dict = {}
    if first_top is not None:
        constants = estimate_constants(spec, theta_hat, train, epsilon=epsilon, C=float(cfg.get("C", 1.0)),
                                       t=float(cfg.get("t", 2.0)))
        section["slack"] = slack_report(first_top[3], theta_hat, constants).to_dict()

    trials = int(cfg.get("mc_trials", 2000))
    x = test.X[0]
    x_norm = float(np.linalg.norm(x))
    locked = lock(theta_star, static_key).params
    variance = {}
    for name, params in (("unlocked", theta_star), ("locked", locked)):
        profile = VarianceProfile.from_params(params)
        mc, se = mc_output_variance(profile, x, trials=trials, seed=seed, return_stderr=True)
        bound = variance_bound(profile, x_norm)
        variance[name] = {"profile": {"var_w": list(profile.var_w), "var_b": list(profile.var_b),
                                      "widths": list(profile.widths)},
                          "mc_variance": mc, "mc_stderr": se, "bound": bound,
                          "bound_holds": mc <= bound + 3 * se}
    variance["locked_below_unlocked"] = variance["locked"]["mc_variance"] <= variance["unlocked"]["mc_variance"]
    section["output_variance"] = variance

    ordering_models = int(cfg.get("ordering_models", 100))
    section["ordering"] = {
        "trained_model": [gradient_ordering_check(spec, theta_hat, x, int(test.y[0]), layer).to_dict()
                          for layer in range(1, spec.depth)],
        "random_he": ordering_statistics(models=ordering_models, seed=seed),
        "random_nonnegative": ordering_statistics(models=ordering_models, seed=seed, nonnegative_weights=True),
    }
    return section


def main_pipeline(manifest_path, output_dir=None) -> dict:
    manifest = load_manifest(manifest_path)
    return run_pipeline(manifest, Path(output_dir) if output_dir else None)

