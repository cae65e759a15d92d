"""Command-line entry point: ``grbench <prep|train|attack|eval|leaderboard|selftest>``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
Every command that writes outputs also writes the effective configuration
(``config.json``) and a ``manifest.json`` with its hash, seed and version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackContext, load_attack, perturbed_graph, run_attack, save_attack
from .data import (
    DIFFICULTIES,
    SplitConfig,
    adv_train_preset,
    budget_preset,
    degree_split,
    injection_preset,
    load_split,
    open_dataset,
    save_split,
    standardize_arctan,
)
from .defenses import DEFAULT_RANK, Defense, svd_preprocess
from .errors import GRBError, ValidationError
from .evaluate import AttackSpec, Leaderboard, emit_leaderboard, run_matrix, subset_accuracy, weighted_score
from .graph import GraphBundle, load_bundle, save_bundle
from .models import ARCHS, ModelSpec, load_model, predict, save_model
from .training import AtConfig, TrainConfig, adversarial_train, train, write_history


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# helpers ------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def write_run_files(out: Path, command: str, cfg: dict) -> None:
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", {
        "tool": "grbench",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "config_hash": config_hash(cfg),
    })


def load_prepared(data: str) -> tuple[GraphBundle, "object"]:
    """Bundle and split from a ``prep`` output directory."""
    root = Path(data)
    if not (root / "splits.json").is_file():
        raise ValidationError(f"{root} is not a prep output directory (no splits.json)")
    return load_bundle(root / "bundle"), load_split(root / "splits.json")


def _spec_from(cfg: dict) -> ModelSpec:
    spec = ModelSpec.default(cfg.get("arch", "GCN"), bool(cfg.get("layer_norm", False)))
    extra = {k: cfg[k] for k in ("hidden_sizes", "dropout", "k", "alpha") if cfg.get(k) is not None}
    return ModelSpec.from_json({**spec.to_json(), **extra}) if extra else spec


def _train_cfg(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=cfg.get("lr", 0.01),
        max_epochs=cfg.get("max_epochs", 1000),
        patience=cfg.get("patience", 50),
        seed=seed,
    )


def _at_cfg(dataset: str, cfg: dict) -> AtConfig:
    p = adv_train_preset(dataset)
    return AtConfig(
        warmup_epochs=cfg.get("warmup_epochs", AtConfig.warmup_epochs),
        step_size=cfg.get("at_step", p.step_size),
        steps=cfg.get("at_steps", p.steps),
        injected=cfg.get("at_injected", p.injected),
        edges=cfg.get("at_edges", p.edges),
        feature_min=p.feature_range[0],
        feature_max=p.feature_range[1],
    )


def build_defense(g: GraphBundle, split, cfg: dict, seed: int) -> Defense:
    """Train one defense described by a config entry."""
    spec = _spec_from(cfg)
    tcfg = _train_cfg(cfg, seed)
    rank = cfg.get("svd_rank")
    pre = svd_preprocess(rank, seed) if rank else None
    if cfg.get("adversarial", False):
        model = adversarial_train(spec, g, split, tcfg, _at_cfg(g.name, cfg), preprocess=pre)
    else:
        model = train(spec, g, split, tcfg, preprocess=pre)
    name = cfg.get("name") or spec.label + ("+AT" if cfg.get("adversarial") else "") + ("-SVD" if rank else "")
    return Defense(name, model, pre)


def _attack_budget(dataset: str, scenario: str, difficulty: str, cfg: dict):
    b = budget_preset(dataset, scenario, difficulty, cfg.get("edge_ratio", 0.05))
    over = {k: cfg[k] for k in ("max_injected", "max_edges", "feature_min", "feature_max") if k in cfg}
    if over:
        b = type(b)(**{**b.to_json(), **over})
    return b


# subcommands ----------------------------------------------------------------------


def cmd_prep(args) -> int:
    g = open_dataset(args.dataset, args.data_dir)
    if args.normalize:
        g = g.replace(features=standardize_arctan(g.features))
    split = degree_split(g, SplitConfig(seed=args.seed))
    out = Path(args.out)
    save_bundle(g, out / "bundle")
    save_split(split, out / "splits.json")
    cfg = {"dataset": args.dataset, "seed": args.seed, "normalize": args.normalize}
    write_run_files(out, "prep", cfg)
    print(json.dumps({"nodes": g.num_nodes, "edges": g.num_edges, "train": int(split.train.size),
                      "val": int(split.val.size), "test_per_level": int(split.test_easy.size)}))
    return 0


def cmd_train(args) -> int:
    g, split = load_prepared(args.data)
    cfg = {
        "data": args.data, "arch": args.arch, "layer_norm": args.ln, "adversarial": args.at,
        "svd_rank": args.svd_rank, "seed": args.seed, "lr": args.lr,
        "max_epochs": args.epochs, "patience": args.patience,
    }
    d = build_defense(g, split, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(d.model, out / "model.grbm")
    write_history(d.model.history, out / "train_log.jsonl")
    write_run_files(out, "train", cfg)
    acc = subset_accuracy(d.predict(g), g.labels, split.test_full)
    print(json.dumps({"name": d.name, "epochs": len(d.model.history), "test_full_accuracy": acc}))
    return 0


def cmd_attack(args) -> int:
    g, split = load_prepared(args.data)
    if args.replay:
        result = load_attack(args.replay)
        if args.model is None:
            raise UsageError("--replay needs --model")
        model = load_model(args.model)
        attacked = perturbed_graph(g, result)
        targets = split.test(args.difficulty)
        acc = subset_accuracy(predict(model, attacked), attacked.labels, targets, g.sentinel)
        print(json.dumps({"method": result.method, "difficulty": args.difficulty, "accuracy": acc}))
        return 0
    if args.method is None or args.surrogate is None:
        raise UsageError("attack needs --method and --surrogate (or --replay)")
    surrogate = load_model(args.surrogate)
    preset = injection_preset(g.name)
    cfg = {
        "data": args.data, "surrogate": args.surrogate, "scenario": args.scenario,
        "method": args.method, "difficulty": args.difficulty, "seed": args.seed,
        "step": args.step if args.step is not None else preset.step_size,
        "iters": args.iters if args.iters is not None else preset.iterations,
    }
    budget = _attack_budget(g.name, args.scenario, args.difficulty, {})
    ctx = AttackContext(surrogate, g.with_labels_hidden(split.test_full), split.test(args.difficulty), budget, args.seed)
    params = _method_params(args.scenario, args.method, {"step": cfg["step"], "iters": cfg["iters"]})
    result = run_attack(args.method, ctx, **params)
    out = Path(args.out)
    save_attack(result, out, extra={"budget": budget.to_json(), "difficulty": args.difficulty})
    write_run_files(out, "attack", cfg)
    print(json.dumps({"method": result.method, "surrogate_agreement": result.surrogate_accuracy_after,
                      "exhausted": result.exhausted}))
    return 0


_NO_STEP = {("modification", m) for m in ("rnd", "dice", "flip", "fga")} | {("injection", "rnd")}


def _method_params(scenario: str, method: str, params: dict) -> dict:
    if (scenario, method.lower()) in _NO_STEP:
        return {}
    return params


def cmd_eval(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key in ("seed", "repeats", "jobs", "out"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if "out" not in cfg:
        raise ValidationError("eval needs an output directory (config 'out' or --out)")
    seed = int(cfg.get("seed", 0))
    scenario = cfg.get("scenario", "injection")
    dataset = cfg.get("dataset", "toy")
    if (Path(dataset) / "splits.json").is_file():
        g, split = load_prepared(dataset)
    else:
        g = open_dataset(dataset)
        split = degree_split(g, SplitConfig(seed=seed))
    preset = injection_preset(g.name)

    attacks = []
    for a in cfg.get("attacks", []):
        method = a["method"]
        params = dict(a.get("params", {}))
        params.setdefault("step", preset.step_size)
        params.setdefault("iters", preset.iterations)
        attacks.append(AttackSpec(a.get("id", method.upper()), method, _method_params(scenario, method, params)))

    surrogate_cfg = cfg.get("surrogate", {"arch": "GCN"})
    surrogate = build_defense(g, split, surrogate_cfg, seed).model
    defenses = [build_defense(g, split, d, seed) for d in cfg.get("defenses", [])]
    difficulties = tuple(cfg.get("difficulties", DIFFICULTIES))
    budget_over = cfg.get("budget", {})
    lb = run_matrix(
        g, split, surrogate, attacks, defenses,
        lambda k: _attack_budget(g.name, scenario, k, budget_over),
        repeats=int(cfg.get("repeats", 10)), base_seed=seed, difficulties=difficulties,
        jobs=int(cfg.get("jobs", 1)),
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for fmt, name in (("json", "leaderboard.json"), ("csv", "leaderboard.csv"), ("markdown", "leaderboard.md")):
        (out / name).write_text(emit_leaderboard(lb, fmt), encoding="utf-8")
    write_run_files(out, "eval", cfg)
    print(emit_leaderboard(lb, "markdown", "F" if "F" in difficulties else difficulties[-1]))
    return 0


def cmd_leaderboard(args) -> int:
    lb = Leaderboard.from_json(json.loads(Path(args.input).read_text(encoding="utf-8")))
    sys.stdout.write(emit_leaderboard(lb, args.format, args.difficulty))
    return 0


def selftest_report(seed: int = 0) -> dict:
    """Gradient checks for every architecture and the weighted-metric oracle."""
    from .autodiff import grad_check
    from .models import bind_params, build_logits, init_model, propagation_operator

    rng = np.random.default_rng(seed)
    n, d, c = 8, 5, 3
    edges = [(i, (i + 1) % n) for i in range(n)] + [(0, 4), (2, 6)]
    g = GraphBundle.from_edges(n, edges, rng.normal(size=(n, d)), rng.integers(0, c, n), c)
    grads = {}
    for arch in ARCHS:
        for ln in (False, True):
            spec = ModelSpec(arch, hidden_sizes=(4,) if arch == "APPNP" else (4, 4), with_layer_norm=ln, dropout=0.0)
            m = init_model(spec, d, c, seed)
            op = propagation_operator(arch, g)

            def loss(tape, x, m=m, op=op):
                logits = build_logits(tape, m, op, x, bind_params(tape, m))
                return tape.nll_loss(tape.log_softmax(logits), g.labels)

            grads[spec.label] = grad_check(loss, g.features.astype(np.float64))
    worst = 0.0
    for _ in range(200):
        s = rng.random(int(rng.integers(1, 21)))
        for order in ("descending", "ascending"):
            srt = np.sort(s)[::-1] if order == "descending" else np.sort(s)
            w = [1.0 / (i + 1) ** 2 for i in range(s.size)]
            direct = sum(wi * si for wi, si in zip(w, srt)) / sum(w)
            worst = max(worst, abs(weighted_score(s, order) - direct))
    return {"grad_check": grads, "metric_max_error": worst}


def cmd_selftest(args) -> int:
    rep = selftest_report(args.seed)
    ok = all(v < 1e-4 for v in rep["grad_check"].values()) and rep["metric_max_error"] < 1e-12
    for name, err in rep["grad_check"].items():
        print(f"grad_check {name:<10} {err:.2e} {'ok' if err < 1e-4 else 'FAIL'}")
    print(f"weighted_score oracle max error {rep['metric_max_error']:.2e}")
    if not ok:
        print("selftest failed", file=sys.stderr)
        return 3
    return 0


# parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"grbench {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prep", help="build a bundle and difficulty split")
    s.add_argument("--dataset", required=True, help="synthetic name, bundle dir, or name under GRB_DATA_DIR")
    s.add_argument("--data-dir", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--normalize", action="store_true", help="apply arctan feature normalization")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train", help="train a model on a prepared dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=ARCHS, default="GCN")
    s.add_argument("--ln", action="store_true", help="layer normalization")
    s.add_argument("--at", action="store_true", help="adversarial training")
    s.add_argument("--svd-rank", type=int, default=None, help=f"low-rank defense (typical {DEFAULT_RANK})")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--patience", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="run or replay an attack")
    s.add_argument("--data", required=True)
    s.add_argument("--surrogate")
    s.add_argument("--scenario", choices=("injection", "modification"), default="injection")
    s.add_argument("--method")
    s.add_argument("--difficulty", choices=DIFFICULTIES, default="F")
    s.add_argument("--step", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replay", help="attack artifact directory to re-apply")
    s.add_argument("--model", help="checkpoint to evaluate when replaying")
    s.add_argument("--out", default="attack_out")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("eval", help="run the attack x defense matrix")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("leaderboard", help="render a leaderboard.json")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    s.add_argument("--difficulty", choices=DIFFICULTIES)
    s.set_defaults(func=cmd_leaderboard)

    s = sub.add_parser("selftest", help="gradient and metric oracles")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def run_command(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"grbench: usage error: {exc}", file=sys.stderr)
        return 1
    except GRBError as exc:
        print(f"grbench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"grbench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
