"""``rank-moe`` command line.

Config files are flat ``key = value`` text with ``#`` comments. Every
TrainConfig and GenConfig field is addressable by name (``seed`` feeds both);
generator role behaviour uses ``behavior.<ROLE>.<field>``. Path keys:
``data_dir``, ``train_file``, ``test_file``, ``checkpoint``, ``out``,
``loss_log``, ``listen``. Ablation keys: ``ablation_seeds`` and
``ablation_groups`` (comma separated). Flags override the file.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from . import ablation
from .data import DataError, read_records
from .pipeline import CheckpointError, RankingModel, TrainConfig, TrainingError, load_model, save_model, train, write_loss_log
from .synthgen import DEFAULT_BEHAVIOR, GenConfig, RoleBehavior, write_dataset

log = logging.getLogger("rank_moe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
COMMANDS = ("generate", "train", "eval", "ablate", "describe", "serve")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PATH_KEYS = ("data_dir", "train_file", "test_file", "checkpoint", "out", "loss_log", "listen")
EXTRA_KEYS = ("ablation_seeds", "ablation_groups")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _coerce(raw: str, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    paths: dict[str, str] = field(default_factory=dict)
    ablation_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    ablation_groups: tuple[str, ...] = ("variants", "experts", "history")

    def path(self, key: str, default: str | None = None) -> Path:
        value = self.paths.get(key, default)
        if value is None:
            raise UsageError(f"no {key} given (set it in the config file or pass --{key.replace('_', '-')})")
        return Path(value)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    train_kw: dict[str, Any] = {}
    gen_kw: dict[str, Any] = {}
    behavior = {k: RoleBehavior(**vars(v)) for k, v in DEFAULT_BEHAVIOR.items()}
    cfg = RunConfig()
    train_fields = {f.name for f in fields(TrainConfig)}
    gen_fields = {f.name for f in fields(GenConfig)} - {"behavior"}
    base_train, base_gen = TrainConfig(), GenConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        known = False
        if key in train_fields:
            train_kw[key] = _coerce(raw, getattr(base_train, key), key)
            known = True
        if key in gen_fields:
            gen_kw[key] = _coerce(raw, getattr(base_gen, key), key)
            known = True
        if key.startswith("behavior."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in behavior or not hasattr(behavior[parts[1]], parts[2]):
                raise UsageError(f"{source}:{lineno}: unknown behaviour key {key!r}")
            setattr(behavior[parts[1]], parts[2], _coerce(raw, 0.0, key))
            known = True
        if key in PATH_KEYS:
            cfg.paths[key] = raw
            known = True
        if key == "ablation_seeds":
            try:
                cfg.ablation_seeds = tuple(int(s) for s in raw.split(","))
            except ValueError:
                raise UsageError(f"{source}:{lineno}: bad seed list {raw!r}") from None
            known = True
        if key == "ablation_groups":
            cfg.ablation_groups = tuple(s.strip() for s in raw.split(",") if s.strip())
            known = True
        if not known:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
    try:
        cfg.train = TrainConfig(**train_kw)
        cfg.gen = GenConfig(**gen_kw, behavior=behavior)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{source}: invalid configuration: {exc}") from None
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.gen = replace(cfg.gen, seed=args.seed)
    if args.steps is not None:
        if args.steps <= 0:
            raise UsageError("--steps must be positive")
        cfg.train = replace(cfg.train, max_steps=args.steps)
    for key in ("checkpoint", "out", "listen"):
        value = getattr(args, key)
        if value is not None:
            cfg.paths[key] = value
    return cfg


# ---------------------------------------------------------------- commands


def _data_file(cfg: RunConfig, key: str) -> Path:
    if key in cfg.paths:
        p = Path(cfg.paths[key])
    elif "data_dir" in cfg.paths:
        p = Path(cfg.paths["data_dir"]) / ("train.jsonl" if key == "train_file" else "test.jsonl")
    else:
        raise UsageError(f"no {key} or data_dir configured")
    if not p.is_file():
        raise DataError(f"data file {p} not found")
    return p


def cmd_generate(cfg: RunConfig) -> int:
    out = cfg.path("out", cfg.paths.get("data_dir"))
    paths = write_dataset(cfg.gen, out)
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    records = read_records(_data_file(cfg, "train_file"))
    ckpt = cfg.path("checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log.info("training %s on %d records for %d steps", cfg.train.ablation, len(records), cfg.train.max_steps)
    result = train(records, cfg.train)
    save_model(result.model, ckpt)
    loss_path = Path(cfg.paths.get("loss_log", str(ckpt) + ".loss.csv"))
    write_loss_log(loss_path, result.logged(cfg.train.log_every))
    print(f"checkpoint\t{ckpt}")
    print(f"loss_log\t{loss_path}")
    print(f"final_loss\t{result.log[-1].loss_total:.6f}")
    return EXIT_OK


def _checkpoint(cfg: RunConfig) -> Path:
    ckpt = cfg.path("checkpoint")
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint {ckpt} not found")
    return ckpt


def cmd_eval(cfg: RunConfig) -> int:
    model = load_model(_checkpoint(cfg), cfg.train)
    records = read_records(_data_file(cfg, "test_file"))
    report = ablation.evaluate_model(model, records)
    if "out" in cfg.paths:
        Path(cfg.paths["out"]).write_text(report.to_csv(), encoding="utf-8")
    print(report.pretty())
    for task, n in sorted(report.excluded_sessions.items()):
        if n:
            print(f"{task}: {n} sessions without positives excluded from MRR@10")
    missing = report.missing()
    if missing:
        print("absent metrics: " + ", ".join(missing))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    if "train_file" in cfg.paths or "data_dir" in cfg.paths:
        train_recs = read_records(_data_file(cfg, "train_file"))
        test_recs = read_records(_data_file(cfg, "test_file"))
    else:
        from .synthgen import generate

        train_recs, test_recs, _ = generate(cfg.gen)
    try:
        configs = ablation.variant_configs(cfg.train, cfg.ablation_groups)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    results = ablation.run_ablation(train_recs, test_recs, configs, cfg.ablation_seeds)
    out = cfg.path("out", "ablation.csv")
    ablation.write_ablation_csv(out, results)
    print(f"{'variant':<26}{'median auc_avg':>16}")
    for name, _ in configs:
        print(f"{name:<26}{ablation.median_auc(results, name):>16.4f}")
    print(f"csv\t{out}")
    return EXIT_OK


def describe_model(model: RankingModel) -> list[str]:
    groups: dict[str, int] = {}
    for name, p in model.named_params().items():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + p.data.size
    lines = [f"{g:<12}{n:>14,d}" for g, n in sorted(groups.items())]
    lines.append(f"{'total':<12}{model.param_count():>14,d}")
    lines.append(f"parameters\t{model.param_count()}")
    lines.append(f"digest\t{model.config.digest().hex()}")
    return lines


def cmd_describe(cfg: RunConfig) -> int:
    model = RankingModel(cfg.train)
    print(f"ablation\t{cfg.train.ablation}")
    print("\n".join(describe_model(model)))
    return EXIT_OK


def _parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"--listen expects HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(cfg: RunConfig) -> int:
    from .service import RankServer, RankingService

    model = load_model(_checkpoint(cfg), cfg.train)
    host, port = _parse_listen(cfg.paths.get("listen", "127.0.0.1:7878"))
    with RankServer((host, port), RankingService(model)) as server:
        print(f"listening\t{server.server_address[0]}:{server.port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "describe": cmd_describe,
    "serve": cmd_serve,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rank-moe", description="Role-aware MMoE ranking: data generation, training, evaluation, serving.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--listen", help="HOST:PORT for serve")
    p.add_argument("--no-timestamp", action="store_true", help="omit timestamps from log lines")
    return p


def setup_logging(no_timestamp: bool) -> None:
    level_name = os.environ.get("RANK_MOE_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"RANK_MOE_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    fmt = "%(levelname)s %(name)s: %(message)s" if no_timestamp else "%(asctime)s %(levelname)s %(name)s: %(message)s"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(fmt))
    root = logging.getLogger("rank_moe")
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS[level_name])
    root.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.no_timestamp)
        cfg = apply_flags(load_config(args.config), args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"rank-moe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingError, OSError) as exc:
        print(f"rank-moe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"rank-moe: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
