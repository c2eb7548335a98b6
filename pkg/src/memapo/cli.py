"""Command-line entry point: ``memapo train | eval | memory | providers``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .codec import PromptLibrary
from .config import RunConfig, apply_env
from .errors import (
    ConfigError,
    DatasetError,
    EmbeddingModelMismatch,
    MemapoError,
    ProviderError,
    SnapshotError,
)
from .gateway import CostLedger, Gateway, OpenAICompatibleProvider, ScriptedProvider
from .harness import evaluate, load_dataset, train
from .snapshot import MemorySnapshot

log = logging.getLogger("memapo")

OK, CONFIG_ERROR, RUNTIME_ERROR = 0, 1, 2

# flag dest -> (config section or None, field, type)
FLAG_FIELDS = {
    "base_url": ("provider", "base_url", str),
    "chat_model": ("provider", "chat_model", str),
    "embedding_model": ("provider", "embedding_model", str),
    "credential_env": ("provider", "credential_env", str),
    "timeout": ("provider", "timeout", float),
    "retries": ("provider", "retries", int),
    "k": ("params", "k", int),
    "theta_corr_train": ("params", "theta_corr_train", float),
    "theta_corr_infer": ("params", "theta_corr_infer", float),
    "theta_error": ("params", "theta_error", float),
    "max_retries": ("params", "max_retries", int),
    "capacity": ("params", "capacity", int),
    "target": ("params", "target", int),
    "verify_samples": ("params", "verify_samples", int),
    "case_cap": ("params", "case_cap", int),
    "min_retained": ("params", "min_retained", int),
    "seed": ("params", "seed", int),
    "max_inflight": ("params", "max_inflight", int),
    "temperature": ("params", "temperature", float),
    "meta_temperature": ("params", "meta_temperature", float),
    "init_instruction": ("params", "init_instruction", str),
    "output_format": ("params", "output_format", str),
    "prompts_dir": (None, "prompts_dir", str),
    "scripted": (None, "scripted", str),
    "limit": (None, "limit", int),
    "strict_prices": (None, "strict_prices", bool),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override MEMAPO_CONFIG / --config)")
    g.add_argument("--config", help="JSON config file (default: $MEMAPO_CONFIG)")
    g.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    for dest, (_, _, typ) in FLAG_FIELDS.items():
        flag = "--" + dest.replace("_", "-")
        if typ is bool:
            g.add_argument(flag, dest=dest, action="store_const", const=True, default=None)
        else:
            g.add_argument(flag, dest=dest, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memapo", description="Self-evolving prompt memory: train, evaluate, inspect.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="build memory from training data")
    p.add_argument("--data", action="append", required=True, help="JSONL dataset (repeatable)")
    p.add_argument("--out", required=True, help="snapshot path (*.memapo.json)")
    p.add_argument("--memory", help="start from an existing snapshot")
    p.add_argument("--report", help="write the run report as JSON")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="single-pass evaluation with a trained memory")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--memory", required=True, help="snapshot path")
    p.add_argument("--report", help="write the run report as JSON")
    _add_config_flags(p)

    p = sub.add_parser("memory", help="inspect or export a snapshot")
    p.add_argument("action", choices=["inspect", "export"])
    p.add_argument("snapshot")

    p = sub.add_parser("providers", help="endpoint checks")
    p.add_argument("action", choices=["check"])
    _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    path = getattr(args, "config", None) or environ.get("MEMAPO_CONFIG")
    config = RunConfig.load(path) if path else RunConfig()
    config = apply_env(config, environ)
    provider, params, top = {}, {}, {}
    for dest, (section, name, _) in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        {"provider": provider, "params": params, None: top}[section][name] = value
    data = config.to_dict()
    data["provider"].update(provider)
    data["params"].update(params)
    data.update(top)
    return RunConfig.from_dict(data)


def make_gateway(config: RunConfig) -> Gateway:
    if config.scripted:
        provider = ScriptedProvider.from_dir(config.scripted)
    else:
        provider = OpenAICompatibleProvider.from_env(
            config.provider.base_url,
            config.provider.credential_env,
            timeout=config.provider.timeout,
            max_retries=config.provider.retries,
        )
    return Gateway(
        provider,
        chat_model=config.provider.chat_model,
        embedding_model=config.provider.embedding_model,
        ledger=CostLedger(dict(config.price_table), strict=config.strict_prices),
        max_inflight=config.params.max_inflight,
    )


def _datasets(paths, config: RunConfig, split: str):
    out = []
    for p in paths:
        name = Path(p).name.split(".")[0]
        instruction = None
        if name in config.instructions:
            instruction = Path(config.instructions[name]).read_text(encoding="utf-8").strip()
        out.append(load_dataset(p, name=name, split=split, instruction=instruction))
    return out


def _write_report(report, path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def cmd_train(args, config: RunConfig) -> int:
    datasets = _datasets(args.data, config, "train")
    start = MemorySnapshot.load(args.memory) if args.memory else None
    gateway = make_gateway(config)
    library = PromptLibrary(config.prompts_dir)
    try:
        _, report = train(
            datasets,
            config.params,
            gateway,
            memory=start.memory if start else None,
            library=library,
            limit=config.limit,
            snapshot_path=args.out,
        )
    except OSError as exc:
        print(f"memapo: cannot write snapshot: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print(report.format_table())
    if args.report:
        try:
            _write_report(report, args.report)
        except OSError as exc:
            print(f"memapo: cannot write report: {exc}", file=sys.stderr)
            return RUNTIME_ERROR
    return OK


def cmd_eval(args, config: RunConfig) -> int:
    datasets = _datasets(args.data, config, "test")
    snapshot = MemorySnapshot.load(args.memory)
    gateway = make_gateway(config)
    report = evaluate(
        datasets, snapshot, config.params, gateway, library=PromptLibrary(config.prompts_dir), limit=config.limit
    )
    print(report.format_table())
    if args.report:
        try:
            _write_report(report, args.report)
        except OSError as exc:
            print(f"memapo: cannot write report: {exc}", file=sys.stderr)
            return RUNTIME_ERROR
    return OK


def _clip(text: str, width: int = 72) -> str:
    text = " ".join(text.split())
    return text if len(text) <= width else text[: width - 3] + "..."


def cmd_memory(args) -> int:
    snapshot = MemorySnapshot.load(args.snapshot)
    if args.action == "export":
        sys.stdout.write(snapshot.dumps())
        return OK
    m = snapshot.memory
    print(f"# {len(m.ctm)} templates, {len(m.epm)} error patterns, step {m.step}, model {snapshot.embedding_model}")
    for t in m.ctm.values():
        print(f"template {t.id}\tcases={len(t.cases)}\tindex: {_clip(t.index_text)}\tstrategy: {_clip(t.strategy_text)}")
    for p in m.epm.values():
        print(f"pattern {p.id}\tbad_cases={len(p.bad_cases)}\t{_clip(p.pattern_text)}")
    return OK


def cmd_providers(args, config: RunConfig) -> int:
    gateway = make_gateway(config)
    status = OK
    try:
        reply = gateway.complete("Reply with the single word: pong")
        print(f"chat {config.provider.chat_model}: ok ({reply.usage.total_tokens} tokens)")
    except ProviderError as exc:
        print(f"chat {config.provider.chat_model}: FAILED {type(exc).__name__}: {exc}")
        status = RUNTIME_ERROR
    try:
        vec = gateway.embed_one("ping")
        print(f"embeddings {config.provider.embedding_model}: ok (dim {vec.shape[0]})")
    except ProviderError as exc:
        print(f"embeddings {config.provider.embedding_model}: FAILED {type(exc).__name__}: {exc}")
        status = RUNTIME_ERROR
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return CONFIG_ERROR
    except SystemExit as exc:  # --help
        return OK if exc.code in (0, None) else CONFIG_ERROR
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "memory":
            return cmd_memory(args)
        config = resolve_config(args)
        if args.print_config:
            print(config.to_json())
            return OK
        if args.command == "train":
            return cmd_train(args, config)
        if args.command == "eval":
            return cmd_eval(args, config)
        return cmd_providers(args, config)
    except (ConfigError, DatasetError, EmbeddingModelMismatch, SnapshotError, OSError) as exc:
        print(f"memapo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except (MemapoError, ValueError) as exc:
        print(f"memapo: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except Exception as exc:  # keep the exit-code contract for anything unforeseen
        log.exception("unexpected failure")
        print(f"memapo: aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
