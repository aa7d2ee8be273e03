"""Command-line entry point: ``validate``, ``generate``, ``eval`` and ``stats``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema
import yaml

from .backend import BackendConfig, BackendError, ChatClient
from .knowledge import kg_from_machines
from .metrics import (
    CorpusError,
    corpus_diversity,
    dialogue_stats,
    evaluate_corpus,
    read_corpus,
    read_gold,
    report_schema,
)
from .model import DisorderLabel, Strategy, load_emrs, validate_emr
from .orchestrator import GenerationJob, generate_dataset
from .statemachine import (
    MachineDefinitionError,
    MachineParseError,
    MachineValidationError,
    load_machine_def,
    load_shipped_machines,
)

logger = logging.getLogger("psydiag")


class ExitCode(IntEnum):
    OK = 0
    VALIDATION = 1
    USAGE = 2
    IO = 3
    BACKEND = 4


class UsageError(Exception):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "backend": "scripted",
    "out": "out",
    "emrs": None,
    "machines": None,
    "feds_per_emr": 5,
    "strategies": [s.value for s in Strategy],
    "workers": 4,
    "turn_cap": 200,
    "n_exp": 3,
    "remote": {},
}


def shipped_sample_emrs() -> Path:
    return Path(str(resources.files("psydiag").joinpath("data/sample_emrs")))


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def effective_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    cfg.update(load_config_file(getattr(args, "config", None)))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if isinstance(cfg["strategies"], str):
        cfg["strategies"] = [s.strip() for s in cfg["strategies"].split(",") if s.strip()]
    try:
        cfg["strategies"] = [Strategy(s).value for s in cfg["strategies"]]
    except ValueError as exc:
        raise UsageError(f"invalid strategy: {exc}") from exc
    if not cfg["strategies"]:
        raise UsageError("at least one strategy is required")
    if cfg["backend"] not in ("scripted", "remote"):
        raise UsageError(f"backend must be scripted or remote, got {cfg['backend']!r}")
    return cfg


# --------------------------------------------------------------------------
# validate


def _validate_targets(paths: Sequence[str]) -> list[Path]:
    if not paths:
        pkg = Path(str(resources.files("psydiag").joinpath("data")))
        return sorted((pkg / "machines").glob("*.yaml")) + sorted(shipped_sample_emrs().glob("*.json"))
    out = []
    for raw in paths:
        p = Path(raw)
        if not p.exists():
            raise FileNotFoundError(f"no such file or directory: {p}")
        if p.is_dir():
            out += sorted(f for f in p.rglob("*") if f.suffix in (".yaml", ".yml", ".json"))
        else:
            out.append(p)
    return out


def cmd_validate(args: argparse.Namespace) -> ExitCode:
    targets = _validate_targets(args.paths)
    kg = kg_from_machines(load_shipped_machines())
    issues: list[str] = []
    for path in targets:
        if path.suffix in (".yaml", ".yml"):
            try:
                load_machine_def(path)
            except MachineParseError as exc:
                issues.append(f"{path}:{exc.line}:{exc.column}: {exc}")
            except MachineValidationError as exc:
                issues += [f"{path}: {i}" for i in exc.issues]
            except MachineDefinitionError as exc:
                issues.append(f"{path}: {exc}")
        else:
            try:
                emrs = load_emrs(path)
            except (ValueError, KeyError, TypeError) as exc:
                issues.append(f"{path}: unreadable EMR: {exc}")
                continue
            for emr in emrs:
                issues += [f"{path}: {i}" for i in validate_emr(emr, kg)]
    for line in issues:
        print(line)
    print(f"checked {len(targets)} file(s), {len(issues)} issue(s)", file=sys.stderr)
    return ExitCode.VALIDATION if issues else ExitCode.OK


# --------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> ExitCode:
    cfg = effective_config(args)
    emr_path = Path(cfg["emrs"]) if cfg["emrs"] else shipped_sample_emrs()
    if not emr_path.exists():
        raise FileNotFoundError(f"no such EMR path: {emr_path}")
    emrs = load_emrs(emr_path)
    defs = None
    if cfg["machines"]:
        loaded = [load_machine_def(p) for p in cfg["machines"]]
        defs = dict(load_shipped_machines())
        defs.update({d.disorder: d for d in loaded})
    client = None
    if cfg["backend"] == "remote":
        try:
            client = ChatClient(BackendConfig.from_mapping(cfg["remote"]))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad remote backend config: {exc}") from exc
    job = GenerationJob(
        emrs=emrs,
        out_dir=Path(cfg["out"]),
        feds_per_emr=int(cfg["feds_per_emr"]),
        strategies=tuple(cfg["strategies"]),
        seed_base=int(cfg["seed"]),
        client=client,
        workers=int(cfg["workers"]),
        turn_cap=int(cfg["turn_cap"]),
        n_exp=int(cfg["n_exp"]),
        defs=defs,
        config_echo={**cfg, "emrs": str(emr_path)},
    )
    try:
        summary = generate_dataset(job)
    finally:
        if client is not None:
            client.close()
    print(
        f"eligible {summary.eligible}/{summary.attempted} sessions "
        f"({summary.written} written, {summary.failed} failed) -> {summary.corpus_path}"
    )
    return ExitCode.OK


# --------------------------------------------------------------------------
# eval / stats


def _write_or_print(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_eval(args: argparse.Namespace) -> ExitCode:
    corpus = read_corpus(args.corpus)
    gold = read_gold(args.gold)
    ids = {s.session_id for s in corpus}
    if ids and not ids & set(gold):
        raise CorpusError("corpus and gold share no session ids")
    baseline = read_corpus(args.baseline) if args.baseline else None
    report = evaluate_corpus(corpus, gold, baseline, with_diversity=args.diversity).to_dict()
    jsonschema.validate(report, report_schema())
    _write_or_print(report, getattr(args, "out", None))
    return ExitCode.OK


def cmd_stats(args: argparse.Namespace) -> ExitCode:
    corpus = read_corpus(args.corpus)
    stats = dialogue_stats(corpus, args.chars)
    doc: dict[str, Any] = {"n_sessions": len(corpus), **stats.__dict__}
    if args.diversity:
        doc["diversity"] = corpus_diversity(corpus).__dict__
    _write_or_print(doc, getattr(args, "out", None))
    return ExitCode.OK


# --------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    s = argparse.SUPPRESS
    parser.add_argument("--config", default=s, help="YAML config file")
    parser.add_argument("--seed", type=int, default=s, help="base seed for generation")
    parser.add_argument("--backend", choices=("scripted", "remote"), default=s)
    parser.add_argument("--out", default=s, help="output directory (generate) or report file")
    parser.add_argument("-v", "--verbose", action="store_true", default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psydiag", description="Psychiatric dialogue simulation toolkit")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check machine definitions and EMR files")
    _global_flags(p)
    p.add_argument("paths", nargs="*", help="files or directories (default: shipped data)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="simulate dialogues and write a corpus")
    _global_flags(p)
    p.add_argument("--emrs", default=None, help="EMR file or directory (default: shipped samples)")
    p.add_argument("--machines", nargs="+", default=None, help="machine files replacing shipped ones")
    p.add_argument("--feds", dest="feds_per_emr", type=int, default=None)
    p.add_argument("--strategies", default=None, help="comma-separated: random,symptom_informed")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--turn-cap", dest="turn_cap", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score a corpus against gold labels")
    _global_flags(p)
    p.add_argument("corpus")
    p.add_argument("--gold", required=True)
    p.add_argument("--baseline", default=None, help="second corpus for a paired McNemar test")
    p.add_argument("--diversity", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="corpus length and diversity statistics")
    _global_flags(p)
    p.add_argument("corpus")
    p.add_argument("--diversity", action="store_true")
    p.add_argument("--chars", choices=("codepoints", "nonspace"), default="codepoints")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return int(args.func(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return ExitCode.USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return ExitCode.IO
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return ExitCode.BACKEND
    except (CorpusError, MachineDefinitionError, jsonschema.ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return ExitCode.IO


if __name__ == "__main__":
    sys.exit(main())
