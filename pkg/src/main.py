import argparse
import hashlib
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import torch
from sqlalchemy.exc import SQLAlchemyError
from src import __version__
from src.commands import Command, CommandContext, CommandRouter
from src.commands import data, evaluation, forecasting, training
from src.config import load_experiment_config, settings
from src.models.db_session import get_session, init_db
from src.models.enums import Preset
from src.services.audit_logger import AuditLogger
from src.utils.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

ROUTERS: List[CommandRouter] = [data.router, training.router, forecasting.router, evaluation.router]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message, key_path="argv")


def registered_commands() -> Dict[str, Command]:
    commands: Dict[str, Command] = {}
    for router in ROUTERS:
        commands.update(router.commands)
    return commands


def build_parser(commands: Dict[str, Command]) -> argparse.ArgumentParser:
    parser = _Parser(prog="ddnet", description="D-DNet: PredNet forecasts cycled with DANet data assimilation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, command in commands.items():
        p = sub.add_parser(name, help=command.help, description=command.help)
        p.add_argument("--config", required=True, metavar="PATH", help="experiment config (JSON)")
        p.add_argument("--out", metavar="DIR", help="root for the timestamped run directory")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--preset", choices=[preset.value for preset in Preset], default=Preset.DESK.value)
        for flags, kwargs in command.arguments:
            p.add_argument(*flags, **kwargs)
    return parser


def create_run_dir(root: Path, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{command}-{stamp}"
    suffix = 1
    while candidate.exists():
        candidate = root / f"{command}-{stamp}-{suffix}"
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


def _open_ledger(command: str, run_dir: Path, config_hash: str) -> Optional[AuditLogger]:
    try:
        init_db(settings.ledger_url)
        audit = AuditLogger(get_session())
        audit.start_run(command, str(run_dir), config_hash, __version__)
        return audit
    except SQLAlchemyError as e:
        logger.warning(f"Run ledger unavailable at {settings.ledger_url}: {e}")
        return None


def command_suite(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv``, run one pipeline stage and return the process exit code.

    Returns:
        0 on success, 1 for usage and configuration errors, 2 for runtime failures
    """
    commands = registered_commands()
    parser = build_parser(commands)
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a COMMAND is required", file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(level=settings.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if settings.threads:
        torch.set_num_threads(settings.threads)

    try:
        cfg = load_experiment_config(args.config, preset=args.preset, seed=args.seed)
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    resolved = cfg.model_dump_json(indent=2)
    run_dir = create_run_dir(Path(args.out or cfg.paths.run_root or settings.run_root), args.command)
    (run_dir / "resolved_config.json").write_text(resolved + "\n")
    (run_dir / "VERSION").write_text(__version__ + "\n")

    audit = _open_ledger(args.command, run_dir, hashlib.sha256(resolved.encode("utf-8")).hexdigest())
    ctx = CommandContext(name=args.command, cfg=cfg, args=args, run_dir=run_dir, audit=audit)

    summary = ""
    exit_code = EXIT_OK
    try:
        summary = commands[args.command].handler(ctx)
        print(summary)
    except ConfigurationError as e:
        exit_code = EXIT_CONFIG
        summary = f"{args.command} failed: {e}"
        logger.error(summary)
        print(f"error: {e}", file=sys.stderr)
    except Exception as e:
        exit_code = EXIT_RUNTIME
        summary = f"{args.command} failed: {type(e).__name__}: {e}"
        logger.error(summary, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
    finally:
        if audit is not None:
            try:
                if exit_code != EXIT_OK:
                    audit.log(action=f"{args.command}.failed", details={"error": summary}, severity="error")
                audit.finish_run(exit_code, summary)
            except SQLAlchemyError as e:
                logger.warning(f"Could not close the run ledger entry: {e}")
            finally:
                audit.db.close()
    return exit_code


def main() -> None:
    sys.exit(command_suite())


if __name__ == "__main__":
    main()
