"""Command routers: each module registers the subcommands of one pipeline stage."""
import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from src.data.checkpoint import load_checkpoint
from src.data.field_io import DatasetReader
from src.models.schemas import ExperimentConfig
from src.services.assimilator import Assimilator
from src.services.audit_logger import AuditLogger
from src.services.forecaster import Forecaster
from src.utils.errors import CheckpointError

logger = logging.getLogger(__name__)

# (flags, argparse keyword arguments)
Argument = Tuple[Sequence[str], Dict[str, Any]]


@dataclass
class CommandContext:
    name: str
    cfg: ExperimentConfig
    args: argparse.Namespace
    run_dir: Path
    audit: Optional[AuditLogger] = None
    artifacts: List[Path] = field(default_factory=list)

    def log(self, action: str, severity: str = "info", **details) -> None:
        if self.audit is not None:
            self.audit.log(action=f"{self.name}.{action}", details=details, severity=severity)

    def open_dataset(self, verify: bool = True) -> DatasetReader:
        return DatasetReader(self.cfg.paths.dataset_dir, verify=verify)

    def load_forecaster(self) -> Forecaster:
        checkpoint = load_checkpoint(self.cfg.paths.prednet_checkpoint)
        if "input_stats" not in checkpoint.metadata:
            raise CheckpointError(f"{self.cfg.paths.prednet_checkpoint} holds no PredNet normalization statistics")
        return Forecaster.from_metadata(checkpoint.to_network(), checkpoint.metadata)

    def load_assimilator(self) -> Assimilator:
        checkpoint = load_checkpoint(self.cfg.paths.danet_checkpoint)
        if "aod_std" not in checkpoint.metadata:
            raise CheckpointError(f"{self.cfg.paths.danet_checkpoint} holds no DANet normalization statistics")
        return Assimilator.from_metadata(checkpoint.to_network(), checkpoint.metadata)


# returns the one-line summary printed on success
Handler = Callable[[CommandContext], str]


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: List[Argument] = field(default_factory=list)


class CommandRouter:
    def __init__(self):
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, help: str, arguments: Sequence[Argument] = ()):
        def register(handler: Handler) -> Handler:
            if name in self.commands:
                raise ValueError(f"command '{name}' registered twice")
            self.commands[name] = Command(name, help, handler, list(arguments))
            return handler
        return register
