import json
import pytest
from pathlib import Path
from src.config import settings
from src.main import command_suite


def tiny_experiment(root: Path, **overrides) -> dict:
    """An experiment small enough to run every stage in seconds"""
    experiment = {
        "name": "ddnet-tiny",
        "world": {"height": 8, "width": 16, "burn_in_steps": 40, "seed": 5},
        "time_grid": {"t0": 0, "t1": 48, "t2": 64, "t_end": 112, "da_interval": 4},
        "prednet": {"hidden_channels": 2},
        "danet": {"hidden_channels": 2},
        "prednet_training": {"epochs": 1, "sample_stride": 12},
        "danet_training": {"epochs": 1},
        "evaluation": {"n_start_times": 3, "lead_steps": 8, "report_leads": [1, 8], "cap_points": 10},
        "paths": {
            "dataset_dir": str(root / "data"),
            "prednet_checkpoint": str(root / "checkpoints" / "prednet.ddnt"),
            "danet_checkpoint": str(root / "checkpoints" / "danet.ddnt"),
        },
    }
    experiment.update(overrides)
    return experiment


class CLI:
    def __init__(self, root: Path):
        self.root = root
        self.out = root / "runs"
        self.config = root / "experiment.json"
        self.config.write_text(json.dumps(tiny_experiment(root)))

    def __call__(self, *argv: str, config=None):
        before = set(self.out.glob("*")) if self.out.exists() else set()
        code = command_suite([*argv, "--config", str(config or self.config), "--out", str(self.out)])
        created = sorted(set(self.out.glob("*")) - before) if self.out.exists() else []
        return code, (created[-1] if created else None)


@pytest.fixture
def cli(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "ledger_url", f"sqlite:///{tmp_path / 'ledger.db'}")
    return CLI(tmp_path)
