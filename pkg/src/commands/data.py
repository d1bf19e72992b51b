import logging
import numpy as np
from pathlib import Path
from src.commands import CommandContext, CommandRouter
from src.data.field_io import DatasetReader, dataset_checksum
from src.services.assimilator import build_da_training_set
from src.services.evalkit import dataset_correlation
from src.services.reporting import correlation_heatmap, save_figure, write_table
from src.services.synthworld import generate_dataset

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("gen-data", help="Generate the synthetic world dataset")
def gen_data(ctx: CommandContext) -> str:
    """
    Run the synthetic world over [t0, t_end) and write the dataset directory.

    Also writes correlation.csv / correlation.svg for the training segment, sampled once a day.
    """
    cfg = ctx.cfg
    out_dir = Path(cfg.paths.dataset_dir)
    manifest = generate_dataset(cfg.world, cfg.time_grid, out_dir)
    checksum = dataset_checksum(out_dir)
    ctx.log("dataset_written", path=str(out_dir), checksum=checksum, steps=manifest.t_end - manifest.t0,
            coarse_aod_weight=manifest.coarse_aod_weight)

    reader = DatasetReader(out_dir, verify=False)
    matrix = dataset_correlation(reader, manifest.t0, manifest.t1, cfg.time_grid.steps_per_day)
    ctx.artifacts.append(write_table(matrix.rename_axis("channel").reset_index(), ctx.run_dir / "correlation.csv"))
    ctx.artifacts.append(save_figure(correlation_heatmap(matrix), ctx.run_dir / "correlation.svg"))
    coupling = matrix.loc["pm25", "aod550"]
    (ctx.run_dir / "CHECKSUM").write_text(checksum + "\n")

    return (
        f"gen-data: {manifest.t_end - manifest.t0} steps on {manifest.height}x{manifest.width}, "
        f"{len(manifest.obs_times)} observation times, corr(pm25,aod550)={coupling:.3f}, sha256={checksum}"
    )


@router.command("build-da-set", help="Build DANet training pairs from PredNet rollouts over [t1, t2)")
def build_da_set(ctx: CommandContext) -> str:
    cfg = ctx.cfg
    forecaster = ctx.load_forecaster()
    reader = ctx.open_dataset()
    grid = cfg.time_grid
    pairs = build_da_training_set(forecaster, reader, grid.t1, grid.t2, cfg.assimilation, grid.da_interval)
    reader.write_da_pairs(pairs)
    coverage = float(np.mean([p.mask.mean() for p in pairs])) if pairs else 0.0
    ctx.log("da_pairs_written", count=len(pairs), mean_coverage=coverage)
    return f"build-da-set: {len(pairs)} pairs over [{grid.t1}, {grid.t2}), mean observed fraction {coverage:.3f}"
