import logging
from src.commands import CommandContext, CommandRouter
from src.data.field_io import state_record, step_name, write_field_file
from src.services.evalkit import default_regions
from src.services.forecaster import evaluate_lead_times
from src.services.opsloop import CycleSettings, OperationalResult, run_operational, run_prednet_only
from src.services.reporting import emit_report, leadtime_chart, save_figure, write_table

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("eval-rollout", help="Lead-time skill of PredNet rollouts from random start times after t2")
def eval_rollout(ctx: CommandContext) -> str:
    cfg = ctx.cfg
    reader = ctx.open_dataset()
    forecaster = ctx.load_forecaster()
    ev = cfg.evaluation
    table = evaluate_lead_times(forecaster, reader, cfg.time_grid.t2, cfg.time_grid.t_end,
                                ev.n_start_times, ev.lead_steps, ev.seed)
    ctx.artifacts.append(write_table(table, ctx.run_dir / "leadtime.csv"))
    ctx.artifacts.append(save_figure(leadtime_chart(table, cfg.time_grid.dt_hours), ctx.run_dir / "leadtime.svg"))

    aod = table[table["variable"] == "aod550"].set_index("lead")
    reported = [lead for lead in ev.report_leads if lead in aod.index]
    ctx.log("leadtime_evaluated", leads={lead: float(aod.loc[lead, "rmse_mean"]) for lead in reported})
    parts = [f"{lead * cfg.time_grid.dt_hours:g}h={aod.loc[lead, 'rmse_mean']:.5f}" for lead in reported]
    return "eval-rollout: AOD RMSE " + ", ".join(parts) if parts else "eval-rollout: no reported leads within range"


def write_trajectory(ctx: CommandContext, result: OperationalResult) -> None:
    ctx.artifacts.append(write_table(result.timings, ctx.run_dir / result.experiment / "timings.csv"))
    for snapshot in result.snapshots:
        path = ctx.run_dir / result.experiment / "snapshots" / step_name(snapshot.time_index)
        write_field_file(path, state_record(snapshot))


def write_operational(ctx: CommandContext, result: OperationalResult) -> None:
    emit_report(ctx.run_dir, result.all_series(), {result.experiment: result.regional.summary()},
                cap_points=ctx.cfg.evaluation.cap_points)
    write_trajectory(ctx, result)


def _settings_and_regions(ctx: CommandContext, reader):
    ev = ctx.cfg.evaluation
    return CycleSettings.from_experiment(ctx.cfg), default_regions(*reader.shape, rows=ev.region_rows, cols=ev.region_cols)


@router.command("run-operational", help="Run the D-DNet forecast/assimilation cycle over the operational segment")
def run_operational_command(ctx: CommandContext) -> str:
    reader = ctx.open_dataset()
    settings, regions = _settings_and_regions(ctx, reader)
    result = run_operational(ctx.load_forecaster(), ctx.load_assimilator(), reader, settings, ctx.cfg.assimilation, regions)
    write_operational(ctx, result)
    aod = result.metric(result.experiment, "aod550").mean_rmse()
    pm = result.metric(result.experiment, "pm25").mean_rmse()
    ctx.log("cycle_finished", analyses=len(result.analyses), skipped=result.skipped_da, aod_rmse=aod, pm25_rmse=pm)
    return (
        f"run-operational: {settings.horizon} steps, {len(result.analyses)} analyses, "
        f"mean RMSE aod550={aod:.5f} pm25={pm:.4f}"
    )


@router.command("run-baseline", help="Run PredNet alone over the operational segment")
def run_baseline_command(ctx: CommandContext) -> str:
    reader = ctx.open_dataset()
    settings, regions = _settings_and_regions(ctx, reader)
    result = run_prednet_only(ctx.load_forecaster(), reader, settings, regions)
    write_operational(ctx, result)
    aod = result.metric(result.experiment, "aod550").mean_rmse()
    pm = result.metric(result.experiment, "pm25").mean_rmse()
    ctx.log("cycle_finished", aod_rmse=aod, pm25_rmse=pm)
    return f"run-baseline: {settings.horizon} steps, mean RMSE aod550={aod:.5f} pm25={pm:.4f}"
