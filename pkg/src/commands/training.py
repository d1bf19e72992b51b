import logging
from src.commands import CommandContext, CommandRouter
from src.data.checkpoint import save_checkpoint
from src.services.assimilator import evaluate_assimilation, improvement_fraction, train_danet
from src.services.forecaster import train_prednet
from src.services.reporting import da_eval_chart, save_figure, write_table
from src.utils.errors import InsufficientDataError

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("train-prednet", help="Train PredNet on [t0, t1)")
def train_prednet_command(ctx: CommandContext) -> str:
    cfg = ctx.cfg
    reader = ctx.open_dataset()
    trained = train_prednet(reader, cfg.prednet, cfg.prednet_training, cfg.time_grid)
    forecaster = trained.forecaster
    path = save_checkpoint(forecaster.network, cfg.paths.prednet_checkpoint,
                           optimizer=trained.training.optimizer, metadata=forecaster.metadata())
    ctx.artifacts.append(write_table(trained.training.log_frame(), ctx.run_dir / "training_log.csv"))

    best = trained.training.log[trained.training.best_epoch - 1]
    ctx.log("checkpoint_saved", path=str(path), best_epoch=best.epoch, val_loss=best.val_loss)
    loss = best.val_loss if best.val_loss is not None else best.train_loss
    return f"train-prednet: best epoch {best.epoch}/{len(trained.training.log)}, loss {loss:.6f}, checkpoint {path}"


@router.command("train-danet", help="Train DANet on the stored DA pairs and evaluate it on the held-out pairs")
def train_danet_command(ctx: CommandContext) -> str:
    cfg = ctx.cfg
    reader = ctx.open_dataset()
    pairs = reader.da_pairs()
    if not pairs:
        raise InsufficientDataError(f"{cfg.paths.dataset_dir} holds no DA pairs; run build-da-set first")
    forecaster = ctx.load_forecaster()
    aod_mean, aod_std = forecaster.input_stats.channel("aod550")

    trained = train_danet(pairs, cfg.danet, cfg.danet_training, aod_mean, aod_std)
    assimilator = trained.assimilator
    path = save_checkpoint(assimilator.network, cfg.paths.danet_checkpoint,
                           optimizer=trained.training.optimizer, metadata=assimilator.metadata())
    ctx.artifacts.append(write_table(trained.training.log_frame(), ctx.run_dir / "training_log.csv"))

    held_out = [pairs[i] for i in trained.training.val_indices]
    if not held_out:
        logger.warning("No held-out DA pairs; evaluating on the training pairs")
        held_out = pairs
    evaluation = evaluate_assimilation(assimilator, held_out)
    ctx.artifacts.append(write_table(evaluation, ctx.run_dir / "da_eval.csv"))
    ctx.artifacts.append(save_figure(da_eval_chart(evaluation), ctx.run_dir / "da_eval.svg"))
    improved = improvement_fraction(evaluation)
    ctx.log("checkpoint_saved", path=str(path), best_epoch=trained.training.best_epoch, improved_fraction=improved)
    return (
        f"train-danet: {len(pairs)} pairs, best epoch {trained.training.best_epoch}, "
        f"analysis beats forecast on {improved:.1%} of {len(held_out)} held-out DA times"
    )
