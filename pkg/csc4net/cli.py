"""Command-line entry point: data generation, training, synthesis, evaluation and ablation."""

import functools
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from . import __version__
from .core.concurrency import set_thread_cap
from .core.config import settings
from .core.exceptions import Csc4NetError, DatasetIOError
from .core.logging import configure_logging
from .schemas.config import (
    CoderKind,
    Correspondence,
    DistanceMode,
    IunMode,
    KernelParams,
    BandwidthPolicy,
    LayerSpec,
    ModalityMap,
    ModelConfig,
    PhantomSpec,
)

CONTEXT_SETTINGS = {"help_option_names": ["-h", "--help"]}


# ----------------------------------------------------------------------------
# Parameter types
# ----------------------------------------------------------------------------

class ModalityMapType(click.ParamType):
    name = "map"

    def convert(self, value, param, ctx):
        if isinstance(value, ModalityMap):
            return value
        try:
            return ModalityMap.parse(value)
        except (ValueError, ValidationError) as e:
            self.fail(str(e), param, ctx)


class LayersType(click.ParamType):
    """Comma-separated layer specs, e.g. ``16:5x5,16:1x1,9:2x2:2``"""

    name = "layers"

    def convert(self, value, param, ctx):
        if isinstance(value, list):
            return value
        try:
            return [LayerSpec.parse(item) for item in value.split(",") if item.strip()]
        except (ValueError, ValidationError) as e:
            self.fail(str(e), param, ctx)


class FractionsType(click.ParamType):
    name = "fractions"

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            fractions = tuple(float(v) for v in value.split(","))
        except ValueError:
            self.fail(f"{value!r} is not a comma-separated list of numbers", param, ctx)
        if len(fractions) != 3:
            self.fail("expected three fractions: train,validation,test", param, ctx)
        return fractions


# ----------------------------------------------------------------------------
# Config files and error mapping
# ----------------------------------------------------------------------------

def parse_config_file(path: str) -> Dict[str, str]:
    """Read ``key=value`` lines ('#' starts a comment); keys use option names."""
    values: Dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise click.BadParameter(f"cannot read {path}: {e}", param_hint="'--config'")
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"{path}:{number}: expected key=value", param_hint="'--config'")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _load_config(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> None:
    if value is None:
        return
    names: Dict[str, str] = {}
    for p in ctx.command.params:
        if p.name == "config":
            continue
        names[p.name] = p.name
        for opt in getattr(p, "opts", []):
            names[opt.lstrip("-").replace("-", "_")] = p.name
    values = parse_config_file(value)
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise click.BadParameter(f"unknown keys in {value}: {', '.join(unknown)}", param_hint="'--config'")
    ctx.default_map = {**(ctx.default_map or {}), **{names[k]: v for k, v in values.items()}}


config_option = click.option(
    "--config",
    type=click.Path(dir_okay=False),
    callback=_load_config,
    is_eager=True,
    expose_value=False,
    help="key=value file supplying defaults for this command's options",
)


def handle_errors(fn: Callable) -> Callable:
    """Report library errors on stderr and exit with their exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except Csc4NetError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(e.exit_code)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(DatasetIOError.exit_code)

    return wrapper


def _console() -> Console:
    return Console(highlight=False)


# ----------------------------------------------------------------------------
# Shared model options
# ----------------------------------------------------------------------------

MODEL_OPTIONS = [
    click.option("--layers", type=LayersType(), default=None,
                 help="Layer specs K:fhxfw[:stride[:repeat]], comma separated"),
    click.option("--coder", type=click.Choice([k.value for k in CoderKind]), default=CoderKind.L4.value,
                 show_default=True),
    click.option("--epochs", type=click.IntRange(min=1), default=30, show_default=True),
    click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True),
    click.option("--lambda", "lmbda", type=click.FloatRange(min=0.0), default=0.02, show_default=True,
                 help="Sparsity weight"),
    click.option("--mmd-weight", type=click.FloatRange(min=0.0), default=1.0, show_default=True),
    click.option("--manifold-weight", type=click.FloatRange(min=0.0), default=1.0, show_default=True),
    click.option("--manifold-step", type=click.FloatRange(0.0, 1.0), default=0.1, show_default=True),
    click.option("--associator-ridge", type=click.FloatRange(min=0.0), default=1e-6, show_default=True),
    click.option("--correspondence", type=click.Choice([c.value for c in Correspondence]),
                 default=Correspondence.SOFT_KERNEL.value, show_default=True),
    click.option("--iun-mode", type=click.Choice([m.value for m in IunMode]),
                 default=IunMode.STRICT_UNIT.value, show_default=True),
    click.option("--distance-mode", type=click.Choice([m.value for m in DistanceMode]),
                 default=DistanceMode.AFFINE_INVARIANT.value, show_default=True),
    click.option("--bandwidth", type=click.FloatRange(min=0.0, min_open=True), default=None,
                 help="Fixed kernel bandwidth (median heuristic when omitted)"),
    click.option("--msp-max-iter", type=click.IntRange(min=1), default=500, show_default=True),
    click.option("--seed", type=int, default=settings.DEFAULT_SEED, show_default=True),
]


def model_options(fn: Callable) -> Callable:
    for option in reversed(MODEL_OPTIONS):
        fn = option(fn)
    return fn


def build_model_config(options: Dict[str, Any], **switches: bool) -> ModelConfig:
    """Validate the collected model options into a ModelConfig."""
    data: Dict[str, Any] = {
        "coder": options["coder"],
        "epochs": options["epochs"],
        "batch_size": options["batch_size"],
        "lmbda": options["lmbda"],
        "mmd_weight": options["mmd_weight"],
        "manifold_weight": options["manifold_weight"],
        "manifold_step": options["manifold_step"],
        "associator_ridge": options["associator_ridge"],
        "correspondence": options["correspondence"],
        "iun": {"mode": options["iun_mode"]},
        "manifold": {"distance_mode": options["distance_mode"]},
        "msp_max_iter": options["msp_max_iter"],
        "seed": options["seed"],
        **switches,
    }
    if options["layers"]:
        data["layers"] = options["layers"]
    if options["bandwidth"] is not None:
        data["kernel"] = KernelParams(bandwidth=options["bandwidth"], policy=BandwidthPolicy.FIXED)
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as e:
        raise click.UsageError(f"invalid model configuration: {e}") from None


def _split_training(data: str) -> Tuple[List, List]:
    from .services.phantoms import read_dataset

    split = read_dataset(data)
    return [r.a for r in split.train_x], [r.b for r in split.train_y]


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

@click.group(context_settings=CONTEXT_SETTINGS)
@click.version_option(__version__, prog_name="csc4net")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None, help="Minimum log level (default from CSC4NET_LOG_LEVEL)")
@click.option("--log-json/--no-log-json", default=None, help="Render log events as JSON lines")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Cap on worker threads (default: available cores)")
def cli(log_level: Optional[str], log_json: Optional[bool], threads: Optional[int]):
    """Unpaired cross-modal synthesis with convolutional sparse coding."""
    configure_logging(level=log_level, json=log_json)
    set_thread_cap(threads or settings.THREADS)


@cli.command("gen-data")
@config_option
@click.option("--n", "count", type=click.IntRange(min=1), default=40, show_default=True, help="Phantom pairs")
@click.option("--size", type=click.IntRange(min=16), default=32, show_default=True)
@click.option("--shapes", type=click.IntRange(min=0), default=6, show_default=True)
@click.option("--map", "modality_map", type=ModalityMapType(), default="identity", show_default=True,
              help="identity | inversion | gamma:G | blur_then_remap:SIGMA,G")
@click.option("--noise", type=click.FloatRange(min=0.0), default=0.0, show_default=True)
@click.option("--lesion/--no-lesion", default=False, show_default=True)
@click.option("--split", "fractions", type=FractionsType(), default="0.6,0.2,0.2", show_default=True,
              help="train,validation,test fractions")
@click.option("--seed", type=int, default=settings.DEFAULT_SEED, show_default=True)
@click.option("--dtype", type=click.Choice(["f32", "f64"]), default=settings.FLOAT_DTYPE_ON_DISK,
              show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@handle_errors
def gen_data(count, size, shapes, modality_map, noise, lesion, fractions, seed, dtype, out):
    """Generate a phantom dataset directory with an unpaired training split."""
    from .services.phantoms import generate_pairs, make_split, write_dataset

    spec = PhantomSpec(size=size, n_shapes=shapes, modality_map=modality_map,
                       noise_sigma=noise, seed=seed, with_lesion=lesion)
    pairs = generate_pairs(count, spec)
    try:
        split = make_split(pairs, fractions, seed)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="'--split'") from None
    records = write_dataset(out, split, dtype)

    table = Table(title=f"{count} phantom pairs ({modality_map}) -> {out}")
    table.add_column("role")
    table.add_column("phantoms", justify="right")
    for role, n in split.counts().items():
        table.add_row(role, str(n))
    table.add_row("files", str(records))
    _console().print(table)


@cli.command()
@config_option
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path")
@click.option("--log-csv", type=click.Path(dir_okay=False), default=None,
              help="Training log CSV (default: <out>.log.csv)")
@model_options
@click.option("--ablate-iun", is_flag=True, help="Disable intra-modal unit normalization")
@click.option("--ablate-mmd", is_flag=True, help="Disable the discrepancy loss")
@click.option("--ablate-manifold", is_flag=True, help="Disable the manifold loss")
@handle_errors
def train(data, out, log_csv, ablate_iun, ablate_mmd, ablate_manifold, **options):
    """Train source/target filter banks and associators on a dataset directory."""
    from .services.evaluation import write_training_log
    from .services.network import train as train_model
    from .services.tensor_io import write_checkpoint

    config = build_model_config(options, use_iun=not ablate_iun, use_mmd=not ablate_mmd,
                                use_manifold=not ablate_manifold)
    images_x, images_y = _split_training(data)
    console = _console()

    def report(record):
        console.print(f"epoch {record.epoch:>3}  combined {record.losses.combined:.6g}")

    state = train_model(images_x, images_y, config, on_epoch=report)
    write_checkpoint(out, state)
    log_path = log_csv or str(Path(out).with_suffix(".log.csv"))
    write_training_log(log_path, state.training_log)

    final = state.training_log[-1].losses
    table = Table(title=f"final epoch {state.training_log[-1].epoch}")
    table.add_column("component")
    table.add_column("value", justify="right")
    for name, value in zip(final.names(), final.values()):
        table.add_row(name, f"{value:.6g}")
    console.print(table)
    console.print(f"checkpoint: {out}\ntraining log: {log_path}")


def _records(data: str, role: str):
    from .services.phantoms import read_dataset

    return read_dataset(data).role(role)


@cli.command()
@config_option
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--role", type=click.Choice(["test", "validation"]), default="test", show_default=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Single CSL4 image to synthesize instead of a dataset role")
@click.option("--direction", type=click.Choice(["forward", "reverse"]), default="forward", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory (or file with --input)")
@handle_errors
def synthesize(checkpoint, data, role, input_path, direction, out):
    """Synthesize target-modality images from source-modality inputs."""
    from .services.network import synthesize as synthesize_image
    from .services.tensor_io import read_checkpoint, read_tensor, write_tensor

    if (data is None) == (input_path is None):
        raise click.UsageError("give exactly one of --data or --input")
    state = read_checkpoint(checkpoint)
    if input_path is not None:
        write_tensor(out, synthesize_image(read_tensor(input_path), state, direction=direction))
        _console().print(f"wrote {out}")
        return

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for record in _records(data, role):
        source = record.a if direction == "forward" else record.b
        if source is None:
            continue
        write_tensor(out_dir / f"synth_{record.phantom_id:04d}.csl4", synthesize_image(source, state, direction=direction))
        written += 1
    _console().print(f"wrote {written} synthesized images to {out_dir}")


@cli.command("eval")
@config_option
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--role", type=click.Choice(["test", "validation"]), default="test", show_default=True)
@click.option("--direction", type=click.Choice(["forward", "reverse"]), default="forward", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Metrics CSV")
@click.option("--baseline/--no-baseline", default=False, help="Also score copying A as the estimate of B")
@handle_errors
def evaluate(checkpoint, data, role, direction, out, baseline):
    """Score synthesized images with PSNR, SSIM and macro Dice."""
    from .services.evaluation import evaluate as evaluate_state
    from .services.evaluation import identity_baseline, write_metrics
    from .services.tensor_io import read_checkpoint

    state = read_checkpoint(checkpoint)
    records = _records(data, role)
    report = evaluate_state(state, records, direction=direction)
    write_metrics(out, report)

    table = Table(title=f"{role} set, {len(report.scores)} images")
    table.add_column("estimate")
    table.add_column("PSNR (dB)", justify="right")
    table.add_column("SSIM", justify="right")
    table.add_column("Dice", justify="right")
    table.add_row("synthesized", f"{report.mean_psnr:.2f}", f"{report.mean_ssim:.4f}", f"{report.mean_dice:.4f}")
    if baseline:
        copy = identity_baseline(records)
        table.add_row("identity copy", f"{copy.mean_psnr:.2f}", f"{copy.mean_ssim:.4f}", f"{copy.mean_dice:.4f}")
    _console().print(table)


@cli.command()
@config_option
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Ablation CSV")
@click.option("--runs", type=click.IntRange(min=1), default=5, show_default=True,
              help="Seeds per configuration, counting up from --seed")
@click.option("--include-full/--no-include-full", default=False, show_default=True)
@click.option("--baseline-coder", type=click.Choice([k.value for k in CoderKind]), default=CoderKind.L1.value,
              show_default=True, help="Coder of the CSC-only row")
@model_options
@handle_errors
def ablate(data, out, runs, include_full, baseline_coder, **options):
    """Run the module on/off grid and report mean and std per configuration."""
    from .services.ablation import run_ablation, trend_check, write_ablation
    from .services.phantoms import read_dataset

    config = build_model_config(options)
    split = read_dataset(data)
    seeds = [config.seed + i for i in range(runs)]
    rows = run_ablation(split, config, seeds, include_full=include_full,
                        baseline_coder=CoderKind(baseline_coder))
    write_ablation(out, rows)

    table = Table(title=f"ablation over {runs} seed(s)")
    for column in ("configuration", "PSNR (dB)", "SSIM", "Dice"):
        table.add_column(column)
    for row in rows:
        table.add_row(
            row.variant.name,
            f"{row.psnr_mean:.2f} ± {row.psnr_std:.2f}",
            f"{row.ssim_mean:.4f} ± {row.ssim_std:.4f}",
            f"{row.dice_mean:.4f} ± {row.dice_std:.4f}",
        )
    console = _console()
    console.print(table)
    trend = trend_check(rows)
    console.print(
        f"trend: CSC < CSC+L_H {trend.csc_below_mmd}, CSC < CSC+L_M {trend.csc_below_manifold}"
        + ("" if trend.full_at_least_singles is None else f", full >= singles {trend.full_at_least_singles}")
        + f" -> {'PASS' if trend.passed else 'FAIL'}"
    )


def main() -> None:
    cli(prog_name="csc4net")


if __name__ == "__main__":
    main()
