"""CLI commands for the application."""

import json
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
from flask import current_app
from flask.cli import with_appcontext

from steermusic.config import ExperimentConfig
from steermusic.errors import handle_command_errors
from steermusic.reports import ArtifactWriter, dumps_json

ARTIFACTS_KEY = 'steermusic.artifacts'


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """--config, --set and --out, shared by every experiment command."""
    func = click.option('--out', 'out', type=click.Path(file_okay=False),
                        help='Output directory (overrides STEERMUSIC_OUTPUT_DIR and the config file)')(func)
    func = click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                        help='Override one config value; may be repeated')(func)
    func = click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                        help='TOML or JSON experiment config')(func)
    return func


def flag_overrides(**flags: Optional[Any]) -> List[str]:
    """``section__key=value`` keyword flags to ``section.key=<json>`` overrides."""
    return [f"{name.replace('__', '.')}={json.dumps(value)}"
            for name, value in flags.items() if value is not None]


def run_command(command: str, runner: Callable[..., Dict[str, Any]], config_path: Optional[str],
                overrides: Sequence[str], out: Optional[str], flags: Sequence[str] = ()) -> None:
    """Load config, echo it, run, write the run manifest and print the summary."""
    from steermusic.experiments import RunContext

    config = ExperimentConfig.load(config_path, list(overrides) + list(flags),
                                   current_app.config.get('OUTPUT_DIR'))
    if out:
        config.output_dir = out

    writer = ArtifactWriter(config.output_dir)
    click.get_current_context().meta[ARTIFACTS_KEY] = writer
    writer.echo_config(config.to_dict(), command, config.seed)
    current_app.logger.info(f"Running '{command}' into {config.output_dir} (seed {config.seed})")

    ctx = RunContext(config, writer, current_app.config['WORKERS'], current_app.config['PROGRESS'])
    result = runner(ctx)
    writer.manifest(command, {'config_file': config_path, 'overrides': list(overrides) + list(flags)},
                    config.seed)
    click.echo(dumps_json(result), nl=False)


@click.command('gen')
@common_options
@click.option('--n-clips', type=int, help='Number of clips to generate')
@click.option('--seed', type=int, help='Dataset seed')
@with_appcontext
@handle_command_errors
def gen(config_path, overrides, out, n_clips, seed):
    """Generate a synthetic clip dataset and its manifest."""
    from steermusic.experiments import run_gen
    run_command('gen', run_gen, config_path, overrides, out,
                flag_overrides(dataset__n_clips=n_clips, dataset__seed=seed))


@click.command('train')
@common_options
@click.option('--steps', type=int, help='Training steps')
@click.option('--manifest', help='Dataset manifest (default: <out>/manifest.json)')
@with_appcontext
@handle_command_errors
def train(config_path, overrides, out, steps, manifest):
    """Train the base denoiser on a generated dataset."""
    from steermusic.experiments import run_train
    run_command('train', run_train, config_path, overrides, out,
                flag_overrides(train__steps=steps, train__manifest=manifest))


@click.command('personalize')
@common_options
@click.option('--checkpoint', help='Base model checkpoint (default: <out>/model.json)')
@click.option('--mode', type=click.Choice(['finetune', 'textual_inversion']))
@click.option('--steps', type=int, help='Fine-tuning steps')
@with_appcontext
@handle_command_errors
def personalize(config_path, overrides, out, checkpoint, mode, steps):
    """Personalize the base model on a concept reference set."""
    from steermusic.experiments import run_personalize
    run_command('personalize', run_personalize, config_path, overrides, out,
                flag_overrides(personalize__checkpoint=checkpoint, personalize__mode=mode,
                               personalize__steps=steps))


@click.command('edit')
@common_options
@click.option('--method', type=click.Choice(['sds', 'dds', 'dds_patchnce', 'pds', 'pds_o',
                                             'steermusic_plus', 'ddim_edit', 'sdedit']))
@click.option('--checkpoint', help='Base model checkpoint (default: <out>/model.json)')
@click.option('--pdm-checkpoint', help='Personalized model checkpoint (default: <out>/pdm.json)')
@click.option('--steps', type=int, help='Edit iterations (DDIM steps for baselines)')
@click.option('--seed', type=int, help='Edit seed')
@with_appcontext
@handle_command_errors
def edit(config_path, overrides, out, method, checkpoint, pdm_checkpoint, steps, seed):
    """Edit a source clip towards the target prompt."""
    from steermusic.experiments import run_edit
    run_command('edit', run_edit, config_path, overrides, out,
                flag_overrides(edit__method=method, edit__checkpoint=checkpoint,
                               edit__pdm_checkpoint=pdm_checkpoint, edit__steps=steps,
                               edit__seed=seed))


@click.command('eval')
@common_options
@click.option('--source', help='Source WAV')
@click.option('--edited', help='Edited WAV')
@click.option('--reference', help='Reference WAV for MFCC-COS (default: the source)')
@click.option('--contour-mode', type=click.Choice(['index', 'magnitude']))
@with_appcontext
@handle_command_errors
def evaluate(config_path, overrides, out, source, edited, reference, contour_mode):
    """Score WAV pairs with CQT1-PCC and MFCC-COS."""
    from steermusic.experiments import run_eval
    run_command('eval', run_eval, config_path, overrides, out,
                flag_overrides(evaluate__source_wav=source, evaluate__edited_wav=edited,
                               evaluate__reference_wav=reference,
                               evaluate__contour_mode=contour_mode))


def _sweep(name: str, runner_name: str, doc: str) -> click.Command:
    @click.command(name, help=doc)
    @common_options
    @with_appcontext
    @handle_command_errors
    def command(config_path, overrides, out):
        from steermusic import experiments
        run_command(name, getattr(experiments, runner_name), config_path, overrides, out)

    return command


ablate_lambda = _sweep('ablate-lambda', 'run_ablate_lambda',
                       'Sweep lambda (with and without PCon) for the personalized editor.')
ablate_cfg = _sweep('ablate-cfg', 'run_ablate_cfg',
                    'Sweep guidance scale and w(t) scale: fidelity vs perceptual distance.')
demo_inversion = _sweep('demo-inversion', 'run_demo_inversion',
                        'Show DDIM inversion error under matched and mismatched prompts.')
benchmark = _sweep('benchmark', 'run_benchmark',
                   'Instrument-change benchmark across editing methods.')
ablate_finetune = _sweep('ablate-finetune', 'run_ablate_finetune',
                         'Sweep personalization fine-tuning steps.')


def register_cli_commands(app):
    """Register CLI commands with the Flask app."""
    app.cli.add_command(gen)
    app.cli.add_command(train)
    app.cli.add_command(personalize)
    app.cli.add_command(edit)
    app.cli.add_command(evaluate)
    app.cli.add_command(ablate_lambda)
    app.cli.add_command(ablate_cfg)
    app.cli.add_command(demo_inversion)
    app.cli.add_command(benchmark)
    app.cli.add_command(ablate_finetune)
