"""Command-line interface.

Subcommands: preprocess, train, evaluate, gradcheck, synth-sbm, trials,
hop-weights. Every option default comes from ``Config`` (and so from the
``NAG_*`` environment); a ``--config`` key=value file overrides defaults
and is itself overridden by explicit flags.
"""
import logging
import sys
from typing import List, Optional

import click
import numpy as np
from click.core import ParameterSource

from src.config import Config, parse_config_file
from src.models.hop_transformer import ModelConfig, Readout, hop_attention
from src.services.dataset_service import SbmSpec, generate_sbm, load_graph, load_labels, write_dataset
from src.services.gradcheck_service import check_model_gradients
from src.services.hop2token_service import build_tokens, read_cache, write_cache
from src.services.model_store import load_model, save_model
from src.services.trainer_service import TrainConfig, trainer_service, write_report
from src.utils.errors import CompatibilityError, ConfigError, GradCheckFailure, NagError

logger = logging.getLogger(__name__)

SPLIT_CHOICES = click.Choice(['train', 'val', 'test'])
READOUT_CHOICES = click.Choice([r.value for r in Readout])


class ConfigFileCommand(click.Command):
    """Fills options still at their default from the ``--config`` file."""

    def invoke(self, ctx: click.Context):
        path = ctx.params.get('config')
        if path:
            settable = {p.name: p for p in self.params
                        if isinstance(p, click.Option) and p.name != 'config' and not p.required}
            for key, raw in parse_config_file(path, settable).items():
                if ctx.get_parameter_source(key) is not ParameterSource.DEFAULT:
                    continue
                try:
                    ctx.params[key] = settable[key].type_cast_value(ctx, raw)
                except click.BadParameter as e:
                    raise ConfigError(f"{path}: bad value for '{key}': {e.format_message()}")
                logger.debug(f"{key}={ctx.params[key]!r} from {path}")
        return super().invoke(ctx)


class FractionsType(click.ParamType):
    """``train,val,test`` fractions, e.g. ``0.6,0.2,0.2``."""
    name = 'fractions'

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            parts = tuple(float(x) for x in str(value).split(','))
        except ValueError:
            parts = ()
        if len(parts) != 3:
            self.fail(f"expected three comma-separated numbers, got '{value}'", param, ctx)
        return parts


def config_option(f):
    return click.option('--config', type=click.Path(dir_okay=False),
                        help='key=value file; keys are long option names with - as _ [default: none]')(f)


def label_options(f):
    """Labels plus either a splits file or generated split fractions."""
    f = click.option('--split-seed', type=int, default=Config.SEED, show_default=True,
                     help='Seed for generated splits')(f)
    f = click.option('--split-frac', type=FractionsType(), default=None,
                     help='train,val,test fractions when no splits file is given [default: 0.6,0.2,0.2]')(f)
    f = click.option('--splits', type=click.Path(dir_okay=False), default=None,
                     help='Splits file; without one, splits are generated [default: none]')(f)
    f = click.option('--labels', type=click.Path(dir_okay=False), required=True, help='Labels CSV')(f)
    return f


def model_options(f):
    f = click.option('--head-hidden/--no-head-hidden', default=Config.HEAD_HIDDEN, show_default=True,
                     help='Add a hidden GELU layer to the classifier head')(f)
    f = click.option('--readout', type=READOUT_CHOICES, default=Config.READOUT, show_default=True)(f)
    f = click.option('--heads', type=int, default=Config.HEADS, show_default=True)(f)
    f = click.option('--layers', type=int, default=Config.LAYERS, show_default=True)(f)
    f = click.option('--hidden-dim', type=int, default=Config.HIDDEN_DIM, show_default=True)(f)
    return f


def train_options(f):
    f = click.option('--seed', type=int, default=Config.SEED, show_default=True)(f)
    f = click.option('--patience', type=int, default=None,
                     help=f'Epochs without val improvement before stopping [default: min({Config.PATIENCE}, '
                          f'max-epochs)]')(f)
    f = click.option('--max-epochs', type=int, default=Config.MAX_EPOCHS, show_default=True)(f)
    f = click.option('--batch-size', type=int, default=Config.BATCH_SIZE, show_default=True)(f)
    f = click.option('--weight-decay', type=float, default=Config.WEIGHT_DECAY, show_default=True)(f)
    f = click.option('--lr', type=float, default=Config.LR, show_default=True)(f)
    return f


def _train_config(lr, weight_decay, batch_size, max_epochs, patience, seed) -> TrainConfig:
    if patience is None:
        patience = min(Config.PATIENCE, max_epochs)
    return TrainConfig(lr=lr, weight_decay=weight_decay, batch_size=batch_size, max_epochs=max_epochs,
                       patience=patience, seed=seed)


def _model_config(tokens, c, hidden_dim, layers, heads, readout, head_hidden) -> ModelConfig:
    return ModelConfig(K=tokens.K, d_prime=tokens.d_prime, d_m=hidden_dim, L=layers, heads=heads, c=c,
                       readout=readout, use_structural=tokens.meta.s > 0, head_hidden=head_hidden)


def _load_nodes(tokens, labels, splits, split_frac, split_seed):
    nodes = load_labels(labels, tokens.n, splits_path=splits, fractions=split_frac, seed=split_seed)
    if nodes.c < 1:
        raise ConfigError(f"{labels} contains no labels")
    return nodes


@click.group()
def cli():
    """Hop-token graph transformer for node classification."""


@cli.command(cls=ConfigFileCommand)
@click.option('--graph', type=click.Path(dir_okay=False), required=True, help='Edge list')
@click.option('--features', type=click.Path(dir_okay=False), required=True, help='Feature CSV')
@click.option('--k', 'k', type=int, default=Config.HOPS, show_default=True, help='Number of hops K')
@click.option('--eig-s', type=int, default=Config.EIG_S, show_default=True,
              help='Laplacian eigenvectors to append')
@click.option('--no-structural', is_flag=True, default=False, show_default=True,
              help='Skip the Laplacian structural encoding [default: off]')
@click.option('--solver', type=click.Choice(['auto', 'dense', 'lanczos']), default='auto', show_default=True,
              help=f'Eigensolver; auto is dense up to {Config.DENSE_EIG_MAX_N} nodes')
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Token cache to write')
@config_option
def preprocess(graph, features, k, eig_s, no_structural, solver, out, config):
    """Build the hop token cache for a graph."""
    adjacency, X = load_graph(graph, features)
    tokens = build_tokens(adjacency, X, k, eig_s, structural=not no_structural, solver=solver)
    write_cache(tokens, out)
    click.echo(f"n={tokens.n}")
    click.echo(f"K={tokens.K}")
    click.echo(f"d'={tokens.d_prime}")
    click.echo(f"s={tokens.meta.s}")
    click.echo(f"hash={tokens.meta.input_hash.hex()}")


@cli.command(cls=ConfigFileCommand)
@click.option('--tokens', 'tokens_path', type=click.Path(dir_okay=False), required=True, help='Token cache')
@label_options
@model_options
@train_options
@click.option('--out-model', type=click.Path(dir_okay=False), required=True, help='Model file to write')
@click.option('--report', type=click.Path(dir_okay=False), default=None,
              help='Report path (key=value); a .json summary is written next to it [default: none]')
@config_option
def train(tokens_path, labels, splits, split_frac, split_seed, hidden_dim, layers, heads, readout, head_hidden,
          lr, weight_decay, batch_size, max_epochs, patience, seed, out_model, report, config):
    """Train a model on a token cache and save the best-validation weights."""
    tokens = read_cache(tokens_path)
    nodes = _load_nodes(tokens, labels, splits, split_frac, split_seed)
    model_config = _model_config(tokens, nodes.c, hidden_dim, layers, heads, readout, head_hidden)
    cfg = _train_config(lr, weight_decay, batch_size, max_epochs, patience, seed)
    params, result = trainer_service.train(nodes, tokens, model_config, cfg)
    save_model(params, model_config, out_model)
    if report:
        write_report(result, report)
    click.echo(f"best_epoch={result.best_epoch}")
    click.echo(f"best_val_acc={result.best_val_acc:.6f}")
    if result.test_acc is not None:
        click.echo(f"test_acc={result.test_acc:.6f}")


@cli.command(cls=ConfigFileCommand)
@click.option('--model', type=click.Path(dir_okay=False), required=True, help='Model file')
@click.option('--tokens', 'tokens_path', type=click.Path(dir_okay=False), required=True, help='Token cache')
@label_options
@click.option('--split', type=SPLIT_CHOICES, default='test', show_default=True)
@config_option
def evaluate(model, tokens_path, labels, splits, split_frac, split_seed, split, config):
    """Print the accuracy of a saved model on one split."""
    params, model_config = load_model(model)
    tokens = read_cache(tokens_path)
    model_config.check_tokens(tokens)
    nodes = _load_nodes(tokens, labels, splits, split_frac, split_seed)
    if nodes.c > model_config.c:
        raise CompatibilityError(f"labels have {nodes.c} classes but model has c={model_config.c}")
    ids = nodes.splits.get(split)
    if len(ids) == 0:
        raise ConfigError(f"{split} split is empty")
    acc = trainer_service.evaluate(params, model_config, tokens, nodes.labels, ids)
    click.echo(f"accuracy={acc:.6f}")


@cli.command(cls=ConfigFileCommand)
@click.option('--seed', type=int, default=Config.SEED, show_default=True)
@click.option('--tolerance', type=float, default=Config.GRADCHECK_TOLERANCE, show_default=True,
              help='Largest accepted relative error')
@config_option
def gradcheck(seed, tolerance, config):
    """Check analytic gradients of the full model against central differences."""
    report = check_model_gradients(seed=seed, tolerance=tolerance)
    for line in report.lines():
        click.echo(line)
    if not report.passed:
        worst = report.worst
        raise GradCheckFailure(
            f"gradient check failed: worst leaf {worst.name} index {list(worst.worst_index)} "
            f"rel_err={worst.rel_error:.3e} > {tolerance:g}", report)
    click.echo(f"passed leaves={len(report.leaves)} worst_rel_err={report.worst.rel_error:.3e}")


@cli.command('synth-sbm', cls=ConfigFileCommand)
@click.option('--nodes', type=int, default=400, show_default=True)
@click.option('--blocks', type=int, default=2, show_default=True)
@click.option('--p-in', type=float, default=0.1, show_default=True)
@click.option('--p-out', type=float, default=0.01, show_default=True)
@click.option('--feature-dim', type=int, default=16, show_default=True)
@click.option('--signal', type=float, default=0.5, show_default=True, help='Per-block feature mean offset')
@click.option('--seed', type=int, default=Config.SEED, show_default=True)
@click.option('--out-dir', type=click.Path(file_okay=False), required=True)
@config_option
def synth_sbm(nodes, blocks, p_in, p_out, feature_dim, signal, seed, out_dir, config):
    """Write a stochastic block model dataset."""
    spec = SbmSpec(n=nodes, blocks=blocks, p_in=p_in, p_out=p_out, feature_dim=feature_dim,
                   feature_signal=signal, seed=seed)
    dataset = generate_sbm(spec)
    for path in write_dataset(dataset, out_dir).values():
        click.echo(path)


@cli.command(cls=ConfigFileCommand)
@click.option('--tokens', 'tokens_path', type=click.Path(dir_okay=False), required=True, help='Token cache')
@label_options
@model_options
@train_options
@click.option('--seeds', 'n_seeds', type=int, default=10, show_default=True,
              help='Number of runs, with seeds seed..seed+N-1')
@config_option
def trials(tokens_path, labels, splits, split_frac, split_seed, hidden_dim, layers, heads, readout, head_hidden,
           lr, weight_decay, batch_size, max_epochs, patience, seed, n_seeds, config):
    """Repeat training over several seeds and report mean and std test accuracy."""
    if n_seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {n_seeds}")
    tokens = read_cache(tokens_path)
    nodes = _load_nodes(tokens, labels, splits, split_frac, split_seed)
    model_config = _model_config(tokens, nodes.c, hidden_dim, layers, heads, readout, head_hidden)
    cfg = _train_config(lr, weight_decay, batch_size, max_epochs, patience, seed)
    summary = trainer_service.run_trials(nodes, tokens, model_config, cfg, range(seed, seed + n_seeds))
    for s, acc in zip(summary.seeds, summary.test_accs):
        click.echo(f"seed={s} test_acc={acc:.6f}")
    click.echo(f"mean={summary.mean:.6f} std={summary.std:.6f}")


@cli.command('hop-weights', cls=ConfigFileCommand)
@click.option('--model', type=click.Path(dir_okay=False), required=True, help='Model file')
@click.option('--tokens', 'tokens_path', type=click.Path(dir_okay=False), required=True, help='Token cache')
@label_options
@click.option('--split', type=SPLIT_CHOICES, default='test', show_default=True)
@config_option
def hop_weights(model, tokens_path, labels, splits, split_frac, split_seed, split, config):
    """Print the mean attention readout weight of each hop over a split."""
    params, model_config = load_model(model)
    tokens = read_cache(tokens_path)
    model_config.check_tokens(tokens)
    nodes = _load_nodes(tokens, labels, splits, split_frac, split_seed)
    ids = nodes.splits.get(split)
    if len(ids) == 0:
        raise ConfigError(f"{split} split is empty")
    total = np.zeros(model_config.K)
    for start in range(0, len(ids), Config.BATCH_SIZE):
        chunk = ids[start:start + Config.BATCH_SIZE]
        total += hop_attention(params, model_config, tokens.batch_view(chunk)).sum(axis=0)
    for k, alpha in enumerate(total / len(ids), 1):
        click.echo(f"hop={k} alpha={float(alpha)!r}")


def _error(message: str):
    click.echo(f"error: {' '.join(str(message).split())}", err=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return the process exit code instead of exiting."""
    try:
        rv = cli.main(args=argv, prog_name='hopformer', standalone_mode=False)
    except click.UsageError as e:
        _error(e.format_message())
        return 1
    except click.Abort:
        _error('aborted')
        return 1
    except NagError as e:
        _error(e.message)
        return e.exit_code
    except OSError as e:
        _error(f"{e.filename or ''}: {e.strerror or e}")
        return 2
    except click.ClickException as e:
        _error(e.format_message())
        return 1
    # --help and similar exit through click with their own code
    return rv if isinstance(rv, int) else 0


if __name__ == '__main__':
    sys.exit(main())
