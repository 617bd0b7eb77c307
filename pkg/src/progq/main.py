#!/usr/bin/env python3
"""
progq command line: synth, train, encode, search, eval, gradcheck, bench, ablate.

Every subcommand reads the same layered configuration (defaults, --config
file, PROGQ_SEED, flags) and exits 0 on success, 1 on a runtime failure,
2 on bad flags and 130 when interrupted.
"""

import argparse
import logging
import sys
import time
import traceback
from typing import Dict, List, Optional

from colorama import Fore, Style
from colorama import init as colorama_init

from . import __description__, __version__
from .benchmark import ABLATION_COLUMNS, BENCH_COLUMNS, run_ablation, run_bench
from .config_manager import ConfigManager, RunConfig
from .datasets import DatasetBundle, make_synthetic, read_fvecs
from .errors import ConfigurationError, ProgQError, UsageError
from .evaluation import Relevance, evaluate_prefixes, write_csv, write_metrics_csv, write_pr_csv
from .gradients import DEFAULT_EPSILON, DEFAULT_TOLERANCE, gradcheck_suite
from .index import EncodedDatabase, encode_database
from .model import VARIANTS, ProgressiveModel
from .search import SearchIndex
from .trainer import train

logger = logging.getLogger("progq")

SEARCH_COLUMNS = ["query", "rank", "id", "distance"]


# --- Visual Design Tokens ---
class VisualTokens:
    """Colour and symbol tokens for terminal output"""

    COLORS = {
        'primary': Fore.GREEN,
        'accent': Fore.CYAN,
        'warning': Fore.YELLOW,
        'error': Fore.RED,
        'success': Fore.GREEN,
        'muted': Style.DIM,
        'bold': Style.BRIGHT,
        'reset': Style.RESET_ALL,
    }

    SYMBOLS = {
        'success': '✓',
        'error': '✗',
        'warning': '⚠',
        'info': 'ℹ',
        'arrow': '→',
    }

    enabled = True

    @classmethod
    def paint(cls, text: str, token: str) -> str:
        if not cls.enabled:
            return text
        return f"{cls.COLORS[token]}{text}{cls.COLORS['reset']}"

    @classmethod
    def status(cls, kind: str, text: str) -> str:
        return cls.paint(f"{cls.SYMBOLS[kind]} {text}", {'info': 'accent'}.get(kind, kind))


class ProgressBar:
    """Progress bar for encoding and training; draws only on a terminal"""

    def __init__(self, total: int, message: str = "Progress", width: int = 40, stream=None):
        self.total = total
        self.current = 0
        self.message = message
        self.width = width
        self.stream = stream or sys.stderr
        self.active = self.stream.isatty()
        self.start_time = time.time()

    def update(self, increment: int = 1):
        self.set_progress(self.current + increment)

    def set_progress(self, current: int):
        self.current = min(current, self.total)
        self._draw()

    def finish(self):
        self.current = self.total
        self._draw()
        if self.active:
            print(file=self.stream)

    def _draw(self):
        if self.total == 0 or not self.active:
            return
        fraction = self.current / self.total
        filled = int(fraction * self.width)
        bar = '█' * filled + '░' * (self.width - filled)
        elapsed = time.time() - self.start_time
        eta = ""
        if self.current > 0:
            remaining = elapsed / self.current * (self.total - self.current)
            eta = f" ETA: {int(remaining)}s" if remaining > 1 else ""
        print(f'\r{self.message}: [{bar}] {fraction * 100:.1f}%{eta}', end='', file=self.stream, flush=True)


# --- argument parsing ---

def _global_options(defaults: bool) -> argparse.ArgumentParser:
    """Options accepted both before and after the subcommand"""
    d = (lambda value: value) if defaults else (lambda value: argparse.SUPPRESS)
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config', type=str, default=d(None), help='JSON or YAML configuration file')
    parser.add_argument('--seed', type=int, default=d(None), help='Random seed (overrides config and PROGQ_SEED)')
    parser.add_argument('--threads', type=int, default=d(None), help='Worker threads for encode/search (0 = all cores)')
    parser.add_argument('--verbose', '-v', action='store_true', default=d(False), help='Log progress at INFO level')
    parser.add_argument('--debug', action='store_true', default=d(False), help='Log at DEBUG level, show tracebacks')
    parser.add_argument('--no-color', action='store_true', default=d(False), help='Disable coloured output')
    return parser


def _hyper_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('hyperparameters')
    group.add_argument('--epochs', type=int)
    group.add_argument('--batch', dest='batch_size', type=int)
    group.add_argument('--layers', '-L', dest='L', type=int, help='Number of quantization layers')
    group.add_argument('--codewords', '-K', dest='K', type=int, help='Codewords per layer (power of two)')
    group.add_argument('--embed-dim', '-E', dest='E', type=int, help='Semantic embedding dimension')
    group.add_argument('--gamma', type=float, help='Soft-assignment sharpness')
    group.add_argument('--lambda', dest='lambda', type=float, help='Classification loss weight')
    group.add_argument('--tau', type=float, help='Distortion loss weight')
    group.add_argument('--mu', type=float, help='Hard distortion weight')
    group.add_argument('--nu', type=float, help='Match loss weight')
    group.add_argument('--lr', dest='eta', type=float, help='Learning rate')
    group.add_argument('--optimizer', choices=['adam', 'sgd'])
    group.add_argument('--variant', choices=list(VARIANTS))
    group.add_argument('--soft-metric', dest='soft_metric', choices=['cosine', 'euclidean'])
    group.add_argument('--label-mode', dest='label_mode', choices=['single', 'multi'])
    group.add_argument('--cls-tap', dest='cls_tap', choices=['semantic', 'features'])
    group.add_argument('--init', choices=['residual_kmeans', 'random'])
    group.add_argument('--kmeans-iters', dest='kmeans_iters', type=int)
    group.add_argument('--refine-iters', dest='refine_iters', type=int,
                       help='Codebook re-fitting passes per epoch (0 disables)')


HYPER_FLAGS = ['epochs', 'batch_size', 'L', 'K', 'E', 'gamma', 'lambda', 'tau', 'mu', 'nu', 'eta', 'optimizer',
               'variant', 'soft_metric', 'label_mode', 'cls_tap', 'init', 'kmeans_iters',
               'refine_iters']
PATH_FLAGS = ['dataset', 'model', 'codes', 'report', 'pr_report', 'output']


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='progq',
        description=__description__,
        parents=[_global_options(defaults=True)],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth --dataset data/                 # Gaussian-mixture benchmark
  %(prog)s train --dataset data/ --model m.pqm   # 64 epochs, batch 16
  %(prog)s encode --dataset data/ --model m.pqm --codes db.pqc
  %(prog)s eval --dataset data/ --model m.pqm --codes db.pqc --report map.csv
  %(prog)s gradcheck --seed 7
        """
    )
    parser.add_argument('--version', action='version', version=f'progq {__version__}')
    common = _global_options(defaults=False)
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='Write a synthetic Gaussian-mixture dataset')
    p.add_argument('--dataset', required=True, help='Output directory')
    p.add_argument('--clusters', type=int, default=10)
    p.add_argument('--points', type=int, default=200, help='Points per cluster')
    p.add_argument('--dim', type=int, default=16)
    p.add_argument('--noise', type=float, default=0.1)
    p.add_argument('--embedding-dim', dest='embedding_dim', type=int)

    p = sub.add_parser('train', parents=[common], help='Train a model on the train split')
    p.add_argument('--dataset')
    p.add_argument('--model', help='Output model file')
    _hyper_options(p)

    p = sub.add_parser('encode', parents=[common], help='Encode the database split')
    p.add_argument('--dataset')
    p.add_argument('--model')
    p.add_argument('--codes', help='Output code file')
    p.add_argument('--chunk', type=int, default=4096)

    p = sub.add_parser('search', parents=[common], help='Top-k search for query vectors')
    p.add_argument('--model')
    p.add_argument('--codes')
    p.add_argument('--dataset', help='Take queries from the query split')
    p.add_argument('--queries', help='fvecs file of query vectors')
    p.add_argument('-k', dest='k', type=int)
    p.add_argument('--prefix', '-l', dest='l_active', type=int, help='Layers to use (0 = all)')
    p.add_argument('--output', '-o', help='CSV file for the ranked ids')

    p = sub.add_parser('eval', parents=[common], help='mAP@R, precision@R and recall@k per code length')
    p.add_argument('--dataset')
    p.add_argument('--model')
    p.add_argument('--codes')
    p.add_argument('--map-cutoff', dest='map_cutoff', type=int)
    p.add_argument('-R', dest='R', type=int, action='append', help='Precision cutoff (repeatable)')
    p.add_argument('--recall-k', dest='recall_k', type=int)
    p.add_argument('--report', help='Metrics CSV')
    p.add_argument('--pr-report', dest='pr_report', help='Precision-recall CSV')

    p = sub.add_parser('gradcheck', parents=[common], help='Finite-difference check of the analytic gradients')
    p.add_argument('--count', type=int, default=20, help='Number of seeded instances')
    p.add_argument('--epsilon', type=float, default=DEFAULT_EPSILON)
    p.add_argument('--tolerance', type=float, default=DEFAULT_TOLERANCE)
    p.add_argument('--label-mode', dest='label_mode', choices=['single', 'multi'], default='single')
    p.add_argument('--soft-metric', dest='soft_metric', choices=['cosine', 'euclidean'], default='cosine')
    p.add_argument('--variant', choices=list(VARIANTS), default='full')

    p = sub.add_parser('bench', parents=[common], help='Progressive quantizer vs PQ and residual baselines')
    p.add_argument('--dataset')
    p.add_argument('-k', dest='k', type=int)
    p.add_argument('--methods', nargs='+', default=['dpq', 'residual', 'pq'], choices=['dpq', 'residual', 'pq'])
    p.add_argument('--report', help='Bench CSV')
    _hyper_options(p)

    p = sub.add_parser('ablate', parents=[common], help='mAP of each training variant per code length')
    p.add_argument('--dataset')
    p.add_argument('--variants', nargs='+', default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument('--map-cutoff', dest='map_cutoff', type=int)
    p.add_argument('--report', help='Ablation CSV')
    _hyper_options(p)
    return parser


def _setup_logging(args: argparse.Namespace, configured_level: str) -> None:
    if args.debug:
        level = logging.DEBUG
    elif args.verbose:
        level = logging.INFO
    else:
        level = getattr(logging, configured_level, logging.WARNING)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def _run_config(args: argparse.Namespace) -> RunConfig:
    manager = ConfigManager(args.config)
    file_valid = not manager.validate_config()["errors"]
    overrides: Dict[str, object] = {
        'hyperparameters.seed': args.seed,
        'general.threads': args.threads,
    }
    for name in HYPER_FLAGS:
        if name == 'variant' and args.command in ('gradcheck', 'ablate'):
            continue
        overrides[f'hyperparameters.{name}'] = getattr(args, name, None)
    for name in PATH_FLAGS:
        overrides[f'paths.{name}'] = getattr(args, name, None)
    for name in ('k', 'l_active', 'R', 'map_cutoff', 'recall_k'):
        overrides[f'search.{name}'] = getattr(args, name, None)
    manager.apply_overrides(overrides)
    try:
        return manager.to_run_config()
    except ConfigurationError as e:
        if file_valid:
            raise UsageError(e.message, e.suggestion, e.details) from e
        raise


def _load_dataset(config: RunConfig) -> DatasetBundle:
    config.require('dataset')
    return DatasetBundle.load(config.dataset)


# --- subcommands ---

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('dataset')
    bundle = make_synthetic(args.clusters, args.points, args.dim, args.noise, config.hyper.seed,
                            embedding_dim=args.embedding_dim)
    bundle.save(config.dataset)
    print(VisualTokens.status('success', f"Wrote {bundle.N} points ({args.clusters} clusters, D={args.dim}) "
                                         f"to {config.dataset}"))
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('dataset', 'model')
    bundle = _load_dataset(config)
    train_ids = bundle.part('train')
    hyper = config.hyper
    labels = None
    if bundle.labels is not None and hyper.needs_head:
        labels = [bundle.labels[i] for i in train_ids]
    bar = ProgressBar(hyper.epochs, "Training")
    model = train(bundle.features[train_ids], labels, hyper, bundle.label_embeddings,
                  progress=lambda epoch, total, stats: bar.set_progress(epoch))
    bar.finish()
    model.save(config.model)
    distortion = model.history.get('hard_distortion', [float('nan')])
    print(VisualTokens.status('success', f"Trained {model.L}x{model.m}-bit model, hard distortion "
                                         f"{distortion[0]:.4g} {VisualTokens.SYMBOLS['arrow']} {distortion[-1]:.4g}"))
    print(VisualTokens.paint(f"  saved to {config.model}", 'muted'))
    return 0


def cmd_encode(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('dataset', 'model', 'codes')
    bundle = _load_dataset(config)
    model = ProgressiveModel.load(config.model)
    features = bundle.features[bundle.part('database')]
    bar = ProgressBar(len(features), "Encoding")
    db = encode_database(features, model, chunk_size=args.chunk, threads=config.threads,
                         progress=lambda done, total: bar.set_progress(done))
    bar.finish()
    db.save(config.codes)
    print(VisualTokens.status('success', f"Encoded {db.N} points into {db.L * db.m}-bit codes ({config.codes})"))
    return 0


def cmd_search(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('model', 'codes')
    model = ProgressiveModel.load(config.model)
    index = SearchIndex(model, EncodedDatabase.load(config.codes))
    if args.queries:
        queries = read_fvecs(args.queries)
    elif config.dataset:
        bundle = _load_dataset(config)
        queries = bundle.features[bundle.part('query')]
    else:
        raise ConfigurationError("No queries given", "Pass --queries FILE.fvecs or --dataset DIR")
    l_active = config.l_active or model.L
    results = index.search_batch(queries, config.k, l_active, config.threads)
    rows = [{'query': q, 'rank': rank, 'id': i, 'distance': d}
            for q, result in enumerate(results) for rank, i, d in result.rows()]
    if config.output:
        write_csv(config.output, rows, SEARCH_COLUMNS)
        print(VisualTokens.status('success', f"Wrote top-{config.k} for {len(results)} queries to {config.output}"))
    else:
        for q, result in enumerate(results):
            ranked = ' '.join(str(i) for i in result.ids)
            print(f"{VisualTokens.paint(str(q), 'accent')}: {ranked}")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('dataset', 'model', 'codes', 'report')
    bundle = _load_dataset(config)
    model = ProgressiveModel.load(config.model)
    db = EncodedDatabase.load(config.codes)
    query_ids, db_ids = bundle.part('query'), bundle.part('database')
    if len(db_ids) != db.N:
        raise ConfigurationError(f"Code file holds {db.N} points, database split has {len(db_ids)}",
                                 "Re-run 'progq encode' on this dataset")
    relevance = Relevance(bundle.label_matrix(query_ids), bundle.label_matrix(db_ids))
    report = evaluate_prefixes(SearchIndex(model, db), bundle.features[query_ids], relevance, config.map_cutoff,
                               R_values=config.R_values, recall_k=config.recall_k,
                               db_features=bundle.features[db_ids], with_pr=bool(config.pr_report),
                               threads=config.threads)
    write_metrics_csv(config.report, report)
    if config.pr_report:
        write_pr_csv(config.pr_report, report)
    for row in report.rows:
        if row['metric'].startswith('map@'):
            print(f"  {row['code_bits']:>4} bits  {row['metric']} = {row['value']:.4f}")
    print(VisualTokens.status('success', f"Metrics written to {config.report}"))
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    seeds = range(config.hyper.seed, config.hyper.seed + args.count)
    reports = gradcheck_suite(seeds, args.epsilon, args.tolerance, label_mode=args.label_mode,
                              soft_metric=args.soft_metric, variant=args.variant)
    worst = max(reports, key=lambda r: r.max_error)
    failed = [r for r in reports if not r.passed]
    for r in failed:
        blocks = ', '.join(f"{name}={err:.2e}" for name, err in sorted(r.errors.items()) if err >= r.tolerance)
        print(VisualTokens.status('error', f"seed {r.seed}: {blocks}"))
    print(f"max relative error {worst.max_error:.3e} (seed {worst.seed}, {len(reports)} instances)")
    if failed:
        print(VisualTokens.status('error', f"{len(failed)} of {len(reports)} instances above {args.tolerance:g}"))
        return 1
    print(VisualTokens.status('success', f"All {len(reports)} instances below {args.tolerance:g}"))
    return 0


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    bundle = _load_dataset(config)
    rows = run_bench(bundle, config.hyper, config.k, config.threads, args.methods)
    print(f"{'method':<10}{'bits':>6}{'q/s':>12}{'distortion':>14}{f'recall@{config.k}':>12}{'rss MB':>10}")
    for row in rows:
        print(f"{row.method:<10}{row.code_bits:>6}{row.qps:>12.1f}{row.distortion:>14.5g}"
              f"{row.recall:>12.3f}{row.rss_mb:>10.1f}")
    if config.report:
        write_csv(config.report, [r.as_dict() for r in rows], BENCH_COLUMNS)
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    config.require('report')
    bundle = _load_dataset(config)
    rows = run_ablation(bundle, config.hyper, args.variants, config.map_cutoff, config.threads)
    write_csv(config.report, rows, ABLATION_COLUMNS)
    print(VisualTokens.status('success', f"{len(args.variants)} variants evaluated, results in {config.report}"))
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'encode': cmd_encode,
    'search': cmd_search,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'bench': cmd_bench,
    'ablate': cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    VisualTokens.enabled = not args.no_color and sys.stdout.isatty()
    if VisualTokens.enabled:
        colorama_init()

    try:
        config = _run_config(args)
        _setup_logging(args, config.log_level)
        logger.debug(f"Running '{args.command}' with seed {config.hyper.seed}, {config.threads} thread(s)")
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print(VisualTokens.status('warning', "Interrupted"), file=sys.stderr)
        return 130
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e.message}", file=sys.stderr)
        return 2
    except ProgQError as e:
        print(VisualTokens.status('error', str(e)), file=sys.stderr)
        suggestion = getattr(e, 'suggestion', None)
        if suggestion:
            print(VisualTokens.paint(f"  {suggestion}", 'muted'), file=sys.stderr)
        return 1
    except Exception as e:
        print(VisualTokens.status('error', f"Fatal error: {e}"), file=sys.stderr)
        if args.debug:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
