
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from singqa.bias import BiasConfig, check_thresholds, low_segment_mse, segment_mse, train_bias_branch
from singqa.datasets import build_dataset, input_dims
from singqa.errors import SingQAError, TrainingError
from singqa.fusion import DEFAULT_TOP_K, rank_predictors, train_combiner
from singqa.heads import DEFAULT_PROJECTION_DIM, HeadConfig, Variant, train_head
from singqa.metrics import REPORT_COLUMNS, full_report, write_report_csv
from singqa.model_io import load_head, save_fusion, save_head
from singqa.pitch import NORMALIZATIONS, PitchConfig
from singqa.records import MOS_MAX, MOS_MIN, labels_of, load_manifest, write_manifest
from singqa.spectral import SpectralConfig
from singqa.training import TrainConfig
from singqa_app.extraction import HistogramTask, PitchTask, SpectralTask, histogram_frame, process_utterances
from singqa_app.scoring import head_scores, member_score_matrix, model_scores
from singqa_lib.tables import DataFrameTextTable
from singqa_lib.utils import env_positive_int

logger = logging.getLogger('singqa')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
JOBS_VARIABLE = 'SINGQA_JOBS'

EXIT_OK = 0
EXIT_ITEM_FAILURES = 1
EXIT_ERROR = 2


def _floats_as_text(values) -> List[str]:
    """Shortest round-trip repr, so a later read with float_precision='round_trip' gets the same doubles."""
    return [repr(float(v)) for v in values]


def _model_id(path: Path) -> str:
    return Path(path).stem


def _run_extraction(records, task, jobs: int, quiet: bool, description: str):
    """Drive the extraction generator with a progress bar; returns the list of outcomes."""

    progress = process_utterances(records, task, jobs)
    total = next(progress)
    outcomes = []
    with tqdm(total=total, desc=description, unit='utt', file=sys.stderr, disable=quiet) as bar:
        for outcome in progress:
            outcomes.append(outcome)
            bar.update(1)
    return outcomes


def _finish_extraction(records, outcomes, out_dir: Path, kind: Optional[str]) -> int:
    """Write the error table and (for file-producing tasks) an updated manifest; return the exit code."""

    failures = [o for o in outcomes if not o.ok]
    errors_path = out_dir / 'errors.csv'
    if failures:
        pd.DataFrame([(o.utt_id, o.error) for o in failures], columns=['utt_id', 'error']).to_csv(errors_path,
                                                                                                  index=False)
        logger.error('%d of %d utterances failed; see %s', len(failures), len(outcomes), errors_path)
    elif errors_path.exists():
        errors_path.unlink()

    if kind is not None:
        by_id = {o.utt_id: o for o in outcomes}
        updated = [r.with_feature(kind, by_id[r.utt_id].path) if by_id[r.utt_id].ok else r for r in records]
        write_manifest(updated, out_dir / 'manifest.csv')

    return EXIT_ITEM_FAILURES if failures else EXIT_OK


def cmd_extract_pitch(args) -> int:
    records = load_manifest(args.manifest)
    config = PitchConfig(frame_shift=args.frame_shift, f0_min=args.f0_min, f0_max=args.f0_max,
                         normalization=args.norm)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    outcomes = _run_extraction(records, PitchTask(out_dir, config), args.jobs, args.quiet, 'pitch')
    histogram_frame(outcomes).to_csv(out_dir / 'histograms.csv', index=False)
    return _finish_extraction(records, outcomes, out_dir, 'pitch')


def cmd_extract_spectral(args) -> int:
    records = load_manifest(args.manifest)
    config = SpectralConfig(frame_shift=args.frame_shift, fft_size=args.fft_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    outcomes = _run_extraction(records, SpectralTask(out_dir, config), args.jobs, args.quiet, 'spectral')
    return _finish_extraction(records, outcomes, out_dir, 'spectral')


def cmd_histogram(args) -> int:
    records = load_manifest(args.manifest)
    outcomes = _run_extraction(records, HistogramTask(args.norm), args.jobs, args.quiet, 'histogram')
    out_csv = Path(args.out_csv)
    histogram_frame(outcomes).to_csv(out_csv, index=False)
    failed = sum(not o.ok for o in outcomes)
    if failed:
        logger.error('%d of %d utterances failed', failed, len(outcomes))
    return EXIT_ITEM_FAILURES if failed else EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                       early_stop_patience=args.patience, seed=args.seed)


def _log_path(args, out: Path) -> Path:
    return Path(args.log) if args.log else out.with_name(out.stem + '.log.csv')


def _report_best(log, what: str) -> None:
    best = log.best
    if best is None:
        print(f'{what}: no epochs run')
        return
    print(f'{what}: best validation system SRCC {best.val_srcc_system:.6f} at epoch {best.epoch} '
          f'(val L1 {best.val_l1:.6f})')


def cmd_train(args) -> int:
    train_records = load_manifest(args.train)
    val_records = load_manifest(args.val)
    for path, records in ((args.train, train_records), (args.val, val_records)):
        if not records:
            raise TrainingError(f'{path}: manifest has no rows, cannot train on an empty split')
    variant = Variant(args.variant)

    embedding_dim, raw_aux_dim = input_dims(train_records[0], variant)
    config = HeadConfig.for_variant(variant, embedding_dim, raw_aux_dim=raw_aux_dim, projection_dim=args.proj_dim,
                                    use_layer_norm=not args.no_layer_norm,
                                    voicing_channel=not args.no_voicing_channel, histogram_norm=args.norm,
                                    seed=args.seed)
    train = build_dataset(train_records, config, jobs=args.jobs)
    val = build_dataset(val_records, config, jobs=args.jobs)
    logger.info('Training the %s head on %d utterances, validating on %d', variant.value, len(train), len(val))

    head, log = train_head(config, train.pooled, train.labels, val.pooled, val.labels, val.system_ids,
                           _train_config(args))
    out = Path(args.out)
    save_head(out, head)
    log.write_csv(_log_path(args, out))
    _report_best(log, _model_id(out))
    return EXIT_OK


def cmd_bias_correct(args) -> int:
    check_thresholds(args.alpha, args.beta)
    head, existing = load_head(args.model)
    if existing is not None:
        logger.warning('%s already carries a bias branch; it is replaced', args.model)

    train = build_dataset(load_manifest(args.train), head.config, jobs=args.jobs)
    val = build_dataset(load_manifest(args.val), head.config, jobs=args.jobs)

    branch, log = train_bias_branch(head, train.pooled, train.labels, val.pooled, val.labels, val.system_ids,
                                    alpha=args.alpha, beta=args.beta, cfg=_train_config(args))
    out = Path(args.out)
    save_head(out, head, branch)
    log.write_csv(_log_path(args, out))
    _report_best(log, _model_id(out))

    raw = head.predict(val.pooled)
    corrected = branch.correct(raw, head.transform(val.pooled))
    before, after = segment_mse(raw, val.labels), segment_mse(corrected, val.labels)
    table = after.assign(mse_uncorrected=before['mse'])
    logger.info('Validation MSE on segments below beta=%s: %.4f uncorrected, %.4f corrected', args.beta,
                low_segment_mse(before, args.beta), low_segment_mse(after, args.beta))
    if args.segments:
        table.to_csv(args.segments, index=False)
    return EXIT_OK


def _validation_reports(model_paths: List[Path], val_records, jobs: int):
    ids = [_model_id(p) for p in model_paths]
    if len(set(ids)) != len(ids):
        raise ValueError(f'model file names must be unique (ids are file stems): {ids}')

    reports = []
    for model_id, path in zip(ids, model_paths):
        scores, dataset = head_scores(path, val_records, jobs=jobs, require_labels=True)
        reports.append((model_id, full_report(scores, dataset.labels, dataset.system_ids)))
    return reports


def _ranking_frame(reports, order: List[str]) -> pd.DataFrame:
    by_id = dict(reports)
    frame = pd.DataFrame([by_id[model_id].as_row() for model_id in order], columns=list(REPORT_COLUMNS),
                         index=pd.Index(order, name='model'))
    frame.insert(0, 'rank', np.arange(1, len(order) + 1))
    return frame


def cmd_rank(args) -> int:
    model_paths = [Path(p) for p in args.models]
    reports = _validation_reports(model_paths, load_manifest(args.val), args.jobs)
    order = rank_predictors(reports, k=args.k if args.k is not None else len(reports))

    frame = _ranking_frame(reports, order)
    print(DataFrameTextTable(frame[['rank', 'sys_srcc', 'sys_mse', 'utt_srcc', 'utt_mse']]))
    if args.out:
        frame.to_csv(args.out)
    return EXIT_OK


def cmd_fuse(args) -> int:
    model_paths = [Path(p) for p in args.models]
    if args.k > len(model_paths):
        raise ValueError(f'--k {args.k} exceeds the {len(model_paths)} trained models given')

    train_records = load_manifest(args.train)
    val_records = load_manifest(args.val)
    reports = _validation_reports(model_paths, val_records, args.jobs)
    chosen = rank_predictors(reports, k=args.k)
    logger.info('Fusing the top %d by validation system SRCC: %s', args.k, ', '.join(chosen))

    member_paths = {_model_id(p): p for p in model_paths}
    train_scores = member_score_matrix(member_paths, chosen, train_records, jobs=args.jobs)
    val_scores = member_score_matrix(member_paths, chosen, val_records, jobs=args.jobs)
    train_labels = np.asarray(labels_of(train_records), dtype=np.float64)
    val_labels = np.asarray(labels_of(val_records), dtype=np.float64)

    model, log = train_combiner(chosen, train_scores, train_labels, val_scores, val_labels,
                                [r.system_id for r in val_records], _train_config(args))
    out = Path(args.out)
    save_fusion(out, model, {m: member_paths[m] for m in chosen})
    log.write_csv(_log_path(args, out))
    _report_best(log, _model_id(out))
    return EXIT_OK


def cmd_predict(args) -> int:
    records = load_manifest(args.manifest)
    scores = model_scores(args.model, records, jobs=args.jobs)
    pd.DataFrame({
        'utt_id': [r.utt_id for r in records],
        'raw_score': _floats_as_text(scores),
        'clamped_score': _floats_as_text(np.clip(scores, MOS_MIN, MOS_MAX)),
    }).to_csv(args.out_csv, index=False)
    logger.info('Wrote %d predictions to %s', len(records), args.out_csv)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = load_manifest(args.manifest)
    predictions = pd.read_csv(args.predictions, dtype={'utt_id': str}, float_precision='round_trip')
    if 'utt_id' not in predictions.columns or 'raw_score' not in predictions.columns:
        raise ValueError(f'{args.predictions}: expected utt_id and raw_score columns')
    if predictions['utt_id'].duplicated().any():
        raise ValueError(f'{args.predictions}: duplicate utt_id values')

    scores = predictions.set_index('utt_id')['raw_score']
    missing = [r.utt_id for r in records if r.utt_id not in scores.index]
    if missing:
        raise ValueError(f'{args.predictions}: no prediction for {len(missing)} manifest rows (first: {missing[0]!r})')
    unlabeled = [r.utt_id for r in records if not r.has_label]
    if unlabeled:
        raise ValueError(f'{args.manifest}: {len(unlabeled)} rows have no mos label (first: {unlabeled[0]!r})')

    report = full_report(scores.loc[[r.utt_id for r in records]].to_numpy(dtype=np.float64),
                         [r.mos_label for r in records], [r.system_id for r in records])
    print(f'{report.n_utterances} utterances, {report.n_systems} systems')
    print(DataFrameTextTable(report.to_frame(), precision=4))
    if args.out:
        write_report_csv(report, args.out)
    return EXIT_OK


def _add_jobs(parser):
    parser.add_argument('--jobs', type=int, default=env_positive_int(JOBS_VARIABLE, 1),
                        help=f'worker threads for file reading and extraction (default: ${JOBS_VARIABLE} or 1)')


def _add_training(parser, log_help: str = 'training log CSV (default: next to --out)'):
    defaults = TrainConfig()
    parser.add_argument('--log', help=log_help)
    parser.add_argument('--lr', type=float, default=defaults.learning_rate)
    parser.add_argument('--batch-size', type=int, default=defaults.batch_size)
    parser.add_argument('--max-epochs', type=int, default=defaults.max_epochs)
    parser.add_argument('--patience', type=int, default=defaults.early_stop_patience)
    parser.add_argument('--seed', type=int, default=defaults.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='singqa', description='Singing quality assessment toolkit')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log per-epoch progress')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only, no progress bars')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    pitch = PitchConfig()
    p = sub.add_parser('extract-pitch', help='track pitch, write pitch files and histograms')
    p.add_argument('manifest')
    p.add_argument('out_dir')
    p.add_argument('--frame-shift', type=float, default=pitch.frame_shift)
    p.add_argument('--f0-min', type=float, default=pitch.f0_min)
    p.add_argument('--f0-max', type=float, default=pitch.f0_max)
    p.add_argument('--norm', choices=NORMALIZATIONS, default=pitch.normalization)
    _add_jobs(p)
    p.set_defaults(handler=cmd_extract_pitch)

    spectral = SpectralConfig()
    p = sub.add_parser('extract-spectral', help='write log-amplitude and phase spectrum files')
    p.add_argument('manifest')
    p.add_argument('out_dir')
    p.add_argument('--frame-shift', type=float, default=spectral.frame_shift)
    p.add_argument('--fft-size', type=int, default=spectral.fft_size)
    _add_jobs(p)
    p.set_defaults(handler=cmd_extract_spectral)

    p = sub.add_parser('histogram', help='pitch histograms from existing pitch files')
    p.add_argument('manifest')
    p.add_argument('out_csv')
    p.add_argument('--norm', choices=NORMALIZATIONS, default=pitch.normalization)
    _add_jobs(p)
    p.set_defaults(handler=cmd_histogram)

    p = sub.add_parser('train', help='train a predictor head')
    p.add_argument('train')
    p.add_argument('val')
    p.add_argument('--variant', choices=Variant.names(), required=True)
    p.add_argument('--out', required=True)
    _add_training(p)
    p.add_argument('--proj-dim', type=int, default=DEFAULT_PROJECTION_DIM, help='spectrum projection width')
    p.add_argument('--no-layer-norm', action='store_true', help='pitch_histogram head without layer normalization')
    p.add_argument('--no-voicing-channel', action='store_true', help='compressed_pitch head with one channel')
    p.add_argument('--norm', choices=NORMALIZATIONS, default=pitch.normalization, help='histogram normalization')
    _add_jobs(p)
    p.set_defaults(handler=cmd_train)

    bias = BiasConfig()
    p = sub.add_parser('bias-correct', help='train the bias-correction branch of a head')
    p.add_argument('model')
    p.add_argument('train')
    p.add_argument('val')
    p.add_argument('--out', required=True)
    p.add_argument('--alpha', type=float, default=bias.alpha)
    p.add_argument('--beta', type=float, default=bias.beta)
    p.add_argument('--segments', help='per-segment validation MSE before and after correction (CSV)')
    _add_training(p)
    _add_jobs(p)
    p.set_defaults(handler=cmd_bias_correct)

    p = sub.add_parser('rank', help='rank trained models by validation system SRCC')
    p.add_argument('val')
    p.add_argument('models', nargs='+', metavar='MODEL')
    p.add_argument('--k', type=int, default=None, help='keep only the top k (default: all)')
    p.add_argument('--out', help='ranked table CSV')
    _add_jobs(p)
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser('fuse', help='fuse the top-k models with a trained linear combiner')
    p.add_argument('train')
    p.add_argument('val')
    p.add_argument('models', nargs='+', metavar='MODEL')
    p.add_argument('--out', required=True)
    p.add_argument('--k', type=int, default=DEFAULT_TOP_K)
    _add_training(p)
    _add_jobs(p)
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser('predict', help='score a manifest with a head or fusion model')
    p.add_argument('model')
    p.add_argument('manifest')
    p.add_argument('out_csv')
    _add_jobs(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('evaluate', help='utterance and system level metrics of a predictions file')
    p.add_argument('predictions')
    p.add_argument('manifest')
    p.add_argument('--out', help='metric report CSV')
    p.set_defaults(handler=cmd_evaluate)

    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    if getattr(args, 'jobs', 1) < 1:
        parser.error('--jobs must be a positive integer')

    try:
        return args.handler(args)
    except (SingQAError, FileNotFoundError, ValueError) as exc:
        logger.error('%s', exc)
        return EXIT_ERROR
