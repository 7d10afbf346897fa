
import logging
import math

import numpy as np
import pandas as pd
import pytest
from scipy.io import wavfile

from singqa.features import FeatureKind, FeatureSequence, read_feature_file, write_feature_file
from singqa.metrics import full_report, read_report_csv
from singqa.model_io import load_fusion, load_head
from singqa.records import load_manifest
from singqa_app.cli import EXIT_ERROR, EXIT_ITEM_FAILURES, EXIT_OK, build_parser, main
from singqa_app.scoring import model_scores

SAMPLE_RATE = 8000
DURATION = 0.3  # 16 frames at the default 20 ms shift
FRAMES = 16
TRAINING = ['--lr', '0.01', '--max-epochs', '50']


@pytest.fixture(autouse=True)
def restore_root_logger():
    """main() reconfigures the root logger; put pytest's handlers back afterwards."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def _write_split(directory, split, systems, per_system, seed):
    """Sine wavs (one pitch per system), embeddings whose first dim tracks the label, and a manifest."""

    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    t = np.arange(int(DURATION * SAMPLE_RATE)) / SAMPLE_RATE
    rows = []
    for s in range(systems):
        for u in range(per_system):
            utt_id = f'{split}_s{s}_u{u}'
            label = 1.5 + 0.5 * s + rng.uniform(-0.1, 0.1)
            freq = 200.0 + 40.0 * s + 3.0 * u
            wavfile.write(directory / f'{utt_id}.wav', SAMPLE_RATE,
                          np.round(0.5 * np.sin(2 * np.pi * freq * t) * 32767).astype(np.int16))
            emb = rng.normal(0.0, 0.05, size=(FRAMES, 3))
            emb[:, 0] += label - 3.0
            write_feature_file(FeatureSequence(emb, 0.02, FeatureKind.EMBEDDING), directory / f'{utt_id}.emb.sqaf')
            rows.append({'utt_id': utt_id, 'system_id': f'sys{s}', 'wav_path': f'{utt_id}.wav', 'mos': label,
                         'emb_path': f'{utt_id}.emb.sqaf', 'spec_path': '', 'pitch_path': ''})
    path = directory / 'manifest.csv'
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def _run(*argv):
    return main(['-q', *map(str, argv)])


def _pipeline(root):
    """Extraction, four heads, bias correction, ranking, fusion, prediction and evaluation."""

    manifests = {}
    for split, per_system, seed in (('train', 4, 0), ('val', 2, 1)):
        base = _write_split(root / 'data' / split, split, 6, per_system, seed)
        assert _run('extract-pitch', base, root / 'pitch' / split) == EXIT_OK
        assert _run('extract-spectral', root / 'pitch' / split / 'manifest.csv', root / 'spec' / split) == EXIT_OK
        manifests[split] = root / 'spec' / split / 'manifest.csv'
    train, val = manifests['train'], manifests['val']

    models = root / 'models'
    models.mkdir(exist_ok=True)
    for variant, extra in (('plain', []), ('compressed_pitch', []), ('pitch_histogram', []),
                           ('spectrum', ['--proj-dim', '4'])):
        assert _run('train', train, val, '--variant', variant, '--out', models / f'{variant}.json',
                    *TRAINING, *extra) == EXIT_OK

    assert _run('bias-correct', models / 'plain.json', train, val, '--out', models / 'plain_bc.json',
                '--segments', root / 'segments.csv', *TRAINING) == EXIT_OK

    heads = [models / f'{name}.json' for name in ('plain', 'compressed_pitch', 'pitch_histogram', 'spectrum')]
    assert _run('rank', val, *heads, '--out', root / 'ranking.csv') == EXIT_OK
    assert _run('fuse', train, val, *heads, '--k', 2, '--out', models / 'fusion.json', *TRAINING) == EXIT_OK
    assert _run('predict', models / 'fusion.json', val, root / 'predictions.csv') == EXIT_OK
    assert _run('evaluate', root / 'predictions.csv', val, '--out', root / 'report.csv') == EXIT_OK
    return train, val, models


@pytest.fixture
def pipeline(tmp_path):
    return (tmp_path,) + _pipeline(tmp_path)


def test_extraction_outputs(pipeline):
    root, train, val, _ = pipeline
    histograms = pd.read_csv(root / 'pitch' / 'train' / 'histograms.csv')
    assert histograms.shape == (24, 122)
    assert list(histograms.columns[[0, 1, -2, -1]]) == ['utt_id', 'p1', 'p120', 'sharpness']
    np.testing.assert_allclose(histograms[[f'p{j}' for j in range(1, 121)]].sum(axis=1), 1.0, atol=1e-6)

    records = load_manifest(val)
    assert len(records) == 12
    for record in records:
        pitch = read_feature_file(record.feature_path('pitch'))
        spectral = read_feature_file(record.feature_path('spectral'))
        assert pitch.frames == spectral.frames == FRAMES
        assert spectral.dims == 2 * (512 // 2 + 1)
        assert record.feature_path('embedding').is_file()
    assert not (root / 'pitch' / 'val' / 'errors.csv').exists()


def test_training_outputs(pipeline):
    root, _, _, models = pipeline
    for variant in ('plain', 'compressed_pitch', 'pitch_histogram', 'spectrum'):
        head, branch = load_head(models / f'{variant}.json')
        assert head.variant.value == variant and branch is None
        log = pd.read_csv(models / f'{variant}.log.csv')
        assert list(log.columns) == ['epoch', 'train_l1', 'val_srcc_system', 'val_l1']
        assert log['epoch'].iloc[0] == 0 and len(log) <= 51

    head, branch = load_head(models / 'plain_bc.json')
    plain, _ = load_head(models / 'plain.json')
    assert branch is not None and (branch.alpha, branch.beta) == (4.0, 2.0)
    assert head.weights.tobytes() == plain.weights.tobytes()

    segments = pd.read_csv(root / 'segments.csv')
    assert list(segments.columns) == ['segment_lo', 'segment_hi', 'count', 'mse', 'mse_uncorrected']
    assert len(segments) == 16 and segments['count'].sum() == 12


def test_ranking_and_fusion_outputs(pipeline):
    root, _, _, models = pipeline
    ranking = pd.read_csv(root / 'ranking.csv', index_col='model')
    assert list(ranking['rank']) == [1, 2, 3, 4]
    assert sorted(ranking.index) == ['compressed_pitch', 'pitch_histogram', 'plain', 'spectrum']

    fusion, members = load_fusion(models / 'fusion.json')
    assert fusion.member_ids == list(ranking.index[:2])
    assert all(path.is_file() for path in members.values())


def test_predictions_and_evaluation_agree_with_the_library(pipeline):
    root, _, val, models = pipeline
    records = load_manifest(val)
    scores = model_scores(models / 'fusion.json', records)

    predictions = pd.read_csv(root / 'predictions.csv', float_precision='round_trip')
    assert list(predictions['utt_id']) == [r.utt_id for r in records]
    assert predictions['raw_score'].tolist() == scores.tolist()
    assert predictions['clamped_score'].tolist() == np.clip(scores, 1.0, 5.0).tolist()

    expected = full_report(scores, [r.mos_label for r in records], [r.system_id for r in records]).as_row()
    written = read_report_csv(root / 'report.csv')
    for column, value in expected.items():
        assert (math.isnan(value) and math.isnan(written[column])) or written[column] == value, column


def test_pipeline_is_reproducible(tmp_path):
    _pipeline(tmp_path)
    first = {p: p.read_bytes() for p in sorted(tmp_path.rglob('*')) if p.is_file()}
    _pipeline(tmp_path)
    second = {p: p.read_bytes() for p in sorted(tmp_path.rglob('*')) if p.is_file()}
    assert first.keys() == second.keys()
    assert [p for p in first if first[p] != second[p]] == []


def test_failed_utterances_are_reported(tmp_path, write_sine_wav, write_manifest_csv):
    write_sine_wav('good.wav', 220.0, duration=0.5)
    (tmp_path / 'broken.wav').write_bytes(b'RIFF....not really a wav')
    manifest = write_manifest_csv('m.csv', [
        {'utt_id': 'good', 'system_id': 'a', 'wav_path': 'good.wav'},
        {'utt_id': 'broken', 'system_id': 'a', 'wav_path': 'broken.wav'},
    ])

    assert _run('extract-pitch', manifest, tmp_path / 'out') == EXIT_ITEM_FAILURES
    errors = pd.read_csv(tmp_path / 'out' / 'errors.csv')
    assert list(errors['utt_id']) == ['broken']
    assert pd.read_csv(tmp_path / 'out' / 'histograms.csv')['utt_id'].tolist() == ['good']

    records = load_manifest(tmp_path / 'out' / 'manifest.csv')
    assert [r.utt_id for r in records] == ['good', 'broken']
    assert 'pitch' in records[0].feature_paths and 'pitch' not in records[1].feature_paths

    assert _run('histogram', tmp_path / 'out' / 'manifest.csv', tmp_path / 'h.csv') == EXIT_ITEM_FAILURES
    assert pd.read_csv(tmp_path / 'h.csv')['utt_id'].tolist() == ['good']


def test_parallel_extraction_matches_serial(tmp_path):
    manifest = _write_split(tmp_path / 'data', 'x', 3, 3, 7)
    assert _run('extract-pitch', manifest, tmp_path / 'serial') == EXIT_OK
    assert _run('extract-pitch', manifest, tmp_path / 'parallel', '--jobs', 4) == EXIT_OK
    assert (tmp_path / 'serial' / 'histograms.csv').read_bytes() == \
        (tmp_path / 'parallel' / 'histograms.csv').read_bytes()


def test_fatal_errors_exit_with_two(tmp_path):
    manifest = _write_split(tmp_path / 'data', 'x', 2, 2, 3)
    assert _run('extract-pitch', tmp_path / 'nowhere.csv', tmp_path / 'out') == EXIT_ERROR
    assert _run('extract-pitch', manifest, tmp_path / 'out', '--f0-max', 5000) == EXIT_ITEM_FAILURES
    assert _run('bias-correct', 'x.json', manifest, manifest, '--out', 'y.json', '--alpha', 2, '--beta', 4) \
        == EXIT_ERROR

    _run('train', manifest, manifest, '--variant', 'plain', '--out', tmp_path / 'plain.json', *TRAINING)
    assert _run('fuse', manifest, manifest, tmp_path / 'plain.json', '--k', 2, '--out', tmp_path / 'f.json') \
        == EXIT_ERROR
    assert not (tmp_path / 'f.json').exists()


def test_jobs_default_comes_from_the_environment(monkeypatch):
    monkeypatch.setenv('SINGQA_JOBS', '3')
    assert build_parser().parse_args(['histogram', 'm.csv', 'h.csv']).jobs == 3
    monkeypatch.setenv('SINGQA_JOBS', 'many')
    assert build_parser().parse_args(['histogram', 'm.csv', 'h.csv']).jobs == 1
    monkeypatch.delenv('SINGQA_JOBS')
    assert build_parser().parse_args(['predict', 'a.json', 'm.csv', 'p.csv', '--jobs', '2']).jobs == 2

    with pytest.raises(SystemExit) as exc:
        main(['histogram', 'm.csv', 'h.csv', '--jobs', '0'])
    assert exc.value.code == 2


def test_evaluate_prints_both_levels(pipeline, capsys):
    root, _, val, _ = pipeline
    capsys.readouterr()
    assert _run('evaluate', root / 'predictions.csv', val) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == '12 utterances, 6 systems'
    assert 'utterance' in out and 'system' in out and 'srcc' in out


def test_header_only_manifest_is_a_fatal_error(tmp_path, write_manifest_csv):
    manifest = _write_split(tmp_path / 'data', 'x', 2, 2, 5)
    empty = write_manifest_csv('empty.csv', [])
    assert _run('train', empty, manifest, '--variant', 'plain', '--out', tmp_path / 'a.json') == EXIT_ERROR
    assert _run('train', manifest, empty, '--variant', 'plain', '--out', tmp_path / 'b.json') == EXIT_ERROR
    assert not (tmp_path / 'a.json').exists() and not (tmp_path / 'b.json').exists()


def test_extraction_keeps_nested_ids_inside_the_output_directory(tmp_path, write_sine_wav, write_manifest_csv):
    write_sine_wav('take.wav', 220.0, duration=0.3)
    manifest = write_manifest_csv('m.csv', [
        {'utt_id': 'singer1/take1', 'system_id': 'a', 'wav_path': 'take.wav'},
        {'utt_id': '../x', 'system_id': 'a', 'wav_path': 'take.wav'},
    ])
    out = tmp_path / 'out'
    assert _run('extract-pitch', manifest, out) == EXIT_OK
    records = load_manifest(out / 'manifest.csv')
    assert [r.utt_id for r in records] == ['singer1/take1', '../x']
    for record in records:
        assert record.feature_path('pitch').parent.resolve() == out.resolve()
        assert record.feature_path('pitch').is_file()
    assert not (tmp_path / 'x.pitch.sqaf').exists()
