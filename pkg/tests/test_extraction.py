
import threading

import pandas as pd
import pytest

from singqa.pitch import PitchConfig
from singqa.records import load_manifest
from singqa_app.extraction import HISTOGRAM_COLUMNS, Outcome, PitchTask, feature_filename, histogram_frame, \
    process_utterances


class _Recorder:
    """Task stub: remembers which threads ran it and fails on request."""

    def __init__(self, failing=()):
        self.failing = set(failing)
        self.threads = set()
        self.lock = threading.Lock()

    def __call__(self, record):
        with self.lock:
            self.threads.add(threading.current_thread().name)
        if record.utt_id in self.failing:
            raise RuntimeError('boom')
        return Outcome(record.utt_id)


@pytest.fixture
def records(write_sine_wav, write_manifest_csv):
    rows = []
    for i in range(6):
        write_sine_wav(f'u{i}.wav', 200.0 + 50 * i, duration=0.3)
        rows.append({'utt_id': f'u{i}', 'system_id': f's{i % 2}', 'wav_path': f'u{i}.wav'})
    return load_manifest(write_manifest_csv('m.csv', rows))


def test_generator_yields_the_count_first(records):
    progress = process_utterances(records, _Recorder())
    assert next(progress) == 6
    assert [o.utt_id for o in progress] == [r.utt_id for r in records]


@pytest.mark.parametrize('jobs', [1, 3])
def test_failures_are_caught_per_utterance(records, jobs):
    task = _Recorder(failing={'u1', 'u4'})
    progress = process_utterances(records, task, jobs)
    next(progress)
    outcomes = list(progress)
    assert [o.utt_id for o in outcomes] == [r.utt_id for r in records]
    assert [o.utt_id for o in outcomes if not o.ok] == ['u1', 'u4']
    assert outcomes[1].error == 'RuntimeError: boom'
    if jobs > 1:
        assert all(name.startswith('extract') for name in task.threads)


def test_pitch_task_and_histogram_frame(records, tmp_path):
    task = PitchTask(tmp_path / 'out', PitchConfig())
    (tmp_path / 'out').mkdir()
    outcomes = [task(r) for r in records[:2]] + [Outcome('bad', error='AudioFormatError: no')]
    assert all(o.path.is_file() for o in outcomes[:2])

    frame = histogram_frame(outcomes)
    assert list(frame.columns) == HISTOGRAM_COLUMNS
    assert frame['utt_id'].tolist() == ['u0', 'u1']
    assert frame['sharpness'].notna().all()
    assert histogram_frame([]).empty and isinstance(histogram_frame([]), pd.DataFrame)


@pytest.mark.parametrize('utt_id', ['singer1/take1', '../x', '..', 'a\\b', 'plain'])
def test_feature_filename_stays_in_the_output_directory(tmp_path, utt_id):
    name = feature_filename(utt_id, '.pitch.sqaf')
    assert '/' not in name and '\\' not in name
    path = (tmp_path / name).resolve()
    assert path.parent == tmp_path.resolve()


def test_feature_filenames_are_distinct():
    ids = ['a/b', 'a%2Fb', 'a_b', 'a b', 'a%b']
    assert len({feature_filename(i, '.spec.sqaf') for i in ids}) == len(ids)


def test_pitch_task_writes_nested_ids_inside_out_dir(write_sine_wav, write_manifest_csv, tmp_path):
    write_sine_wav('take.wav', 220.0, duration=0.3)
    records = load_manifest(write_manifest_csv('m.csv', [
        {'utt_id': 'singer1/take1', 'system_id': 's', 'wav_path': 'take.wav'},
        {'utt_id': '../escape', 'system_id': 's', 'wav_path': 'take.wav'},
    ]))
    out = tmp_path / 'out'
    out.mkdir()
    task = PitchTask(out, PitchConfig())
    paths = [task(r).path for r in records]
    assert all(p.is_file() and p.parent == out for p in paths)
    assert not (tmp_path / 'escape.pitch.sqaf').exists()
