import json

import numpy as np
import pytest
import soundfile as sf

from modules.corpus import (
    Manifest,
    ManifestRecord,
    load_manifest,
    make_batch,
    make_synthetic_corpus,
    sample_segment_pair,
    save_manifest,
)
from modules.dsp import extract_f0, load_wav
from modules.errors import (
    DuplicateUtteranceIdError,
    ManifestParseError,
    MissingAudioError,
    UtteranceTooShortError,
)

CHI2_CRIT_DF9_P01 = 21.666


def _write_wav(path, num_samples, value=0.1):
    sf.write(str(path), np.full(num_samples, int(value * 32768), dtype=np.int16), 16000, subtype="PCM_16")


def _manifest_file(tmp_path, rows):
    path = tmp_path / "manifest.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


# -------------------------------
# Manifest parsing
# -------------------------------
def test_empty_manifest_has_no_records(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    manifest = load_manifest(path)
    assert len(manifest) == 0
    assert manifest.speakers == []


def test_manifest_with_ten_records(tmp_path):
    rows = []
    for i in range(10):
        _write_wav(tmp_path / f"u{i}.wav", 800)
        rows.append({"id": f"u{i}", "speaker": f"s{i % 3}", "path": f"u{i}.wav", "duration_s": 0.05})
    manifest = load_manifest(_manifest_file(tmp_path, rows))

    assert len(manifest) == 10
    assert manifest.speakers == ["s0", "s1", "s2"]
    assert manifest.speaker_index == {"s0": 0, "s1": 1, "s2": 2}
    assert manifest["u4"].path == (tmp_path / "u4.wav").resolve()
    assert "u9" in manifest and "u10" not in manifest
    assert [r.utt_id for r in manifest.by_speaker()["s1"]] == ["u1", "u4", "u7"]


def test_manifest_rejects_duplicate_ids(tmp_path):
    _write_wav(tmp_path / "a.wav", 800)
    row = {"id": "a", "speaker": "s", "path": "a.wav", "duration_s": 0.05}
    with pytest.raises(DuplicateUtteranceIdError):
        load_manifest(_manifest_file(tmp_path, [row, row]))


def test_manifest_rejects_missing_audio(tmp_path):
    row = {"id": "a", "speaker": "s", "path": "nowhere.wav", "duration_s": 1.0}
    with pytest.raises(MissingAudioError):
        load_manifest(_manifest_file(tmp_path, [row]))


@pytest.mark.parametrize("row", [
    {"id": "a", "speaker": "s", "path": "a.wav"},
    {"id": "a", "speaker": "s", "path": "a.wav", "duration_s": "long"},
])
def test_manifest_rejects_bad_records(tmp_path, row):
    _write_wav(tmp_path / "a.wav", 800)
    with pytest.raises(ManifestParseError):
        load_manifest(_manifest_file(tmp_path, [row]))


def test_manifest_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text('{"id": "a"\n')
    with pytest.raises(ManifestParseError):
        load_manifest(path)


def test_manifest_save_uses_relative_paths(tmp_path):
    _write_wav(tmp_path / "a.wav", 800)
    manifest = Manifest([ManifestRecord("a", "s", (tmp_path / "a.wav").resolve(), 0.05)])
    save_manifest(manifest, tmp_path / "m.jsonl")

    saved = json.loads((tmp_path / "m.jsonl").read_text())
    assert saved["path"] == "a.wav"
    assert load_manifest(tmp_path / "m.jsonl")["a"].path == manifest["a"].path


# -------------------------------
# Segment sampling
# -------------------------------
@pytest.fixture
def long_manifest(tmp_path):
    _write_wav(tmp_path / "long.wav", 16000)
    _write_wav(tmp_path / "short.wav", 500)
    return Manifest([
        ManifestRecord("long", "s0", tmp_path / "long.wav", 1.0),
        ManifestRecord("short", "s1", tmp_path / "short.wav", 500 / 16000),
    ])


def test_segment_of_full_length_has_zero_offsets(long_manifest):
    pair = sample_segment_pair(long_manifest, "long", 16000, np.random.default_rng(0))
    assert pair.offsets == (0, 0)
    np.testing.assert_array_equal(pair.seg_a.samples, pair.seg_b.samples)


def test_segment_sampling_is_seeded(long_manifest):
    a = sample_segment_pair(long_manifest, "long", 4000, np.random.default_rng(42))
    b = sample_segment_pair(long_manifest, "long", 4000, np.random.default_rng(42))
    assert a.offsets == b.offsets
    assert len(a.seg_a) == len(a.seg_b) == 4000
    assert a.label == 0 and a.utt_id == "long"


def test_segment_offsets_are_uniform(long_manifest):
    rng = np.random.default_rng(2024)
    cache = {}
    seg_len = 6000
    offsets = []
    for _ in range(10_000):
        offsets.extend(sample_segment_pair(long_manifest, "long", seg_len, rng, cache).offsets)

    counts, _ = np.histogram(offsets, bins=10, range=(0, 16000 - seg_len + 1))
    expected = len(offsets) / 10
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < CHI2_CRIT_DF9_P01


def test_segment_longer_than_utterance_fails(long_manifest):
    with pytest.raises(UtteranceTooShortError):
        sample_segment_pair(long_manifest, "short", 1000, np.random.default_rng(0))


def test_make_batch_stacks_pairs(long_manifest):
    batch = make_batch(long_manifest, 400, 3, np.random.default_rng(5), audio_cache={})
    assert len(batch) == 3
    assert tuple(batch.waves_a().shape) == (3, 400)
    assert tuple(batch.waves_b().shape) == (3, 400)
    assert set(batch.labels().tolist()) <= {0, 1}


# -------------------------------
# Synthetic corpus
# -------------------------------
def test_synthetic_corpus_layout(tmp_path):
    manifest = make_synthetic_corpus(tmp_path, num_speakers=4, utts_per_speaker=8, seed=1, duration_s=0.25)

    assert len(manifest) == 32
    assert len(manifest.speakers) == 4
    assert len(list((tmp_path / "wavs").glob("*.wav"))) == 32
    assert len(load_manifest(tmp_path / "manifest.jsonl")) == 32

    sidecar = json.loads((tmp_path / "wavs" / "spk00_utt00.json").read_text())
    assert sidecar["frame_hop"] == 320 and sidecar["speaker"] == "spk00"
    assert len(sidecar["f0_hz"]) == len(sidecar["phones"]) == 13


def test_synthetic_corpus_is_deterministic(tmp_path):
    make_synthetic_corpus(tmp_path / "a", 2, 2, seed=9, duration_s=0.5)
    make_synthetic_corpus(tmp_path / "b", 2, 2, seed=9, duration_s=0.5)
    make_synthetic_corpus(tmp_path / "c", 2, 2, seed=10, duration_s=0.5)

    wav = "wavs/spk01_utt01.wav"
    assert (tmp_path / "a" / wav).read_bytes() == (tmp_path / "b" / wav).read_bytes()
    assert (tmp_path / "a" / wav).read_bytes() != (tmp_path / "c" / wav).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()


def test_yin_recovers_synthetic_f0(tiny_corpus):
    out_dir, manifest = tiny_corpus
    within, total = 0, 0
    for rec in manifest.records:
        truth = np.array(json.loads(rec.path.with_suffix(".json").read_text())["f0_hz"])
        f0 = extract_f0(load_wav(rec.path), 320)
        frames = np.arange(3, len(truth) - 3)
        frames = frames[f0.voiced[frames]]
        rel = np.abs(f0.hz[frames] - truth[frames]) / truth[frames]
        within += int(np.sum(rel <= 0.03))
        total += frames.size
    assert total > 0
    assert within / total >= 0.9
