import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from gmmresnext import dataio
from gmmresnext.dataio import DataError, TrialRecord, UtteranceManifestEntry


class TestLoadWav:
    def test_pcm16_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        wavfile.write(p, 16000, np.array([0, 16384, -32768], dtype=np.int16))
        np.testing.assert_array_equal(dataio.load_wav(p).samples, [0.0, 0.5, -1.0])

    def test_float32(self, tmp_path):
        p = tmp_path / "f.wav"
        wavfile.write(p, 16000, np.array([0.25, -0.5], dtype=np.float32))
        np.testing.assert_array_equal(dataio.load_wav(p).samples, [0.25, -0.5])

    def test_empty(self, tmp_path):
        p = tmp_path / "e.wav"
        wavfile.write(p, 16000, np.zeros(0, dtype=np.int16))
        with pytest.raises(DataError, match="empty audio"):
            dataio.load_wav(p)

    def test_wrong_rate(self, tmp_path):
        p = tmp_path / "r.wav"
        wavfile.write(p, 8000, np.zeros(10, dtype=np.int16))
        with pytest.raises(DataError, match="unsupported sample rate"):
            dataio.load_wav(p)

    def test_stereo(self, tmp_path):
        p = tmp_path / "s.wav"
        wavfile.write(p, 16000, np.zeros((10, 2), dtype=np.int16))
        with pytest.raises(DataError, match="mono"):
            dataio.load_wav(p)

    def test_int32_rejected(self, tmp_path):
        p = tmp_path / "i.wav"
        wavfile.write(p, 16000, np.zeros(10, dtype=np.int32))
        with pytest.raises(DataError, match="encoding"):
            dataio.load_wav(p)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=64))
    def test_write_load_roundtrip(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "x.wav"
        pcm = np.array(values, dtype=np.int16)
        dataio.write_wav(p, dataio.load_wav(_write_raw(p, pcm)).samples)
        _, back = wavfile.read(p)
        np.testing.assert_array_equal(back, pcm)


def _write_raw(p, pcm):
    wavfile.write(p, 16000, pcm)
    return p


class TestManifest:
    def test_csv_in_order(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("utt_id,path,speaker_id,gender\nb,wav/b.wav,s1,male\na,/abs/a.wav,s2,female\n")
        entries = dataio.parse_manifest(p)
        assert [e.utt_id for e in entries] == ["b", "a"]
        assert entries[0].path == tmp_path / "wav/b.wav"
        assert str(entries[1].path) == "/abs/a.wav"

    def test_jsonl(self, tmp_path):
        p = tmp_path / "m.jsonl"
        rows = [{"utt_id": "u1", "path": "x.wav", "speaker_id": "s", "gender": "unknown"}]
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert dataio.parse_manifest(p)[0].gender == "unknown"

    def test_duplicate(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("utt_id,path,speaker_id,gender\nu1,a.wav,s,male\nu1,b.wav,s,male\n")
        with pytest.raises(DataError, match="u1"):
            dataio.parse_manifest(p)

    def test_bad_gender(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("utt_id,path,speaker_id,gender\nu1,a.wav,s,x\n")
        with pytest.raises(DataError, match="invalid gender"):
            dataio.parse_manifest(p)

    def test_missing_field(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("utt_id,path,speaker_id,gender\nu1,,s,male\n")
        with pytest.raises(DataError, match="missing field"):
            dataio.parse_manifest(p)

    def test_write_parse_roundtrip(self, tmp_path):
        entries = [UtteranceManifestEntry(f"u{i}", tmp_path / f"w/{i}.wav", f"s{i % 2}", "female") for i in range(4)]
        dataio.write_manifest(tmp_path / "m.csv", entries)
        assert dataio.parse_manifest(tmp_path / "m.csv") == entries


class TestTrials:
    def test_roundtrip_and_resolution(self, tmp_path):
        entries = [UtteranceManifestEntry(u, tmp_path / f"{u}.wav", "s", "male") for u in ("a", "b")]
        trials = [TrialRecord("target", "a", "b"), TrialRecord("nontarget", "b", "a")]
        dataio.write_trials(tmp_path / "t.txt", trials)
        assert (tmp_path / "t.txt").read_text() == "1 a b\n0 b a\n"
        assert dataio.parse_trials(tmp_path / "t.txt", entries) == trials

    def test_path_tokens_resolve(self, tmp_path):
        entries = [UtteranceManifestEntry("a", tmp_path / "w/a.wav", "s", "male"),
                   UtteranceManifestEntry("b", tmp_path / "w/b.wav", "s", "male")]
        (tmp_path / "t.txt").write_text("1 w/a.wav w/b.wav\n")
        assert dataio.parse_trials(tmp_path / "t.txt", entries) == [TrialRecord("target", "a", "b")]

    def test_unresolved(self, tmp_path):
        (tmp_path / "t.txt").write_text("1 a zzz\n")
        entries = [UtteranceManifestEntry("a", tmp_path / "a.wav", "s", "male")]
        with pytest.raises(DataError, match="zzz"):
            dataio.parse_trials(tmp_path / "t.txt", entries)


class TestSynthCorpus:
    def test_deterministic(self, tmp_path):
        a = dataio.synth_corpus(tmp_path / "a", 4, 3, seed=7)
        b = dataio.synth_corpus(tmp_path / "b", 4, 3, seed=7)
        for ea, eb in zip(a, b):
            assert ea.path.read_bytes() == eb.path.read_bytes()
        assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()

    def test_seed_changes_samples(self, tmp_path):
        a = dataio.synth_corpus(tmp_path / "a", 4, 3, seed=7)
        b = dataio.synth_corpus(tmp_path / "b", 4, 3, seed=8)
        assert a[0].path.read_bytes() != b[0].path.read_bytes()

    def test_small_corpus_shape(self, tmp_path):
        entries = dataio.synth_corpus(tmp_path, 2, 2, seed=3)
        assert len(entries) == 4
        assert len({e.speaker_id for e in entries}) == 2
        assert {e.gender for e in entries} == {"male", "female"}
        assert dataio.parse_manifest(tmp_path / "manifest.csv") == entries
        wave = dataio.load_wav(entries[0].path)
        assert 2.0 <= wave.duration <= 3.0 and np.abs(wave.samples).max() <= 1.0

    def test_needs_two_speakers(self, tmp_path):
        with pytest.raises(ValueError):
            dataio.synth_corpus(tmp_path, 1, 2, seed=0)

    def test_all_pairs_trials(self):
        entries = [UtteranceManifestEntry(f"u{i}", f"{i}.wav", f"s{i // 2}", "male") for i in range(4)]
        trials = dataio.all_pairs_trials(entries)
        assert len(trials) == 6
        assert sum(t.is_target for t in trials) == 2
