import hashlib

import numpy as np
import pytest

from weakloc.datamodel import Modality, Split, load_manifest, parse_annotation_csv, read_feature_map
from weakloc.synthgen import SynthConfig, burst_snr, generate

SMALL = SynthConfig(n_segments=200, audio_dim=8, visual_dim=6, seed=5)


def digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


class TestConfig:
    @pytest.mark.parametrize("bad", [
        {"positive_fraction": 1.5}, {"positive_fraction": 0.0}, {"burst_max_s": 6.0},
        {"burst_min_s": 2.0, "burst_max_s": 1.0}, {"mix_acoustic": 0.5}, {"n_val": 100, "n_test": 100},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(n_segments=200, **bad)

    def test_split_sizes_and_frames(self):
        cfg = SynthConfig(n_segments=1000)
        assert cfg.split_sizes == (700, 150, 150)
        assert (cfg.audio_frames, cfg.visual_frames) == (250, 50)


class TestGenerate:
    def test_exact_positive_counts(self):
        ds = generate(SynthConfig(n_segments=1000, seed=3, audio_dim=4, visual_dim=4))
        assert sum(r.label for r in ds.records) == 210 + 45 + 45
        for s in ds.segments:
            assert (s.burst is not None) == bool(s.record.label)
            assert len(s.record.events) == s.record.label
            if s.burst:
                assert 0 <= s.burst[0] < s.burst[1] <= 5.0
                assert 0.5 <= s.burst[1] - s.burst[0] <= 2.5

    def test_visual_dominant_leaves_audio_clean(self):
        ds = generate(SynthConfig(n_segments=400, mix_acoustic=0.0, mix_visual=1.0, mix_both=0.0,
                                  audio_dim=8, visual_dim=6, seed=2))
        pos = [s for s in ds.segments if s.burst]
        audio = np.concatenate([ds.features[str(s.record.feature_path)]["audio"].values for s in pos])
        proj = audio.astype(np.float64) @ ds.directions["audio"]
        # pure noise: mean 0 with standard error 1/sqrt(n)
        assert abs(proj.mean()) < 4 / np.sqrt(proj.size)
        shift, n = burst_snr(ds, "visual")
        assert n == len(pos) and shift == pytest.approx(3.0, rel=0.05)

    def test_burst_snr_within_five_percent(self):
        ds = generate(SynthConfig(n_segments=1000, seed=8, audio_dim=8, visual_dim=6))
        shift, n = burst_snr(ds, "audio")
        assert n >= 100
        assert shift == pytest.approx(3.0, rel=0.05)

    def test_directions_unit_norm(self):
        ds = generate(SMALL)
        for v in ds.directions.values():
            assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_mix_proportions(self):
        ds = generate(SynthConfig(n_segments=4000, seed=1, audio_dim=2, visual_dim=2))
        doms = [s.dominance for s in ds.segments if s.dominance]
        share = doms.count(Modality.ACOUSTIC) / len(doms)
        assert share == pytest.approx(0.79, abs=0.04)

    def test_written_dataset_validates(self, tmp_path):
        ds = generate(SMALL, tmp_path)
        recs = load_manifest(tmp_path / "manifest.jsonl")
        assert [r.id for r in recs] == [r.id for r in ds.records]
        assert {r.split for r in recs} == {Split.TRAIN, Split.VAL, Split.TEST}
        streams = read_feature_map(recs[0].feature_path)
        mem = ds.features[str(ds.records[0].feature_path)]
        assert streams["audio"].values.tobytes() == mem["audio"].values.tobytes()
        assert streams["visual"].consistent_with(recs[0].duration_s)
        oracle = parse_annotation_csv(tmp_path / "oracle.csv")
        assert not oracle.row_errors
        assert len(oracle.events) == sum(r.label for r in recs)

    def test_deterministic_files(self, tmp_path):
        generate(SMALL, tmp_path / "a")
        generate(SMALL, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_segment_streams_independent_of_dataset_size(self):
        a = generate(SynthConfig(n_segments=100, audio_dim=3, visual_dim=3, seed=4))
        b = generate(SynthConfig(n_segments=300, audio_dim=3, visual_dim=3, seed=4))
        # per-segment RNG is keyed by (seed, index); noise for negatives agrees
        for ra, rb in zip(a.records, b.records):
            if ra.label == rb.label == 0:
                fa = a.features[str(ra.feature_path)]["audio"].values
                fb = b.features[str(rb.feature_path)]["audio"].values
                assert fa.tobytes() == fb.tobytes()
                break
        else:
            pytest.fail("no shared negative index")
