import json

import pytest

from weakloc.cli import build_parser, main
from weakloc.datamodel import load_manifest
from weakloc.localizer import LocalizationResult, write_predictions
from weakloc.model import load_checkpoint

SYNTH = ["synth", "--n", "120", "--audio-dim", "6", "--visual-dim", "5", "--seed", "7"]
FAST = ["--hidden", "8", "--epochs", "2", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(SYNTH + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset):
    ckpt = dataset.parent / "model.mmck"
    assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(ckpt), *FAST]) == 0
    return ckpt


class TestSynth:
    def test_outputs(self, dataset):
        assert (dataset / "manifest.jsonl").exists() and (dataset / "oracle.csv").exists()
        assert len(list((dataset / "features").glob("*.mmf"))) == 120

    def test_rerun_identical(self, dataset, tmp_path):
        assert main(SYNTH + ["--out", str(tmp_path / "again")]) == 0
        for name in ("manifest.jsonl", "oracle.csv", "features/syn_000042.mmf"):
            assert (dataset / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_invalid_fraction_exit_2_without_output(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "x"), "--positive-fraction", "1.5"]) == 2
        assert "positive_fraction" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_bad_mix(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--mix", "0.5,0.5"]) == 2


class TestTrain:
    def test_checkpoint_and_log(self, checkpoint):
        assert checkpoint.stat().st_size > 0
        lines = [json.loads(x) for x in checkpoint.with_name("model.mmck.log.jsonl").read_text().splitlines()]
        assert [x["event"] for x in lines] == ["epoch", "epoch", "summary"]
        assert lines[-1]["best_epoch"] in (1, 2)

    @pytest.mark.parametrize("flags", [["--pooling", "mean"], ["--modalities", "audio_only"]])
    def test_variants(self, dataset, tmp_path, flags):
        ckpt = tmp_path / "v.mmck"
        assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(ckpt),
                     *FAST, *flags]) == 0
        cfg = load_checkpoint(ckpt).config
        assert (cfg.d_audio, cfg.d_visual) == (6, 5)
        assert flags[1] in (cfg.pooling, cfg.modalities)

    def test_invalid_config_file(self, dataset, tmp_path, capsys):
        ini = tmp_path / "bad.ini"
        ini.write_text("[model]\ndropout_p = 1.0\n")
        ckpt = tmp_path / "never.mmck"
        assert main(["--config", str(ini), "train", "--manifest", str(dataset / "manifest.jsonl"),
                     "--out", str(ckpt)]) == 2
        assert not ckpt.exists()
        assert "dropout_p" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "m")]) == 3


class TestEvalAndLocalize:
    def test_eval_json(self, dataset, checkpoint, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--checkpoint", str(checkpoint),
                     "--json", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["n_cls"] == 18 and rep["n_loc"] == round(0.3 * 18)
        assert "Cls.F1" in capsys.readouterr().out

    def test_localize_then_eval(self, dataset, checkpoint, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        manifest = str(dataset / "manifest.jsonl")
        assert main(["localize", "--manifest", manifest, "--checkpoint", str(checkpoint), "--out", str(preds),
                     "--bins", "10"]) == 0
        assert len(preds.read_text().splitlines()) == 18
        capsys.readouterr()
        assert main(["eval", "--manifest", manifest, "--checkpoint", str(checkpoint), "--bins", "10"]) == 0
        direct = capsys.readouterr().out
        assert main(["eval", "--manifest", manifest, "--predictions", str(preds)]) == 0
        assert capsys.readouterr().out == direct

    def test_perfect_predictions(self, dataset, tmp_path, capsys):
        recs = [r for r in load_manifest(dataset / "manifest.jsonl") if r.split.value == "test"]
        rows = []
        for r in recs:
            s, e = (r.events[0].start_s, r.events[0].end_s) if r.events else (0.0, 5.0)
            rows.append((r.id, LocalizationResult(r.label, s, e, None, None, 5.0), 0.5, 0.5))
        path = tmp_path / "perfect.jsonl"
        write_predictions(rows, path)
        assert main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--predictions", str(path)]) == 0
        values = capsys.readouterr().out.splitlines()[2].split()
        assert values[:3] == ["1.000", "1.000", "1.000"]

    def test_missing_prediction(self, dataset, tmp_path):
        path = tmp_path / "few.jsonl"
        write_predictions([], path)
        assert main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--predictions", str(path)]) == 2

    def test_needs_source(self, dataset):
        assert main(["eval", "--manifest", str(dataset / "manifest.jsonl")]) == 2


class TestStats:
    def test_oracle_csv(self, dataset, tmp_path, capsys):
        out = tmp_path / "s.json"
        assert main(["stats", str(dataset / "oracle.csv"), "--json", str(out)]) == 0
        st = json.loads(out.read_text())
        n = round(0.3 * 84) + round(0.3 * 18) * 2
        assert st["total_events"] == n
        assert sum(st["by_modality"].values()) == n
        assert "Total laughter events" in capsys.readouterr().out

    def test_empty_csv(self, tmp_path, capsys):
        path = tmp_path / "e.csv"
        path.write_text("video_id,start,end,source,modality,intensity\n")
        assert main(["stats", str(path)]) == 0
        assert "no events" in capsys.readouterr().out

    def test_column_mapping_and_durations(self, tmp_path, capsys):
        path = tmp_path / "c.csv"
        path.write_text("clip,t0,t1,source,modality,intensity\na,0,1,speaker,visual,chuckle\n"
                        "b,0,3,audience,acoustic,laughter\nb,bad,3,audience,acoustic,laughter\n")
        durations = tmp_path / "d.csv"
        durations.write_text("video_id,duration_s\na,3600\nb,3600\nc,1800\n")
        assert main(["stats", str(path), "--columns", "video_id=clip,start=t0,end=t1",
                     "--durations", str(durations)]) == 0
        text = capsys.readouterr().out
        assert "skipped 1 malformed rows" in text
        assert "Total videos                     3" in text
        assert "Total hours                    2.5" in text
        assert "Mean duration (s)             2.00" in text

    def test_strict(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("video_id,start,end,source,modality,intensity\na,3,1,speaker,visual,chuckle\n")
        assert main(["stats", str(path), "--strict"]) == 3

    def test_bad_columns_flag(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("video_id,start,end,source,modality,intensity\n")
        assert main(["stats", str(path), "--columns", "clip"]) == 2


class TestGradcheck:
    def test_pass(self, capsys):
        assert main(["gradcheck", "--variant", "no_tanh"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("PASS no_tanh") and out[-1].startswith("PASS")

    def test_corrupted_names_parameter(self, capsys):
        assert main(["gradcheck", "--variant", "full", "--corrupt", "audio.gate.weight"]) == 3
        out = capsys.readouterr().out
        assert "FAIL" in out and "audio.gate.weight" in out


def test_help_documents_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "default 1e-4" in text and "default 32" in text and "default 1024" in text


def test_threads_flag():
    assert main(["--threads", "1", "gradcheck", "--variant", "visual_only"]) == 0
