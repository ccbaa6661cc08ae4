import json

import numpy as np
import pytest

from modalfuse.cli import main
from modalfuse.scene_graph import serialize_scene_graph
from modalfuse.segmentation import read_segments
from modalfuse.store import Store
from modalfuse.synthetic import make_mini_vqa, make_transcript_words

TINY_MODEL = ["--d-model", "32", "--n-heads", "4", "--enc-layers", "1",
              "--dec-layers", "1", "--d-ff", "64", "--max-target-len", "32"]


def write_transcripts(path, n_videos=2, words_per_video=40, wpm=45.0):
    with open(path, "w", encoding="utf-8") as f:
        rng = np.random.default_rng(0)
        for v in range(n_videos):
            f.write(json.dumps({"video_id": f"vid{v}", "lang": "en"}) + "\n")
            for w, s, e in make_transcript_words(rng, words_per_video, wpm=wpm):
                f.write(json.dumps({"w": w, "s": s, "e": e}) + "\n")


def write_vqa_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            out = dict(rec)
            out["graph"] = json.loads(serialize_scene_graph(rec["graph"]))
            f.write(json.dumps(out) + "\n")


@pytest.fixture
def transcripts(tmp_path):
    path = tmp_path / "transcripts.jsonl"
    write_transcripts(path)
    return path


class TestSegment:
    def test_produces_segments_and_resolved_config(self, tmp_path, transcripts, capsys):
        out = tmp_path / "segments.jsonl"
        rc = main(["segment", "--transcripts", str(transcripts), "--out", str(out)])
        assert rc == 0
        with open(out, encoding="utf-8") as f:
            segs = list(read_segments(f))
        # 40 words per video, window 15 -> 2 full windows per video
        assert len(segs) == 4
        assert all(len(s.caption.split(" ")) == 15 for s in segs)
        resolved = json.loads((tmp_path / "segments.jsonl.config.json").read_text())
        assert resolved["window"] == 15
        assert "kept 4 segments" in capsys.readouterr().out

    def test_min_wpm_filter_drops_slow_speech(self, tmp_path, capsys):
        slow = tmp_path / "slow.jsonl"
        write_transcripts(slow, n_videos=1, wpm=20.0)
        out = tmp_path / "seg.jsonl"
        assert main(["segment", "--transcripts", str(slow), "--out", str(out)]) == 0
        assert out.read_text() == ""
        assert "dropped 2" in capsys.readouterr().out

    def test_config_file_merged_and_flag_wins(self, tmp_path, transcripts):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"window": 10, "min-wpm": 5.0}))
        out = tmp_path / "seg.jsonl"
        assert main(["segment", "--transcripts", str(transcripts),
                     "--out", str(out), "--config", str(cfg),
                     "--window", "20"]) == 0
        resolved = json.loads((tmp_path / "seg.jsonl.config.json").read_text())
        assert resolved["window"] == 20       # explicit flag beats file
        assert resolved["min-wpm"] == 5.0     # file beats default

    def test_unknown_config_key_rejected(self, tmp_path, transcripts):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"windoww": 10}))
        with pytest.raises(SystemExit):
            main(["segment", "--transcripts", str(transcripts),
                  "--out", str(tmp_path / "o.jsonl"), "--config", str(cfg)])

    def test_missing_input_is_error_exit(self, tmp_path, capsys):
        rc = main(["segment", "--transcripts", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "o.jsonl")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestEncodePack:
    def test_pack_and_inspect(self, tmp_path, transcripts, capsys):
        segs = tmp_path / "segments.jsonl"
        store_path = tmp_path / "emb.store"
        main(["segment", "--transcripts", str(transcripts), "--out", str(segs)])
        rc = main(["encode-pack", "--segments", str(segs),
                   "--out", str(store_path), "--d", "32"])
        assert rc == 0
        with Store(store_path) as s:
            assert len(s) == 4
            rec = s.get(0)
            tags = [t for t, _ in rec.arrays]
            assert tags == ["frame", "caption", "raw"]
            assert rec.arrays[1][1].shape == (32,)
        capsys.readouterr()
        assert main(["inspect", "--store", str(store_path)]) == 0
        out = capsys.readouterr().out
        assert "4 records" in out
        assert "caption" in out

    def test_graph_manifest_attached(self, tmp_path, transcripts, capsys):
        segs = tmp_path / "segments.jsonl"
        main(["segment", "--transcripts", str(transcripts), "--out", str(segs)])
        with open(segs, encoding="utf-8") as f:
            keys = [f"{s.video_id}:{s.word_start}" for s in read_segments(f)]
        graphs = tmp_path / "graphs.jsonl"
        with open(graphs, "w", encoding="utf-8") as f:
            f.write(json.dumps({"key": keys[0], "objects": ["dog", "cat"],
                                "relations": [[0, "chasing", 1]]}) + "\n")
        store_path = tmp_path / "emb.store"
        rc = main(["encode-pack", "--segments", str(segs), "--graphs", str(graphs),
                   "--out", str(store_path), "--d", "32"])
        assert rc == 0
        assert "3 segments without a scene graph" in capsys.readouterr().out
        with Store(store_path) as s:
            tags = [t for t, _ in s.get_by_key(keys[0]).arrays]
            assert "scene_graph" in tags


class TestTrainingPipeline:
    @pytest.fixture
    def packed(self, tmp_path, transcripts):
        segs = tmp_path / "segments.jsonl"
        store_path = tmp_path / "emb.store"
        main(["segment", "--transcripts", str(transcripts), "--out", str(segs)])
        main(["encode-pack", "--segments", str(segs), "--out", str(store_path),
              "--d", "32"])
        return store_path

    def test_pretrain_writes_run_artifacts(self, tmp_path, packed, capsys):
        run = tmp_path / "run"
        rc = main(["pretrain", "--store", str(packed), "--out-dir", str(run),
                   "--steps", "3", "--batch-size", "2", "--svg", *TINY_MODEL])
        assert rc == 0
        assert (run / "checkpoint.store").exists()
        assert (run / "summary.json").exists()
        assert (run / "resolved_config.json").exists()
        assert "<svg" in (run / "loss.svg").read_text()
        lines = (run / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["step"] == 0
        assert "final loss" in capsys.readouterr().out

    def test_full_pipeline_pretrain_finetune_eval(self, tmp_path, packed, capsys):
        pre = tmp_path / "pre"
        main(["pretrain", "--store", str(packed), "--out-dir", str(pre),
              "--steps", "2", "--batch-size", "2", *TINY_MODEL])

        records = make_mini_vqa(8, seed=0)
        vqa = tmp_path / "vqa.jsonl"
        write_vqa_jsonl(vqa, records)
        img_store = tmp_path / "images.store"
        from modalfuse.experts import StubEncoders
        from modalfuse.synthetic import write_vqa_image_store
        write_vqa_image_store(records, StubEncoders(d=32, seed=0), img_store)

        fin = tmp_path / "fin"
        rc = main(["finetune", "--vqa", str(vqa), "--image-store", str(img_store),
                   "--out-dir", str(fin), "--checkpoint-in",
                   str(pre / "checkpoint.store"), "--steps", "2",
                   "--batch-size", "2"])
        assert rc == 0
        assert (fin / "checkpoint.store").exists()

        ev = tmp_path / "ev"
        rc = main(["eval", "--checkpoint", str(fin / "checkpoint.store"),
                   "--vqa", str(vqa), "--image-store", str(img_store),
                   "--out-dir", str(ev), "--max-decode-len", "6"])
        assert rc == 0
        summary = json.loads((ev / "eval.json").read_text())
        assert 0.0 <= summary["mean_accuracy"] <= 1.0
        assert summary["n_examples"] == 8
        assert isinstance(summary["collapse_flag"], bool)
        assert "accuracy" in capsys.readouterr().out

    def test_eval_missing_checkpoint_exits_nonzero(self, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(tmp_path / "no.store"),
                   "--vqa", "x", "--image-store", "y",
                   "--out-dir", str(tmp_path)])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_finetune_yes_no_only(self, tmp_path, capsys):
        records = make_mini_vqa(8, seed=0)
        vqa = tmp_path / "vqa.jsonl"
        write_vqa_jsonl(vqa, records)
        img_store = tmp_path / "images.store"
        from modalfuse.experts import StubEncoders
        from modalfuse.synthetic import write_vqa_image_store
        write_vqa_image_store(records, StubEncoders(d=32, seed=0), img_store)
        fin = tmp_path / "fin"
        rc = main(["finetune", "--vqa", str(vqa), "--image-store", str(img_store),
                   "--out-dir", str(fin), "--steps", "1", "--batch-size", "2",
                   "--yes-no-only", *TINY_MODEL])
        assert rc == 0
        n_yes_no = sum(all(a in ("yes", "no") for a in r["answers"])
                       for r in records)
        assert f"on {n_yes_no} examples" in capsys.readouterr().out


class TestAblate:
    def test_grid_outputs_and_rerun_identical(self, tmp_path, capsys):
        args = ["ablate", "--n-segments", "8", "--n-vqa", "8",
                "--pretrain-steps", "1", "--finetune-steps", "1",
                "--batch-size", "4", *TINY_MODEL]
        run_a = tmp_path / "a"
        run_b = tmp_path / "b"
        assert main([*args, "--out-dir", str(run_a)]) == 0
        assert main([*args, "--out-dir", str(run_b)]) == 0
        table_a = (run_a / "ablation.tsv").read_text()
        table_b = (run_b / "ablation.tsv").read_text()
        assert table_a == table_b
        lines = table_a.splitlines()
        assert lines[0].split("\t") == ["label", "accuracy", "iterations", "status"]
        assert len(lines) == 9
        assert all(l.split("\t")[3] == "ok" for l in lines[1:])
        rows = [json.loads(l) for l in
                (run_a / "ablation.jsonl").read_text().splitlines()]
        assert len(rows) == 8
        out = capsys.readouterr().out
        assert "pretrain+graph" in out
