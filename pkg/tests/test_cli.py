import csv
import json
import statistics
import subprocess
import sys

import pytest

from pedro.cli import main

TINY = {"d_model": 16, "d_ffn": 32, "n_layers": 2, "max_seq_len": 64, "pretrain_steps": 5, "pretrain_corpus_size": 60,
        "r": 4, "lr": 1e-2, "max_steps": 6, "eval_interval": 3, "train_size": 32, "val_size": 8, "test_size": 8,
        "task_seq_len": 4}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--task", "copy", "--adapter", "pedro"]) == 2

    def test_bad_key_names_it(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"rr": 3}))
        assert main(["train", "--config", str(p), "--task", "copy", "--adapter", "pedro"]) == 2
        assert "rr" in capsys.readouterr().err

    def test_malformed_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "junk.ckpt"
        bad.write_bytes(b"PEDROCKP" + b"\x01\x00")
        assert main(["eval", "--checkpoint", str(bad), "--task", "copy"]) == 2

    def test_bench_overflow(self, cfg_path, capsys):
        assert main(["bench", "--config", str(cfg_path), "--adapter", "pedro", "--prompt-len", "60",
                     "--gen-len", "10", "--trials", "1", "--warmup", "0"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_3(self, tmp_path, capsys):
        p = tmp_path / "hot.json"
        p.write_text(json.dumps({**TINY, "lr": 1e39, "max_steps": 30, "eval_interval": 30}))
        assert main(["train", "--config", str(p), "--task", "copy", "--adapter", "lora",
                     "--out-dir", str(tmp_path / "runs")]) == 3


class TestCountParams:
    def test_none_is_zero(self, capsys):
        assert main(["count-params", "--adapter", "none"]) == 0
        assert capsys.readouterr().out.strip() == "0"

    def test_llama2_shapes(self, tmp_path, capsys):
        p = tmp_path / "llama.json"
        p.write_text(json.dumps({"d_model": 4096, "n_heads": 32, "d_ffn": 11008, "n_layers": 32,
                                 "max_seq_len": 4096, "vocab_size": 32000}))
        main(["count-params", "--config", str(p), "--adapter", "pedro"])
        main(["count-params", "--config", str(p), "--adapter", "pedro", "--include-bias"])
        main(["count-params", "--config", str(p), "--adapter", "lora"])
        assert capsys.readouterr().out.split() == ["8945664", "9560064", "2097152"]


class TestTrainEval:
    def test_same_seed_identical_metrics(self, cfg_path, tmp_path, capsys):
        outs = []
        for k in range(2):
            d = tmp_path / f"r{k}"
            assert main(["train", "--config", str(cfg_path), "--task", "copy", "--adapter", "pedro",
                         "--seed", "4", "--out-dir", str(d)]) == 0
            outs.append((d / "pedro-copy-seed4.metrics.csv").read_bytes())
        assert outs[0] == outs[1]
        assert outs[0].splitlines()[0] == b"step,split,loss,accuracy,lr,theta_updates,omega_updates"

    def test_eval_reproduces_training_eval(self, cfg_path, tmp_path, capsys):
        d = tmp_path / "runs"
        assert main(["train", "--config", str(cfg_path), "--task", "copy", "--adapter", "lora",
                     "--seed", "1", "--out-dir", str(d)]) == 0
        trained = json.loads((d / "lora-copy-seed1.eval.json").read_text())
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(d / "lora-copy-seed1.ckpt"), "--task", "copy"]) == 0
        metrics = _json_out(capsys)
        assert set(metrics) == {"accuracy", "loss", "n_examples"}
        assert abs(metrics["loss"] - trained["test_loss"]) <= 1e-6
        assert metrics["accuracy"] == trained["test_accuracy"]

    def test_external_backbone_reused(self, cfg_path, tmp_path, capsys):
        bb = tmp_path / "bb.ckpt"
        assert main(["pretrain", "--config", str(cfg_path), "--out", str(bb)]) == 0
        digest = _json_out(capsys)["backbone_sha256"]
        assert main(["train", "--config", str(cfg_path), "--task", "copy", "--adapter", "ia3",
                     "--backbone", str(bb), "--out-dir", str(tmp_path / "runs")]) == 0
        echo = json.loads((tmp_path / "runs" / "ia3-copy-seed0.eval.json").read_text())
        assert echo["adapter"] == "ia3"
        from pedro.pipeline import backbone_hash, load_run

        model, _, _, meta = load_run(tmp_path / "runs" / "ia3-copy-seed0.ckpt")
        assert backbone_hash(model) == digest == meta["backbone_sha256"]


class TestReport:
    def test_median_over_five_seeds_and_figures(self, cfg_path, tmp_path, capsys):
        runs = tmp_path / "runs"
        for seed in range(5):
            assert main(["train", "--config", str(cfg_path), "--task", "copy", "--adapter", "pedro",
                         "--seed", str(seed), "--out-dir", str(runs)]) == 0
        assert main(["bench", "--config", str(cfg_path), "--adapter", "pedro", "--prompt-len", "16",
                     "--gen-len", "4", "--trials", "2", "--warmup", "0", "--out", str(runs / "pedro.bench.json")]) == 0
        capsys.readouterr()
        assert main(["report", "--runs", str(runs)]) == 0
        out = capsys.readouterr().out
        accs = [json.loads((runs / f"pedro-copy-seed{s}.eval.json").read_text())["test_accuracy"] for s in range(5)]
        with open(runs / "summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1 and rows[0]["n_seeds"] == "5"
        assert float(rows[0]["median_test_accuracy"]) == pytest.approx(statistics.median(accs))
        assert out.startswith("adapter,task,n_seeds,seeds,median_test_accuracy,median_test_loss")
        for name in ("val_loss.png", "activations.png", "bench_tps.png"):
            assert (runs / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_empty_runs_dir(self, tmp_path, capsys):
        assert main(["report", "--runs", str(tmp_path)]) == 2


class TestBenchCli:
    def test_report_fields_and_figure(self, cfg_path, tmp_path, capsys):
        fig = tmp_path / "tps.png"
        assert main(["bench", "--config", str(cfg_path), "--adapter", "pedro", "--prompt-len", "12",
                     "--gen-len", "5", "--beam", "3", "--trials", "2", "--warmup", "1", "--figure", str(fig)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["adapter_invocations_prefill"] == 2
        assert report["adapter_invocations_decode"] == 0
        assert report["beam"] == 3 and report["tokens_per_second"] > 0
        assert fig.read_bytes()[:4] == b"\x89PNG"

    def test_lora_mac_formula(self, cfg_path, capsys):
        assert main(["bench", "--config", str(cfg_path), "--adapter", "lora", "--prompt-len", "8",
                     "--gen-len", "3", "--trials", "1", "--warmup", "0"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["extra_mac_per_decode_step"] == 2 * 2 * 4 * (16 + 16)
        assert report["adapter_invocations_decode"] == 3 * 2 * 2


def test_export_task(cfg_path, tmp_path, capsys):
    assert main(["export-task", "--config", str(cfg_path), "--task", "copy", "--out-dir", str(tmp_path)]) == 0
    assert _json_out(capsys) == {"train": 32, "val": 8, "test": 8}
    lines = (tmp_path / "copy.train.tsv").read_text().splitlines()
    assert len(lines) == 32 and all(line.count("\t") == 1 for line in lines)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pedro.cli", "count-params", "--adapter", "none"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0"
