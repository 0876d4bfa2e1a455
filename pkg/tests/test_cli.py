"""Command line, verify report and the ablation harness."""

import csv
import subprocess
import sys

import pytest

from mcsd.ablation import SUMMARY_HEADER, ablation_run, final_loss
from mcsd.block import MCSDConfig
from mcsd.cli import main, parse_prompt
from mcsd.errors import ConfigError
from mcsd.model import ModelConfig, init_params
from mcsd.checkpoint import save_checkpoint
from mcsd.train import TrainConfig, reference_corpus_path
from mcsd.verify import block_equivalence, decay_state_fault, run_verify

SMALL_TRAIN = "model_dim = 16\nchannels = 2\nlayers = 1\nseq_len = 16\nbatch_size = 2\n" \
              "warmup_steps = 2\ntotal_steps = 6\n"


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(reference_corpus_path().read_bytes()[:5000])
    return path


@pytest.fixture
def checkpoint(tmp_path):
    cfg = ModelConfig(model_dim=16, channels=2, layers=1, seq_len=16)
    path = tmp_path / "m.mcsd"
    save_checkpoint(path, init_params(cfg, seed=0, std=0.3), cfg)
    return path


class TestVerify:
    def test_fresh_model_passes(self):
        results = run_verify(seed=1, quick=True)
        assert all(r.passed for r in results), [r.as_row() for r in results if not r.passed]
        names = {r.name for r in results}
        assert {"slope_recurrence_vs_bruteforce", "decay_recurrence_vs_bruteforce", "causality_bitwise",
                "grad_full_model", "state_bytes_constant"} <= names

    def test_fault_injection_reports_error(self):
        cfg = MCSDConfig(8, 2, 16)
        err = block_equivalence(cfg, 16, corrupt=decay_state_fault(cfg, at=5, delta=0.5))
        assert err > 1e-3

    def test_cli_report_and_exit_code(self, capsys, checkpoint):
        assert main(["verify", "--quick", "--checkpoint", str(checkpoint), "--seed", "3"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "check,tolerance,observed,status"
        assert out[-1].startswith("# ") and "passed" in out[-1]
        assert all(line.endswith(",pass") for line in out[1:-1])

    def test_cli_exit_one_on_failure(self, capsys, monkeypatch):
        import mcsd.verify as verify

        real = verify.run_verify

        def broken(*args, **kwargs):
            results = real(*args, **kwargs)
            results[0].passed = False
            return results

        monkeypatch.setattr(verify, "run_verify", broken)
        assert main(["verify", "--quick"]) == 1
        assert ",FAIL" in capsys.readouterr().out


class TestAblation:
    def test_five_aligned_csvs_and_summary(self, corpus, tmp_path):
        mcfg = ModelConfig(model_dim=8, channels=2, layers=1, seq_len=16)
        tcfg = TrainConfig(batch_size=2, seq_len=16, warmup_steps=2, total_steps=5)
        results = ablation_run(corpus, mcfg, tcfg, tmp_path / "abl")
        assert [r.variant for r in results] == ["slope_decay", "slope_only", "decay_only", "slope_slope",
                                                "decay_decay"]
        grids = [[row[0] for row in csv.reader(open(r.loss_csv))] for r in results]
        assert all(g == grids[0] for g in grids) and len(grids[0]) == 6
        with open(tmp_path / "abl" / "summary.csv") as fh:
            summary = list(csv.reader(fh))
        assert tuple(summary[0]) == SUMMARY_HEADER and len(summary) == 6

    def test_final_loss_is_tail_median(self):
        assert final_loss([9.0] * 90 + [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]) == 5.5
        assert final_loss([4.0]) == 4.0


class TestCommands:
    def test_prompt_parsing(self):
        assert parse_prompt("hi") == b"hi"
        assert parse_prompt("hex:00ff41") == b"\x00\xffA"
        with pytest.raises(ConfigError):
            parse_prompt("hex:zz")

    def test_train_then_generate(self, corpus, tmp_path, capsysbinary):
        conf = tmp_path / "t.conf"
        conf.write_text(SMALL_TRAIN)
        out = tmp_path / "run"
        assert main(["train", "--config", str(conf), "--corpus", str(corpus), "--out", str(out)]) == 0
        assert (out / "model.mcsd").exists() and (out / "loss.csv").exists()
        capsysbinary.readouterr()
        assert main(["generate", "--checkpoint", str(out / "model.mcsd"), "--prompt", "ROMEO:",
                     "--max-new", "12", "--sampler", "topk:5", "--seed", "2"]) == 0
        text = capsysbinary.readouterr().out
        assert len(text) == 13  # 12 bytes plus newline

    def test_generate_hex_prompt_greedy_is_deterministic(self, checkpoint, capsysbinary):
        args = ["generate", "--checkpoint", str(checkpoint), "--prompt", "hex:0102", "--max-new", "5"]
        main(args)
        first = capsysbinary.readouterr().out
        main(args)
        assert capsysbinary.readouterr().out == first

    def test_bench_writes_csv(self, tmp_path):
        spec = tmp_path / "b.conf"
        spec.write_text("seq_lens = 4\nbatch_sizes = 1\nprompt_len = 4\nmodel_dim = 8\nchannels = 2\nlayers = 1\n")
        out = tmp_path / "b.csv"
        assert main(["bench", "--spec", str(spec), "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 3

    def test_ablate_subset(self, corpus, tmp_path):
        conf = tmp_path / "a.conf"
        conf.write_text(SMALL_TRAIN + "variant = decay_only\n")
        assert main(["ablate", "--config", str(conf), "--corpus", str(corpus), "--out", str(tmp_path / "a"),
                     "--variants", "slope_only,decay_only"]) == 0
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["decay_only", "slope_only", "summary.csv"]

    @pytest.mark.parametrize("argv", [[], ["nope"], ["generate", "--checkpoint", "x"], ["train"]])
    def test_usage_errors_exit_two(self, argv, capsys):
        assert main(argv) == 2

    def test_bad_config_value_exits_two(self, corpus, tmp_path):
        conf = tmp_path / "t.conf"
        conf.write_text("model_dim = 10\nchannels = 4\n")
        assert main(["train", "--config", str(conf), "--corpus", str(corpus), "--out", str(tmp_path)]) == 2

    def test_bad_sampler_exits_two(self, checkpoint):
        assert main(["generate", "--checkpoint", str(checkpoint), "--prompt", "a", "--sampler", "beam"]) == 2

    def test_missing_files_exit_three(self, tmp_path, corpus):
        assert main(["generate", "--checkpoint", str(tmp_path / "none.mcsd"), "--prompt", "a"]) == 3
        assert main(["train", "--config", str(tmp_path / "none.conf"), "--out", str(tmp_path)]) == 3
        assert main(["train", "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 3
        assert main(["bench", "--spec", str(tmp_path / "none.conf"), "--out", str(tmp_path / "x.csv")]) == 3

    def test_corrupt_checkpoint_exits_three(self, tmp_path):
        bad = tmp_path / "bad.mcsd"
        bad.write_bytes(b"MCSD\x00")
        assert main(["verify", "--checkpoint", str(bad)]) == 3

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "mcsd", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "verify" in proc.stdout and "ablate" in proc.stdout
