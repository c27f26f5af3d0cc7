"""End-to-end tests of the command-line surface."""

import numpy as np
import pytest

from segcvae import cli, corpus
from segcvae.corpus import DialoguePair
from segcvae.errors import ConfigError, MissingKey

CORPUS_TEXT = """\
hello there
hi
hi

hello there
what ?
ok

good morning
ok

something new
fresh reply
"""

CONFIG_TEXT = """\
# desk-scale run
learning_rate = 0.003
batch_size = 4
epochs = 2
snorm_step = 100
kl_anneal_steps = 200
vocab_cap = 64
max_clen = 8
N_emb = 8
N_hid = 8
d_z = 4
m = 2
chan = 2
M = 2
tau = 0.1
"""


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(CORPUS_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def data_dir(tmp_path):
    pairs = [DialoguePair((f"q{i}", "and", "you"), (f"a{i}", "sure")) for i in range(12)]
    d = tmp_path / "data"
    d.mkdir()
    corpus.write_pairs(d / "train.tsv", pairs)
    corpus.write_pairs(d / "valid.tsv", pairs[:4])
    corpus.write_pairs(d / "test.tsv", pairs[:4])
    return d


class TestParseConfig:
    def test_values_and_defaults(self, config_file):
        cfg, paths = cli.parse_config(config_file)
        assert cfg.learning_rate == 0.001 or cfg.learning_rate == 0.003
        assert cfg.learning_rate == 0.003
        assert cfg.seed == 123456  # absent key keeps its default
        assert cfg.kernel_width == 2
        assert paths == {}

    def test_negative_dimension_reports_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("m = -1\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r":1:.*'m'"):
            cli.parse_config(path)

    def test_unknown_key_reports_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("tau = 0.1\nwhatever = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r":2:.*unknown key"):
            cli.parse_config(path)

    def test_type_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("batch_size = many\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r":1:.*'batch_size'"):
            cli.parse_config(path)

    def test_path_keys_pass_through(self, tmp_path):
        path = tmp_path / "paths.cfg"
        path.write_text("data_dir = /somewhere\ncorpus = raw.txt\n", encoding="utf-8")
        _, paths = cli.parse_config(path)
        assert paths == {"data_dir": "/somewhere", "corpus": "raw.txt"}

    def test_snapshot_roundtrips(self, config_file, tmp_path):
        cfg, _ = cli.parse_config(config_file)
        snapshot = cli.config_snapshot(cfg)
        rewritten = tmp_path / "snap.cfg"
        rewritten.write_text(
            "".join(f"{k} = {v}\n" for k, v in snapshot.items()), encoding="utf-8")
        cfg2, _ = cli.parse_config(rewritten)
        assert cfg2 == cfg


class TestDispatchBasics:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli.dispatch(["frobnicate"]) == 2

    def test_missing_required_flag_is_usage_error(self):
        assert cli.dispatch(["generate"]) == 2

    def test_domain_error_exits_one(self, tmp_path, capsys):
        code = cli.dispatch(["train", "--in", str(tmp_path / "nope"),
                             "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestCdmStats:
    def test_prints_report(self, corpus_file, capsys):
        assert cli.dispatch(["cdm-stats", "--in", str(corpus_file)]) == 0
        out = capsys.readouterr().out
        assert "o2m_pair_fraction:" in out and "cdm_fraction:" in out

    def test_optional_report_file(self, corpus_file, tmp_path, capsys):
        out_dir = tmp_path / "stats"
        assert cli.dispatch(["cdm-stats", "--in", str(corpus_file),
                             "--out", str(out_dir)]) == 0
        assert (out_dir / "cdm_report.txt").exists()
        assert (out_dir / "manifest.txt").exists()


class TestPrepareData:
    def test_o2m_dataset(self, corpus_file, tmp_path, capsys):
        out_dir = tmp_path / "o2m"
        code = cli.dispatch(["prepare-data", "--in", str(corpus_file),
                             "--out", str(out_dir), "--mode", "o2m"])
        assert code == 0
        pairs = []
        for name in ("train", "valid", "test"):
            pairs += corpus.read_pairs(out_dir / f"{name}.tsv")
        assert len(pairs) == 2  # the two responses of "hello there"
        assert all(p.context == ("hello", "there") for p in pairs)
        manifest = (out_dir / "manifest.txt").read_text()
        assert "command = prepare-data" in manifest
        assert "input.corpus.txt = sha256:" in manifest

    def test_general_split_keeps_everything(self, corpus_file, tmp_path):
        out_dir = tmp_path / "gen"
        assert cli.dispatch(["prepare-data", "--in", str(corpus_file),
                             "--out", str(out_dir), "--mode", "general"]) == 0
        total = sum(len(corpus.read_pairs(out_dir / f"{n}.tsv"))
                    for n in ("train", "valid", "test"))
        assert total == 6  # 4 dialogues: (3-1)+(3-1)+(2-1)+(2-1) adjacent pairs


class TestTrainGenerateEvaluate:
    @pytest.fixture
    def run_dir(self, config_file, data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.dispatch(["train", "--config", str(config_file),
                             "--in", str(data_dir), "--out", str(out)])
        assert code == 0, capsys.readouterr().err
        return out

    def test_train_writes_all_artifacts(self, run_dir):
        for name in ("manifest.txt", "vocab.txt", "train_log.txt", "checkpoint.bin"):
            assert (run_dir / name).exists()
        log = (run_dir / "train_log.txt").read_text().splitlines()
        assert log[0].startswith("step=0 elbo=")
        assert any(line.startswith("epoch=0 val_ppl=") for line in log)

    def test_manifest_written_with_config_snapshot(self, run_dir):
        manifest = (run_dir / "manifest.txt").read_text()
        assert "config.m = 2" in manifest
        assert "config.tau = 0.1" in manifest
        assert "seed = 123456" in manifest
        assert "input.train.tsv = sha256:" in manifest

    def test_generate_and_evaluate(self, run_dir, data_dir, tmp_path, capsys):
        gen_dir = tmp_path / "gen"
        code = cli.dispatch(["generate", "--run", str(run_dir),
                             "--data", str(data_dir / "test.tsv"),
                             "--out", str(gen_dir), "--n-responses", "4",
                             "--seed", "7"])
        assert code == 0
        lines = (gen_dir / "generated.tsv").read_text().splitlines()
        assert len(lines) == 4  # four distinct test contexts
        assert all(len(line.split("\t")) == 5 for line in lines)

        ckpt_before = (run_dir / "checkpoint.bin").read_bytes()
        capsys.readouterr()
        code = cli.dispatch(["evaluate", "--in", str(gen_dir / "generated.tsv"),
                             "--data", str(data_dir / "test.tsv"),
                             "--run", str(run_dir), "--out", str(tmp_path / "metrics")])
        assert code == 0
        out = capsys.readouterr().out
        assert "distinct-1:" in out and "ppl:" in out and "bleu-1:" in out
        assert (tmp_path / "metrics" / "metrics.txt").exists()
        assert (run_dir / "checkpoint.bin").read_bytes() == ckpt_before

    def test_ablate_sets_flag(self, config_file, data_dir, tmp_path):
        out = tmp_path / "ablate_run"
        code = cli.dispatch(["ablate", "--config", str(config_file),
                             "--in", str(data_dir), "--out", str(out),
                             "--drop", "san", "--drop", "is"])
        assert code == 0
        manifest = (out / "manifest.txt").read_text()
        assert "config.no_san = true" in manifest
        assert "config.no_is = true" in manifest
        log = (out / "train_log.txt").read_text()
        assert " san=0.0 " in log.splitlines()[0]


class TestGradcheckCommand:
    def test_passes_and_reports(self, capsys):
        assert cli.dispatch(["gradcheck", "--rounds", "1"]) == 0
        out = capsys.readouterr().out
        assert "loss_total" in out and "FAIL" not in out
