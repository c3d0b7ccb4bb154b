import csv
import json
import shutil

import numpy as np
import pytest

from sinklab import cli
from sinklab.cli import COMPARE_COLUMNS, RunConfig, UsageError, apply_overrides, build_parser, main
from sinklab.errors import ConfigError
from sinklab.io import load_checkpoint, read_report

TINY = {
    "model": {"d_model": 16, "d_ff": 32, "d_head": 8, "n_heads": 2, "n_layers": 2, "max_seq_len": 32},
    "train": {"peak_lr": 3e-3, "min_lr": 3e-4, "warmup_iters": 2, "max_iters": 6, "batch_size": 4,
              "block_size": 32, "eval_interval": 3, "eval_batches": 1, "checkpoint_interval": 100},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.txt").write_bytes(b"for i in range(10):\n    print(i * i)\n" * 300)
    (root / "tiny.json").write_text(json.dumps(TINY))
    return root


def train(ws, out, *extra):
    return main(["train", "--config", str(ws / "tiny.json"), "--corpus", str(ws / "corpus.txt"),
                 "--out", str(out), *extra])


@pytest.fixture(scope="module")
def run(workspace):
    out = workspace / "runs" / "headnorm_seed1"
    assert train(workspace, out, "--variant", "headnorm", "--seed", "1") == 0
    return out


def test_train_smoke_and_layout(run):
    ck = load_checkpoint(run / "checkpoints" / "final.snkl")
    assert ck.model.config.variant.value == "headnorm" and ck.train_config.seed == 1
    assert (run / "loss_log.csv").exists() and (run / "reports" / "final_diagnostics.csv").exists()
    assert json.loads((run / "config.json").read_text())["corpus"].endswith("corpus.txt")


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
def test_train_variants_and_max_iters_override(workspace, tmp_path, variant):
    assert train(workspace, tmp_path, "--variant", variant, "--max-iters", "4") == 0
    ck = load_checkpoint(tmp_path / "checkpoints" / "final.snkl")
    assert ck.header["train"]["max_iters"] == 4 and ck.header["variant"] == variant and ck.step == 4


def test_train_config_errors_exit_2(workspace, tmp_path, capsys):
    assert train(workspace, tmp_path, "--variant", "relu") == 2
    assert "relu" in capsys.readouterr().err
    assert train(workspace, tmp_path, "--set", "train.grad_clip=0") == 2
    assert "grad_clip" in capsys.readouterr().err
    assert main(["train", "--config", str(workspace / "tiny.json"), "--corpus", str(tmp_path / "nope")]) == 2
    assert main(["train", "--config", str(workspace / "tiny.json")]) == 2
    assert main(["train", "--bogus-flag"]) == 2


def test_set_overrides_and_default_out_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("SINKLAB_OUT", str(tmp_path))
    rc = main(["train", "--config", str(workspace / "tiny.json"), "--corpus", str(workspace / "corpus.txt"),
               "--set", "train.max_iters=3", "--set", "train.seed=5", "--set", "model.variant=\"sigmoid\""])
    assert rc == 0
    ck = load_checkpoint(tmp_path / "sigmoid_seed5" / "checkpoints" / "final.snkl")
    assert ck.step == 3 and ck.train_config.seed == 5


def test_apply_overrides_and_run_config_validation(workspace):
    raw = apply_overrides({}, ["train.peak_lr=3e-4", "model.variant=headnorm", "analyses=[\"sink_score\"]"])
    assert raw == {"train": {"peak_lr": 3e-4}, "model": {"variant": "headnorm"}, "analyses": ["sink_score"]}
    with pytest.raises(UsageError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(UsageError):
        apply_overrides({"train": 3}, ["train.seed=1"])
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"analyses": ["bogus"]})
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.from_dict({"corpus": "/nonexistent/corpus.bin"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**TINY, "interventions": [{"kind": "mask_block", "position": 40}]})
    spec = [{"kind": "variance_amplify", "position": 10, "factor": 4.0, "layers": [1, 1]}]
    cfg = RunConfig.from_dict({**TINY, "corpus": str(workspace / "corpus.txt"), "interventions": spec})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_analyze_metrics_and_determinism(run, tmp_path):
    ck = str(run / "checkpoints" / "final.snkl")
    args = ["analyze", ck, "--metrics", "sink_score,positional_variance", "--random-tokens", "8x32"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    names = {r["metric"] for r in read_report(tmp_path / "a.csv")}
    assert "sink_score" in names and any(n.startswith("positional_variance") for n in names)
    assert main(args + ["--seed", "1", "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_bytes() != (tmp_path / "a.csv").read_bytes()


def test_analyze_effective_rank_shape(run, tmp_path):
    ck = str(run / "checkpoints" / "final.snkl")
    assert main(["analyze", ck, "--metrics", "effective_rank", "--random-tokens", "3x16",
                 "--format", "json", "--out", str(tmp_path / "er.json")]) == 0
    recs = [r for r in json.loads((tmp_path / "er.json").read_text()) if r["metric"] == "effective_rank"]
    assert len(recs) == 3 * 2 and sorted({r["layer"] for r in recs}) == [0, 1]


def test_analyze_corpus_sample_and_errors(run, workspace, tmp_path, capsys):
    ck = str(run / "checkpoints" / "final.snkl")
    assert main(["analyze", ck, "--metrics", "sink_score", "--corpus-sample", "4x32",
                 "--corpus", str(workspace / "corpus.txt"), "--out", str(tmp_path / "s.csv")]) == 0
    assert main(["analyze", ck, "--metrics", "sink_score,nonsense"]) == 2
    err = capsys.readouterr().err
    assert "nonsense" in err and "effective_rank" in err
    assert main(["analyze", ck, "--metrics", "sink_score", "--random-tokens", "2x64"]) == 2
    assert main(["analyze", ck, "--metrics", "sink_score", "--random-tokens", "two"]) == 2
    assert main(["analyze", str(tmp_path / "missing.snkl"), "--metrics", "sink_score"]) == 3


def test_intervene_identity_and_side_by_side(run, tmp_path, capsys):
    ck = str(run / "checkpoints" / "final.snkl")
    rc = main(["intervene", ck, "--kind", "variance_amplify", "--factor", "1", "--position", "10",
               "--random-tokens", "8x32", "--mu-sequences", "4", "--out", str(tmp_path / "v.csv")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "variance_amplify" in out and "norm_scale" in out
    recs = read_report(tmp_path / "v.csv")
    deltas = [r["value"] for r in recs if r["metric"].endswith((".recv_delta", ".sink_score_delta"))]
    assert deltas and max(abs(v) for v in deltas) < 1e-6
    assert {r["metric"].split(".")[0] for r in recs} == {"variance_amplify", "norm_scale"}


def test_intervene_mask_block_and_errors(run, tmp_path):
    ck = str(run / "checkpoints" / "final.snkl")
    assert main(["intervene", ck, "--kind", "mask_block", "--random-tokens", "4x32",
                 "--out", str(tmp_path / "m.csv")]) == 0
    recs = read_report(tmp_path / "m.csv")
    assert {r["metric"] for r in recs} == {"mask_block.recv_delta", "mask_block.recv_base",
                                            "mask_block.recv_intervened", "mask_block.sink_score_delta"}
    # layer 0 attention already reads the modified mask
    d0 = [r["value"] for r in recs if r["metric"] == "mask_block.recv_delta" and r["layer"] == 0
          and r["position"] == 10][0]
    assert d0 != 0
    assert main(["intervene", ck, "--kind", "mask_block", "--position", "32", "--random-tokens", "4x32"]) == 2
    assert main(["intervene", ck, "--kind", "mask_block", "--layers", "0:5", "--random-tokens", "4x32"]) == 2
    assert main(["intervene", ck, "--kind", "shuffle"]) == 2


def test_compare_table(workspace, run, tmp_path, capsys):
    twin = tmp_path / "twin"
    shutil.copytree(run, twin)
    assert main(["compare", str(run), str(twin), "--out", str(tmp_path / "cmp.json")]) == 0
    out = capsys.readouterr().out
    header = out.splitlines()[0]
    assert all(c in header for c in COMPARE_COLUMNS)
    table = json.loads((tmp_path / "cmp.json").read_text())
    row = table["headnorm"]
    assert row["n"] == 2 and all(row[c]["std"] == 0 for c in COMPARE_COLUMNS)
    with open(run / "loss_log.csv") as fh:
        last = list(csv.DictReader(fh))[-1]
    assert row["Train Loss"]["mean"] == float(last["train_loss"])


def test_compare_incomplete_run_exit_2(run, tmp_path, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(run, broken)
    (broken / "loss_log.csv").unlink()
    assert main(["compare", str(run), str(broken)]) == 2
    assert "loss_log.csv" in capsys.readouterr().err
    assert main(["compare", str(run)]) == 2


def test_help_lists_defaults_for_every_flag():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        for action in sub._actions:
            if action.option_strings and action.dest != "help":
                assert "default" in (action.help or ""), (name, action.dest)
    with pytest.raises(SystemExit) as e:
        parser.parse_args(["train", "--help"])
    assert e.value.code == 0


def test_random_tokens_cover_vocab_and_are_seeded():
    a = cli.random_tokens(64, 128, 259, 0)
    assert np.array_equal(a, cli.random_tokens(64, 128, 259, 0))
    assert a.min() == 0 and a.max() == 258
