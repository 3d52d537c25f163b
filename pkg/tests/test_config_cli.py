import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustnd import cli
from robustnd import config as C
from robustnd import eval as E
from robustnd.errors import ConfigError

TINY = ["dataset.train_id=48", "dataset.test_id=16", "dataset.test_ood=16", "dataset.aux_per_class=40",
        "dataset.shifted_pool=40", "trainer.epochs=1", "trainer.batch_size=16", "trainer.pretrain_epochs=2",
        "trainer.pretrain_min_accuracy=0.0", "eval.noise=true"]


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "empty.txt").write_text("")
    assert C.load(tmp_path / "empty.txt") == C.ExperimentConfig()


def test_negative_gamma_names_key():
    with pytest.raises(ConfigError, match="loss.gamma"):
        C.parse_text("loss.gamma = -1\n")


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match="line 2"):
        C.parse_text("seed = 3\nloss.gama = 0.2\n")


def test_duplicate_key_in_file():
    with pytest.raises(ConfigError):
        C.parse_text("seed = 1\nseed = 2\n")
    assert C.parse_text("seed = 1\n", ["seed=4", "seed=5"]).seed == 5


def test_comments_and_lists():
    cfg = C.parse_text("# header\nood.alpha_range = [0.2, 0.4]  # inline\ntransforms.hard = [\"rotation\"]\n")
    assert cfg.ood.alpha_range == [0.2, 0.4]
    assert cfg.transforms.hard == ["rotation"]
    with pytest.raises(ConfigError, match="transforms.hard"):
        C.parse_text("transforms.hard = [\"cutout\"]\n")


@given(st.integers(0, 1000), st.floats(0.01, 5.0), st.sampled_from(["none", "core", "global", "random_region"]),
       st.sampled_from(["main", "appendix"]), st.booleans())
def test_echo_roundtrip(seed, gamma, strategy, preset, use_ce):
    loss = "ts" if strategy == "none" else "ocl"
    use_ce = use_ce and strategy != "none"
    text = (f"seed = {seed}\nloss.gamma = {gamma!r}\nood.strategy = {strategy}\nloss.variant = {loss}\n"
            f"trainer.preset = {preset}\nloss.use_ce = {str(use_ce).lower()}\n")
    cfg = C.parse_text(text)
    again = C.parse_text(C.dump(cfg))
    assert again == cfg
    assert C.dump(again) == C.dump(cfg)


def test_preset_resolves_lr():
    cfg = C.parse_text("trainer.preset = appendix\n")
    tc = cfg.train_config()
    assert math.isclose(tc.lr, 5e-5) and math.isclose(tc.weight_decay, 1e-4)
    tc = C.parse_text("trainer.lr = 0.01\n").train_config()
    assert tc.lr == 0.01


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setenv("RND_OUT", str(tmp_path))
    assert cli.main(["theory-check", "--n", "4", "loss.gamma=-1"]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--run", str(tmp_path / "nowhere")]) == cli.EXIT_MISSING
    assert cli.main(["report", "--runs", str(tmp_path / "nowhere")]) == cli.EXIT_MISSING
    assert cli.main(["ablate", "--setups", "Z"]) == cli.EXIT_CONFIG
    assert cli.main(["pretrain", "trainer.pretrain_epochs=1", "trainer.pretrain_min_accuracy=1.0",
                     "dataset.aux_per_class=8"]) == cli.EXIT_TRAIN


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.setenv("RND_OUT", str(root))
    try:
        assert cli.main(["gen-data", *TINY]) == 0
        assert cli.main(["train", *TINY]) == 0
        assert cli.main(["eval", *TINY]) == 0
        assert cli.main(["ablate", "--setups", "A,E", *TINY]) == 0
        assert cli.main(["report", *TINY]) == 0
        assert cli.main(["craft-preview", "--count", "2", *TINY]) == 0
        assert cli.main(["theory-check", "--n", "6", *TINY]) == 0
    finally:
        mp.undo()
    return root


def test_every_artifact_dir_has_provenance(cli_root):
    dirs = [cli_root / d for d in ("data", "teacher", "train", "theory", "ablate/A", "ablate/E")]
    for d in dirs:
        assert (d / "config.txt").exists(), d
        assert (d / "seeds.txt").exists(), d
    cfg = C.load(cli_root / "train" / "config.txt")
    assert cfg.dataset.train_id == 48 and cfg.trainer.epochs == 1


def read_table(path):
    import csv

    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_ablate_two_rows(cli_root):
    rows = read_table(cli_root / "ablate" / "ablation.csv")
    assert sorted({r["run"] for r in rows}) == ["A", "E"]
    assert len(rows) == 2 * 3  # one line per run and evaluation tag


def test_report_matches_eval(cli_root):
    rows = read_table(cli_root / "report" / "report.csv")
    for name in ("A", "E"):
        direct = E.reports_from_scores(cli_root / "ablate" / name / "scores.tsv")
        for r in rows:
            if r["run"] == name:
                assert abs(float(r["auroc"]) - direct[r["tag"]].auroc) < 1e-9
    assert (cli_root / "report" / "report.svg").read_text().startswith("<svg")


def test_eval_writes_metrics(cli_root):
    d = cli_root / "train"
    assert (d / "metrics.json").exists() and (d / "scores.tsv").exists()
    reports = E.reports_from_scores(d / "scores.tsv")
    assert set(reports) >= {"standard", "robust", "far_ood"}


def test_craft_preview_pngs(cli_root):
    assert len(list((cli_root / "preview").glob("*.png"))) >= 8


def test_theory_outputs(cli_root):
    rows = (cli_root / "theory" / "theory.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["severity", "core_distance", "eval_gap"]
    assert len(rows) == 6
