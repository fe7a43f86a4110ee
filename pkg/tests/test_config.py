import pytest

from modil.config import SCHEMA, ConfigError, RunConfig, load_config, parse_config
from modil.learners import STRATEGIES, LearnerConfig
from modil.sigmod import CATALOG


def test_defaults():
    cfg = RunConfig()
    assert cfg.strategies == list(STRATEGIES)
    assert cfg["dataset"]["catalog"] == list(CATALOG)
    assert cfg["memory"]["budget"] == 400
    assert cfg.class_seed == 0
    lc = cfg.learner_config("bic")
    assert lc.budget == 400 and lc.strategy == "bic" and lc.length == 256
    # learner keys follow the library defaults except for the desk-scale overrides
    assert (lc.epochs_per_task, lc.lr, lc.grad_clip) == (12, 0.02, 1.0)
    assert lc.temperature == LearnerConfig().temperature and lc.margin == LearnerConfig().margin


def test_defaults_are_not_shared():
    a, b = RunConfig(), RunConfig()
    a["dataset"]["catalog"].append("X")
    assert "X" not in b["dataset"]["catalog"]
    assert "X" not in SCHEMA["dataset"]["catalog"][1]


def test_parse_overrides():
    cfg = parse_config("""
[dataset]
catalog = BPSK, QPSK
snr_db = 0, 10
[schedule]
m = 1
k = 1
class_seed = 7
[learner]
strategy = icarl
lr = 0.05
lr_milestones = 0.5
icarl_nme = false
[memory]
budget = 100
[output]
timing = no
""")
    assert cfg["dataset"]["catalog"] == ["BPSK", "QPSK"]
    assert cfg["dataset"]["snr_db"] == [0, 10]
    assert cfg.class_seed == 7
    lc = cfg.learner_config("icarl", seed=3)
    assert (lc.lr, lc.lr_milestones, lc.icarl_nme, lc.budget, lc.seed) == (0.05, (0.5,), False, 100, 3)
    assert cfg["output"]["timing"] is False
    kw = cfg.dataset_kwargs()
    assert kw["snr_list"] == (0, 10) and kw["sps"] == 2


def test_round_trip_text():
    cfg = parse_config("[learner]\nstrategy = bic,lucir\nseed = 4\n[memory]\npolicy = herding\n")
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values


@pytest.mark.parametrize("text,line,needle", [
    ("[dataset]\nsnr_db = 20\n[bogus]\nx = 1\n", 3, "unknown section"),
    ("[dataset]\nsnr_db = 20\nfoo = 1\n", 3, "unknown key"),
    ("[learner]\n\nlr = fast\n", 3, "bad value"),
    ("[learner]\nstrategy = ewc\n", 2, "unknown strategy"),
    ("[memory]\n# comment\npolicy = kmeans\n", 3, "policy"),
    ("[dataset]\ncatalog = BPSK, FSK\n", 2, "FSK"),
    ("[output]\nformats = csv, png\n", 2, "png"),
    ("[output]\ntiming = maybe\n", 2, "boolean"),
])
def test_errors_name_the_line(text, line, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.ini")
    msg = str(exc.value)
    assert msg.startswith(f"run.ini:{line}:"), msg
    assert needle in msg


def test_unparsable_line():
    with pytest.raises(ConfigError, match=r"run.ini:2:"):
        parse_config("[dataset]\nthis line has no separator\n", "run.ini")


def test_learner_level_validation_surfaces():
    with pytest.raises(ConfigError, match="val_fraction"):
        parse_config("[learner]\nval_fraction = 0.9\n")


def test_load_config(tmp_path):
    assert load_config(None).values == RunConfig().values
    p = tmp_path / "c.ini"
    p.write_text("[memory]\nbudget = 50\n")
    assert load_config(p)["memory"]["budget"] == 50
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")
