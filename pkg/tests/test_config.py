import pytest

from gaitsf.config import (ConfigError, RunConfig, apply_overrides, describe_keys, dump_config,
                           load_config, parse_config, parse_set)


def test_defaults():
    c = RunConfig()
    assert (c.baseline_s_up, c.sf_s_up, c.tau, c.momentum, c.a) == (0.7, 0.3, 0.05, 0.2, 2)
    assert (c.c_low, c.s_o, c.lambda_base) == (0.8, 0.7, 0.005)
    assert (c.batch_clusters, c.batch_seqs, c.lr, c.weight_decay) == (8, 16, 1e-4, 5e-4)
    assert (c.baseline_epochs, c.sf_epochs, c.baseline_iters, c.sf_iters) == (50, 50, 50, 100)
    assert c.milestones == (3500, 8500) and c.n_neighbors == 40


def test_parse_with_comments_and_types():
    c = parse_config("""
# a comment
seed = 7
views = 0, 90   # trailing comment
mutual_knn = yes
tau = 0.1
""")
    assert c.seed == 7 and c.views == (0, 90) and c.mutual_knn is True and c.tau == 0.1


@pytest.mark.parametrize("text,line,frag", [
    ("seed = 1\nbogus = 3\n", 2, "unknown key"),
    ("seed = 1\n\nn_frames = x\n", 3, "n_frames"),
    ("tau = 0\n", 1, "tau"),
    ("just words\n", 1, "key = value"),
    ("a = 1\na = 2\n", 2, "already set on line 1"),
])
def test_errors_carry_line_numbers(text, line, frag):
    with pytest.raises(ConfigError, match=f"line {line}: .*{frag}"):
        parse_config(text)


def test_cross_field_check():
    with pytest.raises(ConfigError, match="m_min"):
        parse_config("m_min = 0.6\nm_max = 0.5\n")


def test_roundtrip_dump():
    c = apply_overrides(RunConfig(), parse_set(["seed=3", "views=0,180", "mutual_knn=true"]))
    assert parse_config(dump_config(c)) == c


def test_load_from_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("n_subjects = 5\n")
    assert load_config(p).n_subjects == 5


def test_set_errors():
    with pytest.raises(ConfigError, match="--set"):
        apply_overrides(RunConfig(), parse_set(["a=0"]))
    with pytest.raises(ConfigError):
        parse_set(["novalue"])


def test_builders():
    c = RunConfig(seed=4)
    pre, tr = c.synth_spec("pretrain"), c.synth_spec("train")
    assert pre.n_subjects == 20 and tr.n_subjects == 40
    assert pre.first_subject_id > tr.first_subject_id + tr.n_subjects - 1
    assert pre.seed != tr.seed
    b, s = c.train_config("baseline"), c.train_config("sf")
    assert (b.s_up, b.iters, s.s_up, s.iters) == (0.7, 50, 0.3, 100)
    assert b.seed != s.seed
    with pytest.raises(ConfigError):
        c.train_config("pretrain")
    assert c.protocol().gallery_seqs == (1, 2, 3, 4)


def test_describe_lists_every_key():
    text = describe_keys()
    for line in dump_config(RunConfig()).splitlines():
        assert line.split(" = ")[0] in text
