import dataclasses
import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# criterion lines collected by test_acceptance, echoed at the end of the run
ACCEPTANCE_LINES = []
SLOW_FIXTURES = {"e2e_runs", "cli_full_runs"}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs a full default-profile training run")


def pytest_collection_modifyitems(items):
    for item in items:
        if SLOW_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    """A few subjects with every condition/view of the default profile."""
    from gaitsf.silhouette import SynthSpec, generate_dataset
    seqs, manifest = generate_dataset(SynthSpec(n_subjects=6, seed=3))
    return seqs, manifest


@pytest.fixture(scope="session")
def e2e_runs():
    """Default profile, three seeds: pretrain -> baseline -> SF -> eval.

    Evaluation uses NM#1 as gallery so NM#2 and every CL sequence are
    probes.  Returned per seed: tables, epoch records and timing.
    """
    from gaitsf.config import RunConfig
    from gaitsf import workflow as wf
    out = []
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        cfg = dataclasses.replace(RunConfig(seed=seed), gallery_seqs=(1,))
        pre, tr = wf.generate_splits(cfg)
        p0, vc, _ = wf.pretrain_stage(cfg, pre)
        pb, rec_b = wf.baseline_stage(cfg, tr, p0)
        ps, rec_s = wf.sf_stage(cfg, tr, pb, vc)
        out.append(dict(seed=seed, vc=vc, pre_rank1=wf.pretrain_rank1(pre, p0),
                        base=wf.evaluate_params(cfg, tr, pb),
                        sf=wf.evaluate_params(cfg, tr, ps),
                        rec_b=rec_b, rec_s=rec_s))
    return dict(runs=out, wall=time.perf_counter() - t0)


def run_cli(*args):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    import contextlib
    import io
    from gaitsf.cli import main
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in args])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="session")
def cli_full_runs(tmp_path_factory):
    """Two complete default-profile command-line workflows with the same seed."""
    runs = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(f"full_{name}")
        data, run, ev = root / "data", root / "run", root / "eval"
        steps = [("--threads", 1, "generate", "--seed", 7, "--out", data)]
        for stage in ("pretrain", "baseline", "sf"):
            steps.append(("--threads", 1, "train", "--seed", 7, "--data", data, "--stage", stage,
                          "--run", run))
        steps.append(("--threads", 1, "eval", "--seed", 7, "--data", data, "--checkpoint",
                      run / "sf", "--out", ev))
        results = [run_cli(*s) for s in steps]
        runs.append(dict(root=root, data=data, run=run, eval=ev,
                         codes=[r[0] for r in results], stdout=[r[1] for r in results]))
    return runs
