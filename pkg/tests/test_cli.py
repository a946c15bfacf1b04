"""End-to-end tests of the command line front end: synthesize -> estimate ->
lasso-path -> evaluate in a temp workspace, plus exit-code mapping."""

import json
import os

import numpy as np
import pytest

from odflow.cli import main
from odflow.validation import NumericalError

LINKS_CSV = """\
link_id,from_node,to_node,free_flow_time,capacity,alpha,beta
1,1,3,10.0,360.0,0.15,4.0
2,1,2,10.0,360.0,0.15,4.0
3,2,3,5.0,360.0,0.15,4.0
"""

OD_CSV = """\
origin,destination
1,3
2,3
"""

OBSERVED_CSV = """\
link_id
1
3
"""

CONFIG_INI = """\
[network]
links = links.csv
od_pairs = od_pairs.csv
observed = observed.csv
paths_k = 2

[demand]
mean = 700, 500
variance = 175, 125
correlation = 0.5

[equilibrium]
model = logit
theta = 1.0
max_iters = 200
tol = 1e-4

[synthesize]
days = 40
seed = 7   ; synthesis stream
out = observations.csv

[estimate]
observations = observations.csv
lambda = 0
outer_iters = 8
inner_iters = 9
tau_tol = 0

[lasso]
grid = 0, 10, 50, 150
warm_start = true
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cliws")
    (ws / "links.csv").write_text(LINKS_CSV)
    (ws / "od_pairs.csv").write_text(OD_CSV)
    (ws / "observed.csv").write_text(OBSERVED_CSV)
    (ws / "config.ini").write_text(CONFIG_INI)
    rc = main(["synthesize", "--config", str(ws / "config.ini"),
               "--out", str(ws)])
    assert rc == 0
    return ws


def test_synthesize_outputs(workspace, capsys):
    obs_file = workspace / "observations.csv"
    truth_file = workspace / "truth.json"
    assert obs_file.exists() and truth_file.exists()
    truth = json.loads(truth_file.read_text())
    assert truth["q"] == [700.0, 500.0]
    assert truth["sigma_q"]["rows"] == 2
    assert truth["days"] == 40
    assert truth["equilibrium"]["converged"] is True
    assert truth["observed_links"] == ["1", "3"]
    # the file reads back as 40 days on the two observed links
    from odflow.network import load_network
    from odflow.sampling import read_observations_csv

    net = load_network(str(workspace / "links.csv"),
                       str(workspace / "od_pairs.csv"))
    obs = read_observations_csv(str(obs_file), net)
    assert obs.counts.shape == (40, 2)
    assert obs.observed.indices == (0, 2)


def test_synthesize_seed_override(workspace, tmp_path):
    rc = main(["synthesize", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path), "--seed", "9"])
    assert rc == 0
    a = (tmp_path / "observations.csv").read_text()
    b = (workspace / "observations.csv").read_text()
    assert a != b


def test_estimate_writes_result_and_convergence(workspace, tmp_path, capsys):
    rc = main(["estimate", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "outer passes" in out
    res = json.loads((tmp_path / "result.json").read_text())
    assert len(res["q_hat"]) == 2
    assert res["sigma_q_hat"]["rows"] == 2
    assert res["n_outer"] == 8
    assert sum(res["q_hat"]) == pytest.approx(1200.0, rel=0.2)
    assert np.isfinite(res["goodness_of_fit"]["kl"])
    shares = np.array([
        res["variance_decomposition"]["demand_share"],
        res["variance_decomposition"]["route_share"],
        res["variance_decomposition"]["error_share"],
    ])
    # one share triple per network link
    assert shares.shape == (3, 3)
    assert shares.sum(axis=0) == pytest.approx(np.ones(3), abs=1e-10)
    lines = (tmp_path / "convergence.csv").read_text().strip().splitlines()
    assert lines[0].startswith("outer,tau,")
    assert len(lines) == 1 + 8


def test_estimate_is_deterministic(workspace, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["estimate", "--config", str(workspace / "config.ini"),
                 "--out", str(out1)]) == 0
    assert main(["estimate", "--config", str(workspace / "config.ini"),
                 "--out", str(out2)]) == 0
    assert (out1 / "result.json").read_bytes() == \
        (out2 / "result.json").read_bytes()


def test_estimate_distance_override(workspace, tmp_path):
    rc = main(["estimate", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path), "--distance", "hellinger"])
    assert rc == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["distance"] == "hellinger"


def test_lasso_path_csv(workspace, tmp_path):
    rc = main(["lasso-path", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "lasso_path.csv").read_text().strip().splitlines()
    assert lines[0] == "lambda,entry_row,entry_col,value"
    # 4 grid points x 3 upper-triangle entries of the 2x2 estimate
    assert len(lines) == 1 + 4 * 3
    rows = [ln.split(",") for ln in lines[1:]]
    lams = sorted({float(r[0]) for r in rows})
    assert lams == [0.0, 10.0, 50.0, 150.0]
    nnz = {lam: 0 for lam in lams}
    for r in rows:
        if abs(float(r[3])) > 1e-8:
            nnz[float(r[0])] += 1
    counts = [nnz[lam] for lam in lams]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_evaluate_reports_metrics(workspace, tmp_path, capsys):
    est_out = tmp_path / "est"
    assert main(["estimate", "--config", str(workspace / "config.ini"),
                 "--out", str(est_out)]) == 0
    eval_cfg = tmp_path / "eval.ini"
    eval_cfg.write_text(
        "[evaluate]\n"
        f"result = {est_out / 'result.json'}\n"
        f"truth = {workspace / 'truth.json'}\n"
    )
    rc = main(["evaluate", "--config", str(eval_cfg), "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "prmse:" in out and "kl_od:" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["prmse"] >= 0.0
    assert np.isfinite(metrics["kl_od"])


def test_missing_config_exits_1(tmp_path, capsys):
    rc = main(["estimate", "--config", str(tmp_path / "nope.ini")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_bad_subcommand_exits_1(capsys):
    assert main(["frobnicate", "--config", "x.ini"]) == 1


def test_missing_required_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[network]\nlinks = links.csv\n")  # od_pairs missing
    rc = main(["estimate", "--config", str(cfg)])
    assert rc == 1
    assert "od_pairs" in capsys.readouterr().err


def test_mismatched_observations_exit_1(workspace, tmp_path, capsys):
    cfg_text = CONFIG_INI.replace("observed = observed.csv",
                                  "observed = observed_one.csv")
    (workspace / "observed_one.csv").write_text("link_id\n1\n")
    cfg = workspace / "config_one.ini"
    cfg.write_text(cfg_text)
    rc = main(["estimate", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 1
    assert "do not match" in capsys.readouterr().err


def test_numerical_failure_exits_2(workspace, tmp_path, monkeypatch, capsys):
    import odflow.cli as cli

    def boom(*a, **kw):
        raise NumericalError("solver diverged")

    monkeypatch.setattr(cli, "run_igls", boom)
    rc = main(["estimate", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path)])
    assert rc == 2
    assert "numerical failure" in capsys.readouterr().err


def test_linalg_failure_exits_2(workspace, tmp_path, monkeypatch, capsys):
    import odflow.cli as cli

    def boom(*a, **kw):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(cli, "run_igls", boom)
    rc = main(["estimate", "--config", str(workspace / "config.ini"),
               "--out", str(tmp_path)])
    assert rc == 2
    assert "numerical failure" in capsys.readouterr().err
