import json

import numpy as np
import pytest

from gmtmm.cli import run
from gmtmm.config import IngestSpec, bundled_config, ingest, load_config
from gmtmm.errors import ConfigError, DataError
from gmtmm.families import CensoredGaussian, CumulativeProbit


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_ingest_complete_file(tmp_path):
    path = _write(tmp_path, "d.csv", "a,b,c,d,e,f\n" + "\n".join(",".join(str(i + j) for j in range(6))
                                                              for i in range(4)))
    data = ingest(IngestSpec(path, tuple("abcdef")))
    assert data.n == 4 and data.mask.all() and np.all(data.weights == 1)


def test_ingest_sentinels_weights_and_delimiter(tmp_path):
    path = _write(tmp_path, "d.tsv", "x\ty\tw\n1\tNA\t2\n-99\t3\t0.5\n")
    data = ingest(IngestSpec(path, ("x", "y"), missing=("NA", "-99"), weights="w", delimiter="\t"))
    np.testing.assert_array_equal(data.mask, [[True, False], [False, True]])
    np.testing.assert_array_equal(data.weights, [2.0, 0.5])


@pytest.mark.parametrize("body, message", [
    ("x,y\n1,2\n", "'z' not found"),
    ("x,z\n1,oops\n", "row 1, column 'z'"),
    ("x,z,w\n1,2,-1\n", "negative weight"),
])
def test_ingest_errors(tmp_path, body, message):
    path = _write(tmp_path, "d.csv", body)
    with pytest.raises(DataError, match=message):
        ingest(IngestSpec(path, ("x", "z"), weights="w" if "w" in body.splitlines()[0] else None))


def test_config_builds_design():
    cfg = load_config(bundled_config("linked_income"))
    d = cfg.design
    assert d.n_traits == 3 and d.n_methods == 2 and d.n_cells == 108
    assert all(v.family == CensoredGaussian(0.0) for v in d.variables)
    assert cfg.columns[0] == "wages_survey"
    assert cfg.truth()["lambda[1,1]"] == 3.772


def test_config_families_and_constraints():
    cfg = load_config("""
model:
  traits: 2
  methods: [{name: s}, {name: r, categories: 1}]
  family: cumprobit
  categories: 4
  variables:
    - {trait: 1, method: s}
    - {trait: 2, method: s, family: censored, lower: 1.5, column: inc}
    - {trait: 1, method: r}
  constraints:
    - {fix: "lambda[1,1]", value: 1.0}
""")
    fams = [v.family for v in cfg.design.variables]
    assert fams[0] == CumulativeProbit(n_categories=4) and fams[1] == CensoredGaussian(1.5)
    assert cfg.columns == ("trait1_s", "inc", "trait1_r")
    assert "lambda[1,1]" not in cfg.design.parameter_names or \
        any(c.name == "lambda[1,1]" for c in cfg.design.all_constraints)


@pytest.mark.parametrize("text, needle", [
    ("model:\n  traits: 1\n  methods: 1\n  colour: red\n", "'colour'"),
    ("model:\n  traits: 1\n  methods: 1\nfitt: {}\n", "'fitt'"),
    ("model:\n  traits: 1\n  methods: 1\n  constraints: [{fix: 'nope', value: 1}]\n", "'nope'"),
    ("model:\n  traits: 0\n  methods: 1\n", "model/traits"),
    ("model: [\n", "cannot parse"),
])
def test_config_errors_name_the_problem(text, needle):
    with pytest.raises(ConfigError, match=needle.replace("[", r"\[")):
        load_config(text)


def test_cli_fit_on_bundled_config(tmp_path):
    cfg = bundled_config("linked_income")
    data = str(tmp_path / "data.csv")
    assert run(["simulate", cfg, "--data", data, "--out", str(tmp_path / "sim"), "--n", "600"]) == 0
    out = tmp_path / "fit"
    assert run(["fit", cfg, "--data", data, "--out", str(out), "--plot-data"]) == 0
    res = json.loads((out / "result.json").read_text())
    for key in ("loglik", "aic", "bic", "estimates"):
        assert key in res["fit"]
    assert res["seed"] == 1 and len(res["config_hash"]) == 64
    summary = (out / "summary.txt").read_text()
    assert f"LL = {res['fit']['loglik']:.4f}" in summary
    first = res["fit"]["estimates"][0]
    assert f"{first['estimate']:12.4f}" in summary
    lines = (out / "quality_long.csv").read_text().splitlines()
    assert lines[0] == "variable,coefficient,estimate,lower,upper" and len(lines) == 13
    before = (out / "result.json").read_text()
    assert run(["fit", cfg, "--data", data, "--out", str(out), "--plot-data"]) == 0
    assert (out / "result.json").read_text() == before


def test_cli_identify_one_by_one_not_identified(tmp_path):
    assert run(["identify", bundled_config("one_trait_one_method"), "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["identify"]["verdict"] == "not-identified"


def test_cli_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, "bad.yaml", "model:\n  traits: 1\n  methods: 1\n  bogus: 3\n")
    assert run(["fit", bad, "--out", str(tmp_path)]) == 2
    assert "'bogus'" in capsys.readouterr().err
    cfg = _write(tmp_path, "ok.yaml", "model:\n  traits: 1\n  methods: 1\n")
    missing = _write(tmp_path, "d.csv", "other\n1\n")
    assert run(["fit", cfg, "--data", missing, "--out", str(tmp_path)]) == 3
    assert run(["fit-linear", cfg, "--data", missing, "--out", str(tmp_path)]) == 2


def test_cli_linear_fit_quality_bootstrap(tmp_path):
    cfg = bundled_config("linear_register_no_method")
    data = str(tmp_path / "lin.csv")
    assert run(["simulate", cfg, "--data", data, "--out", str(tmp_path / "s")]) == 0
    assert run(["fit-linear", cfg, "--data", data, "--out", str(tmp_path / "f")]) == 0
    assert run(["quality", cfg, "--data", data, "--out", str(tmp_path / "q"), "--plot-data"]) == 0
    q = json.loads((tmp_path / "q" / "result.json").read_text())["quality"]["variables"]
    assert all(r["lower"] <= r["estimate"] <= r["upper"] for r in q if r["lower"] is not None)
    assert run(["bootstrap", cfg, "--data", data, "--out", str(tmp_path / "b"), "--B", "5"]) == 0
    b = json.loads((tmp_path / "b" / "result.json").read_text())["bootstrap"]
    assert b["B"] == 5


def test_cli_grid_and_study(tmp_path):
    cfg = _write(tmp_path, "g.yaml", """
seed: 2
model:
  traits: 2
  methods: [{name: m, categories: 1}]
  trait_categories: 2
grid: {K: [1, 2], S: [1], n_starts: 1}
simulate: {n: 300}
study: {sample_sizes: [150], R: 2}
""")
    data = str(tmp_path / "g.csv")
    assert run(["simulate", cfg, "--data", data, "--out", str(tmp_path / "s")]) == 0
    assert run(["grid", cfg, "--data", data, "--out", str(tmp_path / "g")]) == 0
    g = json.loads((tmp_path / "g" / "result.json").read_text())["grid"]
    assert len(g["rows"]) == 2
    best = min(range(2), key=lambda i: g["rows"][i]["bic"])
    assert g["selected"] == best
    assert run(["simulate-study", cfg, "--out", str(tmp_path / "st")]) == 0
    st = json.loads((tmp_path / "st" / "result.json").read_text())["study"]
    assert st["sample_sizes"] == [150]
    assert (tmp_path / "st" / "study.csv").exists()


def test_truth_must_respect_fixed_parameters():
    with pytest.raises(ConfigError, match="fixes it"):
        load_config("model:\n  latent: gaussian\n  traits: 1\n  methods: 1\ntruth:\n  values: {'lambda[1,1]': 2.0}\n").truth()
