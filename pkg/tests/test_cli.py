import csv
from pathlib import Path

import pytest

from drbsde.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_FAIL, EXIT_PASS, fmt, main
from drbsde.scenario import ScenarioError, parse_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def write(tmp_path, text, name="s.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def errors_of(text):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    return info.value.errors


@pytest.fixture
def out(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv("DRBSDE_OUT", str(d))
    return d


# ---------------------------------------------------------------------------
# parsing


def test_defaults():
    sc = parse_scenario("run: tree-solve\n")
    assert sc.model.n_steps == 2 and sc.model.dt == 0.25
    assert sc.problem.driver.kind == "zero"


def test_unknown_key_has_dotted_path():
    assert errors_of("run: tree-solve\nmodel: {n_stepz: 3}\n") == ["model.n_stepz: unknown key"]


def test_type_error_has_dotted_path():
    assert errors_of("run: tree-solve\nmodel: {n_steps: x}\n") == ["model.n_steps: expected an integer, got 'x'"]


def test_all_errors_reported_together():
    errs = errors_of("run: tree-solve\nmodel: {n_steps: x, dt: y}\nbogus: 1\n")
    assert len(errs) == 3


def test_missing_run():
    assert errors_of("model: {n_steps: 3}\n")[0].startswith("run: missing")


def test_barrier_order_names_both_rules():
    (msg,) = errors_of("run: tree-solve\nbarriers: {lower: 1.0, upper: 0.5}\n")
    assert "H3" in msg and "barriers.lower (constant 1)" in msg and "barriers.upper (constant 0.5)" in msg


def test_game_penalty_must_be_positive():
    text = (SCENARIOS / "game_n2.yaml").read_text().replace("xi1: {kind: affine, slope: 0.3}",
                                                          "xi1: {kind: affine, intercept: 0.05, slope: 0.3}")
    (msg,) = errors_of(text)
    assert msg.startswith("game.xi2:") and "penalty must be positive" in msg


def test_nodes_rule_length_checked():
    errs = errors_of("run: tree-solve\nmodel: {n_steps: 2}\nterminal: {kind: nodes, values: [[0], [0, 0]]}\n")
    assert "terminal" in errs[0]


def test_fmt():
    assert fmt(0.1 + 0.2) == "0.3"
    assert fmt(float("inf")) == "inf"


# ---------------------------------------------------------------------------
# exit codes


def test_exit_pass(out, capsys):
    assert main(["run", str(SCENARIOS / "trivial.yaml")]) == EXIT_PASS
    assert "PASS skorokhod-plus" in capsys.readouterr().out
    assert (out / "trivial_tree.csv").exists()


def test_exit_fail_on_tight_tolerance(tmp_path, out, capsys):
    text = (SCENARIOS / "penalize.yaml").read_text() + "tolerances: {penalization-final: 1.0e-6}\n"
    assert main(["run", write(tmp_path, text)]) == EXIT_FAIL
    assert "FAIL penalization-final" in capsys.readouterr().out


def test_exit_config(tmp_path, out, capsys):
    assert main(["run", write(tmp_path, "run: tree-solve\nmodel: {n_stepz: 3}\n")]) == EXIT_CONFIG
    assert "model.n_stepz: unknown key" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["validate", write(tmp_path, "run: [\n")]) == EXIT_CONFIG


def test_exit_module_error(tmp_path, out, capsys):
    text = (SCENARIOS / "game_n2.yaml").read_text().replace("n_steps: 2", "n_steps: 5")
    assert main(["run", write(tmp_path, text)]) == EXIT_ERROR
    assert "SizeError" in capsys.readouterr().err


def test_validate(capsys):
    assert main(["validate", str(SCENARIOS / "penalize.yaml")]) == EXIT_PASS
    assert capsys.readouterr().out.startswith("OK")


# ---------------------------------------------------------------------------
# artifacts


def test_out_flag_overrides_environment(tmp_path, out):
    other = tmp_path / "other"
    assert main(["run", str(SCENARIOS / "trivial.yaml"), "--out", str(other)]) == EXIT_PASS
    assert (other / "trivial_report.csv").exists() and not out.exists()


def test_tree_csv_schema(out):
    main(["run", str(SCENARIOS / "tree_binding.yaml")])
    rows = read_csv(out / "tree_binding_tree.csv")
    assert rows[0] == ["step", "node", "label", "B", "Y", "Z", "Kplus", "Kminus", "lower", "upper"]
    assert rows[1][:3] == ["0", "0", "root"]


def test_reruns_are_byte_identical(tmp_path, monkeypatch):
    files = {}
    for tag in ("a", "b"):
        monkeypatch.setenv("DRBSDE_OUT", str(tmp_path / tag))
        assert main(["run", str(SCENARIOS / "mc_cox.yaml")]) == EXIT_PASS
        files[tag] = {p.name: p.read_bytes() for p in (tmp_path / tag).iterdir()}
    assert files["a"] == files["b"]


def test_thread_count_does_not_change_results(tmp_path):
    runs = []
    for threads in ("1", "3"):
        d = tmp_path / threads
        assert main(["run", str(SCENARIOS / "mc_cox.yaml"), "--out", str(d), "--threads", threads]) == EXIT_PASS
        runs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert runs[0] == runs[1]


def test_seed_override_changes_mc_output(tmp_path):
    main(["run", str(SCENARIOS / "mc_cox.yaml"), "--out", str(tmp_path / "a")])
    main(["run", str(SCENARIOS / "mc_cox.yaml"), "--out", str(tmp_path / "b"), "--seed", "7"])
    a = sorted((tmp_path / "a").glob("*_report.csv"))[0].read_bytes()
    b = sorted((tmp_path / "b").glob("*_report.csv"))[0].read_bytes()
    assert a != b


def test_sweep(out, capsys):
    code = main(["sweep", str(SCENARIOS / "penalize.yaml"), "--param", "model.n_steps=2,3"])
    assert code == EXIT_PASS
    rows = read_csv(out / "penalize_sweep.csv")
    assert rows[0] == ["param", "value", "check", "measured", "tolerance", "status"]
    assert {r[1] for r in rows[1:]} == {"2", "3"}
    assert (out / "penalize_model-n_steps-2_penalize.csv").exists()


def test_sweep_bad_value_is_config_error(out, capsys):
    code = main(["sweep", str(SCENARIOS / "penalize.yaml"), "--param", "model.n_steps=2,x"])
    assert code == EXIT_CONFIG
    assert "[model.n_steps=x]" in capsys.readouterr().err


def test_sweep_needs_values(out):
    assert main(["sweep", str(SCENARIOS / "penalize.yaml"), "--param", "model.n_steps"]) == EXIT_CONFIG


def test_refinement_csv(out):
    assert main(["run", str(SCENARIOS / "link_refine.yaml")]) == EXIT_PASS
    rows = read_csv(out / "link_refine_link.csv")
    assert rows[0] == ["n_steps", "dt", "error", "node_count"]
    assert [int(r[0]) for r in rows[1:]] == [2, 4, 8, 16]
    assert float(rows[-1][2]) < 5e-2


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.yaml")))
def test_every_scenario_passes(name, out):
    assert main(["run", str(SCENARIOS / name)]) == EXIT_PASS
    report = read_csv(next(out.glob("*_report.csv")))
    assert all(r[3] in ("PASS", "") for r in report[1:])
