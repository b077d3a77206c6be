import csv
import io
from fractions import Fraction
from pathlib import Path

import pytest

from wgeig import cli
from wgeig.solvers import SolverError

GOLDEN = Path(__file__).parent / "golden"


def _read_csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def test_presets_contents():
    p = cli.presets()
    assert set(p) == {"table1", "table2", "table3_4", "table6_7", "fig1_2", "fig3_4", "table8"}
    assert (p["table1"].k, p["table1"].epsilon, p["table1"].algorithm) == (1, 0.0, "two_grid")
    assert p["table2"].epsilon == 0.1
    assert (p["fig1_2"].k1, p["fig1_2"].k2, p["fig1_2"].epsilon) == (1, 2, 0.2)
    assert (p["fig3_4"].k1, p["fig3_4"].k2) == (2, 3)
    assert p["table8"].domain == "l_shape"
    assert p["table1"].schedule[0] == (Fraction(1, 4), Fraction(1, 16))
    assert p["table6_7"].schedule[-1] == (Fraction(1, 64), Fraction(1, 512))
    for cfg in p.values():
        cfg.validate()


def test_csv_header_matches_golden():
    assert ",".join(cli.CSV_COLUMNS) + "\n" == (GOLDEN / "csv_header.txt").read_text()


def test_parse_schedule():
    assert cli.parse_schedule("1/4,1/16;1/8,1/64") == [(Fraction(1, 4), Fraction(1, 16)),
                                                      (Fraction(1, 8), Fraction(1, 64))]
    assert cli.parse_schedule(" 1/8 ; 1/16 ;") == [(Fraction(1, 8),), (Fraction(1, 16),)]
    assert cli.format_schedule(cli.parse_schedule("1/4,1/16;1/8,1/64")) == "1/4,1/16;1/8,1/64"
    for bad in ("2/3", "0.3", "abc", "-1/4"):
        with pytest.raises(cli.ConfigError):
            cli.parse_schedule(bad)


@pytest.mark.parametrize("kw", [
    dict(algorithm="two_grid", schedule=""),
    dict(algorithm="two_grid", schedule="1/4,1/12"),
    dict(algorithm="two_grid", schedule="1/4,1/4"),
    dict(algorithm="two_grid", schedule="1/4"),
    dict(algorithm="direct", schedule="1/4,1/8"),
    dict(algorithm="two_space", k1=3, k2=2, schedule="1/4"),
    dict(algorithm="direct", epsilon=1.0, schedule="1/4"),
    dict(algorithm="direct", domain="disk", schedule="1/4"),
    dict(algorithm="direct", nev=0, schedule="1/4"),
])
def test_invalid_configs(kw):
    with pytest.raises(cli.ConfigError):
        cli.make_config(**kw)


def test_config_errors_exit_one(capsys):
    assert cli.main(["two-grid", "--schedule", "1/4,1/12"]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err
    assert cli.main(["two-grid", "--schedule", ";"]) == cli.EXIT_CONFIG
    assert cli.main(["preset", "nosuch"]) == cli.EXIT_CONFIG
    assert cli.main(["direct", "--config", "/nonexistent/cfg"]) == cli.EXIT_CONFIG


def test_config_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# small study\nepsilon = 0.1\nschedule = 1/2,1/4\nnev = 2\n"
                        "k = 1  # degree\npattern = crisscross\n")
    args = cli.build_parser().parse_args(["two-grid", "--config", str(cfg_file), "--nev", "3"])
    cfg = cli.config_from_args(args)
    assert cfg.epsilon == 0.1 and cfg.nev == 3 and cfg.pattern == "crisscross"
    assert cfg.schedule == [(Fraction(1, 2), Fraction(1, 4))]
    with pytest.raises(cli.ConfigError):
        cli.load_config_text("epsilon 0.1")
    with pytest.raises(cli.ConfigError):
        cli.load_config_text("nev = many")


def test_direct_run_writes_files(tmp_path, capsys):
    out = tmp_path / "o.csv"
    dat = tmp_path / "o.dat"
    code = cli.main(["direct", "--schedule", "1/4;1/8", "--nev", "3", "--csv", str(out),
                     "--plot-data", str(dat)])
    assert code == cli.EXIT_OK
    rows = _read_csv(out)
    assert len(rows) == 6
    assert list(rows[0]) == list(cli.CSV_COLUMNS)
    assert all(float(r["eig_error"]) > 0 for r in rows)
    assert rows[3]["order_lambda"] != "" and rows[0]["order_lambda"] == ""
    assert "# index 1" in dat.read_text()
    out_text = capsys.readouterr().out
    assert "lam_1 err" in out_text and "wrote csv" in out_text


def test_preset_out_dir(tmp_path):
    code = cli.main(["preset", "table1", "--schedule", "1/2,1/4;1/4,1/8", "--nev", "2",
                     "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_OK
    assert {p.name for p in tmp_path.iterdir()} == {"table1.txt", "table1.csv", "table1.dat"}
    text = (tmp_path / "table1.txt").read_text()
    assert "1/4" in text and "predicted" in text


def test_desk_limit_skips_levels():
    cfg = cli.make_config(algorithm="two_grid", k=2, schedule="1/2,1/4;1/8,1/128", nev=1)
    outcome = cli.run(cfg, write=False)
    assert outcome.skipped == [(Fraction(1, 8), Fraction(1, 128))]
    assert len(outcome.table.rows) == 1
    assert "unlock-large" in cli.format_table(outcome)


def _strip_walls(text):
    rows = _read_csv_text(text)
    return [{k: v for k, v in r.items() if not k.startswith("wall_time")} for r in rows]


def _read_csv_text(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.mark.parametrize("kw", [
    dict(algorithm="two_grid", k=1, epsilon=0.1, schedule="1/2,1/4;1/4,1/16", nev=3),
    dict(algorithm="two_space", k1=1, k2=2, epsilon=0.2, schedule="1/4;1/8", nev=3),
    dict(algorithm="two_grid", domain="l_shape", k=1, schedule="1/2,1/4;1/4,1/8", nev=2),
])
def test_csv_deterministic(kw):
    a = cli.format_csv(cli.run(cli.make_config(**kw), write=False))
    b = cli.format_csv(cli.run(cli.make_config(jobs=2, **kw), write=False))
    assert _strip_walls(a) == _strip_walls(b)
    assert len(_strip_walls(a)) == 2 * kw["nev"]


def test_l_shape_columns():
    cfg = cli.make_config(algorithm="two_grid", domain="l_shape", k=1,
                          schedule="1/2,1/4;1/4,1/8", nev=2)
    rows = _read_csv_text(cli.format_csv(cli.run(cfg, write=False)))
    assert all(r["lambda_exact"] == "" and r["eig_error"] == "" for r in rows)
    assert [r["lower_bound_flag"] for r in rows[2:]] == ["1", "1"]
    assert "trend" in cli.format_table(cli.run(cfg, write=False))


def test_solver_failure_exits_two(monkeypatch, tmp_path, capsys):
    calls = []

    def broken(*args, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise SolverError("injected")
        return real(*args, **kw)

    real = cli.two_grid
    monkeypatch.setattr(cli, "two_grid", broken)
    out = tmp_path / "partial.csv"
    code = cli.main(["two-grid", "--k", "1", "--schedule", "1/2,1/4;1/4,1/8", "--nev", "2",
                     "--csv", str(out)])
    assert code == cli.EXIT_SOLVER
    assert len(_read_csv(out)) == 2
    captured = capsys.readouterr()
    assert "failed" in captured.err and "injected" in captured.out


def test_list_presets(capsys):
    assert cli.main(["list-presets"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "table1" in out and "fig3_4" in out
