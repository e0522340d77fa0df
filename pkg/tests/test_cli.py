import json

import pytest
from click.testing import CliRunner

from meshmsg import secgames
from meshmsg.cli import main
from meshmsg.simnet import SimConfig

SMALL = ["--minutes", "0.3", "--devices", "5", "--rate-ms", "1000", "--ds-interval-ms", "1000",
         "--crypto", "opaque"]


@pytest.fixture
def cli():
    runner = CliRunner()

    def invoke(*args):
        res = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        out = res.output.strip().splitlines()
        return res.exit_code, (json.loads(out[-1]) if out else None)
    return invoke


def test_keygen_distinct_files(cli, tmp_path):
    pks = set()
    for k in range(100):
        code, out = cli("keygen", "--out", tmp_path / f"k{k}.json")
        assert code == 0
        pks.add(json.loads((tmp_path / f"k{k}.json").read_text())["pk"])
    assert len(pks) == 100


def test_keygen_refuses_overwrite_without_force(cli, tmp_path):
    path = tmp_path / "k.json"
    assert cli("keygen", "--seed", 1, "--out", path)[0] == 0
    code, out = cli("keygen", "--seed", 2, "--out", path)
    assert code == 4 and not out["ok"]
    assert json.loads(path.read_text())["pk"] == out_pk(cli, tmp_path, 1)
    code, out = cli("keygen", "--seed", 2, "--out", path, "--force")
    assert code == 0 and json.loads(path.read_text())["pk"] == out["pk"]


def out_pk(cli, tmp_path, seed):
    code, out = cli("keygen", "--seed", seed, "--out", tmp_path / f"seed{seed}.json", "--force")
    return out["pk"]


def test_simulate_writes_log_and_manifest(cli, tmp_path):
    log = tmp_path / "run.jsonl"
    code, out = cli("simulate", *SMALL, "--out", log)
    assert code == 0 and out["ok"]
    manifest = json.loads((tmp_path / "run.jsonl.manifest.json").read_text())
    assert manifest["sim_id"] == out["sim_id"]
    assert SimConfig.from_dict(manifest["config"]).devices == 5
    assert {"code_version", "invocation_id", "outputs"} <= set(manifest)


def test_simulate_rerun_from_manifest_is_byte_identical(cli, tmp_path):
    a = tmp_path / "a.jsonl"
    cli("simulate", *SMALL, "--broadcast", "smart", "--out", a)
    b = tmp_path / "b.jsonl"
    code, _ = cli("simulate", "--manifest", str(a) + ".manifest.json", "--out", b)
    assert code == 0 and a.read_bytes() == b.read_bytes()


def test_simulate_smart_has_all_record_kinds(cli, tmp_path):
    log = tmp_path / "s.jsonl"
    cli("simulate", "--minutes", "1", "--devices", "9", "--spacing-ft", "15", "--rate-ms", "2000",
        "--ds-interval-ms", "2000", "--broadcast", "smart", "--message", "0:0:8:hi",
        "--out", log)
    kinds = {json.loads(ln).get("comm_type") for ln in log.read_text().splitlines()[1:]}
    assert kinds == {"MESSAGE", "DIGEST", "REQUEST", "RESPONSE"}


def test_simulate_sweep(cli, tmp_path):
    code, out = cli("simulate", *SMALL, "--sweep", "spacing_ft=3,15", "--sweep", "seed=0,1",
                    "--out", tmp_path / "sweep")
    assert code == 0 and len(out["runs"]) == 4
    assert len({r["sim_id"] for r in out["runs"]}) == 4


@pytest.mark.parametrize("args", [["--message", "0:1"], ["--sweep", "nope=1"],
                                  ["--rate-ms", "150"]])
def test_simulate_usage_errors(cli, tmp_path, args):
    code, out = cli("simulate", *SMALL, *args, "--out", tmp_path / "x.jsonl")
    assert code == 2 and not out["ok"]


def test_analyze_bandwidth_and_violation(cli, tmp_path):
    log = tmp_path / "run.jsonl"
    cli("simulate", *SMALL, "--out", log)
    code, out = cli("analyze", "--log", log)
    assert code == 0 and out["bps"] > 0 and not out["violation"]
    code, out = cli("analyze", "--log", log, "--threshold-bps", 1)
    assert code == 3 and out["violation"]


def test_analyze_cdf_writes_datasets(cli, tmp_path):
    log = tmp_path / "run.jsonl"
    cli("simulate", *SMALL, "--out", log)
    code, out = cli("analyze", "--log", log, "--metric", "cdf", "--out", tmp_path / "plots")
    assert code == 0 and out["messages"] > 0
    assert (tmp_path / "plots" / "bandwidth_cdf.csv").exists()


def test_analyze_empty_log(cli, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out = cli("analyze", "--log", empty)
    assert code == 5 and not out["ok"]
    code, _ = cli("analyze", "--log", tmp_path / "missing.jsonl")
    assert code == 4


def test_capacity_command(cli, tmp_path):
    template = tmp_path / "t.json"
    template.write_text(json.dumps(SimConfig(minutes=0.2, spacing_ft=3.0, rate_ms=1000,
                                             start_window_ms=1000, crypto="opaque").to_dict()))
    code, out = cli("capacity", "--template", template, "--percentile", 95, "--percentile", 85,
                    "--threshold-bps", 200_000, "--max-devices", 16, "--seeds", "0",
                    "--out", tmp_path / "cap")
    assert code == 0
    caps = {r["percentile"]: r["max_devices"] for r in out["results"]}
    assert caps[85] >= caps[95]
    assert (tmp_path / "cap" / "capacity.csv").exists()


def test_secgame_mint_passive(cli):
    code, out = cli("secgame", "--game", "mint")
    assert code == 0 and out["verdict"] == 0


def test_secgame_mint_sabotaged_script(cli, tmp_path):
    spec = tmp_path / "mint.json"
    params = secgames.GameParams.make(5, 50, {3, 4}, seed=3)
    spec.write_text(secgames.mint_spec_to_json(params, "bitflip", "unauthenticated"))
    code, out = cli("secgame", "--game", "mint", "--script", spec)
    assert code == 3 and out["verdict"] == 1


def test_secgame_mconf_and_keypriv(cli, tmp_path):
    code, out = cli("secgame", "--game", "mconf")
    assert code == 0 and out["invariant"] and out["first_divergent_round"] is None
    kp = tmp_path / "kp.json"
    kp.write_text(json.dumps({"Q": 2000, "bound": 0.05}))
    code, out = cli("secgame", "--game", "keypriv", "--script", kp)
    assert code == 0 and out["advantage"] < 0.05


def test_secgame_bad_script(cli, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"game": "mint"}')
    assert cli("secgame", "--game", "mint", "--script", bad)[0] == 2
