"""Command-line interface.

Every command prints one JSON object on stdout. Exit codes: 0 ok, 2 usage,
3 property violation, 4 I/O error, 5 no data.
"""
from __future__ import annotations

import concurrent.futures
import itertools
import json
import os
import sys
import uuid

import click
import numpy as np

from . import __version__, analysis, crypto, secgames, simnet
from .simnet import SimConfig

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_IO, EXIT_NO_DATA = 0, 2, 3, 4, 5


def _emit(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _fail(code: int, message: str):
    _emit({"ok": False, "error": message})
    sys.exit(code)


@click.group()
@click.version_option(__version__)
def main():
    """Anonymous mesh messaging: simulation, analysis and security games."""


# -- keygen ------------------------------------------------------------------

@main.command()
@click.option("--seed", type=int, default=None, help="Deterministic key from this seed.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--force", is_flag=True, help="Overwrite an existing key file.")
def keygen(seed, out, force):
    """Write a key pair (hex) to a JSON file."""
    if os.path.exists(out) and not force:
        _fail(EXIT_IO, f"{out} exists; pass --force to overwrite")
    kp = crypto.keygen(seed)
    try:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"pk": kp.pk.hex(), "sk": kp.sk.hex()}, fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    _emit({"ok": True, "out": out, "pk": kp.pk.hex()})


# -- simulate ----------------------------------------------------------------

def _parse_message(text: str) -> list:
    parts = text.split(":", 3)
    if len(parts) < 3:
        raise click.BadParameter(f"expected AT_MS:SRC:DST[:TEXT], got {text!r}")
    msg = [int(parts[0]), int(parts[1]), int(parts[2])]
    if len(parts) == 4:
        msg.append(parts[3])
    return msg


def _coerce(field_name: str, raw: str):
    default = SimConfig.__dataclass_fields__[field_name].default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def _parse_sweep(items) -> list:
    axes = []
    for item in items:
        key, _, values = item.partition("=")
        key = key.replace("-", "_")
        if key not in SimConfig.__dataclass_fields__ or not values:
            raise click.BadParameter(f"bad sweep axis {item!r}")
        axes.append([(key, _coerce(key, v)) for v in values.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)]


def manifest_for(cfg: SimConfig, log_path: str) -> dict:
    return {"sim_id": cfg.sim_id, "config": cfg.to_dict(), "outputs": {"log": log_path},
            "code_version": __version__, "invocation_id": uuid.uuid4().hex}


def run_to_files(cfg: SimConfig, log_path: str) -> dict:
    """Write the manifest, then stream the log. Returns the manifest."""
    manifest = manifest_for(cfg, log_path)
    parent = os.path.dirname(os.path.abspath(log_path))
    os.makedirs(parent, exist_ok=True)
    with open(log_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(log_path, "w", encoding="utf-8") as fh:
        simnet.run(cfg, keep_records=False, sink=fh)
    return manifest


def _run_job(args):
    cfg_dict, path = args
    return run_to_files(SimConfig.from_dict(cfg_dict), path)


@main.command()
@click.option("--minutes", type=float, default=5.0, show_default=True)
@click.option("--devices", type=int, default=10, show_default=True)
@click.option("--placement", type=click.Choice(["grid", "normal"]), default="grid")
@click.option("--spacing-ft", type=float, default=15.0, show_default=True)
@click.option("--movement", type=click.Choice(["static", "random_walk"]), default="static")
@click.option("--step-ft", type=float, default=1.5, show_default=True)
@click.option("--broadcast", type=click.Choice(["smart", "simple"]), default="smart")
@click.option("--ds-interval-ms", type=int, default=5000, show_default=True)
@click.option("--rate-ms", type=int, default=30000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--crypto", "crypto_mode", type=click.Choice(["full", "opaque"]), default="full")
@click.option("--radio-range-ft", type=float, default=None)
@click.option("--link-capacity-bps", type=float, default=None)
@click.option("--wifi-direct", is_flag=True, help="Wi-Fi Direct range/capacity preset.")
@click.option("--time-to-keep-ms", type=int, default=300000, show_default=True)
@click.option("--table-size", type=int, default=4096, show_default=True)
@click.option("--message", "messages", multiple=True, help="Scripted message AT_MS:SRC:DST[:TEXT].")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Re-run the configuration recorded in a manifest (other config flags ignored).")
@click.option("--sweep", multiple=True, help="FIELD=v1,v2,... ; --out is then a directory.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def simulate(minutes, devices, placement, spacing_ft, movement, step_ft, broadcast,
             ds_interval_ms, rate_ms, seed, crypto_mode, radio_range_ft, link_capacity_bps,
             wifi_direct, time_to_keep_ms, table_size, messages, manifest, sweep, jobs, out):
    """Run a simulation and write a JSON-lines event log plus a manifest."""
    try:
        if manifest:
            with open(manifest, encoding="utf-8") as fh:
                cfg = SimConfig.from_dict(json.load(fh)["config"])
        else:
            kw = dict(minutes=minutes, devices=devices, placement=placement,
                      spacing_ft=spacing_ft, movement=movement, step_ft=step_ft,
                      broadcast=broadcast, ds_interval_ms=ds_interval_ms, rate_ms=rate_ms,
                      seed=seed, crypto=crypto_mode, time_to_keep_ms=time_to_keep_ms,
                      table_size=table_size, messages=[_parse_message(m) for m in messages])
            if radio_range_ft is not None:
                kw["radio_range_ft"] = radio_range_ft
            if link_capacity_bps is not None:
                kw["link_capacity_bps"] = link_capacity_bps
            cfg = SimConfig.wifi_direct(**kw) if wifi_direct else SimConfig(**kw)
        combos = _parse_sweep(sweep) if sweep else None
        configs = [cfg.replace(**c) for c in combos] if combos else None
    except (ValueError, KeyError, click.BadParameter) as exc:
        _fail(EXIT_USAGE, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    try:
        if configs is None:
            m = run_to_files(cfg, out)
            _emit({"ok": True, "sim_id": m["sim_id"], "log": out,
                   "manifest": out + ".manifest.json"})
            return
        os.makedirs(out, exist_ok=True)
        jobs_args = [(c.to_dict(), os.path.join(out, f"{c.sim_id}.jsonl")) for c in configs]
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
                results = list(pool.map(_run_job, jobs_args))
        else:
            results = [_run_job(a) for a in jobs_args]
        _emit({"ok": True, "runs": [{"sim_id": r["sim_id"], "log": r["outputs"]["log"]}
                                    for r in results]})
    except OSError as exc:
        _fail(EXIT_IO, str(exc))


# -- analyze -----------------------------------------------------------------

@main.command()
@click.option("--log", "log_path", type=click.Path(dir_okay=False), required=True)
@click.option("--metric", type=click.Choice(["bandwidth", "delivery", "cdf"]), default="bandwidth")
@click.option("--percentile", "pct", type=float, default=95.0, show_default=True)
@click.option("--threshold-bps", type=float, default=None,
              help="Flag a violation when the percentile reaches this value.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Directory for CSV/SVG datasets.")
def analyze(log_path, metric, pct, threshold_bps, out):
    """Bandwidth percentiles, delivery times or CDF datasets from a log."""
    if not 0 < pct <= 100:
        _fail(EXIT_USAGE, "percentile must lie in (0, 100]")
    try:
        lg = analysis.load_log(log_path)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    if lg.header is None or not lg.records:
        _fail(EXIT_NO_DATA, "log holds no event records")
    report = {"ok": True, "sim_id": lg.header["sim_id"], "metric": metric,
              "corrupt_lines": [n for n, _ in lg.errors]}
    violation = False
    try:
        series = analysis.bandwidth(lg)
        if metric in ("bandwidth", "cdf"):
            value = analysis.percentile(series, pct)
            report.update(percentile=pct, bps=value,
                          ingress_bps=analysis.percentile(series, pct, "ingress"),
                          egress_bps=analysis.percentile(series, pct, "egress"),
                          max_tick_bits=int(series.tick_max_bits.max()))
            if threshold_bps is not None and value >= threshold_bps:
                violation = True
        stats = None
        if metric in ("delivery", "cdf"):
            stats = analysis.delivery_times(lg)
            t = stats.times()
            report.update(messages=len(stats.messages), delivered=int(t.size),
                          undelivered=len(stats.undelivered),
                          over_time_to_keep=len(stats.over_time_to_keep),
                          median_ms=float(np.median(t)) if t.size else None)
            if stats.over_time_to_keep:
                violation = True
        if out:
            report["files"] = analysis.emit_plots({"bandwidth": series, "delivery": stats}, out)
    except analysis.NoData as exc:
        _fail(EXIT_NO_DATA, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    report["violation"] = violation
    _emit(report)
    sys.exit(EXIT_VIOLATION if violation else EXIT_OK)


# -- capacity ----------------------------------------------------------------

@main.command()
@click.option("--template", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSON SimConfig (or a run manifest); 'devices' and 'seed' are varied.")
@click.option("--percentile", "pcts", type=float, multiple=True, default=(95.0,))
@click.option("--threshold-bps", type=float, default=simnet.BLUETOOTH_CAPACITY_BPS,
              show_default=True)
@click.option("--max-devices", type=int, default=4096, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def capacity(template, pcts, threshold_bps, max_devices, seeds, out):
    """Largest device count keeping the percentile bandwidth under the threshold."""
    try:
        with open(template, encoding="utf-8") as fh:
            d = json.load(fh)
        cfg = SimConfig.from_dict(d.get("config", d))
        seed_list = [int(s) for s in seeds.split(",")]
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    except (ValueError, TypeError) as exc:
        _fail(EXIT_USAGE, str(exc))
    if threshold_bps <= 0 or any(not 0 < p <= 100 for p in pcts):
        _fail(EXIT_USAGE, "threshold must be positive and percentiles in (0, 100]")
    try:
        res = analysis.capacity_sweep(cfg, pcts, threshold_bps, max_devices, seed_list)
    except analysis.NoData as exc:
        _fail(EXIT_NO_DATA, f"a probe run produced no samples: {exc}")
    report = {"ok": True, "threshold_bps": threshold_bps, "results": [
        {"percentile": p, "max_devices": r.max_devices, "capped": r.capped,
         "linear_fallback": r.linear_fallback, "trace": r.trace} for p, r in res.items()]}
    if out:
        try:
            report["files"] = analysis.emit_plots(
                {"capacity": [(cfg.spacing_ft, r) for r in res.values()]}, out)
        except OSError as exc:
            _fail(EXIT_IO, str(exc))
    _emit(report)


# -- secgame -----------------------------------------------------------------

@main.command()
@click.option("--game", type=click.Choice(["mint", "mconf", "keypriv"]), required=True)
@click.option("--script", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON game script; a small default game runs without one.")
def secgame(game, script):
    """Run a security game; exit 3 if the property is violated."""
    text = None
    if script:
        try:
            with open(script, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            _fail(EXIT_IO, str(exc))
    try:
        if game == "mint":
            if text:
                params, adv, suite = secgames.mint_spec_from_json(text)
            else:
                params = secgames.GameParams.make(N=6, T=100, malicious={4, 5})
                adv, suite = secgames.PassiveAdversary(), crypto.DEFAULT_SUITE
            res = secgames.run_mint(params, adv, suite)
            report = {"game": "mint", "adversary": adv.name, "verdict": res.verdict,
                      "aborted": res.aborted, "reason": res.reason,
                      "rounds": res.rounds_run, "first_forgery_round": res.first_forgery_round,
                      "S": len(res.ledger.S), "R": len(res.ledger.R)}
            violated = res.verdict == 1
        elif game == "mconf":
            if text:
                params, sc = secgames.mconf_script_from_json(text)
            else:
                params = secgames.GameParams.make(N=8, T=20, malicious={6, 7})
                sc = secgames.random_mconf_script(params, np.random.default_rng(0))
            res = secgames.run_mconf_trace_pair(params, sc)
            report = {"game": "mconf", "aborted": res.aborted, "reason": res.reason,
                      "invariant": res.invariant()}
            if not res.aborted:
                t0, t1 = res.traces
                p0, p1 = t0.event_projection(), t1.event_projection()
                first = next((k for k, (a, b) in enumerate(zip(p0, p1)) if a != b), None)
                if first is None and len(p0) != len(p1):
                    first = min(len(p0), len(p1))
                longer = p0 if len(p0) > len(p1) else p1
                report.update(events=len(p0), first_divergent_round=(
                    None if first is None else
                    (p0[first] if first < min(len(p0), len(p1)) else longer[first])[0]))
            violated = not res.invariant()
        else:
            d = json.loads(text) if text else {}
            q, seed = int(d.get("Q", 10_000)), int(d.get("seed", 0))
            pk0 = bytes.fromhex(d["pk0"]) if "pk0" in d else crypto.keygen(seed + 1).pk
            pk1 = bytes.fromhex(d["pk1"]) if "pk1" in d else crypto.keygen(seed + 2).pk
            res = secgames.run_key_privacy(pk0, pk1, q, seed)
            bound = float(d.get("bound", 0.01))
            report = {"game": "keypriv", "queries": q, "advantage": res.advantage,
                      "raw": res.raw, "sigma": res.sigma, "uniformity_p": float(res.uniformity_p),
                      "bound": bound}
            violated = bool(res.advantage >= bound or res.uniformity_p < 0.01)
    except (ValueError, KeyError, TypeError) as exc:
        _fail(EXIT_USAGE, f"bad game script: {exc}")
    report.update(ok=not violated, violation=violated)
    _emit(report)
    sys.exit(EXIT_VIOLATION if violated else EXIT_OK)


if __name__ == "__main__":
    main()
