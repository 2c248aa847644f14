"""Command-line front end.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 synthesis infeasible, 4 verification failure.
"""

from __future__ import annotations

import json
import sys as _sys
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import augment, certificate, netsim, sysmodel
from .lmi import DeltaSearchConfig, ExhaustedSearch
from .sysmodel import ConfigError

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFY = 4


def _load_config(config: str | None, preset: str | None) -> dict:
    if (config is None) == (preset is None):
        raise ConfigError("exactly one of --config or --preset is required")
    if preset is not None:
        ref = resources.files("netcbc").joinpath(f"presets/{preset}.json")
        if not ref.is_file():
            raise ConfigError(f"unknown preset {preset!r}")
        return json.loads(ref.read_text())
    return sysmodel.load_config(config)


def _apply_overrides(cfg: dict, overrides: tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return cfg


def _parse_all(cfg: dict):
    sys_spec, ch, spec = sysmodel.parse_config(cfg)
    report = sysmodel.validate(sys_spec, ch, spec)
    if not report.ok:
        raise ConfigError(f"invalid model:\n{report}")
    return sys_spec, ch, spec


def _common(f):
    f = click.option("--config", type=click.Path(), default=None,
                     help="JSON config file (see README for the schema).")(f)
    f = click.option("--preset", type=str, default=None,
                     help="Name of a bundled preset, e.g. 'rlc'.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default=".",
                     help="Output directory.")(f)
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Dotted-key config override, e.g. channel.tau=2.")(f)
    return f


@click.group()
def main() -> None:
    """Safety certificates for control loops over lossy, delayed links."""


def _fail(code: int, msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    _sys.exit(code)


@main.command("augment")
@_common
def cmd_augment(config, preset, out_dir, overrides) -> None:
    """Build the lifted system and dump its matrices as JSON."""
    try:
        cfg = _apply_overrides(_load_config(config, preset), overrides)
        sys_spec, ch, _ = _parse_all(cfg)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    aug = augment.build(sys_spec, ch)
    d = aug.dims
    click.echo(f"psi={d.psi} varpi={d.varpi} kappa={d.kappa}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "augmented.json"
    path.write_text(json.dumps(augment.dump_matrices(aug), indent=2))
    click.echo(f"wrote {path}")


def _synthesize(cfg: dict):
    sys_spec, ch, spec = _parse_all(cfg)
    search = DeltaSearchConfig.from_dict(cfg.get("solver"))
    cert = certificate.synthesize(
        sys_spec, ch, spec, search, config_hash=certificate.config_digest(cfg)
    )
    return sys_spec, ch, spec, cert


@main.command("synthesize")
@_common
def cmd_synthesize(config, preset, out_dir, overrides) -> None:
    """Synthesize a gain and barrier certificate; write certificate.json."""
    try:
        cfg = _apply_overrides(_load_config(config, preset), overrides)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    try:
        _, _, _, cert = _synthesize(cfg)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    except ExhaustedSearch as e:
        _fail(EXIT_INFEASIBLE, str(e))
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "certificate.json"
    path.write_text(json.dumps(cert.to_json_dict(), indent=2, sort_keys=True))
    click.echo(f"eta    = {cert.eta:.6g}")
    click.echo(f"beta   = {cert.beta:.6g}  (per region: "
               + ", ".join(f"{b:.6g}" for b in cert.beta_per_region) + ")")
    click.echo(f"c      = {cert.c:.6g}")
    click.echo(f"xi     = {cert.xi:.6g}   (guarantee >= {cert.guarantee:.6g})")
    click.echo(f"margin = {cert.margin:.3e}")
    click.echo(f"method = {cert.method}"
               + (f", delta = {cert.delta}" if cert.delta else ""))
    if cert.xi >= 1.0:
        click.echo("warning: the bound is vacuous (xi = 1)", err=True)
    click.echo(f"wrote {path}")


# synthesize under its historical alias
main.add_command(cmd_synthesize, name="certify")


def _load_certificate(path: str) -> certificate.Certificate:
    try:
        return certificate.Certificate.from_json_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError as e:
        raise ConfigError(f"certificate file not found: {path}") from e
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"malformed certificate file: {e}") from e


@main.command("verify")
@_common
@click.argument("certificate_path", type=click.Path())
def cmd_verify(config, preset, out_dir, overrides, certificate_path) -> None:
    """Re-derive every certificate quantity from (P, F) and flag mismatches."""
    try:
        cfg = _apply_overrides(_load_config(config, preset), overrides)
        sys_spec, ch, spec = _parse_all(cfg)
        cert = _load_certificate(certificate_path)
        dims = augment.dimensions(sys_spec.n, sys_spec.m, ch.tau)
        if np.asarray(cert.P).shape != (dims.kappa, dims.kappa):
            raise ConfigError(
                f"certificate P is {np.asarray(cert.P).shape}, config implies "
                f"kappa={dims.kappa}")
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    report = certificate.recheck(cert, sys_spec, ch, spec)
    for key in ("margin", "eta", "beta", "c", "xi"):
        click.echo(f"{key:6s} = {report[key]:.6g}")
    if report["ok"]:
        click.echo("verification passed")
        return
    for issue in report["issues"]:
        click.echo(f"FLAG: {issue}", err=True)
    _sys.exit(EXIT_VERIFY)


@main.command("simulate")
@_common
@click.option("--certificate", "certificate_path", type=click.Path(), default=None,
              help="Certificate JSON providing the gain (and xi for comparison).")
@click.option("--gain", "gain_json", type=str, default=None,
              help="Explicit gain as a JSON matrix, e.g. '[[-0.3,0],[0,-0.3]]'.")
@click.option("--runs", type=int, default=None, help="Number of Monte-Carlo runs.")
@click.option("--seed", type=int, default=None, help="Base seed.")
@click.option("--tau", type=int, default=None, help="Override the uplink delay.")
@click.option("--mode", type=click.Choice(["realization", "expectation"]),
              default=None, help="Controller mode.")
@click.option("--trajectories", is_flag=True, help="Also write per-run CSV files.")
def cmd_simulate(config, preset, out_dir, overrides, certificate_path, gain_json,
                 runs, seed, tau, mode, trajectories) -> None:
    """Monte-Carlo simulation of the networked closed loop."""
    try:
        cfg = _apply_overrides(_load_config(config, preset), overrides)
        if tau is not None:
            cfg.setdefault("channel", {})["tau"] = tau
        sys_spec, ch, spec = _parse_all(cfg)
        xi_certified = None
        if certificate_path is not None:
            cert = _load_certificate(certificate_path)
            F = np.asarray(cert.F, dtype=float)
            xi_certified = cert.xi
        elif gain_json is not None:
            F = np.array(json.loads(gain_json), dtype=float)
        else:
            raise ConfigError("provide --certificate or --gain")
        if F.shape != (sys_spec.m, sys_spec.n):
            raise ConfigError(f"gain has shape {F.shape}, expected "
                              f"{(sys_spec.m, sys_spec.n)}")
        sim_cfg = netsim.SimConfig.from_dict(cfg.get("sim"))
        updates: dict = {"record_trajectories": trajectories}
        if runs is not None:
            updates["runs"] = runs
        if seed is not None:
            updates["seed"] = seed
        if mode is not None:
            updates["controller_mode"] = mode
        if sim_cfg.T != spec.T:
            updates.setdefault("T", spec.T)
        from dataclasses import replace as _replace
        sim_cfg = _replace(sim_cfg, **updates)
    except (ConfigError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))

    agg = netsim.monte_carlo(sys_spec, ch, spec, F, sim_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(
        json.dumps(agg.to_json_dict(xi_certified), indent=2, sort_keys=True))
    click.echo(f"runs={agg.runs} plant violations={agg.violations_plant} "
               f"augmented={agg.violations_augmented}")
    click.echo(f"violation frequency={agg.freq_plant:.4g} "
               f"ci95=[{agg.ci95[0]:.4g}, {agg.ci95[1]:.4g}]"
               + (f" certified xi={xi_certified:.4g}" if xi_certified is not None else ""))
    click.echo("loss counts per run (uplink, downlink): "
               f"means {agg.mean_theta_losses:.2f}, {agg.mean_phi_losses:.2f}")
    if trajectories:
        for i, r in enumerate(agg.results):
            with open(out / f"trajectory_{i:04d}.csv", "w", newline="") as fh:
                netsim.write_trajectory_csv(fh, r)
    click.echo(f"wrote {out / 'aggregate.json'}")


@main.command("sweep")
@_common
@click.option("--axis", type=click.Choice(["tau", "p_theta", "q_phi"]), required=True)
@click.option("--values", type=str, required=True,
              help="Comma-separated values, e.g. '1,2,3,4'.")
@click.option("--runs", type=int, default=100, help="Monte-Carlo runs per value.")
@click.option("--seed", type=int, default=None, help="Base seed.")
def cmd_sweep(config, preset, out_dir, overrides, axis, values, runs, seed) -> None:
    """Synthesis feasibility and empirical safety across a channel parameter."""
    try:
        cfg = _apply_overrides(_load_config(config, preset), overrides)
        raw = [v for v in values.split(",") if v.strip()]
        if not raw:
            raise ConfigError("empty sweep value list")
        vals = [int(v) if axis == "tau" else float(v) for v in raw]
    except (ConfigError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))

    rows = []
    for v in vals:
        case = json.loads(json.dumps(cfg))
        case["channel"][axis] = v
        try:
            sys_spec, ch, spec = _parse_all(case)
        except ConfigError as e:
            _fail(EXIT_CONFIG, str(e))
        feasible, xi, freq = False, None, None
        try:
            _, _, _, cert = _synthesize(case)
            feasible = True
            xi = cert.xi
            sim_cfg = netsim.SimConfig.from_dict(case.get("sim"))
            from dataclasses import replace as _replace
            sim_cfg = _replace(sim_cfg, runs=runs, T=spec.T,
                               **({"seed": seed} if seed is not None else {}))
            agg = netsim.monte_carlo(sys_spec, ch, spec, cert.F, sim_cfg)
            freq = agg.freq_plant
        except ExhaustedSearch:
            feasible = False
        except certificate.BetaNotAboveEta:
            feasible = False
        rows.append((v, feasible, xi, freq))
        click.echo(f"{axis}={v}: feasible={feasible}"
                   + (f" xi={xi:.4g}" if xi is not None else "")
                   + (f" violation_freq={freq:.4g}" if freq is not None else ""))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow([axis, "feasible", "xi", "violation_freq"])
        for v, feasible, xi, freq in rows:
            w.writerow([v, int(feasible),
                        "" if xi is None else repr(xi),
                        "" if freq is None else repr(freq)])
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
