"""Command-line front end.

    lcoupling geodesic   [--config c.json] [--set geodesic.tau2=3]
    lcoupling transport  ...
    lcoupling walk       ...
    lcoupling experiment ...
    lcoupling verify     [--flow sphere] [--trials 10]

Exit codes: 0 pass, 1 configuration error, 2 solver failure, 3 failed assertion.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from lcoupling import harness, lgeo, walk
from lcoupling.geometry import FlowManifold, GeometryError, Point

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ASSERT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "flow": {"kind": "FlatTorus", "dim": 2, "params": {"periods": [4.0, 4.0]},
             "tau_min": 1.0, "tau_max": 8.0},
    "seed": 0,
    "workers": 1,
    "out": "out",
    "verbosity": 0,
    "geodesic": {"x": [0.0, 0.0], "y": [1.0, 0.0], "tau1": 1.0, "tau2": 4.0,
                 "x_chart": 0, "y_chart": 0, "N": 256, "method": "full"},
    "transport": {"x": [0.0, 0.0], "y": [0.3, 0.0], "tau1": 1.0, "tau2": 4.0,
                  "x_chart": 0, "y_chart": 0, "N": 256},
    "walk": {"tb1": 1.0, "tb2": 4.0, "s_start": 1.0, "eps": 0.05,
             "x0": [0.0, 0.0], "y0": [0.25, 0.0], "max_steps": 100, "replica": 0,
             "solver": "shoot", "N": 256, "x0_chart": 0, "y0_chart": 0},
    "experiment": {"kind": "SupermartingaleTheta", "tb1": 1.0, "tb2": 4.0,
                   "s_start": 1.0, "eps": 0.05,
                   "checkpoints": [1.0 + 0.125 * k for k in range(8)],
                   "replicas": 1000, "x0": [0.0, 0.0], "y0": [0.25, 0.0],
                   "solver": "shoot"},
}


def schema() -> dict:
    return json.loads(resources.files("lcoupling").joinpath("config.schema.json").read_text())


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            # a new flow kind replaces the default params wholesale
            if k == "flow" and "kind" in v and v["kind"] != out[k].get("kind"):
                out[k] = copy.deepcopy(v)
            else:
                out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, items) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not an object")
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path=None, overrides=(), seed=None, workers=None, out=None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    user = apply_overrides(user, overrides)
    if seed is not None:
        user["seed"] = seed
    if workers is not None:
        user["workers"] = workers
    if out is not None:
        user["out"] = out
    validate(user)
    cfg = _merge(DEFAULTS, user)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config key {where}: {exc.message}") from exc


def build_flow(cfg) -> FlowManifold:
    return FlowManifold.from_json(cfg["flow"])


def build_spec(cfg, kind=None) -> harness.ExperimentSpec:
    e = dict(cfg["experiment"])
    e["kind"] = harness.ExperimentKind(kind or e.get("kind", "SupermartingaleTheta"))
    flow = build_flow(cfg)
    for key in ("x0", "y0", "checkpoints"):
        if key in e:
            e[key] = tuple(e[key])
    if e.get("solver") == "shoot" and not flow.curved_dim:
        e["solver"] = "closed"
    return harness.ExperimentSpec(flow=flow, seed=int(cfg["seed"]), **e)


# --------------------------------------------------------------------------
# output helpers


def _out_dir(cfg) -> Path:
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def render_svg(report: harness.ExperimentReport, path: Path):
    """Line chart of checkpoint means with a +-2 SE band; byte-stable output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [c for c in report.checkpoints if "mean" in c and "t" in c]
    with matplotlib.rc_context({"svg.hashsalt": "lcoupling", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        if rows:
            t = np.array([r["t"] for r in rows], dtype=float)
            m = np.array([r["mean"] for r in rows], dtype=float)
            se = np.array([r["se"] if np.isfinite(r["se"]) else 0.0 for r in rows])
            order = np.argsort(t, kind="stable")
            t, m, se = t[order], m[order], se[order]
            ax.fill_between(t, m - 2 * se, m + 2 * se, alpha=0.3, label="mean ± 2 SE")
            ax.plot(t, m, marker="o", label="mean")
            ax.legend()
        ax.set_xlabel("t")
        ax.set_ylabel(report.experiment)
        ax.set_title(f"{report.experiment}: {'pass' if report.passed else 'FAIL'}")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _g(v) -> str:
    return "{:.10g}".format(float(v) + 0.0)


def _say(*a):
    print(*a, flush=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_geodesic(cfg) -> int:
    flow = build_flow(cfg)
    g = cfg["geodesic"]
    x = Point(g["x"], g["x_chart"])
    y = Point(g["y"], g["y_chart"])
    res = lgeo.solve_min_lgeodesic(flow, x, g["tau1"], y, g["tau2"], N=g["N"],
                                   method=g["method"])
    dl1, dl2 = lgeo.dL_boundary(flow, res)
    _say("L = {:.10g}".format(res.action))
    _say("Z = " + " ".join(_g(v) for v in res.initial_Z.components))
    _say("dL/dtau1 = " + _g(dl1))
    _say("dL/dtau2 = " + _g(dl2))
    _say(f"multiplicity_hint = {res.multiplicity_hint}")
    obj = res.to_json()
    obj["dL_dtau"] = [dl1, dl2]
    _write(_out_dir(cfg) / "geodesic.json",
           json.dumps(harness._clean(obj), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_transport(cfg) -> int:
    flow = build_flow(cfg)
    g = cfg["transport"]
    x = Point(g["x"], g["x_chart"])
    y = Point(g["y"], g["y_chart"])
    frame = flow.section_frame(g["tau1"], x)
    W, drift, res = lgeo.transport_frame(flow, x, g["tau1"], y, g["tau2"], frame, N=g["N"])
    yc = flow.canonical(y)
    _say("L = {:.10g}".format(res.action))
    _say("gram_drift = {:.3e}".format(drift))
    for row in W:
        _say("e* = " + " ".join(_g(v) for v in row))
    obj = {"L": res.action, "gram_drift": drift, "frame_source": frame,
           "frame_target": W, "target": list(yc.coords), "target_chart": yc.chart}
    _write(_out_dir(cfg) / "transport.json",
           json.dumps(harness._clean(obj), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_walk(cfg) -> int:
    flow = build_flow(cfg)
    w = dict(cfg["walk"])
    if w["solver"] == "shoot" and not flow.curved_dim:
        w["solver"] = "closed"
    for k in ("x0", "y0"):
        w[k] = tuple(w[k])
    wc = walk.WalkConfig(flow=flow, seed=int(cfg["seed"]), **w)
    path = walk.run_coupled_walk(wc)
    out = _out_dir(cfg)
    _write(out / "walk.csv", path.to_csv())
    if path.aborted:
        _say(f"walk aborted: {path.aborted}")
        return EXIT_SOLVER
    floor_ok = all(th >= walk.theta_floor(flow, wc.tb1, wc.tb2, t) - 1e-9
                   for t, th in zip(path.t, path.Theta))
    _say("Theta = " + _g(path.Theta[-1]))
    _say(f"theta_floor = {'ok' if floor_ok else 'violated'}")
    return EXIT_OK


def _emit_report(cfg, rep: harness.ExperimentReport, stem: str):
    out = _out_dir(cfg)
    _write(out / f"{stem}.json", rep.to_json())
    _write(out / f"{stem}.csv", rep.to_csv())
    render_svg(rep, out / f"{stem}.svg")


def _print_checks(rep):
    for c in rep.criteria:
        if "trials" in c:
            _say("{:<10} {:<28} {:>4}/{:<4} skipped={:<3} max_err={:.2e}".format(
                c.get("module", ""), c["name"], c["passed"], c["trials"],
                c["skipped"], c["max_error"]))
        else:
            _say("{:<28} {}".format(c["name"], "ok" if c["ok"] else "FAIL"))


def cmd_experiment(cfg) -> int:
    spec = build_spec(cfg)
    rep = harness.run_experiment(spec, workers=int(cfg["workers"]))
    _emit_report(cfg, rep, "report")
    _print_checks(rep)
    _say("pass" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_ASSERT


def cmd_verify(cfg, flow_name="all", trials=100, hessian=True) -> int:
    flows = harness.default_flows()
    if flow_name != "all":
        if flow_name not in flows:
            raise ConfigError(f"unknown flow {flow_name!r}; choose from {sorted(flows)}")
        flows = {flow_name: flows[flow_name]}
    summary = {}
    ok = True
    for name, flow in flows.items():
        spec = harness.ExperimentSpec(harness.ExperimentKind.IDENTITY, flow,
                                      trials=trials, seed=int(cfg["seed"]))
        rep = harness.experiment_identity_suite(spec, hessian=hessian)
        _say(f"[{name}]")
        _print_checks(rep)
        summary[name] = rep.to_dict()
        ok &= rep.passed
    summary = {"pass": ok, "flows": summary}
    _write(_out_dir(cfg) / "verify.json",
           json.dumps(harness._clean(summary), sort_keys=True, indent=1) + "\n")
    _say("pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ASSERT


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--out", type=str, default=None)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p = argparse.ArgumentParser(prog="lcoupling", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("geodesic", "transport", "walk", "experiment"):
        sub.add_parser(name, parents=[common])
    v = sub.add_parser("verify", parents=[common])
    v.add_argument("--flow", default="all")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--no-hessian", action="store_true",
                   help="skip the second-difference Hessian checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a u64")
        cfg = load_config(args.config, args.set, args.seed, args.workers, args.out)
        if args.command == "verify":
            if args.trials < 0:
                raise ConfigError("--trials must be non-negative")
            return cmd_verify(cfg, args.flow, args.trials, not args.no_hessian)
        return {"geodesic": cmd_geodesic, "transport": cmd_transport,
                "walk": cmd_walk, "experiment": cmd_experiment}[args.command](cfg)
    except (ConfigError, harness.SpecError, GeometryError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (lgeo.SolverError, walk.WalkAborted) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
