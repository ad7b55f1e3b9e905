"""Command-line entry point: synth, preprocess, train, eval, sweep, importance, trace, infer.

Every command merges defaults, an optional ``--config`` JSON file and flags
(flags win), validates everything before work starts, writes into
``<out>.tmp`` and renames it to ``<out>`` on success.  Each output directory
holds ``config.json`` (the effective configuration, usable as ``--config``)
and ``inputs.json`` (SHA-256 of every input file).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from .channels import GROUP_NAMES
from .errors import ConfigError, SensorPerfError
from .evaluation import (
    TABLE_DTS,
    TABLE_TAUS,
    EvalReport,
    RepeatResult,
    SplitPlan,
    evaluate_bundle,
    export_trace,
    feature_importance,
    fit_model,
    importance_table,
    nan_to_none,
    population_calibration,
    prepare_player,
    repeat_seed,
    run_experiment,
    sweep,
)
from .ingest import Calibration, load_session
from .label import build_targets, write_targets
from .model import MODEL_TYPES, ModelBundle
from .resample import write_features
from .stream import ReplayStats, check_compatible, replay, snapshot_bundle
from .synth import SynthConfig, write_dataset
from .train import TrainConfig

TRAIN_FIELDS = [f for f in fields(TrainConfig) if f.name != "seed"]
SYNTH_FIELDS = [f for f in fields(SynthConfig) if f.name not in ("seed", "rates")]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def find_manifests(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ConfigError(f"{path}: no such session file or directory")
    found = sorted(p for p in path.glob("**/manifest.json") if "private" not in p.parts)
    if not found:
        raise ConfigError(f"{path}: no session manifests found")
    return found


def session_files(manifest: Path) -> list[Path]:
    m = json.loads(manifest.read_text(encoding="utf-8"))
    return [manifest, manifest.parent / m["events"], *(manifest.parent / v for _, v in sorted(m["channels"].items()))]


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def inputs_hash(paths: list[Path]) -> dict:
    digests = {str(p): file_digest(p) for p in paths}
    combined = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(digests.items())).encode()).hexdigest()
    return {"combined": combined, "files": digests}


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


class OutputDir:
    """Write into ``<out>.tmp``; rename to ``<out>`` only when the command succeeds."""

    def __init__(self, out, force: bool = False) -> None:
        self.final = Path(out)
        self.tmp = self.final.with_name(self.final.name + ".tmp")
        if self.final.exists() and any(self.final.iterdir()) and not force:
            raise ConfigError(f"{self.final}: output directory exists and is not empty (use --force)")

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        self.tmp.rename(self.final)
        return False


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

COMMON_DEFAULTS = {"seed": 0, "force": False}

COMMAND_DEFAULTS = {
    "synth": {"rates": None, **{f.name: f.default for f in SYNTH_FIELDS}},
    "preprocess": {"dt": 20.0, "tau": 180.0},
    "train": {"model": "gru-att", "dt": 20.0, "tau": 180.0, "repeat": 0,
              **{f.name: f.default for f in TRAIN_FIELDS}},
    "eval": {"model": None, "bundle": None, "dt": 20.0, "tau": 180.0, "repeats": None, "workers": 1,
             **{f.name: f.default for f in TRAIN_FIELDS}},
    "sweep": {"models": list(MODEL_TYPES), "dt_list": list(TABLE_DTS), "tau_list": list(TABLE_TAUS),
              "repeats": None, "workers": 1, **{f.name: f.default for f in TRAIN_FIELDS}},
    "importance": {},
    "trace": {"dt": None, "tau": None},
    "infer": {"dt": None, "tau": None, "calibration": None, "stop_after": None, "snapshot": None,
              "resume": None},
}

# keys that name files; they are not part of the reproducibility config echo
PATH_KEYS = {"out", "force", "config", "sessions", "session", "bundle", "bundles", "calibration", "snapshot", "resume"}


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults < config file < flags; returns the effective configuration."""
    cfg = {**COMMON_DEFAULTS, **COMMAND_DEFAULTS[command]}
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if getattr(ns, "config", None):
        try:
            file_cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{ns.config}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{ns.config}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{ns.config}: config must be a JSON object")
        file_cfg = {k: v for k, v in file_cfg.items() if k not in PATH_KEYS and k != "command"}
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise ConfigError(f"{ns.config}: unknown key(s) for {command}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(seed=int(cfg["seed"]), **{f.name: type(f.default)(cfg[f.name]) for f in TRAIN_FIELDS})
    tc.validate()
    return tc


def echo(out: Path, command: str, cfg: dict, inputs: list[Path]) -> None:
    dump_json({"command": command, **{k: v for k, v in sorted(cfg.items()) if k not in PATH_KEYS}},
              out / "config.json")
    dump_json(inputs_hash(inputs), out / "inputs.json")


def load_players(sessions, dt_list, calibration: Calibration | None = None):
    manifests = find_manifests(sessions)
    players, files = [], []
    for m in manifests:
        players.append(prepare_player(load_session(m), dt_list, calibration))
        files.extend(session_files(m))
    ids = [p.player_id for p in players]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate player ids among sessions")
    return players, files


def _check_model(name: str) -> str:
    if name not in MODEL_TYPES:
        raise ConfigError(f"unknown model {name!r}; expected one of {', '.join(MODEL_TYPES)}")
    return name


def _check_positive(cfg: dict, *keys: str) -> None:
    for k in keys:
        v = cfg.get(k)
        vals = v if isinstance(v, list) else [v]
        if v is None or any(not float(x) > 0 for x in vals):
            raise ConfigError(f"{k} must be positive, got {v}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(ns, cfg: dict) -> int:
    sc = SynthConfig(seed=int(cfg["seed"]), **{f.name: cfg[f.name] for f in SYNTH_FIELDS})
    if cfg["rates"] is not None:
        if not isinstance(cfg["rates"], dict):
            raise ConfigError("rates must map channel names to Hz")
        sc.rates.update({k: float(v) for k, v in cfg["rates"].items()})
    sc.validate()
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "synth", cfg, [])
        manifests = write_dataset(sc, out)
    print(f"wrote {len(manifests)} sessions to {ns.out}")
    return 0


def cmd_preprocess(ns, cfg: dict) -> int:
    _check_positive(cfg, "dt", "tau")
    dt, tau = float(cfg["dt"]), float(cfg["tau"])
    players, files = load_players(ns.sessions, [dt])
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "preprocess", cfg, files)
        for p in players:
            fs = p.feature(dt)
            write_features(fs, out / f"{p.player_id}_features.csv")
            ts = build_targets(p.events, p.duration_ms, fs.n_bins, dt, tau, p.player_id)
            write_targets(ts, out / f"{p.player_id}_targets.csv")
            dump_json(p.calibration.to_dict(), out / f"{p.player_id}_calibration.json")
    print(f"preprocessed {len(players)} sessions at dt={dt:g} s, tau={tau:g} s")
    return 0


def cmd_train(ns, cfg: dict) -> int:
    model = _check_model(cfg["model"])
    _check_positive(cfg, "dt", "tau")
    dt, tau = float(cfg["dt"]), float(cfg["tau"])
    tc = train_config(cfg)
    players, files = load_players(ns.sessions, [dt])
    by_id = {p.player_id: p for p in players}
    plan = SplitPlan.for_model(model, int(cfg["seed"]), list(by_id))
    repeat = int(cfg["repeat"])
    if repeat < 0:
        raise ConfigError("repeat must be >= 0")
    sp = plan.split(repeat)
    rcfg = TrainConfig(**{**tc.to_dict(), "seed": repeat_seed(tc.seed, repeat)})
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "train", cfg, files)
        bundle, log = fit_model(model, [by_id[i] for i in sp.train], [by_id[i] for i in sp.val], dt, tau, rcfg)
        bundle.extra["split"] = {"train": list(sp.train), "val": list(sp.val), "test": list(sp.test)}
        bundle.extra["repeat"] = repeat
        bundle.extra["calibration"] = population_calibration([by_id[i] for i in sp.train]).to_dict()
        if log is not None:
            bundle.extra["best_epoch"] = log.best_epoch
            bundle.extra["val_auc"] = log.val_auc[log.best_epoch - 1]
            log.write_csv(out / "train_log.csv")
        bundle.save(out / "bundle.json")
    msg = f"trained {model} on {len(sp.train)} players"
    if log is not None:
        msg += f"; best epoch {log.best_epoch}, validation AUC {log.val_auc[log.best_epoch - 1]:.4f}"
    print(msg)
    return 0


def _bundle_report(bundle: ModelBundle, players, ids, dt, tau) -> EvalReport:
    aucs, excluded, pooled, a_sum, a_cnt = evaluate_bundle(bundle, [players[i] for i in ids], dt, tau)
    return EvalReport(bundle.model_type, dt, tau, [RepeatResult(int(bundle.extra.get("repeat", 0)), aucs, excluded,
                                                                pooled, a_sum, a_cnt)])


def cmd_eval(ns, cfg: dict) -> int:
    if (cfg["bundle"] is None) == (cfg["model"] is None):
        raise ConfigError("eval needs exactly one of --bundle or --model")
    if cfg["bundle"] is not None:
        bundle = ModelBundle.load(cfg["bundle"])
        dt, tau = bundle.dt_s, bundle.tau_s
        players, files = load_players(ns.sessions, [dt])
        by_id = {p.player_id: p for p in players}
        split = bundle.extra.get("split", {})
        test = split.get("test") or sorted(by_id)
        missing = sorted(set(test) - set(by_id))
        if missing:
            raise ConfigError(f"bundle test players not among sessions: {', '.join(missing)}")
        with OutputDir(ns.out, cfg["force"]) as out:
            echo(out, "eval", cfg, [Path(cfg["bundle"]), *files])
            report = _bundle_report(bundle, by_id, test, dt, tau)
            result = report.to_dict()
            if split.get("val"):
                val = _bundle_report(bundle, by_id, split["val"], dt, tau)
                result["validation_mean_auc"] = val.mean_auc
            (out / "report.json").write_text(json.dumps(nan_to_none(result), indent=1, sort_keys=True) + "\n")
            (out / "report.txt").write_text(report.to_text())
        print(report.to_text(), end="")
        if "validation_mean_auc" in result:
            print(f"validation AUC   {result['validation_mean_auc']:.4f}")
        return 0

    model = _check_model(cfg["model"])
    _check_positive(cfg, "dt", "tau")
    dt, tau = float(cfg["dt"]), float(cfg["tau"])
    tc = train_config(cfg)
    players, files = load_players(ns.sessions, [dt])
    plan = SplitPlan.for_model(model, int(cfg["seed"]), [p.player_id for p in players], cfg["repeats"])
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "eval", cfg, files)
        report = run_experiment(players, model, dt, tau, plan, tc, workers=cfg["workers"])
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_sweep(ns, cfg: dict) -> int:
    models = [_check_model(m) for m in cfg["models"]]
    _check_positive(cfg, "dt_list", "tau_list")
    tc = train_config(cfg)
    dts = [float(v) for v in cfg["dt_list"]]
    taus = [float(v) for v in cfg["tau_list"]]
    players, files = load_players(ns.sessions, dts)
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "sweep", cfg, files)
        res = sweep(players, models, dts, taus, int(cfg["seed"]), tc, cfg["repeats"], cfg["workers"])
        text = []
        for m in res.model_types:
            res.write_csv(m, out / f"sweep_{m}.csv")
            res.write_csv(m, out / f"sweep_{m}_best.csv", stat="best_repeat")
            res.write_csv(m, out / f"sweep_{m}_pooled.csv", stat="pooled")
            text.append(res.to_text(m))
        cells = [rep.summary() for _, rep in sorted(res.reports.items())]
        (out / "sweep.json").write_text(json.dumps(nan_to_none(cells), indent=1, sort_keys=True) + "\n")
        dump_json(res.slices(), out / "slices.json")
        (out / "sweep.txt").write_text("\n".join(text))
    print("\n".join(text), end="")
    return 0


def cmd_importance(ns, cfg: dict) -> int:
    bundles = [ModelBundle.load(b) for b in ns.bundles]
    dts = sorted({b.dt_s for b in bundles})
    players, files = load_players(ns.sessions, dts)
    by_id = {p.player_id: p for p in players}
    test_sets = []
    for path, b in zip(ns.bundles, bundles):
        ids = b.extra.get("split", {}).get("test") or sorted(by_id)
        missing = sorted(set(ids) - set(by_id))
        if missing:
            raise ConfigError(f"{path}: test players not among sessions: {', '.join(missing)}")
        test_sets.append([by_id[i] for i in ids])
    alpha = feature_importance(bundles, test_sets)
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "importance", cfg, [*(Path(b) for b in ns.bundles), *files])
        dump_json({"n_bundles": len(bundles), "mean_attention": dict(zip(GROUP_NAMES, alpha))},
                  out / "importance.json")
        (out / "importance.txt").write_text(importance_table(alpha))
    print(importance_table(alpha), end="")
    return 0


def cmd_trace(ns, cfg: dict) -> int:
    bundle = ModelBundle.load(ns.bundle)
    dt = bundle.dt_s if cfg["dt"] is None else float(cfg["dt"])
    tau = bundle.tau_s if cfg["tau"] is None else float(cfg["tau"])
    if dt != bundle.dt_s:
        raise ConfigError(f"bundle was trained at dt={bundle.dt_s:g} s, requested dt={dt:g} s")
    manifest = Path(ns.session)
    player = prepare_player(load_session(manifest), [dt])
    with OutputDir(ns.out, cfg["force"]) as out:
        echo(out, "trace", cfg, [Path(ns.bundle), *session_files(manifest)])
        n = export_trace(bundle, player, dt, tau, out / "trace.csv")
    print(f"wrote {n} trace rows")
    return 0


def cmd_infer(ns, cfg: dict) -> int:
    bundle = ModelBundle.load(ns.bundle)
    session = load_session(ns.session)
    check_compatible(bundle, session, cfg["dt"], cfg["tau"])
    calibration = None
    if cfg["calibration"] is not None:
        try:
            calibration = Calibration.from_dict(json.loads(Path(cfg["calibration"]).read_text(encoding="utf-8")))
        except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{cfg['calibration']}: unreadable calibration ({exc})") from None
    resume = None
    if cfg["resume"] is not None:
        snap = ModelBundle.load(cfg["resume"])
        resume = snap.extra.get("snapshot")
        if resume is None:
            raise ConfigError(f"{cfg['resume']}: bundle holds no snapshot")
        if resume.get("player_id") not in (None, session.player_id):
            raise ConfigError(f"snapshot belongs to {resume['player_id']}, session is {session.player_id}")
        bundle = snap
    stop_after = cfg["stop_after"]
    if stop_after is not None and cfg["snapshot"] is None:
        raise ConfigError("--stop-after needs --snapshot")
    stats = ReplayStats()
    out = sys.stdout
    out.write("bin_index,timestamp_ms,probability\n")
    last = None
    for pred in replay(bundle, session, calibration, resume, stats):
        out.write(f"{pred.bin_index},{pred.timestamp_ms!r},{pred.probability!r}\n")
        last = pred
        if stop_after is not None and pred.bin_index >= int(stop_after):
            break
    out.flush()
    if cfg["snapshot"] is not None and last is not None:
        snapshot_bundle(bundle, last, session.player_id).save(cfg["snapshot"])
    s = stats.summary()
    print(json.dumps({"latency": s, "budget_ms": 5.0, "within_budget": bool(s["median_ms"] < 5.0)}, sort_keys=True),
          file=sys.stderr)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "importance": cmd_importance,
    "trace": cmd_trace,
    "infer": cmd_infer,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_dataclass_flags(p: argparse.ArgumentParser, flds) -> None:
    for f in flds:
        kind = type(f.default)
        p.add_argument(_flag(f.name), dest=f.name, type=kind, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensorperf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_: str, out: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", metavar="PATH", help="JSON file with values for any flag")
        p.add_argument("--seed", type=int, metavar="N")
        if out:
            p.add_argument("--out", required=True, metavar="DIR")
            p.add_argument("--force", action="store_true", help="replace an existing output directory")
        return p

    p = command("synth", "generate synthetic sessions")
    _add_dataclass_flags(p, SYNTH_FIELDS)

    p = command("preprocess", "clean, resample and label sessions")
    p.add_argument("--sessions", required=True, metavar="PATH")
    p.add_argument("--dt", type=float, metavar="SECONDS")
    p.add_argument("--tau", type=float, metavar="SECONDS")

    p = command("train", "train one model on one cross-validation split")
    p.add_argument("--sessions", required=True, metavar="PATH")
    p.add_argument("--model", choices=MODEL_TYPES)
    p.add_argument("--dt", type=float, metavar="SECONDS")
    p.add_argument("--tau", type=float, metavar="SECONDS")
    p.add_argument("--repeat", type=int, metavar="N", help="which split of the repeated plan to use")
    _add_dataclass_flags(p, TRAIN_FIELDS)

    p = command("eval", "score a bundle, or run a repeated cross-validation experiment")
    p.add_argument("--sessions", required=True, metavar="PATH")
    p.add_argument("--bundle", metavar="PATH")
    p.add_argument("--model", choices=MODEL_TYPES)
    p.add_argument("--dt", type=float, metavar="SECONDS")
    p.add_argument("--tau", type=float, metavar="SECONDS")
    p.add_argument("--repeats", type=int, metavar="N")
    p.add_argument("--workers", type=int, metavar="N")
    _add_dataclass_flags(p, TRAIN_FIELDS)

    p = command("sweep", "evaluate models over a (dt, tau) grid")
    p.add_argument("--sessions", required=True, metavar="PATH")
    p.add_argument("--models", type=_str_list, metavar="LIST")
    p.add_argument("--dt-list", dest="dt_list", type=_float_list, metavar="LIST")
    p.add_argument("--tau-list", dest="tau_list", type=_float_list, metavar="LIST")
    p.add_argument("--repeats", type=int, metavar="N")
    p.add_argument("--workers", type=int, metavar="N")
    _add_dataclass_flags(p, TRAIN_FIELDS)

    p = command("importance", "mean attention per feature group on test players")
    p.add_argument("--bundles", nargs="+", required=True, metavar="PATH")
    p.add_argument("--sessions", required=True, metavar="PATH")

    p = command("trace", "export per-step alpha, h, p, y and prediction")
    p.add_argument("--bundle", required=True, metavar="PATH")
    p.add_argument("--session", required=True, metavar="MANIFEST")
    p.add_argument("--dt", type=float, metavar="SECONDS")
    p.add_argument("--tau", type=float, metavar="SECONDS")

    p = command("infer", "replay a session and stream predictions to stdout", out=False)
    p.add_argument("--bundle", required=True, metavar="PATH")
    p.add_argument("--session", required=True, metavar="MANIFEST")
    p.add_argument("--dt", type=float, metavar="SECONDS")
    p.add_argument("--tau", type=float, metavar="SECONDS")
    p.add_argument("--calibration", metavar="PATH", help="override the bundle's clip bounds and EMG reference")
    p.add_argument("--stop-after", dest="stop_after", type=int, metavar="BIN")
    p.add_argument("--snapshot", metavar="PATH", help="write the replay state after the last emitted bin")
    p.add_argument("--resume", metavar="PATH", help="continue from a snapshot written by --snapshot")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns.command, ns)
        for k in ("sessions", "session", "bundle", "bundles", "out"):
            if hasattr(ns, k):
                cfg[k] = getattr(ns, k)
        if cfg.get("workers") is not None and cfg["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        return COMMANDS[ns.command](ns, cfg)
    except SensorPerfError as exc:
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": exc.code, "message": msg}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
