"""Command-line entry point: ``hijacklab <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flag, missing input, malformed
config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import defense as df
from . import envbench as eb
from . import evalsuite as ev
from . import hijack as hj
from .config import ConfigError, RunConfig, load_config
from .flowmatch import load_meta, load_policy, save_policy
from .report import build_report, write_csv

log = logging.getLogger("hijacklab")

TRIGGERS = {"patch": "patch", "state": "object_state", "semantic": "scene_semantic"}
ATTACKS = {"pl": "pose_lock", "ip": "initial_perturbation"}
SEED_ENV = "FLOWHIJACK_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _need(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def resolve_seed(arg: int | None, cfg: RunConfig) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.train.seed


def _side(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix) if out.suffix == "" else out.with_name(out.stem + suffix)


class Run:
    """Tracks inputs/outputs of one invocation and writes its manifest."""

    def __init__(self, command: str, argv: list[str], cfg: RunConfig, seed: int):
        self.command, self.argv, self.cfg, self.seed = command, argv, cfg, seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def input(self, p: Path) -> Path:
        self.inputs[str(p)] = sha256(p)
        return p

    def output(self, p: Path) -> Path:
        self.outputs.append(str(p))
        return p

    def finish(self, manifest: Path, extra: dict | None = None) -> None:
        body = {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.cfg.to_dict(),
            "seeds": {"seed": self.seed},
            "inputs": self.inputs,
            "outputs": self.outputs + [str(manifest)],
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "wall_clock_seconds": round(time.perf_counter() - self.t0, 3),
        }
        if extra:
            body.update(extra)
        manifest.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _trigger(cfg: RunConfig, name: str | None) -> eb.TriggerSpec | None:
    if name in (None, "none"):
        return None
    return replace(cfg.trigger, family=TRIGGERS[name])


def _samples(cfg: RunConfig, demos, trig=None, spec=None, seed=0) -> hj.SampleSet:
    return hj.build_samples(demos, trig, spec, cfg.train.jitter_copies, cfg.train.jitter, seed)


def _loss_csv(path: Path, rep: hj.TrainerReport) -> None:
    write_csv(path, "loss", ((i + 1, *r[1:]) for i, r in enumerate(rep.rows())))


def _label(meta: dict) -> str:
    return meta.get("label", "policy")


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(a, cfg: RunConfig, run: Run) -> None:
    out = Path(a.out)
    demos = eb.gen_dataset(a.demos or cfg.train.demos_per_task, run.seed, cfg.poison.rate)
    eb.write_dataset(run.output(out), demos)
    run.finish(_side(out, ".manifest.json"))


def cmd_train_clean(a, cfg: RunConfig, run: Run) -> None:
    data = run.input(_need(a.data, "--data"))
    out = Path(a.out)
    samples = _samples(cfg, eb.read_dataset(data), seed=run.seed)
    tc = replace(cfg.train.train_config(a.steps), seed=run.seed)
    rep = hj.train_clean(tc, samples, cfg=cfg.flow, log_every=a.log_every)
    save_policy(run.output(out), rep.params, cfg.flow, {"kind": "clean", "label": "clean"})
    run.output(Path(str(out) + ".json"))
    _loss_csv(run.output(_side(out, ".loss.csv")), rep)
    run.finish(_side(out, ".manifest.json"))


def cmd_train_attack(a, cfg: RunConfig, run: Run) -> None:
    data = run.input(_need(a.data, "--data"))
    clean = run.input(_need(a.clean, "--clean"))
    out = Path(a.out)
    params, flow = load_policy(clean)
    weights = cfg.weights if a.tau0 is None else replace(cfg.weights, tau0=a.tau0)
    trig = _trigger(cfg, a.trigger)
    spec = replace(cfg.poison.spec(), strategy=ATTACKS[a.attack])
    samples = _samples(cfg, eb.read_dataset(data), trig, spec, run.seed)
    drops = sorted(set(a.drop or ()))
    tc = replace(
        cfg.train.train_config(a.steps or cfg.train.attack_steps),
        seed=run.seed, drop_fm="fm" in drops, drop_bd="bd" in drops, drop_mimic="mimic" in drops,
    )
    rep = hj.train(tc, weights, samples, params, flow, log_every=a.log_every)
    label = f"flowhijack-{a.attack}/{a.trigger}" + "".join(f" drop_{d}" for d in drops)
    if a.tau0 is not None:
        label += f" tau0={a.tau0:g}"
    meta = {"kind": "attack", "label": label, "attack": a.attack, "trigger": a.trigger, "drops": drops, "tau0": weights.tau0}
    save_policy(run.output(out), rep.params, flow, meta)
    run.output(Path(str(out) + ".json"))
    _loss_csv(run.output(_side(out, ".loss.csv")), rep)
    run.finish(_side(out, ".manifest.json"))


def cmd_train_badvla(a, cfg: RunConfig, run: Run) -> None:
    data = run.input(_need(a.data, "--data"))
    clean = run.input(_need(a.clean, "--clean"))
    out = Path(a.out)
    params, flow = load_policy(clean)
    trig = _trigger(cfg, a.trigger)
    samples = _samples(cfg, eb.read_dataset(data), seed=run.seed)
    tc = replace(cfg.train.train_config(a.steps or cfg.train.attack_steps), seed=run.seed)
    rep = hj.badvla_baseline_train(tc, samples, trig, params, flow)
    meta = {"kind": "badvla", "label": f"badvla/{a.trigger}", "trigger": a.trigger}
    save_policy(run.output(out), rep.params, flow, meta)
    run.output(Path(str(out) + ".json"))
    n1 = len(rep.cosine)
    rows = [(i + 1, None, None, None, c, None) for i, c in enumerate(rep.cosine)]
    rows += [(n1 + i + 1, l, None, None, l, None) for i, l in enumerate(rep.l_fm)]
    write_csv(run.output(_side(out, ".loss.csv")), "loss", rows)
    run.finish(_side(out, ".manifest.json"))


def cmd_eval(a, cfg: RunConfig, run: Run) -> None:
    model = run.input(_need(a.model, "--model"))
    out = Path(a.out)
    params, flow = load_policy(model)
    label = _label(load_meta(model))
    trig = _trigger(cfg, a.trigger)
    clean_res = ev.evaluate(params, a.episodes, None, flow, run.seed)
    rows = [(f"{label}:untriggered", ev.compute_sr_asr(clean_res).sr, None, len(clean_res))]
    summary: dict = {"label": label, "sr": rows[0][1]}
    trig_res = []
    if trig is not None:
        trig_res = ev.evaluate(params, a.episodes, trig, flow, run.seed)
        m = ev.compute_sr_asr(trig_res)
        rows.append((f"{label}:triggered:{a.trigger}", None, m.asr, len(trig_res)))
        summary["asr"] = m.asr
        summary["asr_per_task"] = {str(k): v[1] for k, v in m.per_task.items()}
    summary["sr_per_task"] = {str(k): v[0] for k, v in ev.compute_sr_asr(clean_res).per_task.items()}
    write_csv(run.output(out), "metrics", rows)

    shown = trig_res or clean_res
    speed_rows = []
    for i, r in enumerate(shown):
        if r.steps >= 2:
            for k, s in enumerate(np.linalg.norm(np.diff(r.positions, axis=0), axis=1)):
                speed_rows.append((i, k + 1, float(s)))
    write_csv(run.output(_side(out, ".speed.csv")), "speed", speed_rows)
    if a.reference:
        ref_path = run.input(_need(a.reference, "--reference"))
        ref_params, _ = load_policy(ref_path)
        ref = ev.reference_peak(ev.evaluate(ref_params, a.episodes, None, flow, run.seed))
        summary["reference_peak"] = ref
        summary["anomaly"] = ev.mean_anomaly(shown, ref)
    if a.clean_model:
        if trig is None:
            raise UsageError("--clean-model needs --trigger")
        cm = run.input(_need(a.clean_model, "--clean-model"))
        data = run.input(_need(a.data, "--data"))
        clean_params, _ = load_policy(cm)
        s = hj.build_samples(eb.read_dataset(data), jitter_copies=0)
        rng = np.random.default_rng([run.seed, 0xB0C])
        idx = np.sort(rng.choice(len(s), size=min(a.probes, len(s)), replace=False))
        o = s.obs[idx]
        rep = ev.field_projection(params, clean_params, o, eb.apply_trigger(o, trig), s.act[idx], flow, rng)
        prow = [("benign", *p) for p in rep.benign] + [("attack", *p) for p in rep.attack]
        write_csv(run.output(_side(out, ".projection.csv")), "projection", prow)
        summary["bhattacharyya"] = rep.overlap
    summary_path = run.output(_side(out, ".summary.json"))
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.finish(_side(out, ".manifest.json"))


def _floats(text: str, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{flag}: needs at least one value")
    return vals


def cmd_sweep(a, cfg: RunConfig, run: Run) -> None:
    model = run.input(_need(a.model, "--model"))
    out = Path(a.out)
    params, flow = load_policy(model)
    base = _trigger(cfg, a.trigger)
    values = _floats(a.values, "--values")
    try:
        for v in values:
            ev.sweep_trigger(base, a.axis, v)
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from None
    rows = ev.robustness_sweep(params, a.axis, values, base, flow, run.seed, a.episodes)
    write_csv(run.output(out), "sweep", ((a.axis, r.value, r.sr, r.asr) for r in rows))
    run.finish(_side(out, ".manifest.json"))


def cmd_defend(a, cfg: RunConfig, run: Run) -> None:
    model = run.input(_need(a.model, "--model"))
    out = Path(a.out)
    data = None if a.no_finetune else run.input(_need(a.data, "--data"))
    params, flow = load_policy(model)
    trig = _trigger(cfg, a.trigger)
    try:
        fc = df.FilterConfig(tuple(_floats(a.thresholds, "--thresholds")))
        ft = df.FinetuneConfig(tuple(int(v) for v in _floats(a.checkpoints, "--checkpoints")), seed=run.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    clean_res = ev.evaluate(params, a.episodes, None, flow, run.seed)
    trig_res = ev.evaluate(params, a.episodes, trig, flow, run.seed)
    sr = ev.compute_sr_asr(clean_res).sr
    table = df.filter_table(clean_res, trig_res, fc)
    write_csv(run.output(out), "filter", ((r.threshold, sr, r.residual_asr, r.clean_flag_rate) for r in table))
    if data is not None:
        samples = df.ensure_clean(_samples(cfg, eb.read_dataset(data), seed=run.seed))
        rep = df.clean_finetune(params, samples, trig, ft, flow, a.episodes, run.seed)
        write_csv(run.output(_side(out, ".finetune.csv")), "finetune", ((r.step, r.sr, r.asr, None) for r in rep.rows))
    run.finish(_side(out, ".manifest.json"))


def cmd_report(a, cfg: RunConfig, run: Run) -> None:
    run_dir = Path(a.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"--run-dir: directory not found: {run_dir}")
    out_dir = Path(a.out_dir) if a.out_dir else run_dir
    try:
        counts = build_report(run_dir, out_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    run.output(out_dir / "summary.md")
    for p in sorted(out_dir.glob("*.svg")):
        run.output(p)
    run.finish(out_dir / "report.manifest.json", {"row_counts": counts})


def cmd_rerun(a, cfg: RunConfig, run: Run) -> int:
    path = _need(a.manifest, "manifest")
    try:
        m = json.loads(path.read_text())
        argv = list(m["argv"])
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: not a run manifest ({exc})") from None
    for p, digest in m.get("inputs", {}).items():
        if not Path(p).is_file():
            raise UsageError(f"{path}: recorded input missing: {p}")
        if sha256(p) != digest:
            raise UsageError(f"{path}: input changed since the recorded run: {p}")
    if "--seed" not in argv:
        argv += ["--seed", str(m["seeds"]["seed"])]
    return main(argv)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-clean": cmd_train_clean,
    "train-attack": cmd_train_attack,
    "train-badvla": cmd_train_badvla,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "defend": cmd_defend,
    "report": cmd_report,
    "rerun": cmd_rerun,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hijacklab", description="Flow-matching policy backdoor lab.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help=f"master seed (falls back to ${SEED_ENV}, then train.seed)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if out:
            sp.add_argument("--out", required=True)
        return sp

    g = common(sub.add_parser("gen-data", help="write scripted demonstrations as JSONL"))
    g.add_argument("--demos", type=int, help="demonstrations per task")

    for name in ("train-clean", "train-attack", "train-badvla"):
        s = common(sub.add_parser(name))
        s.add_argument("--data", required=True)
        s.add_argument("--steps", type=int)
        s.add_argument("--log-every", type=int, default=0)
        if name != "train-clean":
            s.add_argument("--clean", required=True, help="pre-trained clean checkpoint")
            s.add_argument("--trigger", choices=sorted(TRIGGERS), required=True)
        if name == "train-attack":
            s.add_argument("--attack", choices=sorted(ATTACKS), required=True)
            s.add_argument("--drop", action="append", choices=("fm", "bd", "mimic"))
            s.add_argument("--tau0", type=float)

    e = common(sub.add_parser("eval", help="closed-loop SR/ASR, speed profiles, projection"))
    e.add_argument("--model", required=True)
    e.add_argument("--trigger", choices=["none", *sorted(TRIGGERS)], default="none")
    e.add_argument("--episodes", type=int, default=50, help="episodes per task and condition")
    e.add_argument("--reference", help="clean checkpoint for the velocity anomaly score")
    e.add_argument("--clean-model", help="clean checkpoint for the field projection")
    e.add_argument("--data", help="dataset providing projection probes")
    e.add_argument("--probes", type=int, default=200)

    w = common(sub.add_parser("sweep", help="trigger robustness sweep"))
    w.add_argument("--model", required=True)
    w.add_argument("--trigger", choices=sorted(TRIGGERS), required=True)
    w.add_argument("--axis", choices=ev.AXES, required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--episodes", type=int, default=50, help="episodes per value and condition")

    d = common(sub.add_parser("defend", help="endpoint filter and clean fine-tuning"))
    d.add_argument("--model", required=True)
    d.add_argument("--trigger", choices=sorted(TRIGGERS), required=True)
    d.add_argument("--data", help="clean dataset for fine-tuning")
    d.add_argument("--thresholds", default="0.5,0.25,0.05")
    d.add_argument("--checkpoints", default="200,600,1000,2000")
    d.add_argument("--episodes", type=int, default=10, help="episodes per task and condition")
    d.add_argument("--no-finetune", action="store_true")

    r = common(sub.add_parser("report", help="markdown summary and SVG plots"), out=False)
    r.add_argument("--run-dir", required=True)
    r.add_argument("--out-dir")

    rr = common(sub.add_parser("rerun", help="repeat a run from its manifest"), out=False)
    rr.add_argument("manifest")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        for k in ("episodes", "steps", "demos", "probes"):
            v = getattr(a, k, None)
            if v is not None and v < 1:
                raise UsageError(f"--{k} must be >= 1")
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_config(a.config)
        seed = resolve_seed(a.seed, cfg)
        run = Run(a.command, argv, cfg, seed)
        if a.config:
            run.input(Path(a.config))
        out = getattr(a, "out", None)
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
        rc = COMMANDS[a.command](a, cfg, run)
        return int(rc or 0)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
