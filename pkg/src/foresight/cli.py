"""Command-line entry point: ``foresight {gen-data,train,eval,ablate}``.

Output layout under ``--out DIR``::

    data/{train,val}/      dataset splits        data/manifest.json
    train/checkpoints/     epoch_NNN.ckpt        train/loss_curve.csv
    eval/                  report.txt, report.json, scores.tsv, proposals/, plots/, figures/
    ablate/                results.tsv

Every command writes ``<dir>/run.cfg``, a complete snapshot of its configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .env import build_dataset, load_dataset
from .harness import (EvalResult, evaluate, eval_scenarios, fit_stats, stage1_contexts, train_epochs,
                      write_lines)
from .nn import AdamState, CheckpointError, TrainingError
from .pfg import proposal_log_lines
from .planner import Planner, Switches
from .schedules import ConfigError

log = logging.getLogger("foresight")

CURVE_HEADER = "step,loss_total,loss_plan,loss_bev"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_cfg(cfg: C.RunConfig, d: Path):
    d.mkdir(parents=True, exist_ok=True)
    (d / "run.cfg").write_text(cfg.dump())


def eval_seed(cfg: C.RunConfig, k: int) -> int:
    """Sampling seed of the k-th evaluation repeat."""
    ss = np.random.SeedSequence(cfg.seed_for("sample"), spawn_key=(int(k),))
    return int(ss.generate_state(1, np.uint32)[0])


def checkpoints(run: Path) -> list[Path]:
    return sorted((run / "checkpoints").glob("epoch_*.ckpt"))


def build_model(cfg: C.RunConfig, switches: Switches | None = None, K: int | None = None, stats=None):
    kw = {} if stats is None else {"stats": stats}
    return Planner(cfg.model(K), switches or cfg.switches(), cfg.seed_for("init"), **kw)


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(cfg: C.RunConfig, out: Path) -> int:
    d = out / "data"
    _write_cfg(cfg, d)
    seed = cfg.seed_for("data")
    val_seed = int(np.random.SeedSequence(seed, spawn_key=(1,)).generate_state(1, np.uint32)[0])
    splits = {"train": (cfg["data.train_size"], seed), "val": (cfg["data.val_size"], val_seed)}
    manifest = {"root_seed": cfg["seed"], "splits": {}}
    for name, (n, s) in splits.items():
        path = build_dataset(n, s, d / name, cfg.data())
        manifest["splits"][name] = {"n": n, "seed": s,
                                    "files": {f: _sha256(path / f) for f in ("index.jsonl", "data.bin")}}
        log.info("wrote %s split: %d records", name, n)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- train

def _read_curve(path: Path, below: int) -> list[str]:
    if not path.exists():
        return []
    rows = path.read_text().splitlines()[1:]
    return [r for r in rows if int(r.split(",", 1)[0]) < below]


def train_run(cfg: C.RunConfig, data_dir: Path, run: Path, resume: bool = False,
              switches: Switches | None = None, K: int | None = None, rho_E: float | None = None) -> Path:
    """Train (or continue) a run directory; returns the last checkpoint."""
    _write_cfg(cfg, run)
    ds = load_dataset(data_dir)
    tcfg = cfg.train(rho_E)
    model = build_model(cfg, switches, K, fit_stats(ds))
    adam = AdamState(lr=tcfg.lr)
    start = 0
    existing = checkpoints(run)
    if resume and existing:
        meta = model.load(existing[-1], adam)
        start = int(meta["meta.epoch"][0]) + 1
        log.info("resuming from %s (epoch %d, step %d)", existing[-1].name, start, adam.step)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    curve_path = run / "loss_curve.csv"
    kept = _read_curve(curve_path, adam.step) if start else []
    max_steps = cfg["train.max_steps"] or None

    def on_epoch(epoch, adam_state, tlog):
        path = run / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt"
        model.save(path, adam_state, {"meta.epoch": epoch, "meta.step": adam_state.step})
        if cfg["train.keep_last"]:
            for old in checkpoints(run)[:-cfg["train.keep_last"]]:
                old.unlink()
        write_lines(curve_path, [CURVE_HEADER] + kept + tlog.lines())
        last = tlog.rows[-1] if tlog.rows else (adam_state.step, float("nan"), 0, 0)
        log.info("epoch %d done: step %d loss %.4f", epoch + 1, adam_state.step, last[1])

    train_epochs(model, ds, tcfg, cfg.seed_for("train"), range(start, tcfg.epochs), adam, on_epoch, max_steps)
    return checkpoints(run)[-1]


def cmd_train(cfg: C.RunConfig, out: Path, data: Path | None, resume: bool) -> int:
    data = data or out / "data" / "train"
    if not (data / "index.jsonl").exists():
        raise UsageError(f"no dataset at {data}; run gen-data first")
    train_run(cfg, data, out / "train", resume)
    return 0


# ---------------------------------------------------------------- eval

def report_lines(means: dict, n: int, seed: int, P: int) -> list[str]:
    lines = [f"scenes = {n}", f"sample_seed = {seed}", f"proposals = {P}"]
    lines += [f"mean_{k} = {v:.6f}" for k, v in means.items()]
    return lines + ["# stage-2 sigma and comfort limits are placeholder values (see report.json)"]


def placeholder_flags(ecfg) -> dict:
    """Scoring constants with no published value; reported so results are read with that in mind."""
    from . import metrics as M
    return {"stage2_sigma": ecfg.sigma, "comfort_max_accel": M.MAX_ACCEL, "comfort_max_jerk": M.MAX_JERK}


def report_json(res: EvalResult, means: dict, seed: int, ecfg) -> str:
    scenes = [{"scene": s.index, "kind": s.kind, "epdms": s.navhard, "epdms_stage1": s.epdms1,
               "epdms_stage2": s.epdms2, "stage2_entries": s.stage2, "pdms": s.pdms, "subscores": s.subscores}
              for s in res.scenes]
    doc = {"sample_seed": seed, "proposals": ecfg.n_proposals, "means": means, "scenes": scenes,
           "placeholders": placeholder_flags(ecfg)}
    return json.dumps(doc, indent=1, sort_keys=True)


def scores_table(res: EvalResult) -> list[str]:
    keys = list(res.scenes[0].subscores)
    head = ["scene", "kind", "epdms", "epdms_stage1", "epdms_stage2", "pdms"] + keys
    rows = ["\t".join(head)]
    for s in res.scenes:
        vals = [s.navhard, s.epdms1, s.epdms2, s.pdms] + [s.subscores[k] for k in keys]
        rows.append("\t".join([str(s.index), s.kind] + [f"{v:.6f}" for v in vals]))
    return rows


def _polyline_block(label: str, pts) -> list[str]:
    return [f"# {label}"] + [f"{x:.4f} {y:.4f}" for x, y in np.asarray(pts)[:, :2]] + [""]


def _box_outline(box) -> np.ndarray:
    from .env import box_corners
    c = box_corners(*box)
    return np.vstack([c, c[:1]])


def plot_polylines(ep) -> list[tuple[str, np.ndarray]]:
    """World-frame polylines of one episode: map, traffic at t=0, plans and references."""
    from .geometry import se2_to_world
    scn = ep.stage1.scenario
    out = [("route", scn.route.points)]
    polys = getattr(scn.drivable, "geoms", [scn.drivable])
    for k, poly in enumerate(polys):
        out.append((f"drivable_{k}", np.asarray(poly.exterior.coords)))
    for k, box in enumerate(scn.boxes()):
        out.append((f"object_{k}", _box_outline(box)))
    if scn.goal is not None:
        out.append(("goal", np.asarray([scn.goal[:2]])))
    origin = np.zeros((1, 2))
    out.append(("stage1_plan", np.vstack([origin, se2_to_world(ep.plan1, ep.stage1.start)[:, :2]])))
    out.append(("stage1_human", np.vstack([origin, se2_to_world(ep.stage1.human, ep.stage1.start)[:, :2]])))
    for k, (ctx, plan) in enumerate(zip(ep.stage2, ep.plans2)):
        start = ctx.start[None, :2]
        out.append((f"stage2_{k}_plan", np.vstack([start, se2_to_world(plan, ctx.start)[:, :2]])))
    return out


def render_scene(path: Path, lines, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 6))
    for label, pts in lines:
        pts = np.asarray(pts)
        if label.startswith("drivable"):
            ax.fill(pts[:, 0], pts[:, 1], color="0.88", lw=0)
        elif label.startswith("object"):
            ax.plot(pts[:, 0], pts[:, 1], color="tab:red", lw=1)
        elif label == "route":
            ax.plot(pts[:, 0], pts[:, 1], color="0.6", ls="--", lw=0.8)
        elif label == "goal":
            ax.plot(pts[:, 0], pts[:, 1], marker="*", color="tab:green", ms=12, ls="")
        elif label == "stage1_human":
            ax.plot(pts[:, 0], pts[:, 1], color="k", lw=1.2, label="reference")
        elif label == "stage1_plan":
            ax.plot(pts[:, 0], pts[:, 1], color="tab:blue", marker=".", lw=1.5, label="plan")
        else:
            ax.plot(pts[:, 0], pts[:, 1], color="tab:orange", marker=".", lw=1, alpha=0.8)
    ax.set_aspect("equal")
    ax.set_xlim(-15, 65)
    ax.set_ylim(-40, 40)
    ax.set_title(title, fontsize=9)
    ax.legend(loc="upper left", fontsize=8)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def render_summary(path: Path, means: dict):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    keys = list(means)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(range(len(keys)), [means[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)), keys, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def render_curve(path: Path, curve: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    rows = np.array([[float(x) for x in r.split(",")] for r in curve.read_text().splitlines()[1:]])
    if len(rows) == 0:
        return
    fig, ax = plt.subplots(figsize=(6, 3))
    for col, name in ((1, "total"), (2, "plan"), (3, "bev")):
        ax.plot(rows[:, 0], rows[:, col], lw=0.8, label=name)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: C.RunConfig, out: Path, checkpoint: Path | None, n_proposals: int | None,
             figures: bool = True) -> int:
    run = out / "train"
    if checkpoint is None:
        found = checkpoints(run)
        if not found:
            raise CheckpointError(f"no checkpoint under {run / 'checkpoints'}; run train first")
        checkpoint = found[-1]
    if not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint {checkpoint} does not exist")
    d = out / "eval"
    _write_cfg(cfg, d)
    model = build_model(cfg)
    model.load(checkpoint)
    ecfg = cfg.evaluation(n_proposals)
    scenes = eval_scenarios(cfg["eval.scenes"], cfg.seed_for("data"))
    seed = eval_seed(cfg, 0)
    res, planner = evaluate(model, scenes, seed, ecfg, keep_proposals=True)
    means = res.means()
    write_lines(d / "report.txt", report_lines(means, len(scenes), seed, ecfg.n_proposals))
    write_lines(d / "scores.tsv", scores_table(res))
    write_lines(d / "report.json", [report_json(res, means, seed, ecfg)])
    per = 1 + ecfg.perturb.count
    for sub in ("proposals", "plots", "figures"):
        (d / sub).mkdir(exist_ok=True)
    for i, ep in enumerate(res.episodes):
        lines = []
        for k in range(i * per, (i + 1) * per):
            ps = planner.proposals[k]
            ps.scene_id = i
            lines += [json.dumps({"entry": k - i * per, **json.loads(line)}, sort_keys=True)
                      for line in proposal_log_lines(ps)]
        write_lines(d / "proposals" / f"scene_{i:03d}.jsonl", lines)
        polys = plot_polylines(ep)
        write_lines(d / "plots" / f"scene_{i:03d}.txt",
                    [line for label, pts in polys for line in _polyline_block(label, pts)])
        if figures:
            s = res.scenes[i]
            render_scene(d / "figures" / f"scene_{i:03d}.png", polys,
                         f"scene {i} ({s.kind}) EPDMS {s.navhard:.3f}")
    if figures:
        render_summary(d / "figures" / "summary.png", means)
        if (run / "loss_curve.csv").exists():
            render_curve(d / "figures" / "loss_curve.png", run / "loss_curve.csv")
    log.info("mean EPDMS %.4f, PDMS %.4f over %d scenes", means["epdms"], means["pdms"], len(scenes))
    return 0


# ---------------------------------------------------------------- ablate

VARIANT_SWITCHES = {
    "full": {},
    "no_wm": {"use_wm": False, "use_wm_to_dit": False, "use_interact": False},
    "no_interact": {"use_interact": False},
    "force_alpha_one": {"force_alpha_one": True},
    "no_guidance": {"use_dspcfg": False},
    "no_kin": {"use_kinematic_extrap": False},
}
INFERENCE_ONLY = {"use_dspcfg", "use_kinematic_extrap"}


def ablation_rows(cfg: C.RunConfig):
    """(name, switches, K, t_f, rho_E) per declared variant and grid value."""
    base = cfg.switches()
    K0, tf0, rho0 = cfg["model.K"], cfg["data.t_f"], cfg["train.anneal_rho_E"]
    rows = []
    for v in cfg.variants():
        sw = Switches(**{**base.__dict__, **VARIANT_SWITCHES[v]})
        rows.append((v, sw, K0, tf0, rho0))
    rows += [(f"K={int(k)}", base, int(k), tf0, rho0) for k in cfg["ablate.K"]]
    rows += [(f"t_f={t:g}", base, K0, t, rho0) for t in cfg["ablate.t_f"]]
    rows += [(f"rho_E={r:g}", base, K0, tf0, r) for r in cfg["ablate.rho_E"]]
    return rows


def cmd_ablate(cfg: C.RunConfig, out: Path, n_proposals: int | None) -> int:
    rows = ablation_rows(cfg)
    if not rows:
        raise UsageError("empty ablation grid: declare ablate.variants, ablate.K, ablate.t_f or ablate.rho_E")
    d = out / "ablate"
    _write_cfg(cfg, d)
    scenes = eval_scenarios(cfg["eval.scenes"], cfg.seed_for("data"))
    ecfg = cfg.evaluation(n_proposals)
    stage1 = stage1_contexts(scenes, cfg["data.T"], cfg["data.dt"])
    trained: dict = {}
    table = ["\t".join(["variant", "K", "t_f", "rho_E", "seeds", "epdms", "epdms_stage1", "epdms_stage2",
                        "pdms", "epdms_per_seed"])]
    for name, sw, K, t_f, rho_E in rows:
        train_sw = Switches(**{**sw.__dict__, **{k: True for k in INFERENCE_ONLY}})
        key = (tuple(sorted(train_sw.__dict__.items())), K, t_f, rho_E)
        if key not in trained:
            data = d / "data" / f"t_f={t_f:g}"
            if not (data / "index.jsonl").exists():
                build_dataset(cfg["data.train_size"], cfg.seed_for("data"), data, cfg.data(t_f))
            tag = hashlib.sha256(repr(key).encode()).hexdigest()[:10]
            ckpt = train_run(cfg, data, d / "runs" / tag, resume=True, switches=train_sw, K=K, rho_E=rho_E)
            trained[key] = ckpt
        model = build_model(cfg, sw, K)
        model.load(trained[key])
        per_seed = []
        parts = []
        for k in range(cfg["ablate.seeds"]):
            res, _ = evaluate(model, scenes, eval_seed(cfg, k), ecfg, stage1=stage1)
            m = res.means()
            per_seed.append(m["epdms"])
            parts.append(m)
        mean = {k: float(np.mean([p[k] for p in parts])) for k in ("epdms", "epdms_stage1", "epdms_stage2", "pdms")}
        table.append("\t".join([name, str(K), f"{t_f:g}", f"{rho_E:g}", str(len(per_seed))]
                               + [f"{mean[k]:.6f}" for k in ("epdms", "epdms_stage1", "epdms_stage2", "pdms")]
                               + [",".join(f"{v:.6f}" for v in per_seed)]))
        log.info("%s: EPDMS %.4f", name, mean["epdms"])
    write_lines(d / "results.tsv", table)
    return 0


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foresight", description="Foresight-conditioned diffusion planner toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("gen-data", "generate train/val dataset splits"),
                           ("train", "train the planner"),
                           ("eval", "two-stage closed-loop evaluation"),
                           ("ablate", "ablation sweeps")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", type=Path, help="key = value configuration file")
        s.add_argument("--seed", type=int, help="root seed (overrides the config)")
        s.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
        for key in C.SWITCH_KEYS:
            flag = key.split(".", 1)[1].replace("_", "-")
            s.add_argument(f"--{flag}", dest=key, action=argparse.BooleanOptionalAction, default=None,
                           help=f"ablation switch {key.split('.', 1)[1]}")
        if name in ("eval", "ablate"):
            s.add_argument("--proposals", type=int, help="proposals per planning call")
            s.add_argument("--deterministic", action="store_true", default=None,
                           help="noise-free reverse updates")
        if name == "train":
            s.add_argument("--data", type=Path, help="training split (default OUT/data/train)")
            s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
            s.add_argument("--epochs", type=int, help="number of epochs (overrides train.epochs)")
        if name == "eval":
            s.add_argument("--checkpoint", type=Path, help="checkpoint (default: latest under OUT/train)")
            s.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return p


def resolve_config(args) -> C.RunConfig:
    values = C.parse_text(args.config.read_text(), str(args.config)) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values.update(C.parse_text(f"{k} = {v}", "--set"))
    if args.seed is not None:
        values["seed"] = args.seed
    for key in C.SWITCH_KEYS:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "deterministic", None):
        values["sample.deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        values["train.epochs"] = args.epochs
    if getattr(args, "proposals", None) is not None:
        values["sample.proposals"] = args.proposals
    # a switch turned off implies its dependants are off unless given explicitly
    if values.get("switch.use_wm") is False:
        for dep in ("switch.use_wm_to_dit", "switch.use_interact"):
            values.setdefault(dep, False)
    return C.build(values)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.data, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint, None, not args.no_figures)
        return cmd_ablate(cfg, out, None)
    except (ConfigError, CheckpointError, TrainingError, UsageError, OSError, ValueError) as exc:
        print(f"foresight {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
