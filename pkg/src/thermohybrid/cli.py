"""Command-line pipeline: synth -> gen-data -> train -> eval / sensitivity -> report.

Every command reads a JSON config (``--config``), applies flag overrides and
writes its outputs together with the exact config it ran under. Exit codes:
0 ok, 2 config error, 3 numerical divergence, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import exper
from .autodiff import GradientError
from .estimator import HybridLossCorrector
from .ploss import LossParams
from .rom import NumericalError, load_rom, save_rom
from .train import DivergenceError

log = logging.getLogger("thermohybrid")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4

DEFAULTS = {
    # dimensions
    "n": 24, "m": 16, "p": 8, "dt": 1.0, "k_steps": 2000,
    # scenario
    "scenario": "accurate", "tau": 0.05, "n_models": 10, "m_range": [-0.5, 0.5], "delta": 0.1,
    "sine_amplitude": 1.0, "n_test_devices": 1, "fb_index": 0, "i_max": 800.0,
    "dT_max": 150.0, "u_headroom": 2.0,
    # network and training
    "net": "fnn", "bootstrap": True, "epochs": 6000, "n_b": 60, "lr": 0.01,
    "lr_decay": 0.9999, "n_seq": 50, "window": 1, "batch_size": 256, "buffer_factor": 3.0,
    "sample_stride": 10, "val_every": 1, "alpha": 1.0, "beta": 1e-3, "zeta": None,
    "head_hidden": [], "use_head": False,
    # bookkeeping
    "seed": 0, "n_bins": 50,
}

TRAIN_KEYS = ("net", "bootstrap", "epochs", "n_b", "lr", "lr_decay", "n_seq", "window",
              "batch_size", "buffer_factor", "sample_stride", "val_every", "alpha", "beta")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------- config

def load_config(path=None, overrides=None):
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError as e:
            raise MissingArtifact(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        cfg.update(user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    def need(cond, field, msg):
        if not cond:
            raise ConfigError(f"{field}: {msg}")

    for f in ("n", "m", "p", "k_steps", "n_models", "epochs", "n_b", "n_seq", "window",
              "batch_size", "sample_stride", "val_every", "n_bins"):
        need(isinstance(cfg[f], int) and not isinstance(cfg[f], bool) and cfg[f] >= 1, f,
             "must be a positive integer")
    for f in ("dt", "lr", "i_max", "dT_max", "u_headroom", "buffer_factor"):
        need(isinstance(cfg[f], (int, float)) and cfg[f] > 0, f, "must be positive")
    for f in ("alpha", "beta", "tau", "delta"):
        need(isinstance(cfg[f], (int, float)) and cfg[f] >= 0, f, "must be nonnegative")
    need(0 < cfg["lr_decay"] <= 1, "lr_decay", "must lie in (0, 1]")
    need(cfg["scenario"] in ("accurate", "noisy"), "scenario", "must be 'accurate' or 'noisy'")
    need(cfg["net"] in ("fnn", "rnn"), "net", "must be 'fnn' or 'rnn'")
    need(isinstance(cfg["bootstrap"], bool), "bootstrap", "must be true or false")
    need(isinstance(cfg["m_range"], list) and len(cfg["m_range"]) == 2, "m_range",
         "must be [low, high]")
    need(cfg["p"] <= cfg["m"] <= 2 * cfg["p"] and cfg["n"] >= cfg["m"] + 2, "n/m/p",
         "need p <= m <= 2p and n >= m + 2")
    need(0 <= cfg["fb_index"] < cfg["p"], "fb_index", "must index an output")
    need(cfg["zeta"] is None or cfg["zeta"] > 0, "zeta", "must be positive or null")
    need(isinstance(cfg["seed"], int), "seed", "must be an integer")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path, what):
    if not Path(path).exists():
        raise MissingArtifact(f"missing {what}: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------- bundle I/O

def _bundle_paths(d):
    d = Path(d)
    return {"truth": d / "truth_rom.json", "nominal": d / "nominal_rom.json",
            "losses": d / "losses.json", "config": d / "config.json", "data": d / "data.npz",
            "checkpoint": d / "checkpoint.json", "state": d / "train_state.json",
            "buffer": d / "buffer.npz", "history": d / "history.csv",
            "metrics": d / "metrics.json", "hist": d / "error_hist.csv",
            "sens": d / "sensitivity.csv", "sens_json": d / "sensitivity.json",
            "summary": d / "summary.md", "pca": d / "pca.json"}


def load_bundle(d):
    P = _bundle_paths(d)
    for key in ("truth", "nominal", "losses"):
        if not P[key].exists():
            raise MissingArtifact(f"bundle is missing {P[key].name}; run `synth` first")
    truth_rom, _, _ = load_rom(P["truth"])
    nominal_rom, _, _ = load_rom(P["nominal"])
    L = read_json(P["losses"], "loss parameters")
    nominal = LossParams.from_dict(L["nominal"])
    devices = [LossParams.from_dict(x) for x in L["devices"]]
    return truth_rom, nominal_rom, nominal, devices, L


def load_data(d):
    P = _bundle_paths(d)
    if not P["data"].exists():
        raise MissingArtifact(f"bundle has no {P['data'].name}; run `gen-data` first")
    with np.load(P["data"], allow_pickle=False) as z:
        return exper.Dataset(z["current"], z["t_fb"], z["y"], z["u_true"], z["x_true"],
                             z["device"], z["profile"], z["split"].astype(str))


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, out):
    lo, hi = cfg["m_range"]
    sc = exper.Scenario(cfg["scenario"], cfg["tau"], cfg["n_models"], cfg["seed"])
    b = exper.make_bundle(sc, n=cfg["n"], m=cfg["m"], p=cfg["p"], dt=cfg["dt"],
                          delta=cfg["delta"], magnitudes=np.linspace(lo, hi, cfg["n_models"]),
                          i_max=cfg["i_max"], dT_max=cfg["dT_max"])
    P = _bundle_paths(out)
    save_rom(P["truth"], b.truth_rom, b.truth_params)
    save_rom(P["nominal"], b.nominal_rom, b.nominal_params)
    write_json(P["losses"], {"nominal": b.nominal_losses.to_dict(),
                             "devices": [x.to_dict() for x in b.device_params],
                             "magnitudes": b.magnitudes.tolist(), "zeta": b.zeta,
                             "delta": cfg["delta"]})
    write_json(P["pca"], None)  # filled in by `train`
    write_json(P["config"], cfg)
    log.info("synth: %d device parameter sets, zeta=%.6g W", len(b.device_params), b.zeta)


def _simulate_chunk(args):
    rom, params, currents, fb = args
    return exper.simulate_truth(rom, params, currents, fb)


def cmd_gen_data(cfg, out, bundle, workers=1):
    truth_rom, _, _, devices, _ = load_bundle(bundle)
    profiles = exper.generate_profiles(cfg["k_steps"], sine_amplitude=cfg["sine_amplitude"])
    pairs = [(d, pr) for d in range(len(devices)) for pr in profiles]
    currents = np.stack([pr.current for _, pr in pairs])
    params = [devices[d] for d, _ in pairs]
    fb = cfg["fb_index"]
    if workers > 1:
        # trajectories are independent; chunks are reassembled in order
        chunks = np.array_split(np.arange(len(pairs)), workers)
        jobs = [(truth_rom, [params[i] for i in c], currents[c], fb) for c in chunks if len(c)]
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
        x, y, u = (np.concatenate([p[i] for p in parts]) for i in range(3))
    else:
        x, y, u = exper.simulate_truth(truth_rom, params, currents, fb)
    device = np.array([d for d, _ in pairs])
    profile = np.array([pr.profile_id for _, pr in pairs])
    split, held = exper.split_trajectories(device, profile, n_test_devices=cfg["n_test_devices"],
                                           seed=cfg["seed"])
    np.savez(_bundle_paths(out)["data"], current=currents, t_fb=y[:, :, fb], y=y, u_true=u,
             x_true=x, device=device, profile=profile, split=split)
    log.info("gen-data: %d trajectories, held-out devices %s, split %s", len(pairs),
             held.tolist(), {s: int(np.sum(split == s)) for s in ("train", "val", "test")})


def _estimator(cfg, nominal_rom, nominal):
    kw = {k: cfg[k] for k in TRAIN_KEYS}
    kw.update(head_hidden=list(cfg["head_hidden"]), use_head=cfg["use_head"])
    return HybridLossCorrector(nominal_rom, nominal, **kw, zeta=cfg["zeta"] or 1.0,
                               i_max=cfg["i_max"], u_headroom=cfg["u_headroom"],
                               dT_max=cfg["dT_max"], fb_index=cfg["fb_index"],
                               random_state=cfg["seed"])


def _xy(data, split):
    s = data.subset(split)
    return s["X"], s["y"]


def _save_trainer(trainer, P):
    sd = trainer.state_dict()
    np.savez(P["buffer"], **sd.pop("buffer"))
    write_json(P["state"], sd)


def cmd_train(cfg, out, bundle, resume=False):
    _, nominal_rom, nominal, _, L = load_bundle(bundle)
    data = load_data(bundle)
    if cfg["zeta"] is None:
        cfg = dict(cfg, zeta=L["zeta"])
    P = _bundle_paths(out)
    est = _estimator(cfg, nominal_rom, nominal)
    trainer = est.setup(*_xy(data, "train"), eval_set=_xy(data, "val"))
    if resume:
        sd = read_json(P["state"], "training state")
        if not P["buffer"].exists():
            raise MissingArtifact(f"missing replay buffer: {P['buffer']}")
        with np.load(P["buffer"]) as z:
            sd["buffer"] = {k: z[k] for k in z.files}
        trainer.load_state_dict(sd)
        log.info("resuming at epoch %d", trainer.state.epoch)
    write_json(P["config"], cfg)
    try:
        trainer.run(callback=lambda r: log.debug("epoch %d loss %.6g val %.6g", r["epoch"],
                                                 r["train_loss"], r["val_loss"]))
    finally:
        write_history(P["history"], trainer.history)
        _save_trainer(trainer, P)
    est._finish(trainer)
    est.save(P["checkpoint"], extra={"seed": cfg["seed"], "zeta": cfg["zeta"]})
    write_json(P["pca"], est.pca_.to_dict())
    log.info("train: best epoch %d, best val loss %.6g", est.best_epoch_, trainer.state.best_val)


HISTORY_COLS = ("epoch", "lr", "train_loss", "val_loss", "mse_term", "penalty_term", "reg_term",
                "refresh_flag")


def write_history(path, history):
    write_csv(path, HISTORY_COLS, ([r[c] for c in HISTORY_COLS] for r in history))


def _load_trained(bundle, ckpt):
    _, nominal_rom, nominal, devices, L = load_bundle(bundle)
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise MissingArtifact(f"missing checkpoint: {ckpt}; run `train` first")
    return HybridLossCorrector.load(ckpt, nominal_rom, nominal), devices, L


def cmd_eval(cfg, out, bundle, ckpt):
    est, _, L = _load_trained(bundle, ckpt)
    data = load_data(bundle)
    X, _ = _xy(data, "test")
    hyb, nom = est.simulate(X), est.simulate(X, nominal=True)
    rep = exper.evaluate({"nominal": (nom["y"], nom["u"]), "hybrid": (hyb["y"], hyb["u"])},
                         data, n_bins=cfg["n_bins"])
    rep["reduction"] = exper.reduction(rep)
    rep["zeta"] = L["zeta"]
    rep["best_epoch"] = est.best_epoch_
    hist = rep.pop("histograms")
    P = _bundle_paths(out)
    rep["config"] = cfg
    write_json(P["metrics"], rep)
    rows = []
    for q, edges in (("temperature", hist["temperature_edges"]), ("loss", hist["loss_edges"])):
        for i in range(len(edges) - 1):
            rows.append([q, float(edges[i]), float(edges[i + 1]), hist["nominal"][q][i],
                         hist["hybrid"][q][i]])
    write_csv(P["hist"], ("quantity", "bin_lo", "bin_hi", "nominal", "hybrid"), rows)
    r = rep["reduction"]
    log.info("eval: temperature error reduced by %.1f%%, loss error by %.1f%%",
             100 * r["temperature_error"], 100 * r["loss_error"])
    return rep


def cmd_sensitivity(cfg, out, bundle, ckpt):
    est, _, _ = _load_trained(bundle, ckpt)
    data = load_data(bundle)
    Xtr, ytr = _xy(data, "train")
    batch = est._prepare(Xtr, ytr).full_batch(est.rom.n)
    X, _ = _xy(data, "test")
    sim = est.simulate(X)
    rep = exper.sensitivity(est.model_, est.net_, batch, est._train_config().weights, sim["u"],
                            data.u_true[data.indices("test")], u_scale=est.transform_.u_max)
    P = _bundle_paths(out)
    rows = [[r["channel"], r["mean_abs_grad"], r["loss_mse"], r["loss_mse_w"]] for r in rep.rows()]
    write_csv(P["sens"], ("channel", "mean_abs_grad", "loss_mse", "loss_mse_w"), rows)
    write_json(P["sens_json"], {"spearman": rep.spearman, "spearman_w": rep.spearman_w,
                                "mse_units": "normalized", "config": cfg})
    log.info("sensitivity: Spearman rho = %.3f", rep.spearman)
    return rep


def cmd_report(cfg, out, bundle):
    P = _bundle_paths(bundle)
    rep = read_json(P["metrics"], "metrics (run `eval` first)")
    lines = ["# Estimation performance (test split)", "",
             "| Model | Temperature error (K) | Loss error (W) | Negative losses |",
             "|---|---|---|---|"]
    for name in ("nominal", "hybrid"):
        m = rep["models"][name]
        t, u = m["temperature_error"], m["loss_error"]
        lines.append(f"| {name} | {t['mean']:.3f} ± {t['std']:.3f} | "
                     f"{u['mean']:.3f} ± {u['std']:.3f} | {m['negative_loss_fraction']:.4%} |")
    r = rep["reduction"]
    lines += ["", f"Temperature error reduction: {r['temperature_error']:.1%}",
              f"Loss error reduction: {r['loss_error']:.1%}",
              f"Gap bound zeta: {rep['zeta']:.6g} W", f"Best epoch: {rep['best_epoch']}"]
    if P["sens_json"].exists():
        lines.append(f"Sensitivity Spearman rho: {read_json(P['sens_json'], '')['spearman']:.3f}")
    lines.append("")
    with open(_bundle_paths(out)["summary"], "w") as fh:
        fh.write("\n".join(lines))


# ---------------------------------------------------------------- argparse

def _onoff(v):
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on/off")


def build_parser():
    ap = argparse.ArgumentParser(prog="thermohybrid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, bundle=True, seed_required=False):
        p.add_argument("--config", help="JSON config; flags override its fields")
        p.add_argument("--out", help="output directory (default: the bundle directory)")
        if bundle:
            p.add_argument("--bundle", required=True, help="bundle directory from `synth`")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--workers", type=int, default=1,
                       help="processes for ground-truth simulation (training is single-worker)")
        return p

    p = common(sub.add_parser("synth", help="write ROMs and loss parameter sets"), bundle=False)
    p.add_argument("--scenario", choices=("accurate", "noisy"))
    p.add_argument("--tau", type=float)
    p.add_argument("--n-models", type=int, dest="n_models")
    p = common(sub.add_parser("gen-data", help="simulate ground-truth trajectories"))
    p.add_argument("--k-steps", type=int, dest="k_steps")
    p = common(sub.add_parser("train", help="train the loss corrector"), seed_required=True)
    p.add_argument("--net", choices=("fnn", "rnn"))
    p.add_argument("--bootstrap", type=_onoff)
    p.add_argument("--resume", action="store_true", help="continue from train_state.json")
    for flag, typ in (("epochs", int), ("n-b", int), ("lr", float), ("lr-decay", float),
                      ("n-seq", int), ("window", int), ("batch-size", int),
                      ("sample-stride", int), ("val-every", int), ("alpha", float),
                      ("beta", float)):
        p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    for name, hlp in (("eval", "test-split error metrics"),
                      ("sensitivity", "input-gradient vs loss-error ranking")):
        p = common(sub.add_parser(name, help=hlp))
        p.add_argument("--checkpoint", help="default: <bundle>/checkpoint.json")
    common(sub.add_parser("report", help="markdown summary from metrics.json"))
    return ap


def _overrides(args):
    skip = {"command", "config", "out", "bundle", "workers", "resume", "checkpoint", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("workers: must be >= 1")
        bundle = getattr(args, "bundle", None)
        ckpt = getattr(args, "checkpoint", None) or (bundle and _bundle_paths(bundle)["checkpoint"])
        cfg_path = args.config
        if cfg_path is None:
            # the run that produced the checkpoint, else the bundle that holds the data
            near = [Path(ckpt).parent / "config.json"] if args.command in ("eval", "sensitivity") else []
            near += [_bundle_paths(bundle)["config"]] if bundle is not None else []
            cfg_path = next((c for c in near if c.exists()), None)
        cfg = load_config(cfg_path, _overrides(args))
        out = Path(args.out or bundle or ".")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "gen-data":
            cmd_gen_data(cfg, out, bundle, args.workers)
        elif args.command == "train":
            cmd_train(cfg, out, bundle, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, out, bundle, ckpt)
        elif args.command == "sensitivity":
            cmd_sensitivity(cfg, out, bundle, ckpt)
        elif args.command == "report":
            cmd_report(cfg, out, bundle)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except MissingArtifact as e:
        log.error("%s", e)
        return EXIT_MISSING
    except (DivergenceError, GradientError, NumericalError) as e:
        log.error("numerical divergence: %s", e)
        return EXIT_DIVERGED
    except ValueError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
