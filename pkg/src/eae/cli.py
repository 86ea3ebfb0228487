"""``eae`` command-line runner.

Exit codes: 0 success, 1 failed verification, 2 configuration or input
error, 3 numeric failure (divergence, singular least squares).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import inspect
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from eae import config as cfgmod
from eae import datasets as dsets
from eae import diagnostics as dg
from eae import dynamics as dyn
from eae import sampler, training, verify
from eae.autodiff import forward
from eae.io import read_container, write_container
from eae.networks import VaeModel, build_model, load_checkpoint, save_checkpoint, sigmoid

log = logging.getLogger("eae")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

GENERATORS = {
    "gaussian_mixture": dsets.gen_gaussian_mixture,
    "oscillator": dsets.gen_oscillator,
    "lambda_omega": dsets.gen_lambda_omega,
    "correlated_gaussian": dsets.gen_correlated_gaussian,
}


def data_dir() -> Path | None:
    d = os.environ.get("EAE_DATA_DIR")
    return Path(d) if d else None


def _fmt(v) -> str:
    return repr(float(v))


# -- datasets ------------------------------------------------------------------------------

def build_dataset(cfg) -> dsets.Dataset:
    spec = cfg["dataset"]
    kind, opts = spec["kind"], dict(spec["options"])
    root = data_dir()
    if kind == "idx":
        unknown = set(opts) - {"images", "labels", "limit"}
        if unknown or "images" not in opts:
            raise cfgmod.ConfigError(
                f"config error at dataset/options: idx needs 'images' (and optional 'labels', 'limit'); "
                f"unknown keys {sorted(unknown)}")
        base = root if root is not None else Path.cwd()
        ds = dsets.load_idx(base / opts["images"], base / opts["labels"] if opts.get("labels") else None)
        if opts.get("limit"):
            ds = ds.subset(np.arange(min(int(opts["limit"]), len(ds))))
        return ds
    gen = GENERATORS[kind]
    params = inspect.signature(gen).parameters
    unknown = set(opts) - set(params)
    if unknown:
        raise cfgmod.ConfigError(f"config error at dataset/options: unknown {kind} options {sorted(unknown)}")
    if "return_v" in opts:
        raise cfgmod.ConfigError("config error at dataset/options: return_v is not a dataset option")
    opts.setdefault("seed", cfg["seed"])
    cache = None
    if root is not None and spec["cache"]:
        key = hashlib.sha256(json.dumps([kind, opts], sort_keys=True).encode()).hexdigest()[:20]
        cache = root / "cache" / f"{kind}-{key}.bin"
        if cache.exists():
            return dsets.load_dataset(cache)
    ds = gen(**opts)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        dsets.save_dataset(cache, ds)
    return ds


def _load_data(path) -> dsets.Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        return dsets.Dataset(arr, provenance={"source": str(path)})
    return dsets.load_dataset(path)


def _load_ensemble(path, model):
    header, arrays = read_container(path)
    if header.get("format") != "eae-ensemble":
        raise ValueError(f"{path}: not an ensemble file")
    members = arrays["members"]
    if members.ndim != 2 or members.shape[1] != model.encoder.n_params:
        raise ValueError(
            f"ensemble members have shape {members.shape}, encoder expects {model.encoder.n_params} parameters")
    return list(members)


def _save_ensemble(path, members, meta):
    write_container(path, {"format": "eae-ensemble", **meta}, {"members": np.stack(members)})


def _members(args, model, phi):
    if getattr(args, "ensemble", None):
        return _load_ensemble(args.ensemble, model)
    return [phi]


def _output_dir(args, default) -> Path:
    out = Path(args.output or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _options(args) -> dict:
    """Config for post-training commands: ``--config``, else the run's resolved config."""
    if getattr(args, "config", None):
        return cfgmod.load(args.config, args.seed, args.output)
    beside = Path(args.checkpoint).parent / "resolved_config.json"
    if beside.exists():
        return cfgmod.load(beside, args.seed, args.output)
    return cfgmod.resolve({}, args.seed, args.output)


# -- train -----------------------------------------------------------------------------------

def _train_config(cfg) -> training.TrainConfig:
    t = cfg["trainer"]
    th = cfg["thermostat"]
    thermo = sampler.ThermostatConfig(
        temperature=th["temperature"], mass=th["mass"], dt=th["dt"], chain_length=th["chain_length"],
        chain_mass=th["chain_mass"], velocity_resample_period=th["velocity_resample_period"], seed=th["seed"])
    return training.TrainConfig(
        ensemble_size=t["ensemble_size"], batch_size=t["batch_size"], tolerance=t["tolerance"],
        max_outer_iterations=t["max_outer_iterations"], lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
        adam_eps=t["adam_eps"], loss=t["loss"], thermostat=thermo, seed=cfg["seed"],
        burn_in_discard=t["burn_in_discard"], epochs=t["epochs"], max_steps=t["max_steps"],
        checkpoint_every=t["checkpoint_every"])


def _library(cfg, n_z):
    d = cfg["dynamics"]
    return dyn.BasisLibrary.default(n_z, d["max_degree"], d["sines"])


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config, args.seed, args.output)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "resolved_config.json")
    ds = build_dataset(cfg)
    train, val, test = dsets.split(ds, cfg["dataset"]["split"], seed=cfg["seed"])
    dsets.save_dataset(out / "test_set.bin", test)
    dsets.save_dataset(out / "validation_set.bin", val)
    m, kind = cfg["model"], cfg["trainer"]["kind"]
    model = build_model(ds.inputs.shape[1], m["latent_dim"], tuple(m["encoder_hidden"]),
                        tuple(m["decoder_hidden"]), m["activation"], variational=kind == "vae",
                        latent_bias=m["latent_bias"])
    tc = _train_config(cfg)
    meta = {"seed": cfg["seed"], "trainer": kind}
    t0 = time.perf_counter()
    summary = {"trainer": kind, "train_rows": len(train), "test_rows": len(test)}
    if kind == "eae":
        objective = None
        if cfg["dynamics"]["enabled"]:
            if train.time_derivatives is None:
                raise cfgmod.ConfigError("config error at dynamics/enabled: dataset has no time derivatives")
            w = cfg["dynamics"]["weights"]
            objective = dyn.DynamicsObjective(model, train.inputs, train.time_derivatives,
                                              _library(cfg, model.latent_dim), dyn.DynamicsWeights(*w))
        ckdir = out / "checkpoints"

        def on_ck(k, phi, theta, ens):
            ckdir.mkdir(exist_ok=True)
            save_checkpoint(ckdir / f"checkpoint_{k:06d}.bin", model, phi, theta, "eae", tc.loss,
                            {**meta, "outer_iteration": k})

        theta, ens, report = training.eae_train(model, train, tc, objective, on_checkpoint=on_ck)
        phi = report.final_state.positions
        members = ens.members
        n_extra = cfg["diagnostics"]["ensemble_samples"]
        if n_extra:
            obj = objective or training.ReconObjective(model, train.inputs, tc.loss)
            extra, _ = training.sample_ensemble(obj, theta, report.final_state, tc.thermostat, n_extra,
                                                tc.batch_size, seed=cfg["seed"])
            members = extra.members
        _save_ensemble(out / "ensemble.bin", members, meta)
        summary.update(outer_iterations=len(report.records),
                       max_iterations_reached=report.max_iterations_reached,
                       ensemble_size=len(members))
    else:
        trainer = training.vae_train if kind == "vae" else training.ae_train
        (phi, theta), report = trainer(model, train, tc)
        members = [phi]
        summary.update(epochs=len(report.epochs))
    save_checkpoint(out / "checkpoint.bin", model, phi, theta, kind, tc.loss, meta)
    report.write_csv(out / "report.csv")
    summary.update(initial_loss=report.initial_loss, final_loss=report.final_loss,
                   test_mse=dg.test_mse(model, members if kind == "eae" else phi, theta, test, tc.loss))
    _write_json(out / "summary.json", summary)
    log.info("trained %s in %.1f s; final loss %.6g -> %s", kind, time.perf_counter() - t0,
             report.final_loss, out)
    return EXIT_OK


def _write_json(path, obj):
    Path(path).write_text(json.dumps(verify._plain(obj), indent=2, sort_keys=True) + "\n")


# -- sample ------------------------------------------------------------------------------------

def cmd_sample(args) -> int:
    model, phi, theta, _ = load_checkpoint(args.checkpoint)
    members = _members(args, model, phi)
    q = _load_data(args.queries).inputs
    if q.shape[1] != model.data_dim:
        raise ValueError(f"queries have width {q.shape[1]}, model expects {model.data_dim}")
    out = _output_dir(args, ".")
    if isinstance(model, VaeModel):
        Z = np.stack([forward(model.encoder, p, q)[:, : model.latent_dim] for p in members])
    else:
        Z = training.eae_sample_latents(model, theta, members, q)
    write_latents(out / "latents.csv", Z)
    log.info("wrote %d x %d latent samples", Z.shape[0], Z.shape[1])
    return EXIT_OK


def write_latents(path, Z):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member_index", "query_index", *[f"z_{j + 1}" for j in range(Z.shape[2])]])
        for i in range(Z.shape[0]):
            for n in range(Z.shape[1]):
                w.writerow([i, n, *(_fmt(v) for v in Z[i, n])])


# -- diagnose -------------------------------------------------------------------------------------

def _data_arg(args):
    if args.data:
        return args.data
    guess = Path(args.checkpoint).parent / "test_set.bin"
    if not guess.exists():
        raise FileNotFoundError(f"no --data given and {guess} does not exist")
    return guess


def cmd_diagnose(args) -> int:
    opts = _options(args)["diagnostics"]
    model, phi, theta, header = load_checkpoint(args.checkpoint)
    kind = header["loss"]
    members = _members(args, model, phi)
    data = _load_data(_data_arg(args))
    y = data.inputs
    if y.shape[1] != model.data_dim:
        raise ValueError(f"data have width {y.shape[1]}, model expects {model.data_dim}")
    out = _output_dir(args, "diagnostics")
    vae = isinstance(model, VaeModel)
    enc_arg = phi if vae else members
    mse = dg.test_mse(model, enc_arg, theta, data, kind)
    if vae:
        Z = forward(model.encoder, phi, y)[None, :, : model.latent_dim]
    else:
        Z = training.eae_sample_latents(model, theta, members, y)
    codes = Z.mean(axis=0)
    act = dg.latent_activity(codes, opts["activity_threshold"])
    act.write_csv(out / "activity.csv")
    write_latents(out / "latents.csv", Z)
    report = {"test_mse": mse, "active_count": act.active_count, "n_z": act.n_z,
              "threshold": act.threshold, "members": len(members), "rows": len(y)}
    if data.labels is not None and len(np.unique(data.labels)) >= 1:
        cl = dg.class_conditional_latents(Z, data.labels, grid_points=opts["kde_points"])
        kde_dir = out / "class_latents"
        kde_dir.mkdir(exist_ok=True)
        cl.write_curves(kde_dir)
        with open(kde_dir / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dim", "value"])
            for (c, d), vals in sorted(cl.samples.items()):
                for v in vals:
                    w.writerow([c, d, _fmt(v)])
        if len(cl.classes) >= 2:
            report["mean_pairwise_overlap"] = dg.mean_pairwise_overlap(cl)
        pairs = opts["interpolation_pairs"] or ([cl.classes[:2]] if len(cl.classes) >= 2 else [])
        per_sample = [Z[:, n, :] for n in range(Z.shape[1])]
        for a, b in pairs:
            za = dg.ensemble_mean_code(per_sample, data.labels, a)
            zb = dg.ensemble_mean_code(per_sample, data.labels, b)
            alphas, grid = dg.interpolation_grid(za, zb, opts["interpolation_points"])
            dec = model.decode(theta, grid)
            if kind != "squared_error":
                dec = sigmoid(dec)
            with open(out / f"interpolation_{a}_{b}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["alpha", *[f"z_{j + 1}" for j in range(grid.shape[1])],
                            *[f"x_{j + 1}" for j in range(dec.shape[1])]])
                for al, z, x in zip(alphas, grid, dec):
                    w.writerow([_fmt(al), *(_fmt(v) for v in z), *(_fmt(v) for v in x)])
    _write_json(out / "report.json", report)
    log.info("test mse %.6g, %d/%d active", mse, act.active_count, act.n_z)
    return EXIT_OK


# -- dynamics ---------------------------------------------------------------------------------------

def cmd_dynamics(args) -> int:
    cfg = _options(args)
    model, phi, theta, _ = load_checkpoint(args.checkpoint)
    data = _load_data(_data_arg(args))
    out = _output_dir(args, "dynamics")
    lib = _library(cfg, model.latent_dim)
    if args.ground_truth:
        if data.latents is None or data.latent_derivatives is None:
            raise ValueError("--ground-truth needs a dataset with stored latents and latent derivatives")
        xi = dyn.estimate_xi(lib, data.latents, data.latent_derivatives)
        sig = np.abs(xi) > dyn.SIGNIFICANCE_THRESHOLD
        stats = dyn.CoefficientStats(xi, xi.copy(), sig)
        samples = [xi]
        z0 = data.latents[_earliest(data)]
    else:
        if data.time_derivatives is None:
            raise ValueError("dynamics needs a dataset with time derivatives")
        members = _members(args, model, phi)
        samples = [dyn.member_xi(model, p, data.inputs, data.time_derivatives, lib) for p in members]
        if len(samples) < 2:
            raise ValueError("coefficient statistics need an ensemble of at least 2 members")
        stats = dyn.coefficient_stats(samples)
        row = data.inputs[_earliest(data)][None, :]
        z0 = np.mean([forward(model.encoder, p, row)[0] for p in members], axis=0)
    dyn.write_coefficient_table(out / "coefficients.csv", lib, stats)
    mask = stats.significant if stats.significant.any() else None
    names = dyn.entry_names(lib, mask)
    if len(samples) >= 2:
        corr, flags = dyn.coefficient_correlation(samples, mask)
        dyn.write_correlation(out / "correlation.csv", names, corr, flags)
    A = dyn.linear_part(lib, stats.mean, stats.significant)
    ev = np.linalg.eigvals(A)
    d = cfg["dynamics"]
    traj = dyn.integrate_latent_ode(lib, np.where(stats.significant, stats.mean, 0.0), z0,
                                    d["integrate_dt"], d["integrate_steps"])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", *[f"z_{j + 1}" for j in range(lib.n_z)]])
        for k, z in enumerate(traj):
            w.writerow([k, _fmt(k * d["integrate_dt"]), *(_fmt(v) for v in z)])
    _write_json(out / "report.json", {
        "library": lib.names, "members": len(samples),
        "significant_terms": int(stats.significant.sum()),
        "linear_eigenvalues_real": np.sort_complex(ev).real, "linear_eigenvalues_imag": np.sort_complex(ev).imag,
    })
    log.info("linear-part eigenvalues %s", np.array2string(ev, precision=4))
    return EXIT_OK


def _earliest(data) -> int:
    return int(np.argmin(data.times)) if data.times is not None else 0


# -- verify ---------------------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    out = _output_dir(args, ".")
    results = verify.run_all()
    verify.write_summary(results, out / "verify_summary.json")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--output", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eae", description="Entropic autoencoder experiments")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train an EAE, VAE or AE from a config")

    s = sub.add_parser("sample", parents=[common], help="encode queries with every ensemble member")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ensemble")
    s.add_argument("--queries", required=True, help="dataset container (.bin) or CSV of rows")

    d = sub.add_parser("diagnose", parents=[common], help="test MSE, activity, class latents, interpolation")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--ensemble")
    d.add_argument("--data", help="evaluation set; defaults to test_set.bin beside the checkpoint")

    y = sub.add_parser("dynamics", parents=[common], help="latent equations of motion from an ensemble")
    y.add_argument("--checkpoint", required=True)
    y.add_argument("--ensemble")
    y.add_argument("--data")
    y.add_argument("--ground-truth", action="store_true", help="fit on the dataset's stored latents")

    sub.add_parser("verify", parents=[common], help="run the numerical self-checks")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "diagnose": cmd_diagnose,
            "dynamics": cmd_dynamics, "verify": cmd_verify}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "train" and not args.config:
        print("eae train: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ArithmeticError, dyn.SingularGramError) as exc:
        print(f"eae {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"eae {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
