"""Command-line front end.

Commands: ``phantom``, ``recon``, ``train``, ``train-bilevel`` and ``check``.
Every command takes ``--config``, ``--seed``, ``--out`` and repeatable
``--set key=value`` overrides.  ``CONVICTION_THREADS`` caps parallelism.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import CHECK_COLUMNS, SUITES
from .config import derive_rng, derive_seed, load_config
from .data import joint_batch, multi_coil_batch, single_coil_batch, synthetic_modalities
from .errors import ConfigError, ConvictionError, InvalidInputError
from .imaging import (
    add_noise,
    forward_op,
    make_mask,
    metrics,
    phantom_variant,
    psnr,
    shepp_logan,
    ssim,
    zero_filled,
)
from .io import read_cimg, write_cimg, write_csv, write_pbm, write_pgm
from .networks import NETWORKS, run_network
from .regularizer import (
    ConvStack,
    RegularizerSpec,
    decode_array,
    encode_array,
    init_conv_stack,
    load_checkpoint,
    save_checkpoint,
)
from .solver import TRACE_COLUMNS, LOAConfig, ObjectiveSpec, gd_smooth_solve, loa_solve
from .training import (
    BILEVEL_COLUMNS,
    HISTORY_COLUMNS,
    AdamState,
    BilevelConfig,
    LossSpec,
    NetworkProblem,
    TaskSpec,
    TrainConfig,
    bilevel_train,
    conventional_train,
    mean_psnr,
)

METRIC_COLUMNS = ["image", "method", "psnr", "ssim", "nmse", "rmse", "zf_psnr", "zf_ssim", "phases", "terminated_by"]


def thread_cap(cfg: dict) -> int:
    env = os.environ.get("CONVICTION_THREADS")
    n = int(cfg.get("threads", 1))
    if env:
        try:
            n = min(n, int(env)) if n > 0 else int(env)
        except ValueError as e:
            raise ConfigError(f"CONVICTION_THREADS must be an integer, got {env!r}") from e
    return max(1, n)


def _out(args) -> Path:
    p = Path(args.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidInputError(f"cannot create output directory {p}: {e}") from e
    return p


def _mask(cfg: dict, n: int, consumer: str = "mask"):
    m = cfg["mask"]
    return make_mask(m["pattern"], float(m["ratio"]), n, n, seed=derive_seed(cfg["seed"], consumer))


def _phantoms(cfg: dict, count: int, n: int, consumer: str = "phantom") -> list[np.ndarray]:
    rng = derive_rng(cfg["seed"], consumer)
    jitter = float(cfg["image"]["jitter"])
    if jitter == 0:
        return [shepp_logan(n) for _ in range(count)]
    return [phantom_variant(n, rng, jitter) for _ in range(count)]


def _load_dir(path) -> list[np.ndarray]:
    p = Path(path)
    if not p.is_dir():
        raise InvalidInputError(f"dataset directory {p} does not exist")
    files = sorted(p.glob("*.cimg"))
    if not files:
        raise InvalidInputError(f"dataset directory {p} holds no .cimg images")
    imgs = [read_cimg(f) for f in files]
    if len({im.shape for im in imgs}) > 1:
        raise InvalidInputError(f"images in {p} differ in shape")
    return imgs


# ----------------------------------------------------------------------------
# phantom


def cmd_phantom(args, cfg: dict) -> int:
    n = int(cfg["image"]["size"] if args.n is None else args.n)
    count = int(cfg["image"]["count"] if args.count is None else args.count)
    if n < 8:
        raise InvalidInputError("phantom size must be at least 8")
    if count < 0:
        raise InvalidInputError("count must be nonnegative")
    out = _out(args)
    for i, img in enumerate(_phantoms(cfg, count, n)):
        write_cimg(out / f"phantom_{i:03d}.cimg", img)
        write_pgm(out / f"phantom_{i:03d}.pgm", img)
    print(f"wrote {count} phantom(s) of size {n} to {out}")
    return 0


# ----------------------------------------------------------------------------
# networks and checkpoints


def _model_fields(cfg: dict, **extra) -> tuple[type, dict]:
    model = dict(cfg["model"])
    kind = model.pop("kind", "loa")
    cls = NETWORKS[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    if "eps_schedule" in model and model["eps_schedule"] is not None:
        model["eps_schedule"] = tuple(model["eps_schedule"])
    for k, v in extra.items():
        if k in names:
            model.setdefault(k, v)
    return cls, model


def build_net(cfg: dict, **extra):
    cls, fields = _model_fields(cfg, **extra)
    return cls(**fields)


def net_to_dict(net) -> dict:
    doc = {"kind": net.kind}
    for f in dataclasses.fields(net):
        v = getattr(net, f.name)
        doc[f.name] = list(v) if isinstance(v, tuple) else v
    return doc


def net_from_dict(doc: dict):
    doc = dict(doc)
    cls = NETWORKS[doc.pop("kind")]
    if doc.get("eps_schedule") is not None:
        doc["eps_schedule"] = tuple(doc["eps_schedule"])
    return cls(**doc)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def network_checkpoint(net, params: dict, history: list, adam: AdamState | None = None,
                       rng: np.random.Generator | None = None, epoch: int = 0, extra: dict | None = None) -> dict:
    doc = {
        "kind": "network",
        "model": net_to_dict(net),
        "params": {k: encode_array(v) for k, v in params.items()},
        "epoch": epoch,
        "history": history,
    }
    if adam is not None:
        doc["adam"] = {
            "step": adam.step,
            "m": {k: encode_array(v) for k, v in adam.m.items()},
            "v": {k: encode_array(v) for k, v in adam.v.items()},
        }
    if rng is not None:
        doc["rng"] = _rng_state(rng)
    if extra:
        doc.update(extra)
    return doc


def read_network_checkpoint(path):
    doc = load_checkpoint(path)
    if doc.get("kind") != "network":
        raise InvalidInputError(f"{path}: not a network checkpoint")
    net = net_from_dict(doc["model"])
    params = {k: decode_array(v) for k, v in doc["params"].items()}
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState({k: decode_array(v) for k, v in a["m"].items()},
                         {k: decode_array(v) for k, v in a["v"].items()}, a["step"])
    rng = _rng_from_state(doc["rng"]) if "rng" in doc else None
    return doc, net, params, adam, rng


# ----------------------------------------------------------------------------
# recon


def _solver_config(cfg: dict) -> LOAConfig:
    s = cfg["solver"]
    return LOAConfig(**{k: (int(v) if k in ("T_max", "max_backtracks") else float(v)) for k, v in s.items()})


def _extractor(cfg: dict) -> tuple[ConvStack, float, float]:
    """Extractor, smoothing and logit for the solver methods."""
    rc = cfg["recon"]
    reg = cfg["regularizer"]
    if rc["checkpoint"]:
        doc, net, params, _, _ = read_network_checkpoint(rc["checkpoint"])
        if net.kind != "loa" or not net.share:
            raise InvalidInputError("solver reconstruction needs a shared-weight LOA checkpoint")
        layers = tuple(params[f"g.{i}"] for i in range(net.depth))
        return ConvStack(layers, net.delta, net.mode), net.eps0, float(params["omega"][0])
    if not rc["untrained"]:
        raise InvalidInputError("recon needs recon.checkpoint or recon.untrained=true")
    rng = derive_rng(cfg["seed"], "regularizer")
    ch = [1] + [int(reg["features"])] * int(reg["depth"])
    st = init_conv_stack(rng, ch, int(reg["kernel_size"]), float(reg["delta"]), reg["mode"])
    return st, float(cfg["solver"]["eps0"]), float(reg["omega"])


def _recon_one(i, ref, cfg, mask, out: Path, method: str, ctx) -> dict:
    noise = float(cfg["image"]["noise"])
    y = forward_op(ref, mask)
    if noise > 0:
        y = add_noise(y, noise, derive_rng(cfg["seed"], f"noise{i}"))
    zf = zero_filled(y)
    phases, terminated = 0, ""
    report = bool(cfg["recon"]["report"])
    if method in ("loa", "gd"):
        st, eps0, omega = ctx
        weight = cfg["regularizer"]["weight"]
        spec = ObjectiveSpec((y,), (RegularizerSpec(st, eps0, omega, None if weight is None else float(weight)),))
        solve = loa_solve if method == "loa" else gd_smooth_solve
        res = solve(spec, zf, dataclasses.replace(_solver_config(cfg), eps0=eps0))
        x = res.x_final
        phases, terminated = len(res.trace), res.terminated_by
        write_csv(out / f"trace_{i:03d}.csv", [r.as_row() for r in res.trace], TRACE_COLUMNS)
        if report:
            from .plotting import plot_trace

            plot_trace(out / f"trace_{i:03d}.png", res.trace)
    else:
        net, params = ctx
        batch = single_coil_batch(np.asarray([ref]), mask)
        batch = dataclasses.replace(batch, y_dense=y.dense()[None, None])
        states = run_network(net, params, batch)
        x = net.image(states[-1])[0]
        phases, terminated = net.T, "phases"
        rows = [{"phase": t, "psnr": psnr(net.image(s)[0], ref)} for t, s in enumerate(states)]
        write_csv(out / f"trace_{i:03d}.csv", rows, ["phase", "psnr"])
    write_cimg(out / f"recon_{i:03d}.cimg", x)
    peak = float(np.abs(ref).max()) or None
    write_pgm(out / f"recon_{i:03d}.pgm", x, peak)
    write_pgm(out / f"zerofilled_{i:03d}.pgm", zf, peak)
    write_pgm(out / f"reference_{i:03d}.pgm", ref, peak)
    if report:
        from .plotting import plot_images

        plot_images(out / f"recon_{i:03d}.png", [ref, zf, x], ["reference", "zero-filled", method])
    row = {"image": i, "method": method}
    row.update(metrics(x, ref).as_row())
    row.update({"zf_psnr": psnr(zf, ref), "zf_ssim": ssim(zf, ref), "phases": phases, "terminated_by": terminated})
    return row


def cmd_recon(args, cfg: dict) -> int:
    rc = cfg["recon"]
    method = rc["method"]
    if method not in ("loa", "gd", "unrolled"):
        raise ConfigError(f"recon.method must be loa, gd or unrolled, got {method!r}")
    if rc["inputs"]:
        refs = _load_dir(rc["inputs"])
    else:
        refs = _phantoms(cfg, int(cfg["image"]["count"]), int(cfg["image"]["size"]))
    if not refs:
        raise InvalidInputError("nothing to reconstruct")
    n = refs[0].shape[0]
    if refs[0].shape != (n, n):
        raise InvalidInputError("reconstruction inputs must be square")
    mask = _mask(cfg, n)
    out = _out(args)
    write_pbm(out / "mask.pbm", mask)
    if method == "unrolled":
        if rc["checkpoint"]:
            _, net, params, _, _ = read_network_checkpoint(rc["checkpoint"])
        elif rc["untrained"]:
            net = build_net(cfg)
            params = net.init_params(derive_rng(cfg["seed"], "model"))
        else:
            raise InvalidInputError("recon needs recon.checkpoint or recon.untrained=true")
        if net.kind != "loa":
            raise ConfigError("unrolled recon supports the single-coil LOA network")
        ctx = (net, params)
    else:
        ctx = _extractor(cfg)
    with ThreadPoolExecutor(max_workers=thread_cap(cfg)) as ex:
        rows = list(ex.map(lambda a: _recon_one(a[0], a[1], cfg, mask, out, method, ctx), enumerate(refs)))
    write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    for r in rows:
        print(f"image {r['image']}: psnr {r['psnr']:.3f} dB (zero-filled {r['zf_psnr']:.3f} dB), "
              f"ssim {r['ssim']:.4f}, {r['phases']} phases")
    return 0


# ----------------------------------------------------------------------------
# training


def _split(cfg: dict) -> tuple[list, list]:
    ds = cfg["dataset"]
    if not ds["train"]:
        raise InvalidInputError("set dataset.train to a directory of .cimg images")
    train = _load_dir(ds["train"])
    if ds["val"]:
        return train, _load_dir(ds["val"])
    k = max(1, math.ceil(float(ds["val_fraction"]) * len(train)))
    if k >= len(train):
        raise InvalidInputError("dataset too small to split off a validation set")
    return train[:-k], train[-k:]


def _batches(cfg: dict, net, images: list, mask, task: int, consumer: str):
    noise = float(cfg["image"]["noise"])
    rng = derive_rng(cfg["seed"], consumer)
    arr = np.asarray(images)
    if net.kind == "loa":
        return single_coil_batch(arr, mask, task, rng, noise)
    if net.kind in ("prox", "hybrid"):
        return multi_coil_batch(arr, mask, net.coils, task, rng, noise)
    triples = np.stack([synthetic_modalities(im) for im in arr])
    mask2 = _mask(cfg, arr.shape[-1], "mask-second")
    return joint_batch(triples, [mask, mask2], task, rng, noise)


def _train_config(cfg: dict, workers: int) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("resume")
    t["frozen"] = tuple(t["frozen"])
    return TrainConfig(workers=workers, **t)


def cmd_train(args, cfg: dict) -> int:
    workers = thread_cap(cfg)
    tcfg = _train_config(cfg, workers)
    train_imgs, val_imgs = _split(cfg)
    resume = cfg["train"]["resume"]
    history: list = []
    start = 0
    adam = None
    if resume:
        doc, net, params, adam, rng = read_network_checkpoint(resume)
        if rng is None or adam is None:
            raise InvalidInputError(f"{resume}: checkpoint lacks optimizer or generator state")
        history, start = list(doc["history"]), int(doc["epoch"])
    else:
        net = build_net(cfg)
        params = net.init_params(derive_rng(cfg["seed"], "model"))
        rng = derive_rng(cfg["seed"], "train")
    n = train_imgs[0].shape[0]
    mask = _mask(cfg, n)
    task = TaskSpec(0, mask, 0.0, _batches(cfg, net, train_imgs, mask, 0, "noise-train"),
                    _batches(cfg, net, val_imgs, mask, 0, "noise-val"))
    loss = LossSpec(cfg["loss"]["kind"], cfg["loss"]["weights"])
    res = conventional_train(net, params, task, loss, tcfg, rng, adam=adam, start_epoch=start)
    history = history + res.history
    out = _out(args)
    save_checkpoint(out / "checkpoint.json",
                    network_checkpoint(res.net, res.params, history, res.adam, rng, start + tcfg.epochs))
    write_csv(out / "history.csv", history, HISTORY_COLUMNS)
    if history:
        from .plotting import plot_history

        plot_history(out / "history.png", history, "epoch", ["train_loss", "val_loss"], logy=True)
        last = history[-1]
        print(f"epoch {last['epoch']}: train loss {last['train_loss']:.6g}, val psnr {last['val_psnr']:.3f} dB")
    else:
        print("no epochs run; checkpoint holds the initial parameters")
    return 0


def cmd_train_bilevel(args, cfg: dict) -> int:
    workers = thread_cap(cfg)
    bl = dict(cfg["bilevel"])
    task_defs = bl.pop("tasks")
    if not task_defs:
        raise InvalidInputError("bilevel.tasks is empty")
    bcfg = BilevelConfig(**bl)
    train_imgs, val_imgs = _split(cfg)
    net = build_net(cfg, n_tasks=len(task_defs))
    if net.kind != "loa":
        raise ConfigError("bilevel training supports the LOA network")
    if net.n_tasks != len(task_defs):
        raise ConfigError("model.n_tasks must match the number of bilevel tasks")
    params = net.init_params(derive_rng(cfg["seed"], "model"))
    n = train_imgs[0].shape[0]
    tasks = []
    for i, td in enumerate(task_defs):
        m = make_mask(td["pattern"], float(td["ratio"]), n, n, seed=derive_seed(cfg["seed"], f"mask{i}"))
        tasks.append(TaskSpec(i, m, 0.0, _batches(cfg, net, train_imgs, m, i, f"noise-train{i}"),
                              _batches(cfg, net, val_imgs, m, i, f"noise-val{i}")))
    loss = LossSpec(cfg["loss"]["kind"], cfg["loss"]["weights"])
    problem = NetworkProblem(net, params, tasks, loss, workers)

    def per_task(theta, omega):
        P = problem.params(theta, omega)
        return {f"psnr_task{t.id}": mean_psnr(net, P, t.val) for t in tasks}

    res = bilevel_train(problem, problem.packer.pack(params), params["omega"], bcfg,
                        derive_rng(cfg["seed"], "bilevel"), on_outer=per_task)
    out = _out(args)
    P = problem.params(res.theta, res.omega)
    save_checkpoint(out / "checkpoint.json", network_checkpoint(
        net, P, res.history, epoch=len(res.history), extra={"terminated_by": res.terminated_by}))
    cols = BILEVEL_COLUMNS + [f"psnr_task{t.id}" for t in tasks]
    write_csv(out / "history.csv", res.history, cols)
    if res.history:
        from .plotting import plot_history

        plot_history(out / "history.png", res.history, "outer", ["train_loss", "val_loss"], logy=True)
    print(f"{len(res.history)} outer iterations, terminated by {res.terminated_by}; "
          f"task weights {np.round(1 / (1 + np.exp(-res.omega)), 4).tolist()}")
    return 0


# ----------------------------------------------------------------------------
# checks


def cmd_check(args, cfg: dict) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    out = _out(args)
    c = cfg["check"]
    seed = int(cfg["seed"])
    kwargs = {
        "adjoint": {"cases": int(c["cases"]), "seed": seed},
        "gradients": {"seed": seed},
        "sandwich": {"cases": int(c["cases"]), "seed": seed},
        "descent": {"instances": int(c["instances"]), "seed": seed},
        "mlm": {"seeds": int(c["seeds"]), "seed": seed},
    }
    failed = 0
    for name in names:
        rows = SUITES[name](**kwargs[name])
        write_csv(out / f"check_{name}.csv", rows, CHECK_COLUMNS)
        bad = [r for r in rows if not r["passed"]]
        failed += len(bad)
        print(f"{name}: {len(rows) - len(bad)}/{len(rows)} passed")
        for r in bad:
            print(f"  FAIL {r['check']} case {r['case']}: {r['value']:.3e} > {r['tol']:.1e}")
    return 1 if failed else 0


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="conviction-out", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a dotted config key with a JSON value (repeatable)")
    p = argparse.ArgumentParser(prog="conviction", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    ph = sub.add_parser("phantom", parents=[common], help="write phantom images (CIMG + PGM)")
    ph.add_argument("--n", type=int, help="image size")
    ph.add_argument("--count", type=int, help="number of phantoms")
    ph.set_defaults(func=cmd_phantom)
    sub.add_parser("recon", parents=[common], help="reconstruct undersampled images").set_defaults(func=cmd_recon)
    sub.add_parser("train", parents=[common], help="conventional training").set_defaults(func=cmd_train)
    sub.add_parser("train-bilevel", parents=[common], help="bilevel task-weight training").set_defaults(
        func=cmd_train_bilevel)
    ck = sub.add_parser("check", parents=[common], help="run invariant check suites")
    ck.add_argument("suite", choices=sorted(SUITES) + ["all"])
    ck.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        return args.func(args, cfg)
    except (ConvictionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
