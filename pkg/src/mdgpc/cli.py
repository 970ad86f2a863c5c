"""Experiment runner: seeded subcommands over the library modules.

Every run resolves its configuration from built-in defaults, an optional
JSON file and ``--set`` dotted-path overrides, writes the resolved document
(`resolved_config.json`) next to its artifacts, and derives all randomness
from the single ``seed`` entry. Repeated invocations with the same inputs
therefore produce byte-identical outputs. Subcommands:

    gen-data       write a synthetic labelled pool as CSV
    train          episodic meta-training of the deep kernel
    eval           fit held-out episodes from a checkpoint and score them
    compare-inner  mirror-descent vs gradient-descent ELBO traces at a
                   matched rate on frozen hyperparameters
    compare-outer  meta-training with mirror-descent vs gradient-descent
                   inner loops, monitored by query cross-entropy
    verify         numerical identity checks with measured deviations

Exit status: 0 success, 1 configuration or I/O error, 2 numerical failure,
3 verification failure.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import expfam, inference, kernels, likelihood, meta, metrics, tasks
from .errors import ConfigError, MdgpcError, OverlappingSplits, ParseError
from .expfam import GaussianMoments
from .inference import InnerConfig
from .likelihood import GaussianSiteLikelihood, McConfig
from .seeding import derive_seed, rng_for

__all__ = ["main", "default_config", "load_config", "apply_overrides"]

CHECKPOINT_FORMAT_VERSION = 1

# Seed-stream tags (first derivation key after the run seed). Streams 1-6
# are claimed by meta.train / meta.compare_outer; everything here is
# disjoint from those.
STREAM_COMPARE_MC = 11
STREAM_COMPARE_EP = 12
STREAM_TRAIN_EP = 9
STREAM_EVAL_EP = 10
STREAM_COMPARE_OUTER = 20
STREAM_GEN_DATA = 30
STREAM_VERIFY = 40
STREAM_EXTRACTOR = 99
STREAM_TRAIN_EXTRACTOR = 100


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


_DEFAULTS = {
    "seed": 0,
    "output_dir": "run_out",
    "task": {
        "C": 5,
        "L": 5,
        "M": 16,
        "D": 8,
        "tau": 3.0,
        "sigma_w": 0.5,
        "domain_shift": None,
    },
    "data": {
        "path": None,
        "splits": {"train": [], "test": []},
    },
    "kernel": {
        "kind": "RBF",
        "net_dims": [8, 32, 32, 16],
        "init_scales": {
            "weight_std": 1.0,
            "length_scale": 5.0,
            "output_scale": 4.0,
            "offset": 1.0,
        },
    },
    "inner": {"rho": 1.0, "steps": 3, "mc_samples": 64},
    "eval_inner": {"rho": 0.5, "steps": 50, "mc_samples": 512},
    "outer": {
        "lr_net": 1e-3,
        "lr_kernel": 1e-4,
        "epochs": 1,
        "episodes_per_epoch": 100,
    },
    "eval": {"episodes": 100, "batches": 100, "bins": 15, "pred_samples": 512},
    "compare_inner": {"episodes": 20, "rate": 0.005, "steps": 30, "mc_samples": 64},
    "compare_outer": {
        "seeds": 10,
        "iterations": 30,
        "inner_steps": 2,
        "inner_rate": 0.02,
        "outer_lr": 1e-3,
        "monitor_episodes": 8,
        "mc_samples": 64,
        "pred_samples": 512,
    },
    "verify": {"instances": 10, "fd_step": 1e-4, "gh_nodes": 40, "tolerance": 1e-3},
    "gen_data": {"classes": 15, "rows_per_class": 50, "filename": "dataset.csv"},
}

# Keys whose value may be null; the second entry describes the non-null form.
_NULLABLE = {
    "task.domain_shift": "pair [angle_degrees, scale]",
    "data.path": "string path",
}


def _coerce_leaf(path: str, default, value):
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"config key '{path}' may not be null")
    if path == "task.domain_shift":
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"'{path}' must be a {_NULLABLE[path]}")
        return [float(value[0]), float(value[1])]
    if path == "data.path":
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a {_NULLABLE[path]}")
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"config key '{path}' has no boolean form")
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{path}' expects a number")
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"config key '{path}' expects an integer")
        return int(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{path}' expects a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{path}' expects a list")
        out = []
        for item in value:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(f"config key '{path}' expects numeric entries")
            out.append(int(item) if isinstance(item, int) else float(item))
        return out
    raise ConfigError(f"config key '{path}' has unsupported type")


def _merge_into(dst: dict, src, prefix: str = "") -> None:
    if not isinstance(src, dict):
        where = prefix[:-1] if prefix else "top level"
        raise ConfigError(f"config section '{where}' must be an object")
    for key, value in src.items():
        path = prefix + str(key)
        if key not in dst:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(dst[key], dict):
            _merge_into(dst[key], value, path + ".")
        else:
            dst[key] = _coerce_leaf(path, dst[key], value)


def load_config(path) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        _merge_into(cfg, doc)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``--set section.key=value`` pairs; values parse as JSON with a
    bare-string fallback."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        patch = value
        for part in reversed(key.split(".")):
            patch = {part: patch}
        _merge_into(cfg, patch)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _prepare_output(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
    _write_json(out / "resolved_config.json", cfg)
    return out


def _build_kernel(cfg: dict, extractor_seed: int) -> kernels.DeepKernel:
    kc = cfg["kernel"]
    sc = kc["init_scales"]
    if kc["kind"] not in kernels.KERNEL_KINDS:
        raise ConfigError(
            f"kernel.kind must be one of {sorted(kernels.KERNEL_KINDS)}, "
            f"got {kc['kind']!r}"
        )
    dims = [int(d) for d in kc["net_dims"]]
    if len(dims) < 2:
        raise ConfigError("kernel.net_dims needs at least input and output sizes")
    if dims[0] != cfg["task"]["D"]:
        raise ConfigError(
            f"kernel.net_dims[0] = {dims[0]} must equal task.D = {cfg['task']['D']}"
        )
    for name in ("weight_std", "length_scale", "output_scale", "offset"):
        if sc[name] <= 0:
            raise ConfigError(f"kernel.init_scales.{name} must be positive")
    fe = kernels.init_extractor(dims, seed=extractor_seed, weight_std=sc["weight_std"])
    base = [
        kernels.BaseKernelConfig(
            kc["kind"],
            length_scale_raw=float(kernels.softplus_inv(sc["length_scale"])),
            offset_raw=float(kernels.softplus_inv(sc["offset"])),
            output_scale_raw=float(kernels.softplus_inv(sc["output_scale"])),
        )
        for _ in range(cfg["task"]["C"])
    ]
    return kernels.DeepKernel(extractor=fe, base=base)


def _episode_source(cfg: dict, stream: int, split: str, base_seed=None):
    """Episode factory keyed by index; synthetic unless data.path is set."""
    t = cfg["task"]
    seed = cfg["seed"] if base_seed is None else base_seed
    if cfg["data"]["path"] is not None:
        ds = tasks.load_csv_dataset(cfg["data"]["path"])
        splits = cfg["data"]["splits"]
        tasks.check_disjoint_splits(splits["train"], splits["test"])
        pool = [int(c) for c in splits[split]]
        if not pool:
            raise ConfigError(f"data.splits.{split} is empty")
        if ds.X.shape[1] != t["D"]:
            raise ConfigError(
                f"dataset has {ds.X.shape[1]} features but task.D = {t['D']}"
            )
        return lambda i: tasks.sample_episode_from_dataset(
            ds, pool, t["C"], t["L"], t["M"], seed=derive_seed(seed, stream, i)
        )
    shift = t["domain_shift"]
    gen_cfg = tasks.TaskGenConfig(
        n_classes=t["C"],
        shots=t["L"],
        queries=t["M"],
        dim=t["D"],
        prototype_scale=t["tau"],
        within_scale=t["sigma_w"],
        domain_shift=None if shift is None else (shift[0], shift[1]),
        seed=seed,
    )
    return lambda i: tasks.gen_episode(gen_cfg, seed=derive_seed(seed, stream, i))


def _checkpoint_dict(kernel: kernels.DeepKernel, cfg: dict) -> dict:
    fe = kernel.extractor
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": [int(d) for d in fe.layer_dims],
        "weights": [w.reshape(-1).tolist() for w in fe.weights],
        "biases": [b.tolist() for b in fe.biases],
        "kernels": [
            {
                "kind": b.kind,
                "raws": {name: float(getattr(b, name)) for name in b.raw_names()},
            }
            for b in kernel.base
        ],
        "config": cfg,
    }


def _kernel_from_checkpoint(doc: dict) -> kernels.DeepKernel:
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format_version {version!r} unsupported, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    dims = [int(d) for d in doc["layer_dims"]]
    weights = [
        np.asarray(flat, dtype=float).reshape(dims[i], dims[i + 1])
        for i, flat in enumerate(doc["weights"])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    fe = kernels.FeatureExtractor(layer_dims=dims, weights=weights, biases=biases)
    base = [
        kernels.BaseKernelConfig(
            entry["kind"], **{k: float(v) for k, v in entry["raws"].items()}
        )
        for entry in doc["kernels"]
    ]
    if not base:
        raise ConfigError("checkpoint lists no per-class kernels")
    return kernels.DeepKernel(extractor=fe, base=base)


def _load_checkpoint(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from exc


def cmd_gen_data(cfg: dict) -> int:
    out = _prepare_output(cfg)
    g = cfg["gen_data"]
    t = cfg["task"]
    X, labels = tasks.gen_dataset(
        g["classes"],
        g["rows_per_class"],
        t["D"],
        t["tau"],
        t["sigma_w"],
        seed=derive_seed(cfg["seed"], STREAM_GEN_DATA),
    )
    path = out / g["filename"]
    tasks.save_csv_dataset(path, X, labels)
    print(f"wrote {path} ({X.shape[0]} rows, {g['classes']} classes)")
    return 0


def cmd_train(cfg: dict) -> int:
    out = _prepare_output(cfg)
    kern = _build_kernel(cfg, derive_seed(cfg["seed"], STREAM_TRAIN_EXTRACTOR))
    source = _episode_source(cfg, STREAM_TRAIN_EP, "train")
    o = cfg["outer"]
    inn = cfg["inner"]
    train_cfg = meta.TrainConfig(
        epochs=o["epochs"],
        episodes_per_epoch=o["episodes_per_epoch"],
        lr_net=o["lr_net"],
        lr_kernel=o["lr_kernel"],
        inner=InnerConfig(
            rho=inn["rho"],
            steps=inn["steps"],
            mc=McConfig(samples=inn["mc_samples"], seed=0),
        ),
        pred_mc=McConfig(samples=cfg["eval"]["pred_samples"], seed=0),
        inner_method="MD",
        seed=cfg["seed"],
    )
    if o["epochs"] < 0:
        raise ConfigError("outer.epochs must be >= 0")
    kern, history = meta.train(kern, source, train_cfg)
    _write_csv(
        out / "outer_trace.csv",
        ["iter", "objective", "query_ce", "query_acc"],
        [
            [h["iter"], float(h["objective"]), float(h["query_ce"]), float(h["query_acc"])]
            for h in history
        ],
    )
    _write_json(out / "checkpoint.json", _checkpoint_dict(kern, cfg))
    n = len(history)
    tail = history[-1]["query_acc"] if history else float("nan")
    print(f"trained {n} episodes; final episode query accuracy {tail:.4f}")
    print(f"wrote {out / 'outer_trace.csv'} and {out / 'checkpoint.json'}")
    return 0


def cmd_eval(cfg: dict, checkpoint_path, n_jobs: int) -> int:
    out = _prepare_output(cfg)
    doc = _load_checkpoint(checkpoint_path)
    kern = _kernel_from_checkpoint(doc)
    if kern.n_classes != cfg["task"]["C"]:
        raise ConfigError(
            f"checkpoint holds {kern.n_classes} per-class kernels "
            f"but task.C = {cfg['task']['C']}"
        )
    ev = cfg["eval"]
    einn = cfg["eval_inner"]
    if ev["episodes"] < 1:
        raise ConfigError("eval.episodes must be >= 1")
    if ev["batches"] < 1 or ev["episodes"] % ev["batches"] != 0:
        raise ConfigError(
            f"eval.batches = {ev['batches']} must divide eval.episodes = "
            f"{ev['episodes']}"
        )
    source = _episode_source(cfg, STREAM_EVAL_EP, "test")
    result = meta.evaluate(
        kern,
        source,
        ev["episodes"],
        InnerConfig(
            rho=einn["rho"],
            steps=einn["steps"],
            mc=McConfig(samples=einn["mc_samples"], seed=0),
        ),
        McConfig(samples=ev["pred_samples"], seed=0),
        seed=cfg["seed"],
        n_jobs=n_jobs,
    )
    groups = result.accuracies.reshape(ev["batches"], -1).mean(axis=1)
    if ev["batches"] > 1:
        stderr = float(np.std(groups, ddof=1) / np.sqrt(ev["batches"]))
    else:
        stderr = 0.0
    table = metrics.reliability_table(result.probs, result.y_true, ev["bins"])
    report = {
        "accuracy_mean": float(result.accuracies.mean()),
        "accuracy_stderr": stderr,
        "nll": metrics.nll(result.probs, result.y_true),
        "ece": metrics.ece(result.probs, result.y_true, ev["bins"]),
        "mce": metrics.mce(result.probs, result.y_true, ev["bins"]),
    }
    _write_json(out / "metrics.json", report)
    _write_csv(
        out / "calibration.csv",
        ["bin", "lower", "upper", "count", "confidence", "accuracy"],
        [
            [
                b + 1,
                float(table.lower[b]),
                float(table.upper[b]),
                int(table.count[b]),
                float(table.confidence[b]),
                float(table.accuracy[b]),
            ]
            for b in range(table.n_bins)
        ],
    )
    print(
        f"accuracy {report['accuracy_mean']:.4f} +- {report['accuracy_stderr']:.4f}, "
        f"nll {report['nll']:.4f}, ece {report['ece']:.4f}, mce {report['mce']:.4f}"
    )
    print(f"wrote {out / 'metrics.json'} and {out / 'calibration.csv'}")
    return 0


def cmd_compare_inner(cfg: dict) -> int:
    out = _prepare_output(cfg)
    ci = cfg["compare_inner"]
    if ci["episodes"] < 1:
        raise ConfigError("compare_inner.episodes must be >= 1")
    source = _episode_source(cfg, STREAM_COMPARE_EP, "train")
    rows = []
    wins = 0
    for i in range(1, ci["episodes"] + 1):
        episode = source(i)
        kern = _build_kernel(cfg, derive_seed(cfg["seed"], STREAM_EXTRACTOR, i))
        Z, _ = kernels.extract(kern.extractor, episode.support_x)
        grams = [kernels.gram(b, Z) for b in kern.base]
        inner = InnerConfig(
            rho=ci["rate"],
            steps=ci["steps"],
            mc=McConfig(
                samples=ci["mc_samples"],
                seed=derive_seed(cfg["seed"], STREAM_COMPARE_MC, i),
            ),
        )
        finals = {}
        for method in ("MD", "GD"):
            _, trace = inference.run_inner(method, grams, episode.support_y, inner)
            rows.extend([method, i, r.step, float(r.elbo)] for r in trace)
            finals[method] = trace[-1].elbo
        wins += finals["MD"] >= finals["GD"]
    _write_csv(out / "inner_trace.csv", ["method", "episode", "step", "elbo"], rows)
    print(
        f"final ELBO: mirror descent >= gradient descent on "
        f"{wins}/{ci['episodes']} episodes"
    )
    print(f"wrote {out / 'inner_trace.csv'}")
    return 0


def cmd_compare_outer(cfg: dict) -> int:
    out = _prepare_output(cfg)
    co = cfg["compare_outer"]
    if co["seeds"] < 1:
        raise ConfigError("compare_outer.seeds must be >= 1")
    rows = []
    wins = 0
    for s in range(1, co["seeds"] + 1):
        run_seed = derive_seed(cfg["seed"], STREAM_COMPARE_OUTER, s)
        kern = _build_kernel(cfg, derive_seed(run_seed, 0))
        train_src = _episode_source(cfg, 8, "train", base_seed=run_seed)
        monitor_src = _episode_source(cfg, 7, "test", base_seed=run_seed)
        run_cfg = meta.CompareOuterConfig(
            iterations=co["iterations"],
            inner_steps=co["inner_steps"],
            inner_rate=co["inner_rate"],
            outer_lr=co["outer_lr"],
            monitor_episodes=co["monitor_episodes"],
            mc_samples=co["mc_samples"],
            pred_samples=co["pred_samples"],
            seed=run_seed,
        )
        run_rows = meta.compare_outer(kern, train_src, monitor_src, run_cfg)
        rows.extend(
            [r["method"], s, r["iter"], float(r["query_ce"]), float(r["query_acc"])]
            for r in run_rows
        )
        finals = {
            r["method"]: r["query_ce"]
            for r in run_rows
            if r["iter"] == co["iterations"]
        }
        wins += finals["MD"] <= finals["GD"]
    _write_csv(
        out / "outer_compare.csv",
        ["method", "seed", "iter", "query_ce", "query_acc"],
        rows,
    )
    print(
        f"final cross-entropy: mirror-descent inner <= gradient-descent inner "
        f"on {wins}/{co['seeds']} seeds"
    )
    print(f"wrote {out / 'outer_compare.csv'}")
    return 0


def _random_moments(rng, n: int) -> GaussianMoments:
    a = rng.standard_normal((n, n))
    sigma = a @ a.T + 0.5 * n * np.eye(n)
    return GaussianMoments(rng.standard_normal(n), sigma)


def _check_roundtrip(seed: int) -> float:
    worst = 0.0
    for i in range(5):
        mom = _random_moments(rng_for(derive_seed(seed, STREAM_VERIFY, 1, i)), 4)
        back = expfam.natural_to_moments(expfam.moments_to_natural(mom))
        worst = max(
            worst,
            float(np.max(np.abs(back.m - mom.m))),
            float(np.max(np.abs(back.Sigma - mom.Sigma))),
        )
    return worst


def _check_fenchel(seed: int) -> float:
    worst = 0.0
    for i in range(5):
        mom = _random_moments(rng_for(derive_seed(seed, STREAM_VERIFY, 2, i)), 4)
        nat = expfam.moments_to_natural(mom)
        mu = expfam.moments_to_mean(mom)
        gap = expfam.log_partition(nat) + expfam.neg_entropy(mu) - expfam.pairing(nat, mu)
        worst = max(worst, abs(gap))
    return worst


def _check_bregman_kl(seed: int) -> float:
    worst = 0.0
    for i in range(5):
        rng = rng_for(derive_seed(seed, STREAM_VERIFY, 3, i))
        q, p = _random_moments(rng, 3), _random_moments(rng, 3)
        breg = expfam.bregman_h(expfam.moments_to_mean(q), expfam.moments_to_mean(p))
        worst = max(worst, abs(breg - expfam.gaussian_kl(q, p)))
    return worst


def _check_log_partition_grad(seed: int, fd_step: float) -> float:
    """Central FD of A over minimal natural coordinates vs dual coordinates."""
    worst = 0.0
    for i in range(3):
        mom = _random_moments(rng_for(derive_seed(seed, STREAM_VERIFY, 4, i)), 3)
        nat = expfam.moments_to_natural(mom)
        coords = expfam.natural_to_coords(nat)
        n = mom.m.shape[0]
        grad_fd = np.empty_like(coords)
        for j in range(coords.shape[0]):
            h = fd_step * max(1.0, abs(coords[j]))
            up, dn = coords.copy(), coords.copy()
            up[j] += h
            dn[j] -= h
            grad_fd[j] = (
                expfam.log_partition(expfam.coords_to_natural(up, n))
                - expfam.log_partition(expfam.coords_to_natural(dn, n))
            ) / (2.0 * h)
        exact = expfam.mean_to_dual_coords(expfam.moments_to_mean(mom))
        rel = np.max(np.abs(grad_fd - exact)) / max(1.0, float(np.max(np.abs(exact))))
        worst = max(worst, float(rel))
    return worst


def _check_likelihood_grads(seed: int, fd_step: float) -> float:
    """CRN finite differences of the expected log-likelihood vs (g_m, g_v).

    Uses a fixed Gauss-Hermite node set as the common draws so both sides
    are exact quadratures of the same smooth expectation; plain Monte Carlo
    draws would leave an O(1/sqrt(S)) gap between the pathwise difference
    quotient and the analytic integrand forms.
    """
    rng = rng_for(derive_seed(seed, STREAM_VERIFY, 5))
    c = 3
    m = rng.standard_normal(c)
    v = 0.5 + rng.random(c)
    y = np.zeros(c)
    y[0] = 1.0
    pm = expfam.PointMeanParams(mu1=m, mu2=v + m * m)
    eps, weights = likelihood.gauss_hermite_draws(16, c)
    mc = McConfig(samples=eps.shape[0], seed=0)
    g_m, g_v = likelihood.grad_mv(pm, y, mc, eps=eps, weights=weights)
    worst = 0.0
    for j in range(c):
        for which in ("m", "v"):
            mm, vv = m.copy(), v.copy()
            h = fd_step
            vals = []
            for sgn in (1.0, -1.0):
                if which == "m":
                    mm[j] = m[j] + sgn * h
                else:
                    vv[j] = v[j] + sgn * h
                shifted = expfam.PointMeanParams(mu1=mm, mu2=vv + mm * mm)
                vals.append(
                    likelihood.mc_expected_loglik(
                        shifted, y, mc, eps=eps, weights=weights
                    )
                )
            fd = (vals[0] - vals[1]) / (2.0 * h)
            exact = g_m[j] if which == "m" else g_v[j]
            worst = max(worst, abs(fd - exact) / max(1.0, abs(exact)))
    return worst


def _check_conjugate_step(seed: int) -> float:
    rng = rng_for(derive_seed(seed, STREAM_VERIFY, 7))
    n, c = 3, 2
    Z = rng.standard_normal((n, 2))
    base = kernels.BaseKernelConfig("RBF")
    grams = [kernels.gram(base, Z) for _ in range(c)]
    a = rng.standard_normal((n, c))
    b = -0.1 - 0.4 * rng.random((n, c))
    lik = GaussianSiteLikelihood(a, b)
    state = inference.md_init(grams)
    Y = np.zeros((n, c))
    Y[:, 0] = 1.0
    stepped = inference.md_step(
        state, Y, InnerConfig(rho=1.0, steps=1, mc=McConfig(4, 0)), lik=lik
    )
    worst = 0.0
    for i, g in enumerate(grams):
        K = inference.k_eff(g)
        prec = np.linalg.inv(K) - 2.0 * np.diag(b[:, i])
        sigma = np.linalg.inv(prec)
        mean = sigma @ a[:, i]
        worst = max(
            worst,
            float(np.max(np.abs(stepped.moments[i].Sigma - sigma))),
            float(np.max(np.abs(stepped.moments[i].m - mean))),
        )
    return worst


def _tiny_instance(seed: int):
    gen_cfg = tasks.TaskGenConfig(n_classes=2, shots=1, queries=1, dim=2, seed=seed)
    episode = tasks.gen_episode(gen_cfg, seed=seed)
    base = kernels.BaseKernelConfig(
        "RBF", length_scale_raw=float(kernels.softplus_inv(3.0))
    )
    grams = [kernels.gram(base, episode.support_x) for _ in range(2)]
    return grams, episode.support_y


def _check_ngd(cfg: dict) -> tuple:
    v = cfg["verify"]
    worst_dev, worst_rho = 0.0, 0.0
    for i in range(v["instances"]):
        grams, Y = _tiny_instance(derive_seed(cfg["seed"], STREAM_VERIFY, 8, i))
        inner = InnerConfig(
            rho=0.5,
            steps=2,
            mc=McConfig(samples=64, seed=derive_seed(cfg["seed"], STREAM_VERIFY, 9, i)),
        )
        report = inference.ngd_verify(
            grams, Y, inner, fd_step=v["fd_step"], gh_nodes=v["gh_nodes"]
        )
        worst_dev = max(worst_dev, report["deviation"])
        worst_rho = max(worst_rho, report["rho_deviation"])
    return worst_dev, worst_rho


def cmd_verify(cfg: dict) -> int:
    out = _prepare_output(cfg)
    seed = cfg["seed"]
    fd_step = cfg["verify"]["fd_step"]
    ngd_dev, rho_dev = _check_ngd(cfg)
    checks = [
        ("expfam_roundtrip", _check_roundtrip(seed), 1e-8),
        ("fenchel_equality", _check_fenchel(seed), 1e-8),
        ("bregman_equals_kl", _check_bregman_kl(seed), 1e-8),
        ("log_partition_grad_fd", _check_log_partition_grad(seed, fd_step), 1e-4),
        ("likelihood_grads_fd", _check_likelihood_grads(seed, fd_step), 1e-4),
        ("conjugate_step_exact", _check_conjugate_step(seed), 1e-8),
        ("ngd_equivalence", ngd_dev, cfg["verify"]["tolerance"]),
        ("rate_invariance", rho_dev, 1e-9),
    ]
    report = []
    all_ok = True
    for name, deviation, tol in checks:
        ok = bool(deviation <= tol)
        all_ok &= ok
        report.append(
            {
                "name": name,
                "deviation": float(deviation),
                "tolerance": float(tol),
                "passed": ok,
            }
        )
        print(f"{'PASS' if ok else 'FAIL'} {name}: deviation {deviation:.3e} (tol {tol:.0e})")
    _write_json(out / "verification.json", {"checks": report, "passed": all_ok})
    print(f"wrote {out / 'verification.json'}")
    return 0 if all_ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdgpc",
        description="Few-shot Gaussian-process classification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "write a synthetic labelled pool as CSV"),
        ("train", "episodic meta-training of the deep kernel"),
        ("eval", "evaluate a checkpoint on held-out episodes"),
        ("compare-inner", "MD vs GD inner-loop ELBO traces"),
        ("compare-outer", "MD-inner vs GD-inner meta-training"),
        ("verify", "numerical identity checks"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry by dotted path",
        )
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON path")
            p.add_argument(
                "--parallel-episodes",
                type=int,
                default=1,
                metavar="N",
                help="fit evaluation episodes on N threads",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            if args.parallel_episodes < 1:
                raise ConfigError("--parallel-episodes must be >= 1")
            return cmd_eval(cfg, args.checkpoint, args.parallel_episodes)
        if args.command == "compare-inner":
            return cmd_compare_inner(cfg)
        if args.command == "compare-outer":
            return cmd_compare_outer(cfg)
        return cmd_verify(cfg)
    except (ConfigError, ParseError, OverlappingSplits) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MdgpcError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
