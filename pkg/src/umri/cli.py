"""Command-line front end: phantom data in, images, figures and reports out.

Four subcommands cover the pipeline: ``phantom`` synthesises a test object
and its undersampled measurement, ``recon`` runs one of the reconstruction
methods, ``autotune`` searches the hyperparameter grid, and ``eval`` scores
images against a reference.  Settings resolve in precedence order: command
line flags, then a JSON config file, then built-in defaults.  Every run
writes a manifest echoing the resolved configuration, and all emitted JSON
validates against the schemas shipped alongside the package.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .autotune import HyperConfig, autotune, build_decoder_config, default_grid
from .decoders import DecoderConfig, layer_probe, load_params, save_params
from .fitting import FitConfig, ensemble_reconstruct, reconstruct_full
from .metrics import (
    EVALUATION_MODES,
    METRIC_NAMES,
    NORMALIZATIONS,
    SSIM_WINDOW,
    VIF_MIN_SIZE,
    evaluate,
)
from .mri import CoilMeasurement, zero_filled
from .phantom import (
    MaskSpec,
    PhantomSpec,
    make_mask,
    make_phantom,
    make_sens_maps,
    mask_from_array,
    mask_to_array,
    maps_from_array,
    read_array,
    simulate,
    write_array,
)
from .report import save_comparison, save_image, save_loss_curve, save_probe_panel
from .tv import TVConfig, tv_reconstruct

RECON_METHODS = ("convdecoder", "deepdecoder", "tv", "zero_fill")

_PHANTOM = PhantomSpec()
PHANTOM_DEFAULTS = {
    "height": _PHANTOM.height,
    "width": _PHANTOM.width,
    "coils": _PHANTOM.n_coils,
    "ellipses": _PHANTOM.n_ellipses,
    "texture_amplitude": _PHANTOM.texture_amplitude,
    "texture_scale": _PHANTOM.texture_scale,
    "phase_scale": _PHANTOM.phase_scale,
    "acceleration": 4,
    "center_fraction": None,
    "mask_kind": "random",
    "noise_sigma": 0.0,
}

RECON_DEFAULTS = {
    "method": "convdecoder",
    "layers": 8,
    "channels": 64,
    "input_shape": [256, 8, 6],
    "ensemble": 1,
    "jobs": 1,
    "probe": False,
}

_TV = TVConfig()
_FIT = FitConfig()

AUTOTUNE_DEFAULTS = {
    "q": 0.1,
    "k": 2,
    "holdout_mode": "columns",
    "arch": "convdecoder",
    "input_shape": [256, 8, 6],
    "iterations": 300,
    "stepsize": _FIT.stepsize,
    "jobs": 1,
}

EVAL_DEFAULTS = {
    "metrics": list(METRIC_NAMES),
    "norm": "meanstd_gt",
    "mode": "image",
}


# ---------------------------------------------------------------------------
# config plumbing


def _schema(name: str) -> dict:
    text = resources.files("umri").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _validate(payload: dict, schema_name: str) -> None:
    jsonschema.validate(payload, _schema(schema_name))


def resolve_config(defaults: dict, config_path, args, keys) -> dict:
    """Merge defaults, config-file keys and explicitly passed flags."""
    resolved = dict(defaults)
    if config_path is not None:
        with open(config_path) as fh:
            file_config = json.load(fh)
        if not isinstance(file_config, dict):
            raise ValueError(f"config file {config_path} must hold a JSON object")
        resolved.update(file_config)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _resolve_seed(resolved: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    elif "seed" in resolved:
        seed = resolved["seed"]
    else:
        seed = int(os.environ.get("UMRI_SEED", "0"))
    resolved["seed"] = int(seed)
    return resolved["seed"]


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                   outputs: dict, seed: int, **extra) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(extra)
    _validate(manifest, "manifest")
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


def _parse_input_shape(text: str) -> list[int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("input shape must be 'channels,height,width'")
    return [int(p) for p in parts]


def _read_image(path) -> np.ndarray:
    arr = read_array(path)
    return np.abs(arr) if np.iscomplexobj(arr) else arr


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    config = resolve_config(PHANTOM_DEFAULTS, args.config, args, PHANTOM_DEFAULTS)
    seed = _resolve_seed(config, args)
    _validate(config, "phantom_config")

    spec = PhantomSpec(
        height=config["height"],
        width=config["width"],
        n_coils=config["coils"],
        n_ellipses=config["ellipses"],
        texture_amplitude=config["texture_amplitude"],
        texture_scale=config["texture_scale"],
        phase_scale=config["phase_scale"],
        seed=seed,
    )
    x, support = make_phantom(spec)
    maps = make_sens_maps(spec.n_coils, spec.height, spec.width, support)
    mask = make_mask(MaskSpec(
        width=spec.width,
        acceleration=config["acceleration"],
        center_fraction=config["center_fraction"],
        kind=config["mask_kind"],
        seed=seed,
    ))
    y = simulate(x, maps, mask, noise_sigma=config["noise_sigma"], seed=seed)

    out = _out_dir(args)
    outputs = {}
    for name, arr in (
        ("phantom", x),
        ("maps", maps.maps),
        ("mask", mask_to_array(mask)),
        ("measurement", y.data),
    ):
        write_array(out / f"{name}.umri", arr)
        outputs[name] = f"{name}.umri"
        print(f"wrote {out / f'{name}.umri'}")

    write_manifest(out, "phantom", config, {}, outputs, seed,
                   realized_acceleration=mask.acceleration)
    outputs["manifest"] = "manifest.json"
    return 0


def _recon_method_config(config: dict, have_maps: bool, n_coils: int) -> dict:
    """Fill per-method defaults and drop settings the method never reads."""
    method = config["method"]
    if method not in RECON_METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {RECON_METHODS}")

    if method in ("convdecoder", "deepdecoder"):
        if config.get("sens") is None:
            config["sens"] = have_maps
        config.setdefault("iterations", _FIT.iterations)
        config.setdefault("stepsize", _FIT.stepsize)
        config.setdefault("record_every", _FIT.record_every)
        for key in ("lam", "tv_eps", "dc"):
            config.pop(key, None)
    else:
        if config.get("ensemble", 1) > 1:
            raise ValueError(f"--ensemble does not apply to method {method!r}")
        if config.get("probe"):
            raise ValueError(f"--probe does not apply to method {method!r}")
        if method == "tv":
            config.setdefault("iterations", _TV.iterations)
            config.setdefault("stepsize", _TV.stepsize)
            config.setdefault("record_every", _TV.record_every)
            config.setdefault("lam", _TV.lam)
            config.setdefault("tv_eps", _TV.eps)
            config.setdefault("dc", _TV.dc)
            drop = ("layers", "channels", "input_shape", "sens", "ensemble", "probe")
        else:
            drop = ("layers", "channels", "input_shape", "sens", "ensemble", "probe",
                    "iterations", "stepsize", "record_every", "lam", "tv_eps", "dc")
        for key in drop:
            config.pop(key, None)

    if config.get("sens") and not have_maps:
        raise ValueError("sensitivity-weighted loss needs --maps")
    return config


def _write_loss_csv(path, trace, header: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", header])
        for t, value in trace:
            writer.writerow([t, f"{value:.10e}"])


def cmd_recon(args) -> int:
    keys = ("method", "layers", "channels", "input_shape", "sens", "iterations",
            "stepsize", "record_every", "ensemble", "jobs", "lam", "tv_eps",
            "dc", "probe")
    config = resolve_config(RECON_DEFAULTS, args.config, args, keys)
    seed = _resolve_seed(config, args)

    mask = mask_from_array(read_array(args.mask))
    y = CoilMeasurement(read_array(args.measurement), mask)
    maps = maps_from_array(read_array(args.maps)) if args.maps else None
    gt = _read_image(args.gt) if args.gt else None

    config = _recon_method_config(config, maps is not None, y.n_coils)
    _validate(config, "recon_config")
    method = config["method"]

    if args.warm_start and method in ("tv", "zero_fill"):
        raise ValueError(f"--warm-start does not apply to method {method!r}")
    if args.save_params and method in ("tv", "zero_fill"):
        raise ValueError(f"--save-params does not apply to method {method!r}")
    if config.get("probe") and config.get("ensemble", 1) > 1:
        raise ValueError("--probe needs a single fit, not an ensemble")
    if args.warm_start and config.get("ensemble", 1) > 1:
        raise ValueError("--warm-start needs a single fit, not an ensemble")

    out = _out_dir(args)
    outputs = {}
    extra = {"realized_acceleration": mask.acceleration}
    trace = None
    trace_label = "loss"
    probes = None

    if method == "zero_fill":
        image = zero_filled(y)
    elif method == "tv":
        tv_config = TVConfig(
            lam=config["lam"],
            iterations=config["iterations"],
            eps=config["tv_eps"],
            stepsize=config["stepsize"],
            record_every=config["record_every"],
            dc=config["dc"],
        )
        result = tv_reconstruct(y, tv_config, maps=maps)
        image = result.image
        trace = result.objective_trace
        trace_label = "objective"
    else:
        loss_mode = "sensmap" if config["sens"] else (
            "single_coil" if y.n_coils == 1 else "coilwise")
        decoder_config = DecoderConfig(
            arch=method,
            n_layers=config["layers"],
            channels=config["channels"],
            input_shape=tuple(config["input_shape"]),
            output_shape=y.data.shape[1:],
            out_channels=2 if config["sens"] or y.n_coils == 1 else 2 * y.n_coils,
            seed=seed,
        )
        fit_config = FitConfig(
            loss_mode=loss_mode,
            iterations=config["iterations"],
            stepsize=config["stepsize"],
            record_every=config["record_every"],
            seed=seed,
        )
        if config["ensemble"] > 1:
            member_seeds = [seed + i for i in range(config["ensemble"])]
            ens = ensemble_reconstruct(y, decoder_config, fit_config, member_seeds,
                                       maps=maps, jobs=config["jobs"])
            image = ens.image
            extra["ensemble_seeds"] = list(ens.seeds)
        else:
            state = load_params(decoder_config, args.warm_start) if args.warm_start else None
            result = reconstruct_full(y, decoder_config, fit_config, maps=maps, state=state)
            image = result.image
            trace = result.fit.loss_trace
            for t, value in trace:
                print(f"iter {t:>6d} loss {value:.6e}")
            if args.warm_start:
                extra["warm_start"] = str(args.warm_start)
            if args.save_params:
                save_params(result.state, args.save_params)
                outputs["params"] = str(args.save_params)
            if config.get("probe"):
                probes = layer_probe(result.state, gt if gt is not None else image)

    write_array(out / "recon.umri", image.astype(np.float32))
    outputs["recon"] = "recon.umri"
    save_image(out / "recon.png", image, title=method)
    outputs["recon_figure"] = "recon.png"

    if trace is not None:
        _write_loss_csv(out / "loss.csv", trace, trace_label)
        outputs["loss_table"] = "loss.csv"
        save_loss_curve(out / "loss.png", trace, ylabel=trace_label)
        outputs["loss_figure"] = "loss.png"

    if probes is not None:
        save_probe_panel(out / "probe.png", probes)
        outputs["probe_figure"] = "probe.png"

    if gt is not None:
        panels = [("reference", gt), ("zero-filled", zero_filled(y)), (method, image)]
        save_comparison(out / "comparison.png", panels)
        outputs["comparison_figure"] = "comparison.png"
        # only score metrics the image size supports
        names = ["psnr"]
        if min(image.shape) >= SSIM_WINDOW:
            names += ["ssim", "ms_ssim"]
        if min(image.shape) >= VIF_MIN_SIZE:
            names.append("vif")
        report = evaluate(image, gt, metrics=tuple(names))
        payload = report.to_json_dict()
        _validate(payload, "metric_report")
        write_json(out / "metrics.json", payload)
        outputs["metrics"] = "metrics.json"

    inputs = {"measurement": args.measurement, "mask": args.mask}
    if args.maps:
        inputs["maps"] = args.maps
    if args.gt:
        inputs["gt"] = args.gt
    if args.warm_start:
        inputs["warm_start"] = args.warm_start
    write_manifest(out, "recon", config, inputs, outputs, seed, **extra)
    print(f"wrote {out / 'recon.umri'}")
    return 0


def cmd_autotune(args) -> int:
    keys = ("q", "k", "holdout_mode", "arch", "input_shape", "iterations",
            "stepsize", "jobs")
    config = resolve_config(AUTOTUNE_DEFAULTS, args.config, args, keys)
    seed = _resolve_seed(config, args)

    if args.grid:
        with open(args.grid) as fh:
            grid_entries = json.load(fh)
        grid = tuple(
            HyperConfig(int(e["n_layers"]), int(e["channels"]), bool(e["sens"]))
            for e in grid_entries
        )
    else:
        grid = default_grid()
    config["grid"] = [
        {"n_layers": h.n_layers, "channels": h.channels, "sens": h.sens} for h in grid
    ]
    _validate(config, "autotune_config")

    mask = mask_from_array(read_array(args.mask))
    y = CoilMeasurement(read_array(args.measurement), mask)
    maps = maps_from_array(read_array(args.maps)) if args.maps else None

    fit_config = FitConfig(
        loss_mode="coilwise",
        iterations=config["iterations"],
        stepsize=config["stepsize"],
        seed=seed,
    )
    result = autotune(
        y,
        grid=grid,
        q=config["q"],
        k=config["k"],
        seed=seed,
        maps=maps,
        fit_config=fit_config,
        mode=config["holdout_mode"],
        input_shape=tuple(config["input_shape"]),
        arch=config["arch"],
        jobs=config["jobs"],
    )

    for row in result.table:
        print(f"{row.config.label()}  mean_error {row.mean_error:.6e}")
    print(f"chosen: {result.best.label()}")

    out = _out_dir(args)
    table_payload = result.to_json_dict()
    _validate(table_payload, "score_table")
    write_json(out / "autotune.json", table_payload)

    chosen = {
        "method": config["arch"],
        "layers": result.best.n_layers,
        "channels": result.best.channels,
        "sens": bool(result.best.sens),
        "input_shape": list(config["input_shape"]),
    }
    _validate(chosen, "recon_config")
    write_json(out / "chosen_config.json", chosen)

    outputs = {"score_table": "autotune.json", "chosen_config": "chosen_config.json"}
    inputs = {"measurement": args.measurement, "mask": args.mask}
    if args.maps:
        inputs["maps"] = args.maps
    if args.grid:
        inputs["grid"] = args.grid
    write_manifest(out, "autotune", config, inputs, outputs, seed, chosen_config=chosen)
    return 0


def _load_stack(paths) -> np.ndarray:
    images = []
    for path in paths:
        arr = _read_image(path)
        if arr.ndim == 2:
            images.append(arr)
        elif arr.ndim == 3:
            images.extend(arr)
        else:
            raise ValueError(f"{path}: expected a 2-D image or 3-D stack, got shape {arr.shape}")
    return np.stack(images)


def cmd_eval(args) -> int:
    keys = ("metrics", "norm", "mode")
    config = resolve_config(EVAL_DEFAULTS, args.config, args, keys)
    _validate(config, "eval_config")

    recons = _load_stack(args.recon)
    gts = _load_stack(args.gt)
    report = evaluate(
        recons,
        gts,
        normalization=config["norm"],
        evaluation_mode=config["mode"],
        metrics=tuple(config["metrics"]),
    )
    payload = report.to_json_dict()
    _validate(payload, "metric_report")
    print(json.dumps(payload, indent=2, sort_keys=True))

    if args.out:
        out = _out_dir(args)
        write_json(out / "report.json", payload)
        inputs = {f"recon_{i}": p for i, p in enumerate(args.recon)}
        inputs.update({f"gt_{i}": p for i, p in enumerate(args.gt)})
        write_manifest(out, "eval", config, inputs, {"report": "report.json"}, 0)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umri",
        description="Untrained-network MRI reconstruction on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, help="global seed (falls back to $UMRI_SEED)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("phantom", help="synthesise a phantom and its measurement")
    common(p)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--coils", type=int)
    p.add_argument("--ellipses", type=int)
    p.add_argument("--texture-amplitude", type=float)
    p.add_argument("--texture-scale", type=float)
    p.add_argument("--phase-scale", type=float)
    p.add_argument("--acceleration", type=int)
    p.add_argument("--center-fraction", type=float)
    p.add_argument("--mask-kind", choices=("random", "equispaced"))
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("recon", help="reconstruct an image from a measurement")
    common(p)
    p.add_argument("--measurement", required=True, help="k-space .umri file")
    p.add_argument("--mask", required=True, help="mask .umri file")
    p.add_argument("--maps", help="sensitivity maps .umri file")
    p.add_argument("--gt", help="reference image for metrics and comparison figure")
    p.add_argument("--method", choices=RECON_METHODS)
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--input-shape", type=_parse_input_shape,
                   help="decoder input as 'channels,height,width'")
    p.add_argument("--sens", action=argparse.BooleanOptionalAction,
                   help="use the sensitivity-weighted loss (default: on when --maps given)")
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--stepsize", type=float)
    p.add_argument("--record-every", type=int)
    p.add_argument("--ensemble", type=int, help="average this many independent fits")
    p.add_argument("--jobs", type=int)
    p.add_argument("--lam", type=float, help="total-variation weight")
    p.add_argument("--tv-eps", type=float)
    p.add_argument("--dc", action=argparse.BooleanOptionalAction,
                   help="apply measured-data replacement after a tv fit")
    p.add_argument("--probe", action=argparse.BooleanOptionalAction,
                   help="render per-layer linear fits to the target")
    p.add_argument("--warm-start", help="parameter file to initialise the fit from")
    p.add_argument("--save-params", help="write fitted parameters here")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("autotune", help="pick decoder hyperparameters by holdout")
    common(p)
    p.add_argument("--measurement", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--maps")
    p.add_argument("--grid", help="JSON file with a list of {n_layers, channels, sens}")
    p.add_argument("--q", type=float, help="holdout fraction")
    p.add_argument("--k", type=int, help="number of random splits")
    p.add_argument("--holdout-mode", choices=("columns", "samples"))
    p.add_argument("--arch", choices=("convdecoder", "deepdecoder"))
    p.add_argument("--input-shape", type=_parse_input_shape)
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--stepsize", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_autotune)

    p = sub.add_parser("eval", help="score reconstructions against references")
    common(p, out_required=False)
    p.add_argument("--recon", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--metrics", nargs="+", choices=METRIC_NAMES)
    p.add_argument("--norm", choices=NORMALIZATIONS)
    p.add_argument("--mode", choices=EVALUATION_MODES)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single reporting point: machine-readable stderr
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
