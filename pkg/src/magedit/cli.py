"""Command-line entry points.

Exit codes: 0 success, 2 configuration/usage error, 3 backend error, 4 numeric abort.
Every command writes ``<out-dir>/<command>_manifest.json``, also on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from magedit.attention import EditMask
from magedit.backend import load_backend
from magedit.config import EDIT_PRESETS, RunConfig
from magedit.errors import ConfigError, MagEditError, MissingTrajectory
from magedit.fixtures import make_toy_image
from magedit.inversion import cache_key, load_trajectory, save_trajectory, sha256_bytes
from magedit.io import (
    file_sha256,
    read_image,
    read_mask,
    write_latent,
    write_mask,
    write_pgm,
    write_png,
)
from magedit.pipeline import (
    EditSession,
    RunManifest,
    invert_source,
    run_edit,
    run_edit_multi,
    run_iterative,
    write_json_atomic,
)
from magedit.prompts import align_prompts, attach_negative_tokens, with_groups
from magedit.scoring import BUILTIN_SCORERS, evaluate_crops, load_scorer

log = logging.getLogger("magedit")

CACHE_ENV = "MAGEDIT_CACHE"
COMMANDS = ("invert", "edit", "edit-multi", "iterate", "eval", "toy-demo")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--image")
    p.add_argument("--mask", help="8-bit grayscale PNG, >=128 marks the edit region")
    p.add_argument("--source-prompt", dest="source_prompt")
    p.add_argument("--target-prompt", dest="target_prompt")
    p.add_argument("--backend", choices=["toy", "external"])
    p.add_argument("--backend-path", dest="backend_path", help="module:factory for --backend external")
    p.add_argument("--backend-options", dest="backend_options", type=json.loads,
                   help="JSON object passed to the backend factory")
    p.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--guidance-scale", dest="guidance_scale", type=float)
    p.add_argument("--num-steps", dest="num_sample_steps", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--cache-dir", dest="cache_dir", help=f"trajectory cache root (default ${CACHE_ENV})")
    return p


def _edit_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--negative-tokens", dest="negative_tokens", nargs="*")
    p.add_argument("--constraint", choices=["tr", "sr"])
    p.add_argument("--edit-type", dest="edit_type", choices=sorted(EDIT_PRESETS))
    p.add_argument("--max-it", dest="max_it", type=int)
    p.add_argument("--tau1", type=int)
    p.add_argument("--tau2", type=int)
    p.add_argument("--sa-window-end", dest="sa_window_end", type=int)
    p.add_argument("--blend-window-start", dest="blend_window_start", type=int)
    p.add_argument("--delta-mode", dest="delta_mode", choices=["snr_schedule", "constant"])
    p.add_argument("--lambda-sr", dest="lambda_sr", type=float)
    p.add_argument("--lambda-p", dest="lambda_p", type=float)
    p.add_argument("--lambda-ng", dest="lambda_ng", type=float)
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--asymmetric", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--invert", action="store_true", help="invert the image if no cached trajectory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common, edit = _common_flags(), _edit_flags()
    sub.add_parser("invert", parents=[common], help="invert an image into the trajectory cache")
    sub.add_parser("edit", parents=[common, edit], help="single-prompt localized edit")
    sub.add_parser("edit-multi", parents=[common, edit], help="weighted multi-prompt edit")
    it = sub.add_parser("iterate", parents=[common, edit], help="chain edits from a plan file")
    it.add_argument("--plan", required=True, help="JSON list of per-step config overrides")
    ev = sub.add_parser("eval", parents=[common], help="score edited vs source crops")
    ev.add_argument("--edited", required=True)
    ev.add_argument("--source", required=True)
    ev.add_argument("--phrase", help="edit phrase for text alignment (default: new target tokens)")
    ev.add_argument("--scorer", action="append", dest="scorers",
                    help=f"built-in ({', '.join(BUILTIN_SCORERS)}) or module:attr; repeatable")
    sub.add_parser("toy-demo", parents=[common], help="generate a fixture and run the full loop")
    return parser


CONFIG_FLAGS = [
    "image", "mask", "source_prompt", "target_prompt", "backend", "backend_path",
    "backend_options", "eta", "seed", "guidance_scale", "num_sample_steps", "out_dir",
    "cache_dir", "negative_tokens", "constraint", "edit_type", "max_it", "tau1", "tau2",
    "sa_window_end", "blend_window_start", "delta_mode", "lambda_sr", "lambda_p",
    "lambda_ng", "weights", "asymmetric",
]


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
    return cfg.updated(**overrides)


def cache_root(cfg: RunConfig) -> Path:
    if cfg.cache_dir:
        return Path(cfg.cache_dir)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path.home() / ".cache" / "magedit"


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise UsageError("missing required " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _trajectory_hashes(cfg: RunConfig, backend_id: str, sched) -> dict:
    return {
        "image": file_sha256(cfg.image),
        "prompt": sha256_bytes(cfg.source_prompt.encode()),
        "schedule": sched.digest(),
        "inversion": sha256_bytes(
            json.dumps([backend_id, cfg.guidance_scale, cfg.null_inner_steps,
                        cfg.null_lr, cfg.null_early_stop]).encode()
        ),
    }


def obtain_trajectory(cfg: RunConfig, backend, sched, allow_invert: bool, manifest: RunManifest):
    """Load the cached trajectory, or compute and cache it when allowed."""
    hashes = _trajectory_hashes(cfg, backend.identity(), sched)
    key = cache_key(hashes["image"], hashes["prompt"], hashes["schedule"], hashes["inversion"])
    directory = cache_root(cfg) / key
    manifest.outputs["trajectory_cache"] = str(directory)
    if (directory / "manifest.json").exists():
        traj = load_trajectory(directory, expect_hashes=hashes)
        if list(traj.z0.shape) != list(backend.latent_shape):
            raise ConfigError(f"cache {directory} holds latents of another shape (hash collision)")
        manifest.outputs["cache_hit"] = True
        return traj
    if not allow_invert:
        raise MissingTrajectory(f"no cached trajectory at {directory}; run `invert` or pass --invert")
    z0 = backend.encode(read_image(cfg.image))
    with manifest.phase("inversion"):
        traj = invert_source(z0, backend.tokenize(cfg.source_prompt), backend, sched,
                             cfg.inversion(), cfg.guidance_scale)
    save_trajectory(traj, directory, hashes)
    manifest.outputs["cache_hit"] = False
    # reload so the edit sees the float32 cache exactly as a later cache hit would
    return load_trajectory(directory, expect_hashes=hashes)


def build_session(cfg: RunConfig, backend, source=None, trajectory=None) -> EditSession:
    sched = cfg.schedule()
    mask = EditMask.from_image_mask(read_mask(cfg.mask), latent_size=tuple(backend.latent_shape[1:]))
    pair = align_prompts(backend.tokenize(cfg.source_prompt), backend.tokenize(cfg.target_prompt))
    if cfg.weights is not None:
        pair = with_groups(pair, weights=cfg.weights)
    pair = attach_negative_tokens(pair, cfg.negative_tokens, backend.tokenize)
    return EditSession(
        source=source,
        mask=mask,
        pair=pair,
        spec=cfg.constraint_spec(),
        cfg=cfg.guidance(),
        sched=sched,
        backend=backend,
        seed=cfg.seed,
        trajectory=trajectory,
        inversion=cfg.inversion(),
        config_snapshot=cfg.resolved(),
    )


def write_edit_outputs(out_dir: Path, z, manifest: RunManifest, backend, session) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.outputs["edited_latent"] = str(write_latent(out_dir / "edited_latent.f32", z))
    if manifest.reconstruction_latent is not None:
        manifest.outputs["reconstruction_latent"] = str(
            write_latent(out_dir / "reconstruction_latent.f32", manifest.reconstruction_latent)
        )
    manifest.outputs["attn_mask_pgm"] = str(write_pgm(out_dir / "attn_mask.pgm", session.mask.attn_mask))
    decode = getattr(backend, "decode", None)
    if decode is not None:
        try:
            manifest.outputs["edited_image"] = str(write_png(out_dir / "edited.png", decode(z)))
            if manifest.reconstruction_latent is not None:
                manifest.outputs["reconstruction_image"] = str(
                    write_png(out_dir / "reconstruction.png", decode(manifest.reconstruction_latent))
                )
        except MagEditError as exc:
            manifest.notes.append(f"no decoded image: {exc}")


# --- commands ---------------------------------------------------------------

def cmd_invert(args, cfg: RunConfig, manifest: RunManifest) -> RunManifest:
    _require(cfg, "image", "source_prompt")
    manifest.config = cfg.resolved()
    backend = load_backend(cfg.backend, cfg.backend_path, cfg.backend_kwargs())
    sched = cfg.schedule()
    manifest.schedule, manifest.schedule_hash = sched.to_dict(), sched.digest()
    traj = obtain_trajectory(cfg, backend, sched, allow_invert=True, manifest=manifest)
    manifest.outputs["reconstruction_error"] = traj.reconstruction_error
    manifest.outputs["plain_replay_error"] = traj.plain_replay_error
    print("cache hit" if manifest.outputs["cache_hit"] else "inverted",
          manifest.outputs["trajectory_cache"])
    manifest.status = "ok"
    return manifest


def _edit(args, cfg: RunConfig, manifest: RunManifest, multi: bool) -> RunManifest:
    _require(cfg, "image", "mask", "source_prompt", "target_prompt")
    manifest.config = cfg.resolved()
    backend = load_backend(cfg.backend, cfg.backend_path, cfg.backend_kwargs())
    session = build_session(cfg, backend)
    manifest.alignment = session.pair.to_dict()
    traj = obtain_trajectory(cfg, backend, session.sched, args.invert, manifest)
    session = replace(session, trajectory=traj)
    z, result = (run_edit_multi if multi else run_edit)(session)
    result.outputs.update(manifest.outputs)
    result.timings.update(manifest.timings)
    write_edit_outputs(Path(cfg.out_dir), z, result, backend, session)
    print(f"edited latent written to {result.outputs['edited_latent']}")
    return result


def cmd_edit(args, cfg, manifest):
    return _edit(args, cfg, manifest, multi=False)


def cmd_edit_multi(args, cfg, manifest):
    return _edit(args, cfg, manifest, multi=True)


def cmd_iterate(args, cfg: RunConfig, manifest: RunManifest) -> RunManifest:
    try:
        plan = json.loads(Path(args.plan).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {args.plan}: {exc}") from exc
    if isinstance(plan, dict):
        plan = plan.get("steps", [])
    if not isinstance(plan, list):
        raise ConfigError("plan must be a list of step overrides")
    _require(cfg, "image")
    manifest.config = cfg.resolved()
    backend = load_backend(cfg.backend, cfg.backend_path, cfg.backend_kwargs())
    z0 = backend.encode(read_image(cfg.image))
    sessions, step_cfgs = [], []
    previous_target = cfg.source_prompt
    for k, step in enumerate(plan):
        step = dict(step)
        step.setdefault("source_prompt", previous_target)
        step_cfg = cfg.updated(**step)
        _require(step_cfg, "mask", "source_prompt", "target_prompt")
        sessions.append(build_session(step_cfg, backend, source=z0 if k == 0 else None))
        step_cfgs.append(step_cfg)
        previous_target = step_cfg.target_prompt
    out_dir = Path(cfg.out_dir)
    try:
        results = run_iterative(sessions)
    except MagEditError as exc:
        for k, (z, m) in enumerate(getattr(exc, "partial_results", [])):
            write_edit_outputs(out_dir / f"step_{k}", z, m, backend, sessions[k])
            m.write(out_dir / f"step_{k}" / "iterate_manifest.json")
        raise
    steps = []
    for k, (z, m) in enumerate(results):
        write_edit_outputs(out_dir / f"step_{k}", z, m, backend, sessions[k])
        m.write(out_dir / f"step_{k}" / "iterate_manifest.json")
        steps.append(str(out_dir / f"step_{k}"))
    manifest.outputs["steps"] = steps
    manifest.status = "ok"
    return manifest


def cmd_eval(args, cfg: RunConfig, manifest: RunManifest) -> RunManifest:
    _require(cfg, "mask")
    manifest.config = cfg.resolved()
    phrase = args.phrase
    if phrase is None and cfg.source_prompt and cfg.target_prompt:
        backend = load_backend(cfg.backend, cfg.backend_path, cfg.backend_kwargs())
        pair = align_prompts(backend.tokenize(cfg.source_prompt), backend.tokenize(cfg.target_prompt))
        phrase = " ".join(pair.target[p].text for p in pair.new_target)
    scorers = [load_scorer(n) for n in (args.scorers or list(BUILTIN_SCORERS))]
    report = evaluate_crops(
        read_image(args.edited), read_image(args.source), read_mask(cfg.mask), phrase, scorers
    )
    path = write_json_atomic(Path(cfg.out_dir) / "eval_report.json", report)
    manifest.outputs["report"] = str(path)
    manifest.outputs["scores"] = report["scores"]
    print(json.dumps(report["scores"]))
    manifest.status = "ok"
    return manifest


def cmd_toy_demo(args, cfg: RunConfig, manifest: RunManifest) -> RunManifest:
    out_dir = Path(cfg.out_dir)
    image, mask = make_toy_image()
    image_path = write_png(out_dir / "source.png", image)
    mask_path = write_mask(out_dir / "mask.png", mask)
    cfg = cfg.updated(
        image=cfg.image or str(image_path),
        mask=cfg.mask or str(mask_path),
        source_prompt=cfg.source_prompt or "a green sofa in a living room",
        target_prompt=cfg.target_prompt or "a blue sofa in a living room",
        cache_dir=cfg.cache_dir or str(out_dir / "cache"),
    )
    manifest.config = cfg.resolved()
    backend = load_backend(cfg.backend, cfg.backend_path, cfg.backend_kwargs())
    session = build_session(cfg, backend)
    manifest.alignment = session.pair.to_dict()
    traj = obtain_trajectory(cfg, backend, session.sched, True, manifest)
    z, result = run_edit(replace(session, trajectory=traj), command="toy-demo")
    result.outputs.update(manifest.outputs)
    result.timings.update(manifest.timings)
    write_edit_outputs(out_dir, z, result, backend, session)
    report = evaluate_crops(
        backend.decode(z), backend.decode(traj.z0), read_mask(cfg.mask),
        " ".join(session.pair.target[p].text for p in session.pair.new_target),
        [load_scorer(n) for n in BUILTIN_SCORERS],
    )
    write_json_atomic(out_dir / "eval_report.json", report)
    result.outputs["scores"] = report["scores"]
    last = [d for d in result.diagnostics if d["optimized"]][-1]
    print(f"in-mask attention of new token after guidance window: {last['in_mask_attention_mean']:.4f}")
    return result


HANDLERS = {
    "invert": cmd_invert,
    "edit": cmd_edit,
    "edit-multi": cmd_edit_multi,
    "iterate": cmd_iterate,
    "eval": cmd_eval,
    "toy-demo": cmd_toy_demo,
}


def _peek(argv: list[str], flag: str) -> str | None:
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith(flag + "="):
            return a.split("=", 1)[1]
    return None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    command = next((a for a in argv if a in COMMANDS), "unknown")
    manifest = RunManifest(command=command)
    out_dir = Path(_peek(argv, "--out-dir") or RunConfig.out_dir)
    code = 0
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out_dir = Path(cfg.out_dir)
        manifest = HANDLERS[args.command](args, cfg, manifest)
    except MagEditError as exc:
        manifest = getattr(exc, "manifest", None) or manifest
        manifest.fail(exc)
        code = exc.exit_code
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
    manifest.write(out_dir / f"{command}_manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
