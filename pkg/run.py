import sys
import json
import logging
import argparse
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from omnidesk.config import RunConfig, apply_thread_limit, load_run_config, setup_logging
from omnidesk.errors import ConfigError, OmniError

logger = logging.getLogger("omnidesk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run.py",
        description="omnidesk: desk-scale multi-condition human video generation",
    )
    parser.add_argument("--config", help="TOML run config (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="Override the run seed")
    parser.add_argument("--out", help="Output directory (dataset dir for synth, run dir otherwise)")
    parser.add_argument("--jobs", type=int, default=1, help="Parallel workers (capped by OMNI_THREADS)")
    parser.add_argument("--log-level", help="Override OMNI_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="Write the synthetic talking-sprite dataset")

    train = sub.add_parser("train", help="Run the three-stage training schedule")
    train.add_argument("--resume", help="Checkpoint to continue from")

    gen = sub.add_parser("generate", help="Generate a video from a request file")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--request", required=True, help="DrivingRequest JSON; paths inside are relative to it")
    gen.add_argument("--dump-latents", action="store_true", help="Also write each segment's raw latent")

    ev = sub.add_parser("evaluate", help="Score a checkpoint on the held-out split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", default="heldout.jsonl")
    ev.add_argument("--null-audio", action="store_true", help="Generate with the audio condition nulled")

    sub.add_parser("ablate", help="Run the ablation grid")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        key = "data_dir" if args.command == "synth" else "out_dir"
        overrides["paths"] = {key: args.out}
    return load_run_config(args.config, overrides)


def echo(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_synth(cfg: RunConfig) -> Dict[str, Any]:
    from omnidesk.synth_eval import write_dataset

    summary = write_dataset(Path(cfg.paths.data_dir), cfg.synth, cfg.eval.num_clips, cfg.seed)
    logger.info(
        f"✅ Synthesized {summary['clips']} training clips: "
        f"audio-eligible {summary['audio_eligible']:.3f}, pose-eligible {summary['pose_eligible']:.3f}"
    )
    return {"data_dir": cfg.paths.data_dir, **summary}


def cmd_train(cfg: RunConfig, resume: Optional[str]) -> Dict[str, Any]:
    from omnidesk.training import create_train_state, load_training_data, resume_train_state, run_stages

    data, cfg = load_training_data(cfg)
    if resume:
        state = resume_train_state(Path(resume), cfg)
        cfg = cfg.model_copy(update={"codec": state.model.codec})
    else:
        state = create_train_state(cfg, data.store.extractor.feature_dim)
    logger.info(f"Training run {cfg.config_hash()[:12]} into {cfg.paths.out_dir}")
    state, stages = run_stages(state, cfg, data, Path(cfg.paths.out_dir))
    return {"out_dir": cfg.paths.out_dir, "step": state.step, "stages": stages}


def _load_model(cfg: RunConfig, checkpoint: str):
    from omnidesk.checkpoint import load_checkpoint, restore_model

    return restore_model(load_checkpoint(Path(checkpoint)), cfg.model_hash())


def cmd_generate(cfg: RunConfig, checkpoint: str, request: str, dump_latents: bool) -> Dict[str, Any]:
    from pydantic import ValidationError

    from omnidesk.condition_encoders import Vocabulary
    from omnidesk.inference import DrivingRequest, generate, load_driving_inputs, resolve_activation, write_video_output

    model = _load_model(cfg, checkpoint)
    request_path = Path(request)
    try:
        req = DrivingRequest.model_validate_json(request_path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"request file not found: {request}")
    except ValidationError as e:
        raise ConfigError("invalid request file", problems=[f"{'.'.join(map(str, p['loc']))}: {p['msg']}" for p in e.errors()])

    inputs = load_driving_inputs(req, request_path.parent)
    mask = resolve_activation(req, inputs)
    echo({"conditions": {"text": mask.text, "audio": mask.audio, "pose": mask.pose, "reference": mask.reference}})

    vocab = Vocabulary.load(Path(cfg.paths.data_dir) / "vocab.json")
    result = generate(model, req, inputs, vocab, progress=True)
    logger.info(f"Generated {len(result.plan.segments)} segment(s)")
    return write_video_output(Path(cfg.paths.out_dir), result, req, cfg.config_hash(), dump_latents)


def cmd_evaluate(cfg: RunConfig, checkpoint: str, manifest: str, null_audio: bool) -> Dict[str, Any]:
    from omnidesk.synth_eval import evaluate_model
    from omnidesk.training import load_training_data

    model = _load_model(cfg, checkpoint)
    cfg = cfg.model_copy(update={"codec": model.codec})
    data, cfg = load_training_data(cfg, manifest, limit=cfg.eval.num_clips)
    clips = [data.store.clip(record) for record in data.records]
    report = evaluate_model(
        model, clips, data.vocab, cfg.eval, Path(cfg.paths.out_dir), seed=cfg.seed, use_audio=not null_audio
    )
    return report.model_dump()


def cmd_ablate(cfg: RunConfig, jobs: int) -> Dict[str, Any]:
    from experiment_graph import run_ablation

    table = run_ablation(cfg, Path(cfg.paths.out_dir), jobs)
    return {"out_dir": cfg.paths.out_dir, "rows": len(table)}


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = resolve_config(args)
    apply_thread_limit()
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.resume)
    if args.command == "generate":
        return cmd_generate(cfg, args.checkpoint, args.request, args.dump_latents)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.checkpoint, args.manifest, args.null_audio)
    return cmd_ablate(cfg, args.jobs)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point. Returns the process exit code (0 ok, 2 config error, 3 runtime error)."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        echo({"command": args.command, "result": dispatch(args)})
        return 0
    except OmniError as e:
        error_id = f"ERR-{datetime.now().strftime('%Y%m%d%H%M%S')}"
        logger.error(f"Error {error_id} in {args.command}: {e.message}")
        logger.debug(traceback.format_exc())
        print(json.dumps(e.to_record(error_id)), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        error_id = f"ERR-{datetime.now().strftime('%Y%m%d%H%M%S')}"
        logger.error(f"Error {error_id} in {args.command}: {str(e)}")
        logger.debug(traceback.format_exc())
        print(json.dumps({"error": "RUNTIME_ERROR", "message": str(e), "ref": error_id}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
