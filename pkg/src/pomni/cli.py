"""``pomni`` command-line driver.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config/spec/arguments
or unknown modality, 3 missing upstream checkpoint, 4 non-finite loss or
gradient, 5 unreadable or inconsistent data, 6 corrupt or mismatched
checkpoint, 7 modality not available in the trained model.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import datagen
from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_state, save_checkpoint
from .data import PatchDataset
from .encoder import EncoderConfig, EncoderConfigError
from .finetune import FinetuneConfig, FinetuneModel, LossWeights, SubsetError, evaluate, finetune_run
from .pretrain import MaskedModel, PretrainConfig, evaluate_pretrain, pretrain_run
from .sigproc import MODALITIES, SPECS, SignalParameterError
from .tokenizer import Tokenizer, TokenizerConfig, evaluate_tokenizer, train_tokenizer
from .training import NonFiniteLoss, OptimConfig, make_optimizer, optimizer_tensors, restore_optimizer

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_NONFINITE = 4
EXIT_DATA = 5
EXIT_CHECKPOINT = 6
EXIT_SUBSET = 7

CHECKPOINTS = {"tokenizer": "tokenizer.pock", "pretrain": "pretrain.pock", "finetune": "finetune.pock"}
BEST = "finetune_best.pock"


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


class _Stop(Exception):
    """Raised after the requested number of epochs in this invocation."""


# ---------------------------------------------------------------------------
# config -> component configs


def encoder_configs(cfg: cfgmod.RunConfig) -> dict[str, EncoderConfig]:
    out = {}
    for m in cfg.data.modalities:
        hidden = cfg.model.eeg_hidden if m == "eeg" else cfg.model.hidden
        out[m] = EncoderConfig(
            m, SPECS[m].patch, hidden=hidden, layers=cfg.model.layers, heads=cfg.model.heads,
            mlp=cfg.model.mlp_ratio * hidden,
        )
    return out


def tokenizer_config(cfg: cfgmod.RunConfig) -> TokenizerConfig:
    f = cfg.flags
    return TokenizerConfig(
        encoder_configs(cfg),
        codebook_size=cfg.model.codebook_size,
        code_dim=cfg.model.code_dim,
        decoder_layers=cfg.model.decoder_layers,
        alpha1=cfg.loss.alpha1,
        alpha2=0.0 if f.no_disentangle else cfg.loss.alpha2,
        cross_modal=not f.no_cross_modal,
        disentangle=not f.no_disentangle,
        shared_codebook=not f.no_shared_codebook,
    )


def pretrain_config(cfg: cfgmod.RunConfig, tok: TokenizerConfig) -> PretrainConfig:
    return PretrainConfig(
        encoder_configs(cfg),
        codebook_size=tok.codebook_size,
        mask_ratios={m: getattr(cfg.mask, m) for m in MODALITIES},
        shared_codebook=tok.shared_codebook,
        warm_start=cfg.flags.warm_start_encoders,
    )


def finetune_config(cfg: cfgmod.RunConfig) -> FinetuneConfig:
    f = cfg.flags
    return FinetuneConfig(
        encoder_configs(cfg),
        task=cfg.task.kind,
        outputs=cfg.task.outputs,
        length=cfg.model.hrm_length,
        width=cfg.model.hrm_width,
        heads=cfg.model.fuser_heads,
        mlp=cfg.model.fuser_mlp,
        prototypes=cfg.model.prototypes,
        experts=cfg.model.experts if f.moe_fuser else 0,
        weights=LossWeights(
            main=cfg.loss.gamma_main,
            align=cfg.loss.gamma_align,
            spec={m: getattr(cfg.loss, f"gamma_{m}") for m in MODALITIES},
        ),
        label_smoothing=cfg.loss.label_smoothing,
        freeze_encoders=f.freeze_encoders,
        prototype_align=not f.no_prototype_align,
        spec_loss=not f.no_spec_loss,
    )


def optim_config(cfg: cfgmod.RunConfig) -> OptimConfig:
    o = cfg.optim
    return OptimConfig(
        o.peak_lr, o.min_lr, o.warmup_epochs, o.epochs, o.weight_decay, (o.beta1, o.beta2), o.batch_size, o.grad_clip
    )


# ---------------------------------------------------------------------------
# logging, data and checkpoint helpers


class RunLog:
    """Append-only text log plus a tab-separated mirror (epoch, split, name, value)."""

    def __init__(self, out: Path, stage: str):
        self.text = out / f"{stage}.log"
        self.tsv = out / f"{stage}.tsv"
        if not self.tsv.exists():
            self.tsv.write_text("epoch\tsplit\tname\tvalue\n")

    def write(self, epoch: int, split: str, values: dict[str, float]) -> None:
        body = " ".join(f"{k}={v:.6g}" for k, v in values.items())
        line = f"epoch={epoch} split={split} {body}"
        with open(self.text, "a") as fh:
            fh.write(line + "\n")
        with open(self.tsv, "a") as fh:
            for k, v in values.items():
                fh.write(f"{epoch}\t{split}\t{k}\t{float(v)!r}\n")
        print(line, flush=True)


def load_split(cfg: cfgmod.RunConfig, split: str, required: bool = True) -> PatchDataset | None:
    try:
        recs = datagen.load_recordings(cfg.data.manifest, split)
        if not recs:
            if required:
                raise CliError(EXIT_DATA, f"{cfg.data.manifest}: no {split} recordings")
            return None
        return PatchDataset.from_recordings(recs, cfg.data.modalities)
    except (OSError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(EXIT_DATA, f"{cfg.data.manifest}: {exc}") from None


def resolve_outputs(cfg: cfgmod.RunConfig, train: PatchDataset) -> None:
    labels = train.labels
    if labels is None:
        raise CliError(EXIT_DATA, "fine-tuning needs labelled recordings")
    regression = labels.ndim == 2
    if regression != (cfg.task.kind == "regression"):
        raise CliError(EXIT_DATA, f"[task] kind = {cfg.task.kind} does not match the labels in the manifest")
    inferred = labels.shape[1] if regression else (1 if cfg.task.kind == "binary" else int(labels.max()) + 1)
    if cfg.task.kind == "binary" and labels.max() > 1:
        raise CliError(EXIT_DATA, "binary task needs labels in {0, 1}")
    if cfg.task.outputs == 0:
        cfg.task.outputs = inferred if cfg.task.kind != "binary" else 2
    elif cfg.task.kind == "multiclass" and cfg.task.outputs < inferred:
        raise CliError(EXIT_CONFIG, f"[task] outputs = {cfg.task.outputs} but labels reach {inferred - 1}")


def require_checkpoint(path: Path, what: str) -> Checkpoint:
    if not path.exists():
        raise CliError(EXIT_UPSTREAM, f"missing {what} checkpoint: {path}")
    return load_checkpoint(path)


def stage_checkpoint(model, opt: nx.OptimizerState, epoch: int, cfg: cfgmod.RunConfig, extra=None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(optimizer_tensors(opt))
    tensors["meta.epoch"] = torch.tensor([float(epoch)])
    tensors.update(extra or {})
    return Checkpoint(tensors, cfg.to_text())


def resume_state(path: Path, model, optim: OptimConfig, steps: int):
    ck = require_checkpoint(path, "resume")
    load_state(model, ck.subset("model."))
    opt = make_optimizer(optim, steps)
    restore_optimizer(opt, ck.tensors)
    return ck, opt, int(ck.tensors["meta.epoch"].item())


def _snapshot_config(ck: Checkpoint, stage: str, what: str) -> cfgmod.RunConfig:
    try:
        return cfgmod.loads(ck.config, stage, f"{what} snapshot")
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from None


def _epoch_hook(stop_after: int | None, start: int):
    def check(epoch: int):
        if stop_after is not None and epoch + 1 - start >= stop_after:
            raise _Stop()

    return check


# ---------------------------------------------------------------------------
# stages


def run_tokenizer(cfg: cfgmod.RunConfig, out: Path, resume: bool, stop_after: int | None) -> None:
    train = load_split(cfg, "train")
    valid = load_split(cfg, "valid", required=False)
    streams = nx.Streams(cfg.run.seed)
    model = Tokenizer(tokenizer_config(cfg)).initialize(streams)
    optim = optim_config(cfg)
    steps = train.steps_per_epoch(optim.batch_size)
    path = out / CHECKPOINTS["tokenizer"]
    if resume:
        _, opt, start = resume_state(path, model, optim, steps)
    else:
        model.fit_output_bias(train)
        opt, start = make_optimizer(optim, steps), 0
    log = RunLog(out, "tokenizer")
    stop = _epoch_hook(stop_after, start)

    def on_epoch(rec):
        log.write(rec.epoch, "train", {"loss": rec.loss, **rec.terms, **rec.metrics})
        if valid is not None:
            log.write(rec.epoch, "valid", evaluate_tokenizer(model, valid))
            model.train()
        save_checkpoint(path, stage_checkpoint(model, opt, rec.epoch + 1, cfg))
        stop(rec.epoch)

    train_tokenizer(model, train, optim, streams, opt, start, on_epoch)


def load_tokenizer(path: Path) -> tuple[Tokenizer, cfgmod.RunConfig]:
    ck = require_checkpoint(path, "tokenizer")
    tcfg = _snapshot_config(ck, "tokenizer", "tokenizer")
    tok = Tokenizer(tokenizer_config(tcfg))
    load_state(tok, ck.subset("model."), "tokenizer")
    return tok, tcfg


def run_pretrain(cfg: cfgmod.RunConfig, out: Path, resume: bool, stop_after: int | None) -> None:
    tok_path = Path(cfg.paths.tokenizer) if cfg.paths.tokenizer else out / CHECKPOINTS["tokenizer"]
    tok, tcfg = load_tokenizer(tok_path)
    absent = [m for m in cfg.data.modalities if m not in tcfg.data.modalities]
    if absent:
        raise CliError(EXIT_CONFIG, f"modalities {absent} were not part of the tokenizer")
    train = load_split(cfg, "train")
    valid = load_split(cfg, "valid", required=False)
    streams = nx.Streams(cfg.run.seed)
    model = MaskedModel(pretrain_config(cfg, tok.cfg))
    try:
        model.initialize(streams, tok)
    except RuntimeError as exc:
        raise CliError(EXIT_CHECKPOINT, f"warm start: {exc}") from None
    optim = optim_config(cfg)
    steps = train.steps_per_epoch(optim.batch_size)
    path = out / CHECKPOINTS["pretrain"]
    if resume:
        _, opt, start = resume_state(path, model, optim, steps)
    else:
        opt, start = make_optimizer(optim, steps), 0
    log = RunLog(out, "pretrain")
    stop = _epoch_hook(stop_after, start)

    def on_epoch(rec):
        log.write(rec.epoch, "train", {"loss": rec.loss, **rec.terms})
        if valid is not None:
            log.write(rec.epoch, "valid", evaluate_pretrain(model, tok, valid, streams))
        save_checkpoint(path, stage_checkpoint(model, opt, rec.epoch + 1, cfg))
        stop(rec.epoch)

    pretrain_run(model, tok, train, optim, streams, opt, start, on_epoch)


def run_finetune(cfg: cfgmod.RunConfig, out: Path, resume: bool, stop_after: int | None) -> None:
    pre_path = Path(cfg.paths.pretrain) if cfg.paths.pretrain else out / CHECKPOINTS["pretrain"]
    pre = require_checkpoint(pre_path, "pretrain")
    train = load_split(cfg, "train")
    valid = load_split(cfg, "valid")
    resolve_outputs(cfg, train)
    streams = nx.Streams(cfg.run.seed)
    model = FinetuneModel(finetune_config(cfg))
    model.initialize(streams)
    for m, enc in model.encoders.items():
        state = pre.subset(f"model.encoders.{m}.")
        if not state:
            raise CliError(EXIT_CONFIG, f"modality {m!r} has no pretrained encoder in {pre_path}")
        load_state(enc, state, f"encoder {m}")
    optim = optim_config(cfg)
    steps = train.steps_per_epoch(optim.batch_size)
    path, best_path = out / CHECKPOINTS["finetune"], out / BEST
    best = None
    if resume:
        _, opt, start = resume_state(path, model, optim, steps)
        if best_path.exists():
            bk = load_checkpoint(best_path)
            best = {
                "score": float(bk.tensors["meta.best_score"].item()),
                "epoch": int(bk.tensors["meta.epoch"].item()),
                "state": bk.subset("model."),
            }
    else:
        opt, start = make_optimizer(optim, steps), 0
    best = best or {"score": -np.inf, "state": None, "epoch": -1}
    log = RunLog(out, "finetune")
    stop = _epoch_hook(stop_after, start)

    def on_epoch(rec):
        valid_metrics = {k: v for k, v in rec.metrics.items()}
        log.write(rec.epoch, "train", {"loss": rec.loss, **rec.terms})
        log.write(rec.epoch, "valid", valid_metrics)
        if best["epoch"] == rec.epoch:
            tensors = {f"model.{k}": v for k, v in best["state"].items()}
            tensors["meta.epoch"] = torch.tensor([float(rec.epoch)])
            tensors["meta.best_score"] = torch.tensor([float(best["score"])])
            save_checkpoint(best_path, Checkpoint(tensors, cfg.to_text()))
        save_checkpoint(path, stage_checkpoint(model, opt, rec.epoch + 1, cfg))
        stop(rec.epoch)

    finetune_run(model, train, valid, optim, streams, opt, start, on_epoch, best=best)
    print(f"best epoch {best['epoch']} valid monitor {best['score']:.6g}")


# ---------------------------------------------------------------------------
# evaluation


def parse_modalities(text: str) -> list[str]:
    mods = [t.strip().lower() for t in text.split(",") if t.strip()]
    if not mods:
        raise CliError(EXIT_CONFIG, "--modalities needs at least one modality")
    for m in mods:
        if m not in MODALITIES:
            raise CliError(EXIT_CONFIG, f"unknown modality {m!r} (expected one of {', '.join(MODALITIES)})")
    if len(set(mods)) != len(mods):
        raise CliError(EXIT_CONFIG, "--modalities lists a modality twice")
    return mods


def run_evaluate(args, out: Path | None) -> None:
    subsets = None if args.all_subsets else [parse_modalities(args.modalities)] if args.modalities else None
    ck_path = Path(args.checkpoint) if args.checkpoint else (out or Path(".")) / BEST
    ck = require_checkpoint(ck_path, "fine-tuned")
    cfg = _snapshot_config(ck, "finetune", "fine-tuned")
    if args.data:
        cfg.data.manifest = args.data
    model = FinetuneModel(finetune_config(cfg))
    load_state(model, ck.subset("model."), "fine-tuned model")
    trained = list(cfg.data.modalities)
    if args.all_subsets:
        subsets = [list(c) for k in range(1, len(trained) + 1) for c in itertools.combinations(trained, k)]
    elif subsets is None:
        subsets = [trained]
    for s in subsets:
        missing = [m for m in s if m not in trained]
        if missing:
            raise CliError(EXIT_SUBSET, f"modalities {missing} are not in the trained model ({', '.join(trained)})")
    data = load_split(cfg, args.split)
    rows = []
    for s in subsets:
        rep = evaluate(model, data, s)
        rows.append("+".join(s) + "\t" + rep.row())
    table = "\n".join(["subset\t" + rep.header(), *rows]) + "\n"
    sys.stdout.write(table)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluate.tsv").write_text(table)


# ---------------------------------------------------------------------------
# gen-data


def run_gen_data(args, seed: int | None, out: Path) -> None:
    if args.spec:
        try:
            text = Path(args.spec).read_text()
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read spec: {exc}") from None
        spec = cfgmod.loads_gen_spec(text, args.spec)
    else:
        spec = datagen.GenSpec()
    if seed is not None:
        spec.seed = seed
    recs = datagen.generate(spec)
    manifest = datagen.write_dataset(recs, out)
    for split in datagen.SPLITS:
        print(f"{split}\t{sum(r.split == split for r in recs)}")
    print(f"total\t{len(recs)}")
    print(f"manifest\t{manifest}")


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    p.add_argument("--config", help="run configuration file ([section] key = value)", **d)
    p.add_argument("--seed", type=int, help="seed for every random stream (overrides [run] seed)", **d)
    p.add_argument("--out", help="output directory", **d)
    p.add_argument("--threads", type=int, help="torch CPU threads (falls back to POMNI_THREADS)", **d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pomni", description="Multimodal physiological tokenizer, pretraining and fine-tuning.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    _global_flags(p, suppress=True)
    p.add_argument("--spec", help="generator spec file")

    for name, helptext in (
        ("train-tokenizer", "stage 1: train the tokenizer"),
        ("pretrain", "stage 2: masked pretraining against the tokenizer"),
        ("finetune", "stage 3: supervised fine-tuning"),
    ):
        p = sub.add_parser(name, help=helptext)
        _global_flags(p, suppress=True)
        p.add_argument("--data", help="manifest path (overrides [data] manifest)")
        p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint in --out")
        p.add_argument("--stop-after", type=int, help="stop after this many epochs in this invocation")
        for flag in (
            "freeze-encoders", "warm-start-encoders", "moe-fuser", "no-cross-modal", "no-disentangle",
            "no-shared-codebook", "no-prototype-align", "no-spec-loss",
        ):
            p.add_argument(f"--{flag}", action="store_true", help=f"set [flags] {flag.replace('-', '_')}")

    p = sub.add_parser("evaluate", help="score a fine-tuned model on a split")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint", help="fine-tuned checkpoint (default: <out>/finetune_best.pock)")
    p.add_argument("--data", help="manifest path (defaults to the one used for training)")
    p.add_argument("--modalities", help="comma-separated subset, e.g. eeg,eog")
    p.add_argument("--all-subsets", action="store_true", help="sweep every non-empty modality subset")
    p.add_argument("--split", default="test", choices=datagen.SPLITS)
    return parser


STAGE_OF = {"train-tokenizer": "tokenizer", "pretrain": "pretrain", "finetune": "finetune"}
RUNNERS = {"tokenizer": run_tokenizer, "pretrain": run_pretrain, "finetune": run_finetune}


def _threads(args, cfg_threads: int) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("POMNI_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"POMNI_THREADS={env!r} is not an integer") from None
    return cfg_threads


def _stage_config(args, stage: str) -> cfgmod.RunConfig:
    try:
        cfg = cfgmod.load(args.config, stage) if args.config else cfgmod.RunConfig.defaults(stage)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from None
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.manifest = args.data
    for f in fields(cfg.flags):
        if getattr(args, f.name, False):
            setattr(cfg.flags, f.name, True)
    cfg.validate()
    if not cfg.data.manifest:
        raise CliError(EXIT_CONFIG, "no data manifest: pass --data or set [data] manifest")
    return cfg


def dispatch(args) -> None:
    if args.seed is not None and not 0 <= args.seed < 2**64:
        raise CliError(EXIT_CONFIG, "--seed must be an unsigned 64-bit integer")
    if args.command == "gen-data":
        torch.set_num_threads(max(1, _threads(args, 1)))
        run_gen_data(args, args.seed, Path(args.out or "data"))
        return
    if args.command == "evaluate":
        torch.set_num_threads(max(1, _threads(args, 1)))
        run_evaluate(args, Path(args.out) if args.out else None)
        return
    stage = STAGE_OF[args.command]
    cfg = _stage_config(args, stage)
    threads = _threads(args, cfg.run.threads)
    if threads < 1:
        raise CliError(EXIT_CONFIG, "thread count must be positive")
    cfg.run.threads = threads
    if args.stop_after is not None and args.stop_after < 1:
        raise CliError(EXIT_CONFIG, "--stop-after must be positive")
    torch.set_num_threads(threads)
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        RUNNERS[stage](cfg, out, args.resume, args.stop_after)
    except _Stop:
        print("stopped early at requested epoch; resume with --resume")
    print(f"{args.command} finished in {time.perf_counter() - t0:.1f} s")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    for name in ("config", "seed", "out", "threads"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        dispatch(args)
    except CliError as exc:
        print(f"pomni: error: {exc}", file=sys.stderr)
        return exc.code
    except (cfgmod.ConfigError, EncoderConfigError) as exc:
        print(f"pomni: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, nx.NonFiniteGradient) as exc:
        print(f"pomni: numerical failure: {exc}; last checkpoint kept", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as exc:
        print(f"pomni: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except SubsetError as exc:
        print(f"pomni: {exc}", file=sys.stderr)
        return EXIT_SUBSET
    except (datagen.PsrdFormatError, SignalParameterError) as exc:
        print(f"pomni: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
