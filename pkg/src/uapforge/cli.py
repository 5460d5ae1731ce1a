"""Command-line pipeline: gen-data -> train-model -> train-uap -> evaluate / compare.

Every subcommand reads an optional INI config, prints the fully resolved
config first, and works inside one output directory::

    out_dir/corpus/manifest.tsv     gen-data
    out_dir/model.bin               train-model (+ model_log.jsonl)
    out_dir/patch_<loss>.bin        train-uap   (+ uap_<loss>_log.jsonl, uap_<loss>.state.npz)
    out_dir/report/                 evaluate
    out_dir/compare/                compare

Exit codes: 0 ok, 1 test failure, 2 config error, 3 I/O error, 4 gate failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import corpus, evalharness as ev, spkmodel, uaptrain
from ._parallel import ENV_THREADS, thread_count
from .uaptrain import AttackConfig

EXIT_OK, EXIT_TEST, EXIT_CONFIG, EXIT_IO, EXIT_GATE = 0, 1, 2, 3, 4

log = logging.getLogger("uapforge")


class ConfigError(ValueError):
    pass


# configuration -----------------------------------------------------------------------


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "uapforge-run"


@dataclass
class CorpusSection:
    n_speakers: int = 25
    utts_per_speaker: int = 30
    min_duration_s: float = 3.0
    max_duration_s: float = 20.0
    test_speakers: str = "20,21,22,23,24"
    val_per_speaker: int = 5
    long_per_test_speaker: int = 8
    target_lufs: float = -23.0
    pad_to_s: float = 20.0
    write_wavs: bool = True
    wav_dir: str = ""


@dataclass
class ModelSection:
    epochs: int = 15
    lr: float = 1e-3
    batch: int = 32
    crop_s: float = 2.0
    gate_threshold: float = 0.9


@dataclass
class EvalSection:
    enroll_count: int = 5
    eval_count: int = 20
    sweep: str = "3,5,10,15,20"
    gallery: str = "all"
    match_tolerance: float = 5.0
    override_gate: bool = False


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("run", "corpus", "model", "attack", "eval")

    @property
    def out(self) -> Path:
        return Path(self.run.out_dir)

    def dumps(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_fmt_value(v)}")
            lines.append("")
        return "\n".join(lines)

    def provenance_flags(self) -> dict:
        # out_dir is where results go, not what produced them
        d = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        d["run"].pop("out_dir")
        return d

    def sweep_lengths(self) -> list:
        try:
            lengths = [float(x) for x in self.eval.sweep.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"eval.sweep must be comma-separated seconds, got {self.eval.sweep!r}") from None
        if not lengths or any(x <= 0 for x in lengths):
            raise ConfigError("eval.sweep needs at least one positive length")
        return lengths

    def test_speaker_indices(self) -> tuple:
        try:
            return tuple(int(x) for x in self.corpus.test_speakers.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"corpus.test_speakers must be integers, got {self.corpus.test_speakers!r}") from None


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


def _section_types(obj) -> dict:
    return {f.name: f.type for f in fields(obj)}


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the INI file, then command-line overrides ``{(section, key): value}``."""
    cfg = RunConfig()
    values = {name: asdict(getattr(cfg, name)) for name in RunConfig.SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown config section [{section}]")
            types = _section_types(getattr(cfg, section))
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[section][key] = _parse_value(raw, types[key], f"{section}.{key}")
    for (section, key), value in (overrides or {}).items():
        values[section][key] = value
    try:
        return RunConfig(RunSection(**values["run"]), CorpusSection(**values["corpus"]),
                         ModelSection(**values["model"]), AttackConfig(**values["attack"]),
                         EvalSection(**values["eval"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# helpers -----------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + b"\0")
            h.update(_sha256_file(p).encode())
    return h.hexdigest()


def _manifest_path(cfg: RunConfig) -> Path:
    return cfg.out / "corpus" / "manifest.tsv"


def _load_manifest(cfg: RunConfig) -> corpus.CorpusManifest:
    path = _manifest_path(cfg)
    if not path.exists():
        raise ConfigError(f"no corpus manifest at {path}; run gen-data first")
    return corpus.CorpusManifest.load(path)


def _load_model(cfg: RunConfig) -> spkmodel.SpeakerModel:
    path = cfg.out / "model.bin"
    if not path.exists():
        raise ConfigError(f"no model checkpoint at {path}; run train-model first")
    return spkmodel.load_model(path)


def _prepare(cfg: RunConfig, manifest, splits) -> corpus.PreparedCorpus:
    return corpus.preprocess_corpus(manifest, cfg.corpus.target_lufs, cfg.corpus.pad_to_s,
                                    pad_splits=("train",), splits=splits)


@dataclass
class Gallery:
    enrollment: spkmodel.EnrollmentSet
    probes_by_speaker: dict  # held-out speaker -> clips not used for enrollment

    @property
    def probes(self) -> list:
        return [c for s in sorted(self.probes_by_speaker) for c in self.probes_by_speaker[s]]


def build_gallery(cfg: RunConfig, model, prepared: corpus.PreparedCorpus) -> Gallery:
    """Enroll held-out speakers from their first clips and, with gallery=all, every
    training speaker from its validation clips. Probes are held-out clips only."""
    n = cfg.eval.enroll_count
    test = prepared.by_speaker("test")
    if not test:
        raise ConfigError("corpus has no test speakers")
    enroll = {s: clips[:n] for s, clips in test.items()}
    if cfg.eval.gallery == "all":
        for s, clips in prepared.by_speaker("val").items():
            enroll[s] = clips[:n]
    elif cfg.eval.gallery != "test":
        raise ConfigError(f"eval.gallery must be 'all' or 'test', got {cfg.eval.gallery!r}")
    enrollment = spkmodel.build_enrollment(model, enroll, n)
    return Gallery(enrollment, {s: clips[n:] for s, clips in test.items()})


def _gate(cfg: RunConfig, model) -> float:
    acc = model.metadata.get("gate_accuracy")
    if acc is None:
        raise ConfigError("model checkpoint carries no gate accuracy; retrain with train-model")
    ev.check_gate(float(acc), cfg.model.gate_threshold, cfg.eval.override_gate)
    return float(acc)


def _write_jsonl(path: Path, records: list) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# subcommands -------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = cfg.out / "corpus"
    if not cfg.out.parent.exists():
        raise OSError(f"output directory parent {cfg.out.parent} does not exist")
    if cfg.corpus.wav_dir:
        manifest = corpus.ingest_wav_corpus(cfg.corpus.wav_dir, cfg.corpus.test_speakers.split(","),
                                            cfg.corpus.val_per_speaker)
        out.mkdir(parents=True, exist_ok=True)
        manifest = corpus.write_corpus_wavs(manifest, out)
    else:
        spec = corpus.SplitSpec(cfg.test_speaker_indices(), cfg.corpus.val_per_speaker,
                                cfg.corpus.long_per_test_speaker)
        try:
            manifest = corpus.build_synthetic_corpus(cfg.corpus.n_speakers, cfg.corpus.utts_per_speaker,
                                                     (cfg.corpus.min_duration_s, cfg.corpus.max_duration_s),
                                                     spec, cfg.run.seed)
        except corpus.CorpusError as exc:
            raise ConfigError(str(exc)) from None
        out.mkdir(parents=True, exist_ok=True)
        if cfg.corpus.write_wavs:
            manifest = corpus.write_corpus_wavs(manifest, out)
    path = manifest.save(_manifest_path(cfg))
    counts = {s: len(manifest.by_split(s)) for s in ("train", "val", "test")}
    print(f"manifest: {path}")
    print(f"speakers: {len(manifest.speakers())} clips: {len(manifest.entries)} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"test speakers: {','.join(manifest.speakers('test'))}")
    print(f"tree hash: {tree_hash(out)}")
    return EXIT_OK


def cmd_train_model(cfg: RunConfig, args) -> int:
    manifest = _load_manifest(cfg)
    prepared = _prepare(cfg, manifest, None)
    train = prepared.split("train")
    records = []

    def on_epoch(rec):
        records.append(rec)
        print(f"epoch {rec['epoch']} loss {rec['loss']:.6f}", flush=True)

    result = spkmodel.train_model(train, cfg.model.epochs, cfg.model.lr, cfg.model.batch, cfg.run.seed,
                                  cfg.model.crop_s, log_fn=on_epoch)
    model = result.model
    gallery = build_gallery(cfg, model, prepared)
    acc = spkmodel.identification_accuracy(model, gallery.enrollment, gallery.probes)
    model.metadata["gate_accuracy"] = acc
    model.metadata["gallery"] = cfg.eval.gallery
    val = prepared.split("val")
    if val:
        model.metadata["val_classifier_accuracy"] = spkmodel.classifier_accuracy(model, val)
    spkmodel.save_model(model, cfg.out / "model.bin")
    _write_jsonl(cfg.out / "model_log.jsonl", records)
    print(f"held-out identification accuracy: {acc:.4f} ({len(gallery.probes)} probes, "
          f"{len(gallery.enrollment.vectors)} enrolled)")
    print(f"model: {cfg.out / 'model.bin'}")
    return EXIT_OK


def cmd_train_uap(cfg: RunConfig, args) -> int:
    model = _load_model(cfg)
    acc = _gate(cfg, model)
    print(f"gate: accuracy {acc:.4f} >= {cfg.model.gate_threshold}")
    manifest = _load_manifest(cfg)
    prepared = _prepare(cfg, manifest, None)
    train = prepared.split("train")
    gallery = build_gallery(cfg, model, prepared)
    val_clips = gallery.probes
    if cfg.attack.val_clips:
        val_clips = val_clips[:: max(1, len(val_clips) // cfg.attack.val_clips)][: cfg.attack.val_clips]
    validation = uaptrain.ValidationSet(gallery.enrollment, val_clips)

    variant = cfg.attack.loss_variant
    state_path = cfg.out / f"uap_{variant}.state.npz"
    resume = None
    if args.resume:
        if not state_path.exists():
            raise ConfigError(f"--resume given but no checkpoint at {state_path}")
        resume = uaptrain.load_state(state_path)
        print(f"resuming from epoch {resume.epoch}")

    def on_epoch(rec):
        print(json.dumps(rec, sort_keys=True), flush=True)

    if resume is not None and AttackConfig.from_dict(resume.patch.config) != cfg.attack:
        raise ConfigError(f"{state_path} was written with a different attack config")
    patch, records = uaptrain.train_uap(model, train, cfg.attack, validation, on_epoch, state_path, resume)
    out = cfg.out / f"patch_{variant}.bin"
    uaptrain.save_patch(patch, out)
    uaptrain.export_patch_wav(patch, cfg.out / f"patch_{variant}.wav")
    _write_jsonl(cfg.out / f"uap_{variant}_log.jsonl", records)
    print(f"patch: {out} max|v| {np.max(np.abs(patch.values)):.6g}")
    return EXIT_OK


def _resolve_patch(cfg: RunConfig, arg: Optional[str], variant: str) -> Path:
    path = Path(arg) if arg else cfg.out / f"patch_{variant}.bin"
    if not path.exists():
        raise ConfigError(f"patch file {path} not found")
    return path


def _eval_setup(cfg: RunConfig):
    model = _load_model(cfg)
    _gate(cfg, model)
    manifest = _load_manifest(cfg)
    prepared = _prepare(cfg, manifest, ("val", "test") if cfg.eval.gallery == "all" else ("test",))
    return model, manifest, prepared, build_gallery(cfg, model, prepared)


def _provenance(cfg: RunConfig, model, manifest_path: Path, patches: dict) -> dict:
    prov = {"model_hash": model.fingerprint(), "manifest_hash": _sha256_file(manifest_path),
            "threads": thread_count(), "flags": cfg.provenance_flags(),
            "enrollment_normalized": True, "gallery": cfg.eval.gallery}
    if len(patches) == 1:
        prov["patch_hash"] = next(iter(patches.values())).fingerprint()
    else:
        prov["patch_hash"] = {k: p.fingerprint() for k, p in sorted(patches.items())}
    return prov


def cmd_evaluate(cfg: RunConfig, args) -> int:
    patch_path = _resolve_patch(cfg, args.patch, cfg.attack.loss_variant)
    if args.sweep:
        cfg.eval.sweep = args.sweep
    lengths = cfg.sweep_lengths()
    model, manifest, prepared, gallery = _eval_setup(cfg)
    patch = uaptrain.load_patch(patch_path)
    probes = gallery.probes
    fr = ev.fooling_rate(model, gallery.enrollment, probes, patch)
    snr_mean, snr_std = ev.snr_stats(probes, patch)
    need = int(round(max(lengths) * corpus.SAMPLE_RATE))
    pool = [c for c in probes if len(c) >= need]
    sweep = ev.length_sweep(model, gallery.enrollment, pool, patch, lengths)
    hists = ev.similarity_analysis(model, gallery.enrollment, gallery.probes_by_speaker, patch,
                                   cfg.eval.eval_count)
    row = ev.VariantRow(patch_path.stem, fr, snr_mean, snr_std, ev.audio.total_variation(patch.values))
    prov = _provenance(cfg, model, _manifest_path(cfg), {"patch": patch})
    report = ev.EvalReport(fr, snr_mean, snr_std, sweep, hists, prov, [row],
                           extra={"n_probes": len(probes), "sweep_pool": len(pool),
                                  "enrolled": len(gallery.enrollment.vectors)})
    paths = ev.emit_report(report, cfg.out / "report")
    print(f"fooling rate: {ev.fmt(fr)} %  snr: {ev.fmt(snr_mean)} +- {ev.fmt(snr_std)} dB")
    for r in sweep:
        print(f"  length {ev.fmt(r.length_s)} s: FR {ev.fmt(r.fooling_rate)} %")
    for name, h in sorted(hists.items()):
        print(f"  {name}: mean {ev.fmt(h.mean)} (n={h.n})")
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    paths = {"exp_tv": _resolve_patch(cfg, args.exp_tv, "exp_tv"), "l2": _resolve_patch(cfg, args.l2, "l2")}
    model, manifest, prepared, gallery = _eval_setup(cfg)
    patches = {k: uaptrain.load_patch(p) for k, p in paths.items()}
    result = ev.compare_variants(model, gallery.enrollment, gallery.probes,
                                 {k: p.values for k, p in patches.items()}, cfg.eval.match_tolerance)
    out = ev.write_comparison(result, cfg.out / "compare")
    for cond in ("raw", "matched"):
        for r in result[cond]:
            print(f"{cond:8s} {r.variant:7s} scale {ev.fmt(r.scale)} FR {ev.fmt(r.fooling_rate)} "
                  f"SNR {ev.fmt(r.snr_mean_db)} TV {ev.fmt(r.tv_proxy)}")
    for p in out.values():
        print(f"wrote {p}")
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_selftest

    failed = run_selftest()
    if failed:
        print(f"selftest failed: {', '.join(failed)}")
        return EXIT_TEST
    print("selftest passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "train-uap": cmd_train_uap,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--out", help="output directory (overrides run.out_dir)")
    common.add_argument("--seed", type=int, help="overrides run.seed")

    parser = argparse.ArgumentParser(prog="uapforge", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus (manifest + WAVs)")
    sub.add_parser("train-model", parents=[common], help="train the speaker model")
    p = sub.add_parser("train-uap", parents=[common], help="train a universal patch")
    p.add_argument("--loss", choices=uaptrain.LOSS_VARIANTS, help="overrides attack.loss_variant")
    p.add_argument("--resume", action="store_true", help="continue from out_dir/uap_<loss>.state.npz")
    p.add_argument("--override-gate", action="store_true", help="attack a model below the accuracy gate")
    p = sub.add_parser("evaluate", parents=[common], help="fooling rate, SNR, sweep, similarity report")
    p.add_argument("--patch", help="patch file (default out_dir/patch_<loss>.bin)")
    p.add_argument("--sweep", help="comma-separated lengths in seconds")
    p.add_argument("--override-gate", action="store_true")
    p = sub.add_parser("compare", parents=[common], help="exp_tv vs l2 at raw and matched fooling rate")
    p.add_argument("--exp-tv", dest="exp_tv", help="exp_tv patch file")
    p.add_argument("--l2", help="l2 patch file")
    p.add_argument("--override-gate", action="store_true")
    sub.add_parser("selftest", parents=[common], help="fast invariant checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.out:
        overrides[("run", "out_dir")] = args.out
    if args.seed is not None:
        overrides[("run", "seed")] = args.seed
    if getattr(args, "loss", None):
        overrides[("attack", "loss_variant")] = args.loss
    if getattr(args, "override_gate", False):
        overrides[("eval", "override_gate")] = True
    try:
        cfg = load_config(args.config, overrides)
        thread_count()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"# resolved config ({ENV_THREADS}={thread_count()})")
    print(cfg.dumps(), flush=True)
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ev.GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (OSError, corpus.CorpusError, spkmodel.CheckpointError, uaptrain.PatchFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
