"""Command-line front end: scriptline <command> --config file [--key value].

Commands cover the whole pipeline on disk:

  synth      render a synthetic corpus (images + manifest + charset)
  train-sae  extract descriptors from the training images, train the codebook
  extract    quantize descriptors and write per-image BOF1 feature files
  train-hmm  flat start, Baum-Welch epochs and mixture-splitting schedule
  decode     open-vocabulary Viterbi over the test features
  evaluate   score hypotheses against the reference transcriptions
  ablate     re-run the in-memory pipeline over a parameter grid, emit CSV

Every value in the config file can be overridden on the command line
with --key value; --jobs N caps worker processes and never changes any
output byte. Exit codes: 0 ok, 2 config error, 3 data error, 4 I/O.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bof, corpus, dsift, hmm, imaging, sae, scoring
from .config import PipelineConfig, build_config, parse_config_file, parse_sweep
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DECODE_FAILURE = "<decode-failure>"

COMMANDS = ("synth", "train-sae", "extract", "train-hmm", "decode", "evaluate", "ablate")

USAGE = """\
usage: scriptline {synth|train-sae|extract|train-hmm|decode|evaluate|ablate}
                  [--config FILE] [--key value ...]

Any config key may be overridden with --key value. See README.md for
the full key reference.
"""


def _atomic_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_save(path, saver) -> None:
    """Run `saver(tmp_path)` then move the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    saver(tmp)
    os.replace(tmp, path)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not str(path):
        raise ConfigError(f"{what} is not configured")
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _dsift_config(cfg: PipelineConfig) -> dsift.DsiftConfig:
    return dsift.DsiftConfig(
        patch_size=cfg.patch,
        stride=cfg.stride,
        spatial_bins=cfg.spatial_bins,
        orientation_bins=cfg.orientation_bins,
    )


def _charset(cfg: PipelineConfig):
    return corpus.load_charset(_require_file(cfg.charset, "charset file"))


def _manifest(cfg: PipelineConfig, which: str, charset=None) -> corpus.CorpusManifest:
    path = _require_file(getattr(cfg, which), which.replace("_", " "))
    return corpus.load_manifest(path, charset=charset)


def _feature_name(rel: str) -> str:
    return rel.replace("/", "_").replace("\\", "_").rsplit(".", 1)[0] + ".bof"


# ---------------------------------------------------------------------------
# worker-pool jobs (module level so they pickle)

_STATE: dict = {}


def _init_state(**kwargs) -> None:
    _STATE.clear()
    _STATE.update(kwargs)


def _pool_init(kwargs) -> None:
    _init_state(**kwargs)


def _grid_for_image(path, cfg: PipelineConfig) -> dsift.DescriptorGrid:
    img = imaging.load_image(path)
    img = imaging.normalize_height(img, cfg.height)
    return dsift.extract_dense(img, _dsift_config(cfg))


def _job_descriptor_sample(task):
    """Per-image descriptor subsample for the codebook training pool."""
    path, index = task
    cfg = _STATE["cfg"]
    grid = _grid_for_image(path, cfg)
    cap = _STATE["per_image_cap"]
    desc = grid.descriptors
    if len(desc) > cap:
        rng = np.random.default_rng((cfg.seed, index))
        desc = desc[np.sort(rng.choice(len(desc), size=cap, replace=False))]
    return desc


def _job_frames(task):
    path, _ = task
    cfg = _STATE["cfg"]
    grid = _grid_for_image(path, cfg)
    seq = bof.frame_sequence(grid, _STATE["codebook"], cfg.window, cfg.shift, cfg.quantize)
    if cfg.normalize_hist:
        seq = bof.l1_normalize(seq)
    return seq.frames, grid if cfg.dump_descriptors else None


def _job_decode(frames):
    result = hmm.viterbi_decode(_STATE["network"], frames)
    return result.labels


def _map_jobs(fn, tasks, jobs: int, state: dict):
    """Order-preserving map, serial or across a process pool."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        _init_state(**state)
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs, initializer=_pool_init, initargs=(state,)) as pool:
        return list(pool.map(fn, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# pipeline pieces shared by the commands and by ablate

def _descriptor_pool(cfg: PipelineConfig, manifest: corpus.CorpusManifest) -> np.ndarray:
    tasks = [(str(manifest.image_path(rel)), i) for i, (rel, _) in enumerate(manifest.entries)]
    if not tasks:
        raise DataError("training manifest has no entries")
    per_image_cap = max(64, 2 * cfg.sae_max_samples // len(tasks))
    samples = _map_jobs(
        _job_descriptor_sample, tasks, cfg.jobs, {"cfg": cfg, "per_image_cap": per_image_cap}
    )
    pool = np.vstack([s for s in samples if len(s)])
    if len(pool) == 0:
        raise DataError("no descriptors could be extracted from the training images")
    if len(pool) > cfg.sae_max_samples:
        rng = np.random.default_rng(cfg.seed + 1)
        pool = pool[np.sort(rng.choice(len(pool), size=cfg.sae_max_samples, replace=False))]
    return pool


def _train_codebook(cfg: PipelineConfig, pool: np.ndarray):
    if cfg.codebook == "kmeans":
        return bof.kmeans_fit(pool, cfg.hidden_size, seed=cfg.seed)
    params = sae.train(pool, _sae_train_config(cfg))
    return bof.SaeCodebook(params)


def _sae_train_config(cfg: PipelineConfig) -> sae.SAETrainConfig:
    return sae.SAETrainConfig(
        hidden_size=cfg.hidden_size,
        l2_weight=cfg.l2_weight,
        sparsity_weight=cfg.sparsity_weight,
        sparsity_target=cfg.sparsity_target,
        epochs=cfg.sae_epochs,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        momentum=cfg.momentum,
        rng_seed=cfg.seed,
    )


def _frames_for_manifest(cfg: PipelineConfig, manifest: corpus.CorpusManifest, codebook):
    tasks = [(str(manifest.image_path(rel)), i) for i, (rel, _) in enumerate(manifest.entries)]
    out = _map_jobs(_job_frames, tasks, cfg.jobs, {"cfg": cfg, "codebook": codebook})
    return [frames for frames, _ in out], [grid for _, grid in out]


def _train_models(cfg: PipelineConfig, frames_list, texts, charset):
    floor = hmm.variance_floor(frames_list, cfg.var_floor_scale)
    models = hmm.flat_start(frames_list, charset, cfg.n_states, var_floor=floor)
    pairs = list(zip(frames_list, texts))
    mixtures = 1
    while True:
        for epoch in range(cfg.bw_epochs):
            models, ll = hmm.baum_welch_epoch(models, pairs, charset, floor, jobs=cfg.jobs)
            log.info("train-hmm: %d mixture(s), epoch %d/%d, log-likelihood %.3f",
                     mixtures, epoch + 1, cfg.bw_epochs, ll)
        if mixtures >= cfg.target_mixtures:
            return models
        models = hmm.split_mixtures(models)
        mixtures *= 2


def _decode_frames(cfg: PipelineConfig, models, frames_list):
    network = hmm.build_ergodic_network(models, cfg.insertion_penalty)
    return _map_jobs(_job_decode, frames_list, cfg.jobs, {"network": network})


def run_experiment(cfg: PipelineConfig) -> scoring.EvalReport:
    """Full in-memory pipeline on the configured corpora; character report."""
    charset = _charset(cfg)
    train = _manifest(cfg, "train_manifest", charset)
    test = _manifest(cfg, "test_manifest", charset)
    pool = _descriptor_pool(cfg, train)
    codebook = _train_codebook(cfg, pool)
    train_frames, _ = _frames_for_manifest(cfg, train, codebook)
    test_frames, _ = _frames_for_manifest(cfg, test, codebook)
    models = _train_models(cfg, train_frames, [t for _, t in train.entries], charset)
    hyps = _decode_frames(cfg, models, test_frames)
    pairs = [(text, h if h is not None else "") for (_, text), h in zip(test.entries, hyps)]
    return scoring.score_corpus(pairs, "character")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: PipelineConfig) -> None:
    noise = corpus.NoiseConfig(
        jitter=cfg.jitter,
        salt_pepper=cfg.salt_pepper,
        scale_range=(cfg.scale_min, cfg.scale_max),
    )
    manifest = corpus.synth_generate(
        corpus.builtin_alphabet(),
        cfg.corpus_dir,
        cfg.n_lines,
        length_range=(cfg.min_len, cfg.max_len),
        noise=noise,
        seed=cfg.seed,
        spacing_range=(cfg.spacing_min, cfg.spacing_max),
        space_rate=cfg.space_rate,
        margin=cfg.margin,
    )
    log.info("synth: wrote %d lines under %s", len(manifest), cfg.corpus_dir)


def cmd_train_sae(cfg: PipelineConfig) -> None:
    if cfg.codebook != "sae":
        raise ConfigError("train-sae trains the sae codebook; the k-means baseline "
                          "is fitted inside 'ablate' (codebook=kmeans)")
    charset = _charset(cfg) if cfg.charset else None
    manifest = _manifest(cfg, "train_manifest", charset)
    pool = _descriptor_pool(cfg, manifest)
    params = sae.train(pool, _sae_train_config(cfg))
    _atomic_save(cfg.sae_model, lambda tmp: sae.save_params(params, tmp))
    log.info("train-sae: saved %s (K=%d, L=%d)", cfg.sae_model, params.hidden_size, params.input_size)


def cmd_extract(cfg: PipelineConfig) -> None:
    params = sae.load_params(_require_file(cfg.sae_model, "sae model"))
    codebook = bof.SaeCodebook(params)
    for which, split in (("train_manifest", "train"), ("test_manifest", "test")):
        if not getattr(cfg, which):
            continue
        manifest = _manifest(cfg, which)
        out_dir = Path(cfg.features_dir) / split
        out_dir.mkdir(parents=True, exist_ok=True)
        frames_list, grids = _frames_for_manifest(cfg, manifest, codebook)
        for (rel, _), frames, grid in zip(manifest.entries, frames_list, grids):
            _atomic_save(out_dir / _feature_name(rel), lambda tmp, f=frames: bof.save_frames(f, tmp))
            if cfg.dump_descriptors and grid is not None:
                dsg = out_dir / (_feature_name(rel)[: -len(".bof")] + ".dsg")
                _atomic_save(dsg, lambda tmp, g=grid: dsift.save_descriptor_grid(g, tmp))
        log.info("extract: %s -> %d feature files in %s", which, len(frames_list), out_dir)


def _load_split_frames(cfg: PipelineConfig, manifest: corpus.CorpusManifest, split: str):
    out = []
    for rel, _ in manifest.entries:
        path = Path(cfg.features_dir) / split / _feature_name(rel)
        out.append(bof.load_frames(_require_file(path, "feature file")))
    return out


def cmd_train_hmm(cfg: PipelineConfig) -> None:
    charset = _charset(cfg)
    manifest = _manifest(cfg, "train_manifest", charset)
    frames_list = _load_split_frames(cfg, manifest, "train")
    models = _train_models(cfg, frames_list, [t for _, t in manifest.entries], charset)
    _atomic_save(cfg.hmm_model, lambda tmp: hmm.save_models(models, tmp))
    if cfg.dump_text:
        _atomic_bytes(cfg.hmm_model + ".txt", hmm.dump_models_text(models).encode("utf-8"))
    log.info("train-hmm: saved %s (%d models)", cfg.hmm_model, len(models))


def cmd_decode(cfg: PipelineConfig) -> None:
    models = hmm.load_models(_require_file(cfg.hmm_model, "hmm model"))
    manifest = _manifest(cfg, "test_manifest")
    frames_list = _load_split_frames(cfg, manifest, "test")
    hyps = _decode_frames(cfg, models, frames_list)
    lines = []
    failures = 0
    for (rel, _), hyp in zip(manifest.entries, hyps):
        if hyp is None:
            failures += 1
            hyp = DECODE_FAILURE
        lines.append(f"{rel}\t{hyp}\n")
    _atomic_bytes(cfg.hypotheses, "".join(lines).encode("utf-8"))
    log.info("decode: wrote %s (%d lines, %d failures)", cfg.hypotheses, len(lines), failures)


def _read_hypotheses(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected '<image>\\t<hypothesis>'")
            rel, text = line.split("\t", 1)
            hyps[rel] = text
    return hyps


def cmd_evaluate(cfg: PipelineConfig) -> None:
    manifest = _manifest(cfg, "test_manifest")
    hyps = _read_hypotheses(_require_file(cfg.hypotheses, "hypotheses file"))
    pairs = []
    failures = 0
    for rel, text in manifest.entries:
        if rel not in hyps:
            raise DataError(f"no hypothesis for {rel!r}")
        hyp = hyps[rel]
        if hyp == DECODE_FAILURE:
            failures += 1
            hyp = ""
        pairs.append((text, hyp))
    char_report = scoring.score_corpus(pairs, "character")
    word_report = scoring.score_corpus(pairs, "word")
    text_out = (scoring.format_report(char_report) + scoring.format_report(word_report)
                + f"decode failures: {failures}\n")
    _atomic_bytes(cfg.report_txt, text_out.encode("utf-8"))
    _atomic_save(cfg.report_json, lambda tmp: scoring.save_report_json([char_report, word_report], tmp))
    sys.stdout.write(text_out)


def cmd_ablate(cfg: PipelineConfig) -> None:
    settings = parse_sweep(cfg.sweep)
    rows = []
    base = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    for overrides in settings:
        merged = build_config(None, overrides={**{k: v for k, v in base.items()}, **overrides})
        label = ",".join(f"{k}={v}" for k, v in overrides.items())
        log.info("ablate: running %s", label)
        report = run_experiment(merged)
        rows.append((label, 100.0 * report.accuracy, 100.0 * report.lrr))
    def _write_csv(tmp):
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "crr", "lrr"])
            for label, crr, lrr in rows:
                writer.writerow([label, f"{crr:.4f}", f"{lrr:.4f}"])
    _atomic_save(cfg.ablate_csv, _write_csv)
    log.info("ablate: wrote %s (%d rows)", cfg.ablate_csv, len(rows))


# ---------------------------------------------------------------------------

_DISPATCH = {
    "synth": cmd_synth,
    "train-sae": cmd_train_sae,
    "extract": cmd_extract,
    "train-hmm": cmd_train_hmm,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _parse_argv(argv):
    if not argv:
        raise ConfigError("missing command")
    command = argv[0]
    if command in ("-h", "--help", "help"):
        return None, None, None
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    config_path = None
    overrides = {}
    i = 1
    while i < len(argv):
        token = argv[i]
        if not token.startswith("--"):
            raise ConfigError(f"expected --key value, got {token!r}")
        if i + 1 >= len(argv):
            raise ConfigError(f"missing value for {token!r}")
        key, value = token[2:], argv[i + 1]
        if key == "config":
            config_path = value
        else:
            overrides[key.replace("-", "_")] = value
        i += 2
    return command, config_path, overrides


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        command, config_path, overrides = _parse_argv(args)
        if command is None:
            sys.stdout.write(USAGE)
            return 0
        file_values = parse_config_file(config_path) if config_path else {}
        cfg = build_config(file_values, overrides)
        _DISPATCH[command](cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
