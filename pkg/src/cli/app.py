"""
Command-line entry point.

Each subcommand reads the pipeline config given with ``--config``, takes its
inputs from the config paths and the work directory, and writes stamped
artifacts back into the work directory. Errors end the process with status
2 and one ``error<TAB><ErrorClass><TAB><message>`` line on stderr.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

from pydantic import ValidationError

from cli.artifacts import (
    ArtifactError,
    Workdir,
    read_artifact,
    read_input,
    write_artifact,
)
from core import __version__
from core.config import PipelineConfig, load_config
from core.errors import ConfigError, HybridAmError
from core.logging import get_logger, setup_logging
from core.settings import settings
from services.corpus import (
    FEATURE_MAGIC,
    SyntheticCorpus,
    Utterance,
    generate_synthetic_corpus,
    load_corpus,
    read_feature_dir,
    read_transcripts,
    write_feature_dir,
    write_transcripts,
)
from services.decoder import (
    DecodeError,
    Hypothesis,
    build_decode_graph,
    decode_all,
    force_align,
    read_decode_graph,
    read_hypotheses,
    tse,
    wer,
    word_times_from_hypotheses,
    write_decode_graph,
    write_hypotheses,
)
from services.graphs import (
    DenGraph,
    GraphBuildError,
    NumGraph,
    aligned_lm_sequences,
    build_den,
    build_num,
    check_den_inventory,
    chenone_segments,
    den_lm_sequences,
    read_graph,
    system_segments,
    trichar_frame_labels,
    uses_char_lm,
    write_graph,
)
from services.loss import GraphArrays
from services.token_lm import NgramLm, estimate_ngram, read_arpa, write_arpa
from services.topology import Segment, read_time_constraints, write_time_constraints
from services.trainer import (
    CHECKPOINT_VERSION,
    Checkpoint,
    StageObjective,
    TrainingError,
    compile_graphs,
    decode_checkpoint,
    encode_checkpoint,
    evaluate_utterances,
    frame_stride,
    schedule_stages,
    train,
    write_objective_log,
)
from services.units import (
    ChenoneTree,
    GaussianStats,
    Lexicon,
    UnitInventory,
    accumulate_trichar_stats,
    build_char_inventory,
    build_chenone_tree,
    build_lexicon,
    cluster_bichar,
    default_questions,
    finalize_inventory,
    train_wordpiece_vocab,
)
from services.wfst import Fst, total_weight

logger = get_logger(__name__)

Handler = Callable[[argparse.Namespace], None]


# ----------------------------------------------------------------------
# Loading helpers
# ----------------------------------------------------------------------


def _config(args: argparse.Namespace) -> PipelineConfig:
    if not args.config:
        raise ConfigError(f"'{args.command}' needs --config")
    return load_config(args.config)


def _transcripts(config: PipelineConfig) -> dict[str, tuple[str, ...]]:
    return read_transcripts(read_input(config.transcripts, "transcripts"))


def _features(config: PipelineConfig) -> dict:
    if not config.features:
        raise ArtifactError("no features path configured")
    return read_feature_dir(Path(config.features))


def _corpus(config: PipelineConfig) -> list[Utterance]:
    return load_corpus(_transcripts(config), _features(config))


def _inventory(wd: Workdir, config: PipelineConfig) -> UnitInventory:
    return UnitInventory.from_tsv(read_artifact(wd.inventory, config))


def _tree(wd: Workdir, config: PipelineConfig) -> Optional[ChenoneTree]:
    if config.unit_type != "chenone":
        return None
    return ChenoneTree.from_tsv(read_artifact(wd.tree, config))


def _alignments(config: PipelineConfig) -> dict[str, list[Segment]]:
    return read_time_constraints(read_input(config.alignments, "alignments"))


def _alignment_silence(config: PipelineConfig) -> int:
    inv = UnitInventory.from_tsv(
        read_input(config.alignment_inventory, "alignment inventory")
    )
    if inv.silence_id is None:
        raise ArtifactError("the alignment inventory has no Silence unit")
    return inv.silence_id


def _unit_segments(
    config: PipelineConfig,
    transcripts: dict[str, tuple[str, ...]],
    inv: UnitInventory,
    tree: Optional[ChenoneTree],
) -> dict[str, list[Segment]]:
    """
    Alignment segments in this system's unit ids.

    Without an alignment inventory the segments are taken as they are;
    with one they are relabelled from its units to the system's.
    """
    alignments = _alignments(config)
    if config.unit_type != "chenone" and not config.alignment_inventory:
        return alignments
    silence = _alignment_silence(config)
    converted = {}
    for utt_id in sorted(transcripts):
        if utt_id not in alignments:
            continue
        try:
            if config.unit_type == "chenone":
                assert tree is not None
                converted[utt_id] = chenone_segments(
                    alignments[utt_id], transcripts[utt_id], tree, inv, silence
                )
            else:
                converted[utt_id] = system_segments(
                    alignments[utt_id], transcripts[utt_id], inv, silence
                )
        except GraphBuildError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )
    return converted


def _numerators(wd: Workdir, config: PipelineConfig, utt_ids: Sequence[str]) -> dict:
    nums: dict[str, Fst] = {}
    for utt_id in utt_ids:
        path = wd.num(utt_id)
        if not path.is_file():
            continue
        graph = read_graph(read_artifact(path, config))
        assert isinstance(graph, NumGraph)
        nums[utt_id] = graph.fst
    return nums


def _denominator(wd: Workdir, config: PipelineConfig, inv: UnitInventory) -> DenGraph:
    graph = read_graph(read_artifact(wd.den, config))
    if not isinstance(graph, DenGraph):
        raise ArtifactError(f"{wd.den} is not a denominator graph")
    check_den_inventory(graph, inv)
    return graph


def _checkpoint(
    path: Optional[str], wd: Workdir, config: PipelineConfig, inv: UnitInventory
) -> Checkpoint:
    source = Path(path) if path else wd.checkpoint
    if not source.is_file():
        raise ArtifactError(f"checkpoint not found: {source}")
    ckpt = decode_checkpoint(source.read_bytes())
    if ckpt.config_hash != config.config_hash():
        raise ArtifactError(
            f"checkpoint was trained under config {ckpt.config_hash}, "
            f"current config is {config.config_hash()}"
        )
    if ckpt.scorer.num_units != inv.size:
        raise ArtifactError(
            f"checkpoint scores {ckpt.scorer.num_units} units, inventory has {inv.size}"
        )
    return ckpt


def _word_lm(wd: Workdir, config: PipelineConfig) -> NgramLm:
    if config.word_lm:
        return read_arpa(read_input(config.word_lm, "word LM"))
    return read_arpa(read_artifact(wd.word_lm, config))


def _questions(config: PipelineConfig, chars: Sequence[str]) -> list[frozenset[str]]:
    """One question per non-empty line: the space-separated context symbols."""
    if not config.questions:
        return default_questions(chars)
    text = read_input(config.questions, "questions")
    return [frozenset(line.split()) for line in text.splitlines() if line.strip()]


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def _train_tree(
    config: PipelineConfig, transcripts: dict[str, tuple[str, ...]]
) -> tuple[UnitInventory, ChenoneTree]:
    alignments = _alignments(config)
    silence = _alignment_silence(config)
    features = _features(config)
    stride = config.effective_stride
    stats: dict = {}
    for utt_id in sorted(transcripts):
        if utt_id not in alignments or utt_id not in features:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": "no alignment"}},
            )
            continue
        stacked = frame_stride(features[utt_id], stride)
        try:
            labels = trichar_frame_labels(
                alignments[utt_id], transcripts[utt_id], silence
            )
            found, _ = accumulate_trichar_stats(labels, stacked)
        except HybridAmError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )
            continue
        for trichar, value in found.items():
            current: Optional[GaussianStats] = stats.get(trichar)
            stats[trichar] = value if current is None else current.add(value)
    chars = sorted({c for words in transcripts.values() for w in words for c in w})
    target = config.effective_num_units
    assert target is not None
    return build_chenone_tree(stats, _questions(config, chars), target, chars)


def cmd_units(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    transcripts = _transcripts(config)
    corpus = [" ".join(transcripts[u]) for u in sorted(transcripts)]
    tree = None
    size = config.effective_num_units
    if config.unit_type == "mono-char":
        base = build_char_inventory(corpus)
    elif config.unit_type == "bi-char":
        assert size is not None
        base = cluster_bichar(corpus, size)
    elif config.unit_type == "wordpiece":
        assert size is not None
        base = train_wordpiece_vocab(corpus, size)
    else:
        base, tree = _train_tree(config, transcripts)
        write_artifact(wd.tree, tree.to_tsv(), config)
    inv = finalize_inventory(base, config.topology)
    words = {w for words in transcripts.values() for w in words}
    lexicon = build_lexicon(words, inv, tree)
    write_artifact(wd.inventory, inv.to_tsv(), config)
    write_artifact(wd.lexicon, lexicon.to_tsv(), config)
    print(f"units\t{inv.size}\nwords\t{len(lexicon.entries)}")


def cmd_lm(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    transcripts = _transcripts(config)
    inv = _inventory(wd, config)
    tree = _tree(wd, config)
    if config.den_lm_silence == "alignment":
        if not uses_char_lm(inv.unit_type):
            raise ConfigError(
                "den_lm_silence = alignment applies to bi-char and chenone systems"
            )
        sequences = aligned_lm_sequences(
            transcripts, _alignments(config), _alignment_silence(config)
        )
    else:
        ordered = [transcripts[u] for u in sorted(transcripts)]
        sequences = den_lm_sequences(ordered, inv, config.p_sil, config.seed, tree)
    den_lm = estimate_ngram(sequences, config.effective_den_lm_order)
    write_artifact(wd.den_lm, write_arpa(den_lm), config)
    if not config.word_lm:
        word_lm = estimate_ngram(
            [list(transcripts[u]) for u in sorted(transcripts)], config.word_lm_order
        )
        write_artifact(wd.word_lm, write_arpa(word_lm), config)
    print(f"den_lm_order\t{den_lm.order}")


def cmd_graph_den(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    inv = _inventory(wd, config)
    lm = read_arpa(read_artifact(wd.den_lm, config))
    den = build_den(lm, config, inv, _tree(wd, config))
    write_artifact(wd.den, write_graph(den), config)
    print(f"states\t{den.fst.num_states}\narcs\t{den.fst.num_arcs}")
    if args.stats:
        print(f"log_total_{args.stats}\t{total_weight(den.fst, args.stats):.6f}")


def cmd_graph_num(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    transcripts = _transcripts(config)
    inv = _inventory(wd, config)
    tree = _tree(wd, config)
    segments: dict[str, list[Segment]] = {}
    if config.unit_type == "chenone":
        segments = _unit_segments(config, transcripts, inv, tree)
    built = 0
    for utt_id in sorted(transcripts):
        try:
            num = build_num(
                utt_id, transcripts[utt_id], config, inv, tree, segments.get(utt_id)
            )
        except GraphBuildError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )
            continue
        write_artifact(wd.num(utt_id), write_graph(num), config)
        built += 1
    print(f"numerators\t{built}\nskipped\t{len(transcripts) - built}")


def cmd_train(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    corpus = _corpus(config)
    inv = _inventory(wd, config)
    stages = {stage for stage, _ in schedule_stages(config)}
    nums = _numerators(wd, config, [u.utt_id for u in corpus])
    den = _denominator(wd, config, inv) if "mmi" in stages else None
    segments = None
    if "ce" in stages:
        transcripts = {u.utt_id: u.words for u in corpus}
        segments = _unit_segments(config, transcripts, inv, _tree(wd, config))
    wd.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train(
            corpus,
            config,
            inv,
            nums,
            den,
            segments,
            workers=args.workers,
            checkpoint_dir=wd.checkpoint_dir,
        )
    except TrainingError as e:
        if e.checkpoint is not None:
            last_good = wd.root / "last-good.ckpt"
            last_good.write_bytes(encode_checkpoint(e.checkpoint))
        raise
    wd.checkpoint.write_bytes(encode_checkpoint(result.checkpoint))
    write_artifact(wd.objective_log, write_objective_log(result.rows), config)
    for row in result.rows:
        print(row.to_tsv())


def cmd_loss_eval(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    corpus = _corpus(config)
    inv = _inventory(wd, config)
    ckpt = _checkpoint(args.checkpoint, wd, config, inv)
    nums = compile_graphs(_numerators(wd, config, [u.utt_id for u in corpus]))
    den = None
    if args.mode == "mmi":
        den = GraphArrays.from_fst(_denominator(wd, config, inv).fst)
    objective = StageObjective(args.mode, ckpt.loss_config(config.boost), nums, den)
    items = [(u.utt_id, ckpt.scorer.logits(u.features)) for u in corpus]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = evaluate_utterances(objective, items, pool)
    total = 0.0
    frames = 0
    for (utt_id, _), result in zip(items, results):
        if result is None:
            print(f"{utt_id}\tskipped")
            continue
        total += result.objective
        frames += result.frames
        print(f"{utt_id}\t{result.objective:.6f}\t{result.frames}")
    print(f"total\t{total:.6f}\t{frames}")


def cmd_align(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    corpus = _corpus(config)
    inv = _inventory(wd, config)
    ckpt = _checkpoint(args.checkpoint, wd, config, inv)
    nums = _numerators(wd, config, [u.utt_id for u in corpus])
    cfg = ckpt.loss_config()

    def one(utterance: Utterance) -> tuple[str, Optional[list[Segment]]]:
        if utterance.utt_id not in nums:
            return utterance.utt_id, None
        logits = ckpt.scorer.logits(utterance.features)
        try:
            alignment = force_align(logits, nums[utterance.utt_id], cfg, inv)
        except DecodeError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utterance.utt_id, "reason": str(e)}},
            )
            return utterance.utt_id, None
        return utterance.utt_id, list(alignment.segments)

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        aligned = {u: s for u, s in pool.map(one, corpus) if s is not None}
    output = Path(args.output) if args.output else wd.alignments
    write_artifact(output, write_time_constraints(aligned), config)
    print(f"aligned\t{len(aligned)}\nskipped\t{len(corpus) - len(aligned)}")


def cmd_decode(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    inv = _inventory(wd, config)
    if wd.decode_graph.is_file() and not args.rebuild:
        graph = read_decode_graph(read_artifact(wd.decode_graph, config))
    else:
        lexicon = Lexicon.from_tsv(read_artifact(wd.lexicon, config))
        graph = build_decode_graph(_word_lm(wd, config), lexicon, config, inv)
        write_artifact(wd.decode_graph, write_decode_graph(graph), config)
    graph.check_inventory(inv)
    ckpt = _checkpoint(args.checkpoint, wd, config, inv)
    features = read_feature_dir(Path(args.features)) if args.features else None
    if features is None:
        features = _features(config)
    items = [(u, ckpt.scorer.logits(features[u])) for u in sorted(features)]
    seconds_per_frame = config.frame_ms * config.effective_stride / 1000.0
    hyps = decode_all(
        items, graph, ckpt.loss_config(), config.beam, seconds_per_frame, args.workers
    )
    output = Path(args.output) if args.output else wd.hypotheses
    write_artifact(output, write_hypotheses(hyps), config)
    print(f"decoded\t{len(hyps)}")


def cmd_score(args: argparse.Namespace) -> None:
    config = _config(args)
    wd = Workdir.of(config)
    refs = read_transcripts(read_input(args.ref or config.transcripts, "references"))
    hyps = read_hypotheses(read_input(args.hyp or str(wd.hypotheses), "hypotheses"))
    words = {utt_id: hyp.words for utt_id, hyp in hyps.items()}
    print(f"wer\t{wer(refs, words):.6f}")
    if args.ref_times:
        timed = read_hypotheses(read_input(args.ref_times, "reference times"))
        error = tse(
            word_times_from_hypotheses(timed),
            hyps,
            config.frame_ms,
            config.effective_stride,
        )
        print(f"tse_ms\t{'nan' if error is None else f'{error:.3f}'}")


def _write_synthetic(
    out: Path, synth: SyntheticCorpus, utterances: Sequence[Utterance]
) -> None:
    ids = [u.utt_id for u in utterances]
    out.mkdir(parents=True, exist_ok=True)
    write_feature_dir(out / "feats", {u.utt_id: u.features for u in utterances})
    (out / "transcripts.txt").write_text(
        write_transcripts({u.utt_id: u.words for u in utterances}), encoding="utf-8"
    )
    (out / "segments.txt").write_text(
        write_time_constraints({i: synth.segments[i] for i in ids}), encoding="utf-8"
    )
    (out / "units.tsv").write_text(synth.inventory.to_tsv(), encoding="utf-8")
    timed = {
        i: Hypothesis(
            tuple(w for w, _, _ in synth.word_times[i]),
            tuple((s, e) for _, s, e in synth.word_times[i]),
            0.0,
        )
        for i in ids
    }
    (out / "word_times.txt").write_text(write_hypotheses(timed), encoding="utf-8")


def cmd_synth(args: argparse.Namespace) -> None:
    if args.utts < 1 or args.test_utts < 0:
        raise ConfigError("--utts must be >= 1 and --test-utts >= 0")
    synth = generate_synthetic_corpus(
        args.words.split(","),
        n_utts=args.utts + args.test_utts,
        seed=args.seed,
        stride=args.stride,
        feat_dim=args.feat_dim,
        p_sil=args.p_sil,
        noise=args.noise,
        onset=args.onset,
    )
    out = Path(args.output)
    _write_synthetic(out, synth, synth.utterances[: args.utts])
    print(f"utterances\t{args.utts}")
    if args.test_utts:
        _write_synthetic(out / "test", synth, synth.utterances[args.utts :])
        print(f"test_utterances\t{args.test_utts}")


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    app_dir = str(Path(__file__).resolve().parents[1])
    uvicorn.run("main:app", host=args.host, port=args.port, app_dir=app_dir)


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config")
    common.add_argument(
        "--workers", type=int, default=argparse.SUPPRESS, help="parallel utterances"
    )

    parser = argparse.ArgumentParser(
        prog="hybridam", description="Lattice-free boosted MMI toolkit"
    )
    parser.add_argument("--config", default=None, help="pipeline config")
    parser.add_argument(
        "--workers", type=int, default=settings.workers, help="parallel utterances"
    )
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"hybridam {__version__} "
            f"(features {FEATURE_MAGIC.decode()} v1, "
            f"checkpoint LFCK v{CHECKPOINT_VERSION})"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.set_defaults(handler=handler)
        return command

    add("units", cmd_units, "build the unit inventory and lexicon")
    add("lm", cmd_lm, "estimate the denominator and word LMs")
    add("graph-num", cmd_graph_num, "build per-utterance numerator graphs")
    den = add("graph-den", cmd_graph_den, "build the denominator graph")
    den.add_argument(
        "--stats", type=int, default=0, metavar="N", help="log total of paths <= N arcs"
    )

    loss = add("loss-eval", cmd_loss_eval, "evaluate the objective of a checkpoint")
    loss.add_argument("--checkpoint")
    loss.add_argument("--mode", choices=["mmi", "ml"], default="mmi")

    add("train", cmd_train, "run the configured training schedule")

    align = add("align", cmd_align, "force-align the training corpus")
    align.add_argument("--checkpoint")
    align.add_argument("--output")

    decode = add("decode", cmd_decode, "decode the configured features")
    decode.add_argument("--checkpoint")
    decode.add_argument("--output")
    decode.add_argument("--rebuild", action="store_true", help="rebuild the graph")
    decode.add_argument("--features", help="feature directory (default: config)")

    score = add("score", cmd_score, "word error rate and time-stamp error")
    score.add_argument("--ref", help="reference transcripts (default: config)")
    score.add_argument("--hyp", help="hypotheses (default: work directory)")
    score.add_argument("--ref-times", help="reference word times (hypothesis format)")

    synth = add("synth", cmd_synth, "generate a synthetic corpus")
    synth.add_argument("--words", required=True, help="comma-separated vocabulary")
    synth.add_argument("--utts", type=int, default=200)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--stride", type=int, default=4)
    synth.add_argument("--feat-dim", type=int, default=16)
    synth.add_argument("--p-sil", type=float, default=0.2)
    synth.add_argument("--noise", type=float, default=0.3)
    synth.add_argument("--onset", type=float, default=0.0, help="segment onset cue")
    synth.add_argument(
        "--test-utts", type=int, default=0, help="held-out utterances under test/"
    )
    synth.add_argument("--output", required=True)

    serve = add("serve", cmd_serve, "run the HTTP service")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _one_line(error: Exception) -> str:
    if isinstance(error, ValidationError):
        return "; ".join(
            f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}"
            for e in error.errors()
        )
    return " ".join(str(error).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(stream=sys.stderr)
    if args.workers < 1:
        print("error\tConfigError\t--workers must be >= 1", file=sys.stderr)
        return 2
    try:
        args.handler(args)
    except (HybridAmError, ValidationError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error\t{type(e).__name__}\t{_one_line(e)}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
