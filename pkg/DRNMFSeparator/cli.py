"""
cli.py

Command-line entry point of the DR-NMF speech enhancement pipeline.

Subcommands:
- synth:        generate the synthetic speech-plus-noise corpus and its manifest
- train-nmf:    learn the speech and noise dictionaries with sparse NMF
- train-drnmf:  initialize the unfolded network from the dictionaries and train it
- separate:     enhance one WAV file (streaming DR-NMF, or the sparse NMF baseline)
- evaluate:     per-utterance and per-SNR SDR table for a manifest
- solve:        cold-start vs warm-start ISTA on the mixtures of a manifest
- gradcheck:    finite-difference check of the network gradients

Every pipeline setting can come from a `key = value` file (--config) and be
overridden per key on the command line. The effective configuration is echoed
into each output directory together with pipeline.log.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.

Usage:
    python DRNMFSeparator/cli.py synth --out-dir corpus --n-utts 12 --seed 7
    python DRNMFSeparator/cli.py train-nmf --manifest corpus/manifest.csv --out-model run/nmf.drnmf
"""

import argparse
import logging
import os
import sys
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from audio import interior_slice, iter_wav_blocks, read_wav, sdr, write_wav, WavStreamWriter
from config import add_config_arguments, apply_overrides, config_from_args, save_config
from corpus import load_manifest, load_spectrograms, split_manifest, synth_corpus
from drnmf import count_parameters, load_params, save_params, separate, separate_snmf, separate_stream
from errors import ConfigError
from ista import IstaConfig, cold_start_ista, resolve_alpha, warm_start_ista
from logger import close_logger, setup_logger
from modelfile import load_model
from snmf import (Dictionary, SnmfConfig, infer_H_mu, load_dictionary, save_dictionary, snmf_objective,
                  train_noise_dict, train_speech_dict)
from train import (AdamState, TrainConfig, evaluate_loss, gradient_check, initialization_equivalence,
                   initialize_from_snmf, initialize_random, random_dictionaries, split_sequences, train_loop)

logger = logging.getLogger("drnmf.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

# Tolerances of the initialization-equivalence check
INIT_H_TOLERANCE = 1e-12
INIT_LOSS_TOLERANCE = 1e-10

DEFAULT_GRADCHECK_SIZES = "9,6,2,5;12,8,3,6;11,7,4,4"


class PipelineArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the pipeline reserves 2 for numeric failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _start_run(cfg, out_dir):
    """Create out_dir, echo the configuration into it and log to out_dir/pipeline.log."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, out_dir)
    close_logger()
    run_logger = setup_logger(os.path.join(out_dir, "pipeline.log"))
    run_logger.info(f"Output directory: {os.path.abspath(out_dir)}")
    return run_logger


def _output_dir(path):
    return os.path.dirname(os.path.abspath(path))


def _snmf_config(cfg):
    return SnmfConfig(lambda1=cfg.lambda1, n_iters=cfg.snmf_iters, epsilon_mu=cfg.epsilon_mu, seed=cfg.nmf_seed)


def _check_bins(n_rows, cfg, what):
    if n_rows != cfg.frame_size // 2 + 1:
        raise ValueError(f"{what} has {n_rows} frequency rows, frame_size {cfg.frame_size} "
                         f"needs {cfg.frame_size // 2 + 1}")


def _print_objective_trace(label, trace):
    for it in range(10, len(trace), 10):
        print(f"[INFO] [{label}] iteration {it}: objective {trace[it]:.6f}")


# ---------- SYNTH ----------
def cmd_synth(cfg, args):
    _start_run(cfg, args.out_dir)
    print(f"[INFO] Synthesizing {cfg.n_utts} utterances (seed {cfg.corpus_seed})...")
    manifest = synth_corpus(cfg.n_utts, args.out_dir, cfg.corpus_seed, cfg.duration_s, cfg.n_jobs)
    per_snr = manifest["snr_db"].value_counts().sort_index().to_dict()
    print(f"[INFO] Utterances per SNR (dB): {per_snr}")
    print(f"[SUCCESS] Manifest saved in: {os.path.join(args.out_dir, 'manifest.csv')}")
    return EXIT_OK


# ---------- TRAIN-NMF ----------
def cmd_train_nmf(cfg, args):
    _start_run(cfg, _output_dir(args.out_model))
    manifest = load_manifest(args.manifest)
    train, _ = split_manifest(manifest, cfg.val_fraction, cfg.shuffle_seed, cfg.train_fraction)
    print(f"[INFO] Loading {len(train)} training utterances...")
    pairs = load_spectrograms(train, cfg.frame_size, cfg.hop, cfg.n_jobs)

    snmf_cfg = _snmf_config(cfg)
    print(f"[INFO] Training speech dictionary ({cfg.n_speech} atoms)...")
    speech = train_speech_dict([Y for _, Y in pairs], cfg.n_speech, snmf_cfg)
    _print_objective_trace("speech", speech.objective_trace)

    print(f"[INFO] Training noise dictionary ({cfg.n_noise} atoms, speech atoms frozen)...")
    dictionary = train_noise_dict([X for X, _ in pairs], speech, cfg.n_noise, snmf_cfg)
    if cfg.n_noise:
        _print_objective_trace("noise", dictionary.objective_trace)

    final = dictionary.objective_trace[-1] if dictionary.objective_trace else float("nan")
    save_dictionary(args.out_model, dictionary, snmf_cfg, {"frame_size": cfg.frame_size, "hop": cfg.hop})
    print(f"[INFO] Final objective: {final:.6f}")
    print(f"[SUCCESS] Dictionary saved in: {args.out_model}")
    return EXIT_OK


# ---------- TRAIN-DRNMF ----------
def cmd_train_drnmf(cfg, args):
    out_dir = args.out_dir or _output_dir(args.out_model)
    _start_run(cfg, out_dir)

    dictionary, dictionary_metadata = load_dictionary(args.nmf_model)
    _check_bins(dictionary.W.shape[0], cfg, "dictionary")
    if not np.isclose(float(dictionary_metadata.get("lambda1", cfg.lambda1)), cfg.lambda1):
        logger.warning(f"lambda1 {cfg.lambda1} differs from the dictionary's {dictionary_metadata['lambda1']}")

    manifest = load_manifest(args.manifest)
    train, val = split_manifest(manifest, cfg.val_fraction, cfg.shuffle_seed, cfg.train_fraction)
    print(f"[INFO] Loading {len(train)} training and {len(val)} validation utterances...")
    train_pairs = load_spectrograms(train, cfg.frame_size, cfg.hop, cfg.n_jobs)
    val_set = load_spectrograms(val, cfg.frame_size, cfg.hop, cfg.n_jobs)
    train_set = [piece for X, Y in train_pairs for piece in split_sequences(X, Y, cfg.max_seq_frames)]

    if cfg.init == "random":
        layers = random_dictionaries(dictionary.W.shape[0], dictionary.N, cfg.K, cfg.init_seed)
        alpha0 = max(resolve_alpha(cfg.alpha, W) for W in layers)
        init = initialize_random(layers, dictionary.n_speech, cfg.lambda1, alpha0, cfg.h0_const,
                                 cfg.epsilon_log, cfg.epsilon_mask)
    else:
        alpha0 = resolve_alpha(cfg.alpha, dictionary.W)
        init = initialize_from_snmf(dictionary, cfg.lambda1, cfg.K, alpha0, cfg.h0_const,
                                    cfg.epsilon_log, cfg.epsilon_mask)
    print(f"[INFO] DR-NMF ({cfg.init} init) with K={init.K}, N={init.N}, alpha0={alpha0:.6g}: "
          f"{count_parameters(init)} trainable parameters")

    if cfg.init == "snmf":
        check = initialization_equivalence(init, val_set)
        loss_gap = abs(check["network_loss"] - check["ista_loss"])
        passed = check["max_abs_H"] <= INIT_H_TOLERANCE and loss_gap <= INIT_LOSS_TOLERANCE
        print(f"[INFO] Initialization check: max |H_drnmf - H_ista| = {check['max_abs_H']:.3e}, "
              f"|loss gap| = {loss_gap:.3e} -> {'PASS' if passed else 'FAIL'}")
        if not passed:
            logger.warning("initialized network does not reproduce warm-start ISTA")

    val0 = evaluate_loss(init, val_set, cfg.n_jobs)
    print(f"[INFO] Epoch 0 validation loss: {val0:.6f}")
    logger.info(f"epoch 0: val {val0:.6f}")

    train_cfg = TrainConfig(cfg.batch_size, cfg.max_seq_frames, cfg.patience_epochs, cfg.max_epochs,
                            cfg.shuffle_seed, cfg.n_jobs)
    adam = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
    extra_metadata = {"alpha0": alpha0, "init": cfg.init, "init_val_loss": val0,
                      "frame_size": cfg.frame_size, "hop": cfg.hop,
                      "snmf_iters": dictionary_metadata.get("snmf_iters", cfg.snmf_iters),
                      "nmf_seed": dictionary_metadata.get("nmf_seed", cfg.nmf_seed)}
    checkpoint_extra = ({"W": dictionary.W}, extra_metadata)

    print(f"[INFO] Training for at most {cfg.max_epochs} epochs...")
    best, history = train_loop(init, train_set, val_set, train_cfg, adam, args.out_model, checkpoint_extra,
                               baseline_val_loss=val0)
    history_path = os.path.join(out_dir, "history.csv")
    history.to_csv(history_path, index=False)

    improved = history[history["val_loss"] < val0]
    if improved.empty:
        # No epoch beat the initialization, so the checkpoint is the initial network
        save_params(args.out_model, best, {"W": dictionary.W}, dict(extra_metadata, epoch=0, val_loss=val0))
        best_epoch, best_val = 0, val0
    else:
        best_row = improved.loc[improved["val_loss"].idxmin()]
        best_epoch, best_val = int(best_row["epoch"]), float(best_row["val_loss"])

    print(f"[INFO] Epochs run: {len(history)}; best epoch {best_epoch} with validation loss {best_val:.6f}")
    print(f"[INFO] History saved in: {history_path}")
    print(f"[SUCCESS] Model saved in: {args.out_model}")
    return EXIT_OK


# ---------- SEPARATE ----------
def cmd_separate(cfg, args):
    _start_run(cfg, _output_dir(args.out_wav))
    if args.snmf:
        dictionary, _ = load_dictionary(args.model)
        _check_bins(dictionary.W.shape[0], cfg, "dictionary")
        estimate = separate_snmf(dictionary, read_wav(args.in_wav), _snmf_config(cfg), cfg.epsilon_mask,
                                 cfg.frame_size, cfg.hop)
        write_wav(args.out_wav, estimate)
        n_out = len(estimate)
    else:
        params, _, _ = load_params(args.model)
        _check_bins(params.F, cfg, "model")
        n_out = 0
        with WavStreamWriter(args.out_wav) as writer:
            blocks = iter_wav_blocks(args.in_wav, cfg.hop)
            for block in separate_stream(params, blocks, args.identity_mask, cfg.frame_size, cfg.hop):
                writer.write(block)
                n_out += len(block)
    logger.info(f"separated {args.in_wav} -> {args.out_wav} ({n_out} samples)")
    print(f"[SUCCESS] Enhanced speech saved in: {args.out_wav} ({n_out} samples)")
    return EXIT_OK


# ---------- EVALUATE ----------
def _evaluate_utterance(row, params, dictionary, cfg):
    clean = read_wav(row["clean_path"])
    mixture = read_wav(row["mix_path"])
    result = {"utt_id": row["utt_id"], "snr_db": row["snr_db"]}

    estimate = separate(params, mixture, cfg.frame_size, cfg.hop)
    # Scored on the interior of the frame grid shared by every method
    region = interior_slice(len(estimate), cfg.frame_size, cfg.hop)
    reference = clean.samples[region]
    result["sdr_mixture"] = sdr(reference, mixture.samples[region])
    result["sdr_drnmf"] = sdr(reference, estimate.samples[region])
    if dictionary is not None:
        baseline = separate_snmf(dictionary, mixture, _snmf_config(cfg), cfg.epsilon_mask, cfg.frame_size, cfg.hop)
        result["sdr_snmf"] = sdr(reference, baseline.samples[region])
    return result


def sdr_table(per_utterance):
    """Per-utterance rows followed by one mean row per SNR level and an overall mean."""
    value_columns = [c for c in per_utterance.columns if c.startswith("sdr_")]
    means = per_utterance.groupby("snr_db", sort=True)[value_columns].mean().reset_index()
    means.insert(0, "utt_id", [f"mean_snr_{snr:g}" for snr in means["snr_db"]])
    overall = per_utterance[value_columns].mean().to_frame().T
    overall.insert(0, "snr_db", np.nan)
    overall.insert(0, "utt_id", "mean_all")
    return pd.concat([per_utterance, means, overall], ignore_index=True)


def cmd_evaluate(cfg, args):
    _start_run(cfg, _output_dir(args.out_csv))
    params, arrays, metadata = load_params(args.model)
    _check_bins(params.F, cfg, "model")
    dictionary = None
    if "W" in arrays:
        dictionary = Dictionary(arrays["W"], int(metadata["n_speech"]), int(metadata["n_noise"]))

    manifest = load_manifest(args.manifest)
    print(f"[INFO] Evaluating {len(manifest)} utterances...")
    rows = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_evaluate_utterance)(row, params, dictionary, cfg) for _, row in manifest.iterrows()
    )
    table = sdr_table(pd.DataFrame(rows))
    table.to_csv(args.out_csv, index=False)
    print(table.to_string(index=False))
    print(f"[SUCCESS] SDR table saved in: {args.out_csv}")
    return EXIT_OK


# ---------- SOLVE ----------
def cmd_solve(cfg, args):
    _start_run(cfg, _output_dir(args.out_csv))
    arrays, metadata = load_model(args.model)
    if "W" not in arrays:
        raise ValueError(f"{args.model}: model file has no dictionary array 'W'")
    W = arrays["W"]
    _check_bins(W.shape[0], cfg, "dictionary")
    ista_cfg = IstaConfig(alpha=resolve_alpha(cfg.alpha, W), lambda1=cfg.lambda1, K=cfg.K)
    h0 = np.full(W.shape[1], cfg.h0_const)
    snmf_cfg = _snmf_config(cfg)

    manifest = load_manifest(args.manifest)
    print(f"[INFO] Solving {len(manifest)} mixtures with alpha={ista_cfg.alpha:.6g}, K={cfg.K}...")
    solvers = {
        "ista_cold": lambda X: cold_start_ista(X, W, h0, ista_cfg),
        "ista_warm": lambda X: warm_start_ista(X, W, h0, ista_cfg),
        "snmf_mu": lambda X: infer_H_mu(X, W, snmf_cfg),
    }
    rows = []
    for (_, row), (X, _) in zip(manifest.iterrows(), load_spectrograms(manifest, cfg.frame_size, cfg.hop,
                                                                       cfg.n_jobs)):
        for method, solve in solvers.items():
            start = time.perf_counter()
            H = solve(X)
            seconds = time.perf_counter() - start
            rows.append({"utt_id": row["utt_id"], "method": method, "frames": X.shape[1],
                         "objective": snmf_objective(X, W, H, cfg.lambda1),
                         "seconds": seconds})

    results = pd.DataFrame(rows)
    results.to_csv(args.out_csv, index=False)
    summary = results.groupby("method")[["objective", "seconds"]].mean()
    print("[INFO] Mean objective and time per utterance:")
    print(summary)
    print(f"[SUCCESS] Solver comparison saved in: {args.out_csv}")
    return EXIT_OK


# ---------- GRADCHECK ----------
def parse_sizes(text):
    """'F,N,K,T;F,N,K,T' -> [(F, N, K, T), ...]"""
    sizes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            size = tuple(int(v) for v in chunk.split(","))
        except ValueError:
            raise ConfigError(f"invalid size {chunk!r}, expected F,N,K,T") from None
        if len(size) != 4 or min(size) < 1 or size[1] < 2:
            raise ConfigError(f"invalid size {chunk!r}, expected positive F,N,K,T with N >= 2")
        sizes.append(size)
    if not sizes:
        raise ConfigError("no gradient-check sizes given")
    return sizes


def cmd_gradcheck(cfg, args):
    sizes = parse_sizes(args.sizes)
    if args.out_csv:
        _start_run(cfg, _output_dir(args.out_csv))
    print(f"[INFO] Checking gradients on {len(sizes)} model size(s)"
          f"{' with a corrupted input-drive term' if args.corrupt else ''}...")
    report = gradient_check(sizes, n_coords=args.n_coords, tolerance=args.tolerance, seed=args.seed,
                            corrupt=args.corrupt)
    print(report.to_string(index=False))
    if args.out_csv:
        report.to_csv(args.out_csv, index=False)
        print(f"[INFO] Report saved in: {args.out_csv}")

    worst = float(report["max_rel_error"].max())
    if (report["status"] == "FAIL").any():
        print(f"[ERROR] Gradient check FAILED (max relative error {worst:.3e})")
        return EXIT_NUMERIC
    print(f"[SUCCESS] Gradient check PASSED (max relative error {worst:.3e})")
    return EXIT_OK


def build_parser():
    parser = PipelineArgumentParser(description="DR-NMF speech enhancement pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="Generate the synthetic corpus")
    synth.add_argument("--out-dir", required=True, help="Directory for WAV files and manifest.csv")
    synth.add_argument("--seed", type=int, default=None, help="Shorthand for --corpus-seed")
    synth.set_defaults(func=cmd_synth)

    train_nmf = subparsers.add_parser("train-nmf", help="Train speech and noise dictionaries")
    train_nmf.add_argument("--manifest", required=True, help="Corpus manifest CSV")
    train_nmf.add_argument("--out-model", required=True, help="Output dictionary model file")
    train_nmf.set_defaults(func=cmd_train_nmf)

    train_drnmf = subparsers.add_parser("train-drnmf", help="Train the DR-NMF network")
    train_drnmf.add_argument("--manifest", required=True, help="Corpus manifest CSV")
    train_drnmf.add_argument("--nmf-model", required=True, help="Dictionary model from train-nmf")
    train_drnmf.add_argument("--out-model", required=True, help="Output (best checkpoint) model file")
    train_drnmf.add_argument("--out-dir", default=None, help="Directory for history.csv (default: model's)")
    train_drnmf.set_defaults(func=cmd_train_drnmf)

    sep = subparsers.add_parser("separate", help="Enhance one WAV file")
    sep.add_argument("--model", required=True, help="Trained model file")
    sep.add_argument("--in-wav", required=True, help="Noisy 16 kHz mono WAV")
    sep.add_argument("--out-wav", required=True, help="Enhanced output WAV")
    sep.add_argument("--identity-mask", action="store_true", help="Debug: apply an all-ones mask")
    sep.add_argument("--snmf", action="store_true", help="Use the sparse NMF baseline instead of DR-NMF")
    sep.set_defaults(func=cmd_separate)

    evaluate = subparsers.add_parser("evaluate", help="SDR table for a manifest")
    evaluate.add_argument("--model", required=True, help="Trained model file")
    evaluate.add_argument("--manifest", required=True, help="Corpus manifest CSV")
    evaluate.add_argument("--out-csv", required=True, help="Output SDR CSV")
    evaluate.set_defaults(func=cmd_evaluate)

    solve = subparsers.add_parser("solve", help="Cold vs warm ISTA vs MU on a manifest")
    solve.add_argument("--model", required=True, help="Model file holding a dictionary 'W'")
    solve.add_argument("--manifest", required=True, help="Corpus manifest CSV")
    solve.add_argument("--out-csv", required=True, help="Output comparison CSV")
    solve.set_defaults(func=cmd_solve)

    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference gradient check")
    gradcheck.add_argument("--sizes", default=DEFAULT_GRADCHECK_SIZES,
                           help=f"Semicolon-separated F,N,K,T sizes (default: {DEFAULT_GRADCHECK_SIZES})")
    gradcheck.add_argument("--n-coords", type=int, default=50, help="Coordinates checked per tensor")
    gradcheck.add_argument("--tolerance", type=float, default=1e-5, help="Maximum relative error")
    gradcheck.add_argument("--seed", type=int, default=0, help="Seed of the random models")
    gradcheck.add_argument("--corrupt", action="store_true",
                           help="Debug: negate one gradient term (the check must FAIL)")
    gradcheck.add_argument("--out-csv", default=None, help="Optional report CSV")
    gradcheck.set_defaults(func=cmd_gradcheck)

    for subparser in subparsers.choices.values():
        add_config_arguments(subparser)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "synth" and args.seed is not None:
            cfg = apply_overrides(cfg, {"corpus_seed": args.seed})
        return args.func(cfg, args)
    except ArithmeticError as e:  # NumericError and numpy floating-point errors
        print(f"[ERROR] Numeric failure: {e}", file=sys.stderr)
        logger.error(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        print(f"[ERROR] I/O error: {e}", file=sys.stderr)
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except ValueError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        logger.error(str(e))
        return EXIT_USAGE
    finally:
        close_logger()


if __name__ == "__main__":
    sys.exit(main())
