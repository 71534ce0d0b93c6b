"""
benchmark.py

Times DR-NMF inference (K layers per frame) against the sparse NMF baseline
(multiplicative updates on all frames) on the mixtures of a manifest, reports
the per-frame latency and the speed-up, and appends one row of statistics to
an Excel sheet.

Outputs:
- Per-utterance timings: benchmark_timings.csv (next to the Excel sheet)
- Statistics row appended to: benchmark_stats.xlsx

Usage:
    python DRNMFSeparator/benchmark.py --model run/drnmf.drnmf --manifest corpus/manifest.csv
"""

import argparse
import os
import time

import numpy as np
import pandas as pd

from corpus import load_manifest, load_spectrograms
from drnmf import compute_mask, estimates, infer_mask, load_params
from snmf import Dictionary, SnmfConfig, infer_H_mu

# ---------- CONFIGURATION ----------
EXCEL_PATH = "benchmark_stats.xlsx"
TIMINGS_FILENAME = "benchmark_timings.csv"


def time_inference(params, dictionary, spectrograms, snmf_cfg, repeats=1):
    """
    Wall-clock time of mask estimation for both methods on each spectrogram.

    :param spectrograms: list of noisy magnitude spectrograms
    :return: DataFrame with frames, drnmf_s and snmf_s per utterance (best of `repeats`)
    """
    if repeats < 1:
        raise ValueError(f"repeats must be at least 1, got {repeats}")
    rows = []
    for X in spectrograms:
        drnmf_s, snmf_s = np.inf, np.inf
        for _ in range(repeats):
            start = time.perf_counter()
            infer_mask(params, X)
            drnmf_s = min(drnmf_s, time.perf_counter() - start)

            start = time.perf_counter()
            H = infer_H_mu(X, dictionary.W, snmf_cfg)
            compute_mask(*estimates(dictionary.W, H, dictionary.n_speech), params.epsilon_mask)
            snmf_s = min(snmf_s, time.perf_counter() - start)
        rows.append({"frames": X.shape[1], "drnmf_s": drnmf_s, "snmf_s": snmf_s})
    return pd.DataFrame(rows)


def benchmark_row(timings, params, snmf_cfg):
    frames = int(timings["frames"].sum())
    drnmf_total = float(timings["drnmf_s"].sum())
    snmf_total = float(timings["snmf_s"].sum())
    return {
        "Model": f"DR-NMF K={params.K} N={params.N}",
        "Utterances": len(timings),
        "Frames": frames,
        "SNMF iterations": snmf_cfg.n_iters,
        "DR-NMF total (s)": drnmf_total,
        "SNMF total (s)": snmf_total,
        "DR-NMF per frame (ms)": 1000.0 * drnmf_total / frames,
        "SNMF per frame (ms)": 1000.0 * snmf_total / frames,
        "Speed-up": snmf_total / drnmf_total if drnmf_total > 0 else np.inf,
    }


def append_stats(row, excel_path=EXCEL_PATH):
    """Append one statistics row to the Excel sheet, creating it if needed."""
    if os.path.exists(excel_path):
        df_stats = pd.read_excel(excel_path)
        df_stats = pd.concat([df_stats, pd.DataFrame([row])], ignore_index=True)
    else:
        df_stats = pd.DataFrame([row])
    df_stats.to_excel(excel_path, index=False)
    return df_stats


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="DR-NMF vs sparse NMF inference speed benchmark")
    parser.add_argument("--model", required=True, help="Trained DR-NMF model (with its dictionary 'W')")
    parser.add_argument("--manifest", required=True, help="Corpus manifest CSV")
    parser.add_argument("--n-utts", type=int, default=10, help="Number of mixtures to time")
    parser.add_argument("--snmf-iters", type=int, default=200, help="MU iterations of the baseline")
    parser.add_argument("--repeats", type=int, default=3, help="Timing repeats (best is kept)")
    parser.add_argument("--excel", default=EXCEL_PATH, help="Statistics sheet")
    args = parser.parse_args()

    # ---------- LOAD MODEL ----------
    print("[INFO] Loading model...")
    params, arrays, metadata = load_params(args.model)
    if "W" not in arrays:
        raise ValueError(f"{args.model}: model file has no dictionary array 'W'")
    dictionary = Dictionary(arrays["W"], int(metadata["n_speech"]), int(metadata["n_noise"]))
    snmf_cfg = SnmfConfig(lambda1=params.lambda1, n_iters=args.snmf_iters)

    # ---------- LOAD MIXTURES ----------
    print("[INFO] Loading mixtures...")
    manifest = load_manifest(args.manifest).head(args.n_utts)
    frame_size = int(metadata.get("frame_size", 2 * (params.F - 1)))
    hop = int(metadata.get("hop", frame_size // 4))
    spectrograms = [X for X, _ in load_spectrograms(manifest, frame_size, hop)]

    # ---------- TIMING ----------
    print("[INFO] Running inference with latency measurement...")
    timings = time_inference(params, dictionary, spectrograms, snmf_cfg, args.repeats)
    timings.insert(0, "utt_id", manifest["utt_id"].values)
    print("[INFO] Latency statistics per utterance (s):")
    print(timings[["drnmf_s", "snmf_s"]].describe())

    excel_dir = os.path.dirname(os.path.abspath(args.excel))
    timings.to_csv(os.path.join(excel_dir, TIMINGS_FILENAME), index=False)

    # ---------- STATS ----------
    row = benchmark_row(timings, params, snmf_cfg)
    print("[INFO] Benchmark statistics:", row)
    append_stats(row, args.excel)
    print(f"[SUCCESS] Statistics saved in: {args.excel}")
