"""Sweep decoding mask and passage count for a trained run directory.

Prints one line of aggregate metrics per (decode_mask, mode, k) cell and a few
sample responses, which is how the zero-shot vs RAG gap in the README was found.

    python3 scripts/rag_probe.py runs/pinned
"""
import argparse
from dataclasses import replace
from pathlib import Path

from convrag.corpus import read_data_dir
from convrag.harness import pinned_generation
from convrag.index import build_index
from convrag.inference import run_pipeline
from convrag.metrics import evaluate, gold_tables
from convrag.model import load_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir", type=Path)
    p.add_argument("--ks", default="1,3,10")
    p.add_argument("--samples", type=int, default=3)
    args = p.parse_args()

    data = read_data_dir(args.run_dir / "data")
    state = load_checkpoint(args.run_dir / "model.npz")
    base = replace(pinned_generation(), log_retrieval=True)
    index = build_index(data.collection, state, data.vocab, base.passage_budget)
    qrels, gold, ev = gold_tables(data.test_sessions)
    ks = [int(k) for k in args.ks.split(",")]

    for mask in ("causal", "session"):
        for mode in ("zero_shot", "rag", "gold_evidence"):
            for k in ks if mode == "rag" else [max(ks)]:
                gcfg = replace(base, mode=mode, decode_mask=mask, top_k_passages=k)
                out = run_pipeline(state, index, data.test_sessions, gcfg, data.vocab,
                                   data.passage_text())
                agg = evaluate(out.results, qrels, gold, ev).aggregates
                print(f"{mask:7s} {mode:13s} k={k:<3d}",
                      " ".join(f"{m}={v:.4f}" for m, v in agg.items()))
        for r in out.results[: args.samples]:
            print(f"    {r.qid}: {r.response!r}  gold: {gold[r.qid]!r}")


if __name__ == "__main__":
    main()
