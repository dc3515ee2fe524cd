"""Toy end-to-end experiment: index the toy corpus, then score the scripted
policies in both evaluation modes and print one table per setting.

    python3 scripts/run_toyqa.py [--fixtures tests/fixtures] [--out-dir runs/toyqa]
"""
import argparse
import json
from pathlib import Path

from agentrag.corpus import load_corpus
from agentrag.evalharness import emit_report, evaluate, load_dataset
from agentrag.policy import ExtractiveGenerator, ScriptedGenerator, ScriptedPolicy
from agentrag.retriever import Bm25Retriever, build_index, save_index

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", type=Path, default=ROOT / "tests" / "fixtures")
    ap.add_argument("--out-dir", type=Path, help="write index and JSON reports here")
    args = ap.parse_args()
    fx = args.fixtures

    corpus = load_corpus(fx / "toy_corpus.jsonl")
    index = build_index(corpus)
    retriever = Bm25Retriever(index, corpus)
    examples = load_dataset(fx / "toyqa.jsonl")
    gold = json.loads((fx / "toyqa_gold_answers.json").read_text(encoding="utf-8"))
    mixed_answers = json.loads((fx / "toyqa_mixed_generator.json").read_text(encoding="utf-8"))

    settings = [
        ("perfect policy", "toyqa_perfect_policy.json", "end_to_end", None),
        ("perfect policy + extractive reader", "toyqa_perfect_policy.json", "submodule", ExtractiveGenerator(gold)),
        ("mixed policy", "toyqa_mixed_policy.json", "end_to_end", None),
        ("perfect policy + mixed reader", "toyqa_perfect_policy.json", "submodule", ScriptedGenerator(mixed_answers)),
    ]
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        save_index(index, args.out_dir / "toy.idx.json")
    for i, (label, script, mode, generator) in enumerate(settings):
        policy = ScriptedPolicy.from_file(fx / script)
        report = evaluate(examples, policy, retriever, generator, mode=mode)
        print(f"# {label}")
        print(emit_report(report, "table"))
        if args.out_dir:
            emit_report(report, "json", args.out_dir / f"report_{i}_{mode}.json")


if __name__ == "__main__":
    main()
