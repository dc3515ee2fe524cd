"""Write the GRPO group-trace fixtures used by the grpo-check tests.

Each rollout is a real trajectory transcript split with ``token_spans``;
information-block tokens are masked. Logprobs come from a seeded RNG.

    python3 scripts/make_group_traces.py tests/fixtures/groups
"""
import argparse
import json
from pathlib import Path

import numpy as np

from agentrag.grpo import information_mask, token_spans

TRANSCRIPTS = [
    "<plan>p</plan>\n<search>\n<query>apple</query>\n</search>"
    '<information>\nDoc 1 (Title: "Apples") apple apple\n</information>'
    "\n<reflection>r</reflection>\n<answer>\nfruit\n</answer>",
    "<answer>\nvegetable\n</answer>",
    "<plan>guess</plan>\n<search>\n<query>cherry</query>\n</search>"
    '<information>\nDoc 1 (Title: "Cherry") cherry\n</information>'
    "\n<reflection>no</reflection>\n<answer>\nstone\n</answer>",
    "<answer>\nfruit\n</answer>",
    "I do not know.",
]
REWARDS = [1.0, 0.0, 0.0, 1.0, 0.0]


def rollout(text, reward, rng, identical):
    spans = token_spans(text)
    n = len(spans)
    logp_old = rng.uniform(-3.0, -0.01, size=n)
    if identical:
        logp_new = logp_old.copy()
        logp_ref = logp_old.copy()
    else:
        logp_new = logp_old + rng.normal(0, 0.3, size=n)
        logp_ref = logp_old + rng.normal(0, 0.1, size=n)
    return {
        "tokens": [text[a:b] for a, b in spans],
        "logp_new": logp_new.round(6).tolist(),
        "logp_old": logp_old.round(6).tolist(),
        "logp_ref": logp_ref.round(6).tolist(),
        "mask": information_mask(text, spans),
        "reward": reward,
    }


def group(question_id, seed, identical):
    rng = np.random.default_rng(seed)
    return {
        "question_id": question_id,
        "rollouts": [rollout(t, r, rng, identical) for t, r in zip(TRANSCRIPTS, REWARDS)],
    }


def write(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    write(args.out_dir / "identical.jsonl", [group("fruit-identical", 0, identical=True)])
    write(args.out_dir / "perturbed.jsonl", [group("fruit-perturbed", 1, identical=False)])

    broken = group("fruit-broken", 2, identical=True)
    broken["rollouts"][2]["mask"] = broken["rollouts"][2]["mask"][:-1]
    write(args.out_dir / "mismatched.jsonl", [group("fruit-ok", 3, identical=True), broken])
    print(f"wrote fixtures to {args.out_dir}")


if __name__ == "__main__":
    main()
