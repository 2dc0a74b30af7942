"""Write a small random GPT-NeoX-style model directory for desk runs.

The vocabulary is a lookup table over every bundled task, so all bundled
tasks align. With --sweep K, K extra checkpoints (different seeds) are written
next to the main one for checkpoint-sweep runs.
"""

import argparse
from pathlib import Path

from diibench.model import save_checkpoint
from diibench.synthetic import fixture_config, random_weights, write_model_dir
from diibench.taskgen import bundled_task_names, load_bundled_task
from diibench.tokenizer import build_lookup_tokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--d-model", type=int, default=16)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--sweep", type=int, default=0, help="extra checkpoints step-<i>.safetensors")
    args = ap.parse_args()

    tok = build_lookup_tokenizer([load_bundled_task(n) for n in bundled_task_names()])
    cfg = fixture_config(len(tok), n_layers=args.layers, d_model=args.d_model, n_heads=args.heads)
    write_model_dir(args.out, cfg, random_weights(cfg, args.seed), tok)
    for i in range(args.sweep):
        save_checkpoint(random_weights(cfg, args.seed + 1 + i), args.out / f"step-{i}.safetensors")
    print(f"wrote {args.out} (vocab {len(tok)}, {cfg.n_layers} layers, d={cfg.d_model})")


if __name__ == "__main__":
    main()
