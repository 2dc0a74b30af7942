"""Convert a Hugging Face GPT-NeoX directory (e.g. pythia-14m) into a model dir.

Reads config.json, model.safetensors and tokenizer.json (or vocab.json +
merges.txt), checks every expected tensor, casts to float32, and writes the
layout `bench run --model-dir` expects.
"""

import argparse
import shutil
from pathlib import Path

import numpy as np

from diibench.container import load_file
from diibench.model import ModelConfig, expected_shapes, load_checkpoint, save_checkpoint
from diibench.tokenizer import Tokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("hf_dir", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args()

    cfg = ModelConfig.load(args.hf_dir / "config.json")
    src = args.hf_dir / "model.safetensors"
    if not src.exists():
        raise SystemExit(f"{src} not found; only safetensors checkpoints are supported")
    tensors, _ = load_file(src)
    needed = expected_shapes(cfg)
    weights = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items() if k in needed}
    load_checkpoint(weights, cfg)  # shape and finiteness checks

    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    save_checkpoint(weights, args.out / "model.safetensors")
    copied = []
    for name in ("tokenizer.json", "vocab.json", "merges.txt"):
        if (args.hf_dir / name).exists():
            shutil.copy(args.hf_dir / name, args.out / name)
            copied.append(name)
    tok = Tokenizer.from_dir(args.out)
    print(f"wrote {args.out}: {cfg.n_layers} layers, d={cfg.d_model}, vocab {len(tok)}; tokenizer files {copied}")


if __name__ == "__main__":
    main()
