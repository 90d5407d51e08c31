#!/usr/bin/env python3
"""Train the bundled checkpoint on the bundled corpus.

Produces src/selfcal/data/tiny_lm.tlm (2 layers, 4 heads, dim 128,
FFN 512, context 256), trained for 2000 Adam steps at batch size 8 with
seed 0. Deterministic: rerunning reproduces the committed file.

Usage: python tools/train_bundled_model.py [--steps 2000]
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from selfcal import assets
from selfcal.harness import load_eval_windows
from selfcal.tiny_lm import (
    ByteTokenizer,
    ModelConfig,
    TrainConfig,
    init_model,
    perplexity,
    save_checkpoint,
    train,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    config = ModelConfig()
    train_cfg = TrainConfig(steps=args.steps, batch_size=8, learning_rate=3e-4, seed=0)
    tokens = ByteTokenizer().encode(assets.corpus_path().read_bytes())
    eval_data = load_eval_windows(assets.heldout_path(), num=16, length=256)

    model = init_model(config, seed=0)
    print(f"untrained held-out ppl: {perplexity(model, eval_data):.2f}")
    start = time.time()
    model = train(model, tokens, train_cfg, log_every=100)
    print(f"trained in {time.time() - start:.0f}s")
    print(f"trained held-out ppl: {perplexity(model, eval_data):.2f}")

    out = Path(args.out) if args.out else assets.bundled_model_path()
    save_checkpoint(model, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
