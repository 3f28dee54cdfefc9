"""Train one encoder with and without the contrastive skip term on synthetic
sessions with planted preferences, then compare the two runs the way the
report command does.  Defaults are small so the script finishes quickly; pass
--sessions 2000 --epochs 30 --embed-dim 32 for the desk-scale setting.

    python3 demos/synthetic_comparison.py [--model sasrec] [--seed 0]
"""

import argparse

from skiprec.evaluation import evaluate, render_table
from skiprec.models import ModelConfig, resolve_architecture
from skiprec.objective import LossConfig
from skiprec.synthetic import SyntheticConfig, make_dataset
from skiprec.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", default="gru4rec")
    parser.add_argument("--sessions", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--embed-dim", type=int, default=16)
    parser.add_argument("--neg-samples", type=int, default=100)
    parser.add_argument("--beta", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    dataset, _ = make_dataset(SyntheticConfig(sessions=args.sessions, seed=args.seed))
    print(f"{len(dataset.sessions)} sessions, skip rate {dataset.skip_rate:.3f}")
    model = ModelConfig(resolve_architecture(args.model), embed_dim=args.embed_dim,
                        heads=2 if args.embed_dim % 8 else 8)
    rows = {}
    for name, beta in (("orig", 0.0), ("ours", args.beta)):
        result = train(dataset, model, LossConfig(beta=beta, num_negatives=args.neg_samples),
                       TrainConfig(epochs=args.epochs, seed=args.seed),
                       progress=lambda r: print(f"  {name} epoch {r['epoch']:2d} "
                                                f"combined {r['combined']:.4f} "
                                                f"val HR@10 {r['val_hr10']:.4f}"))
        rows[name] = evaluate(result.checkpoint, dataset).to_json(name, dataset.digest(), args.seed)
    print()
    print(render_table(rows, "orig"))
    print("\nskip_mrr10 is the skip down-ranking score: lower is better.")


if __name__ == "__main__":
    main()
