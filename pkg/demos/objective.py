"""The training objective on a hand-built batch: the sampled-softmax term,
the contrastive term over skipped tracks, and a finite-difference check of the
hand-written gradients for every encoder.

    python3 demos/objective.py
"""

from skiprec import objective
from skiprec.gradcheck import check_model_gradients, random_params
from skiprec.models import ARCHITECTURES, ModelConfig
from skiprec.session_data import Session

SESSIONS = [Session([3, 5, 7, 9, 11, 4], [False, True, True, False, True, False]),
            Session([12, 6, 8, 10], [True, False, True, False])]
NEGATIVES = [[13, 14, 15, 8], [3, 14, 5]]


def batch_for(config):
    if config.is_bidirectional:
        return objective.masked_batch(SESSIONS, [[1, 3], [0]], NEGATIVES)
    return objective.causal_batch(SESSIONS, NEGATIVES)


def main():
    print("next-positive targets, session 0:", objective.causal_batch(SESSIONS, NEGATIVES).targets[0])
    print()
    for arch in ARCHITECTURES:
        cfg = ModelConfig(arch, embed_dim=8, max_len=6, heads=2, vocab_size=16, caser_window=3)
        params = random_params(cfg, 0)
        batch = batch_for(cfg)
        for beta in (0.0, 0.5):
            loss = objective.combined_loss(params, cfg, batch, objective.LossConfig(beta=beta))
            print(f"{arch:<24} beta={beta}: nll {loss.nll:.4f}  nce {loss.nce:.4f}  "
                  f"combined {loss.combined:.4f}")
        errors = check_model_gradients(params, cfg, batch, objective.LossConfig(beta=0.5))
        print(f"{'':<24} worst gradient relative error {max(errors.values()):.2e}")


if __name__ == "__main__":
    main()
