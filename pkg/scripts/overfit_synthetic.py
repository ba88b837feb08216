"""Train jointly on a small synthetic corpus until the training-set metrics saturate.

Prints correctness AUC and remark macro-AP every ``--every`` epochs and stops
at the first check where AUC >= 0.95 and macro-AP >= 0.90.
"""
import argparse
import time

import numpy as np

from sqlgrade.data import generate_synthetic, to_example
from sqlgrade.metrics import precision_recall, roc_auc
from sqlgrade.model import ModelConfig, build
from sqlgrade.tensor import SeededRng
from sqlgrade.training import TrainConfig, fit_vocab, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--every", type=int, default=5)
    ap.add_argument("--class-weighting", action="store_true")
    ap.add_argument("--no-stop", action="store_true")
    args = ap.parse_args()

    records = generate_synthetic(args.n, args.data_seed)
    vocab = fit_vocab(records)
    config = ModelConfig(vocab_size=len(vocab), seed=args.seed)
    examples = [to_example(r, vocab) for r in records]
    x = np.stack([e.x for e in examples])
    y_correct = np.array([e.y_correct for e in examples]).ravel()
    y_remark = np.stack([e.y_remark for e in examples])

    rng = SeededRng(args.seed)
    net = build(config, rng.child(0))

    def on_epoch(epoch, record):
        if (epoch + 1) % args.every:
            return False
        preds = net.predict_batch(x)
        auc = roc_auc(np.array([p.p_correct for p in preds]), y_correct).auc
        probs = np.array([p.remark_probs for p in preds])
        aps = [precision_recall(probs[:, k], y_remark[:, k]).average_precision for k in range(4)]
        print(f"epoch {epoch + 1:4d} loss {record['loss']:.4f} auc {auc:.4f} macro_ap {np.mean(aps):.4f} "
              + " ".join(f"{a:.3f}" for a in aps), flush=True)
        return not args.no_stop and auc >= 0.95 and np.mean(aps) >= 0.90

    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=args.epochs, batch_size=32, learning_rate=0.001, class_weighting=args.class_weighting)
    history = train(net, examples, cfg, rng.child(1), on_epoch=on_epoch)
    print(f"stopped after {len(history.records)} epochs in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
