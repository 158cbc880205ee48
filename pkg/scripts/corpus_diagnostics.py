"""How hard is the synthetic corpus, and can the surrogate find its boundary clips?

    python scripts/corpus_diagnostics.py --seed 0 --gen '{"hardness": 0.3}'

Trains a clean victim and a surrogate on one generated corpus, then prints
clean accuracy (overall and on the boundary alive clips), how many boundary
clips the surrogate ranks among the k lowest alive scores, and how often the
clean victim already calls triggered rebroadcast clips alive.
"""

import argparse
import json
import warnings


from tcbackdoor import attack, evaluation, nn, synth
from tcbackdoor.trigger import TriggerParams
from tcbackdoor.video import ALIVE, REBROADCAST, filter_by_class


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gen", default="{}", help="GenConfig overrides as JSON")
    ap.add_argument("--alpha", type=float, default=0.4)
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()
    warnings.simplefilter("ignore", attack.PgdMonotonicityWarning)

    overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in json.loads(args.gen).items()}
    cfg = synth.GenConfig(seed=args.seed, **overrides)
    train, test, _, _ = synth.generate(cfg)
    tc = nn.TrainConfig(epochs=args.epochs, seed=1)

    victim = nn.train(tc, nn.ModelConfig.victim(cfg.geometry, seed=1), train)
    test_alive = filter_by_class(test, ALIVE)
    hard_test = [test_alive.items[i] for i in synth.hard_indices(cfg, "test", ALIVE)]
    print(f"clean victim   ACC {evaluation.acc(victim, test):.3f}   boundary-alive ACC {evaluation.acc(victim, hard_test):.3f}")

    sur = attack.train_surrogate(train, nn.TrainConfig(epochs=args.epochs, lr=3e-3, seed=2), seed=2)
    alive = filter_by_class(train, ALIVE)
    scores = attack.alive_scores(sur, alive.videos())
    k = attack.poison_count(args.alpha, len(alive))
    hard = set(synth.hard_indices(cfg, "train", ALIVE))
    picked = set(attack.lowest_scores(scores, k))
    print(f"surrogate      ACC {evaluation.acc(sur, test):.3f}   boundary clips in lowest {k}: {len(hard & picked)}/{len(hard)}")

    rb = filter_by_class(test, REBROADCAST).items
    asr = {d: evaluation.asr(victim, rb, TriggerParams(d, 2)) for d in (0.07, 0.1, 0.2, 0.3)}
    print("clean victim   ASR " + "  ".join(f"d={d}: {v:.2f}" for d, v in asr.items()))


if __name__ == "__main__":
    main()
