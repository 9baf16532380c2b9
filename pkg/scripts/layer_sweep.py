"""Per-layer detection AUC on the simulator and on the toy transformer.

    python scripts/layer_sweep.py --n 100
"""
import argparse

from lpsr.detector import GateConfig
from lpsr.evaluation import fmt, layer_sweep
from lpsr.simulator import SimConfig, SimProblemSpec, Simulator, make_sim_problems
from lpsr.toymodel import ModelConfig, ToyTransformer, make_toy_problems


def show(title, sweep):
    print(title)
    print("layer  auc     precision recall  f1      flip_rate")
    for r in sweep.records:
        print(f"{r['layer']:5d}  {fmt(r['auc']):7s} {fmt(r['precision']):9s} {fmt(r['recall']):7s} "
              f"{fmt(r['f1']):7s} {fmt(r['flip_rate'])}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--toy-max-t", type=int, default=32)
    args = ap.parse_args()
    gate = GateConfig()
    sim = Simulator(SimConfig())
    show("simulator (signal at layer 4)",
         layer_sweep(sim, make_sim_problems(sim, SimProblemSpec(n=args.n, seed=3)), gate))
    toy = ToyTransformer(ModelConfig())
    probs = make_toy_problems(toy, args.n, seed=0, max_T=args.toy_max_t)
    show("toy transformer", layer_sweep(toy, probs, gate, max_T=args.toy_max_t))


if __name__ == "__main__":
    main()
