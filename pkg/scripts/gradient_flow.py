"""Tabulate |dh_T/dh_k| for a contractive tanh RNN and for GRUs with different update-gate biases.

    python scripts/gradient_flow.py --steps 30 --norm 0.9
"""

import argparse

import numpy as np

from rfcn import recurrent as R
from rfcn.tensor import Tensor, orthogonal


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--norm", type=float, default=0.9, help="spectral norm of the RNN matrix")
    ap.add_argument("--size", type=int, default=8)
    ap.add_argument("--gate-biases", type=float, nargs="+", default=[-8.0, 0.0, 8.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n, T = args.size, args.steps
    theta = orthogonal(rng, (n, n)) * args.norm
    h0 = rng.uniform(-1, 1, n)
    columns = {"tanh rnn": R.gradient_flow_norms(R.SimpleRnnParams(Tensor(theta), Tensor(np.eye(n)), Tensor(np.eye(n))), T, h0),
               f"{args.norm}^(T-k)": [args.norm ** (T - k) for k in range(1, T)]}
    gru = R.GruParams.init(rng, n, n)
    x = Tensor(np.zeros(n))
    for b in args.gate_biases:
        gru.b_z.data[...] = b
        columns[f"gru b_z={b:g}"] = R.state_flow_norms(lambda xx, hp: R.gru_step(gru, xx, hp), x, T, h0)

    print("k".rjust(4) + "".join(name.rjust(16) for name in columns))
    for k in range(1, T):
        print(f"{k:>4}" + "".join(f"{col[k - 1]:>16.3e}" for col in columns.values()))


if __name__ == "__main__":
    main()
