"""Compare the compiled and numpy CTC kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times the CTC forward-backward, one prefix extension sweep and a full
joint beam search per backend, and checks that both backends agree.
"""

import argparse
import timeit

import numpy as np

from narasr import kernels
from narasr.ctc import log_softmax_np, prefix_init
from narasr.decoder import DecodeConfig, ScoreCache, joint_decode
from narasr.vocab import Vocabulary


def workloads(rng):
    vocab = Vocabulary.synthetic(20)
    V, T = vocab.V, 24
    lp = log_softmax_np(rng.normal(scale=2.0, size=(T, V)))
    target = rng.choice(vocab.real_ids, size=8).tolist()
    st = prefix_init(lp)
    cands = np.array(vocab.real_ids, dtype=np.int64)
    att = log_softmax_np(rng.normal(scale=2.0, size=(8, V)))
    cache = ScoreCache(att, 8, vocab.eos_id, vocab.num_real)
    return vocab, lp, target, st, cands, cache


def use(mod):
    kernels.ctc_forward_backward = mod.ctc_forward_backward
    kernels.prefix_extend = mod.prefix_extend


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    vocab, lp, target, st, cands, cache = workloads(np.random.default_rng(0))
    tgt = np.asarray(target, dtype=np.int64)
    cfg = DecodeConfig(beam_width=10)

    cases = {
        "ctc forward-backward (T=24, L=8)": lambda m: m.ctc_forward_backward(lp, tgt, 0),
        "prefix extension sweep (21 candidates)": lambda m: m.prefix_extend(
            lp, st.gamma_n, st.gamma_b, -1, cands, 0),
        "joint_decode (beam 10)": lambda m: joint_decode(lp, cache, cfg, vocab),
    }
    results = {}
    original = kernels.ctc_forward_backward, kernels.prefix_extend
    try:
        for name, mod in backends.items():
            use(mod)
            for case, fn in cases.items():
                timer = timeit.Timer(lambda: fn(mod))
                n, _ = timer.autorange()
                best = min(timer.repeat(repeat=args.repeat, number=n)) / n
                results[case, name] = best
        outs = {name: backends[name].ctc_forward_backward(lp, tgt, 0) for name in backends}
        decoded = {}
        for name, mod in backends.items():
            use(mod)
            decoded[name] = joint_decode(lp, cache, cfg, vocab).tokens
    finally:
        kernels.ctc_forward_backward, kernels.prefix_extend = original

    names = list(backends)
    header = f"{'case':42s}" + "".join(f"{n:>14s}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for case in cases:
        row = f"{case:42s}" + "".join(f"{1e6 * results[case, n]:11.1f} us" for n in names)
        if len(names) == 2:
            row += f"{results[case, 'python'] / results[case, 'cython']:9.1f}x"
        print(row)
    if len(names) == 2:
        (a, ga), (b, gb) = outs["python"], outs["cython"]
        print(f"\nmax |loss diff| {abs(a - b):.2e}, max |grad diff| {np.abs(ga - gb).max():.2e}, "
              f"same decode: {decoded['python'] == decoded['cython']}")


if __name__ == "__main__":
    main()
