"""Regenerate the bundled scenario, perturbation and game files.

    python scripts/make_scenarios.py [--out src/mfm/scenarios]

All randomness is seeded so the output is byte-identical across runs.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from mfm.io import dumps

OUT = Path(__file__).resolve().parents[1] / "src" / "mfm" / "scenarios"


def random_kernel(rng, K, size, sharp=2.0):
    k = rng.dirichlet(np.full(size, 1.0 / sharp), K)
    k = np.round(k, 6)
    k[:, -1] = 1.0 - k[:, :-1].sum(axis=1)
    k = np.abs(k)
    return k / k.sum(axis=1, keepdims=True)


def measure_json(points, weights):
    pts = np.atleast_2d(points)
    return {"dim": int(pts.shape[1]), "atoms": [{"x": [float(v) for v in p], "w": float(w)} for p, w in zip(pts, weights)]}


def alpha_json(points, kernels, weights, grid, K, T=1.0):
    return {
        "atoms": [
            {"x0": [float(v) for v in p], "xi": {"K": K, "T": T, "grid": grid, "kernel": k.tolist()}, "w": float(w)}
            for p, k, w in zip(points, kernels, weights)
        ]
    }


def control_json(kernel, grid, T=1.0):
    kernel = np.asarray(kernel, float)
    return {"K": int(kernel.shape[0]), "T": T, "grid": grid, "kernel": kernel.tolist()}


def onehot(K, size, idx):
    k = np.zeros((K, size))
    k[np.arange(K), np.broadcast_to(idx, (K,))] = 1.0
    return k


def uniform_weights(n):
    w = np.full(n, 1.0 / n)
    w[-1] = 1.0 - w[:-1].sum()
    return w


def scenario(name, dyn, points, weights, y0, kernels, zeta, U, V, K, p=2.0, N=128, T=1.0):
    return {
        "name": name,
        "dynamics": dyn,
        "m0": measure_json(points, weights),
        "y0": [float(v) for v in y0],
        "alpha": alpha_json(np.atleast_2d(points), kernels, weights, U, K, T),
        "zeta": control_json(zeta, V, T),
        "T": T,
        "p": p,
        "grids": {"U": U, "V": V},
        "N": N,
    }


def lip(c, B_I, B_II, B_prime):
    return [{"c": c, "B_I": B_I, "B_II": B_II, "B_prime": B_prime}]


U1 = [[-1.0], [0.0], [1.0]]
V1 = [[0.0], [1.0]]
U2 = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]
V2 = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]

DYN_ZERO = {"f_I": ["0"], "f_II": ["0"], "g": ["0"], "A": 1.0, "lipschitz": lip(1e6, 0.0, 0.0, 0.0)}
DYN_LINEAR = {"f_I": ["-x0 + u0"], "f_II": ["0"], "g": ["-y0 + v0"], "A": 1.0, "lipschitz": lip(1e6, 1.0, 0.0, 1.0)}
DYN_C1 = {
    "f_I": ["-0.5*x0 + 0.5*u0 + 0.3*tanh(y0 - mean(0))"],
    "f_II": ["0.2*v0*cos(x0)"],
    "g": ["-0.5*y0 + 0.5*v0 + 0.2*sin(mean(0))"],
    "A": 0.7,
    "lipschitz": lip(1e6, 0.5, 0.2, 0.5),
}
DYN_C2 = {
    "f_I": ["-0.4*x0 + 0.3*x1 + 0.4*u0 + 0.2*tanh(y0 - mean(0))", "-0.3*x0 - 0.4*x1 + 0.4*u1 + 0.1*sin(y1)"],
    "f_II": ["0.1*v0", "0.1*sin(x0)*v1"],
    "g": ["-0.3*y0 + 0.2*mean(1) + 0.3*v0", "-0.3*y1 + 0.2*tanh(y0) + 0.3*v1 - 0.1*sigma_p"],
    "A": 1.0,
    "lipschitz": lip(1e6, 1.0, 0.2, 0.8),
}
DYN_C3 = {
    "f_I": ["tanh(u0 - x0) + 0.2*(y0 - mean(0))", "0.5*sin(t)*u1 - 0.3*x1 + 0.1*mean(0)"],
    "f_II": ["0.2*v0", "-0.1*x1*v0/(1 + sigma_p)"],
    "g": ["-0.4*y0 + 0.3*v0 + 0.2*cos(mean(1))"],
    "A": 1.0,
    "lipschitz": lip(1e6, 1.2, 0.3, 0.6),
}


def build(out: Path):
    rng = np.random.default_rng(20240501)
    files = {}

    pts = np.array([[-1.0], [-0.25], [0.5], [1.5]])
    files["zero_dynamics"] = scenario("zero_dynamics", DYN_ZERO, pts, uniform_weights(4), [0.5], [onehot(4, 3, 1)] * 4, onehot(4, 2, 0), U1, V1, 4)

    pts = rng.normal(size=(10, 1))
    ker = [onehot(8, 3, 2 if i % 2 else 0) for i in range(10)]
    files["decoupled_linear"] = scenario("decoupled_linear", DYN_LINEAR, pts, uniform_weights(10), [1.0], ker, onehot(8, 2, 1), U1, V1, 8)

    K = 8
    pts1 = rng.normal(size=(40, 1))
    ker1 = [random_kernel(rng, K, 3) for _ in range(40)]
    zeta1 = random_kernel(rng, K, 2)
    files["bench_coupled_1d"] = scenario("bench_coupled_1d", DYN_C1, pts1, uniform_weights(40), [0.8], ker1, zeta1, U1, V1, K)

    pts2 = rng.normal(size=(60, 2)) * 0.8
    ker2 = [random_kernel(rng, K, 4) for _ in range(60)]
    zeta2 = random_kernel(rng, K, 3)
    files["bench_coupled_2d"] = scenario("bench_coupled_2d", DYN_C2, pts2, uniform_weights(60), [0.5, -0.4], ker2, zeta2, U2, V2, K)

    pts3 = rng.normal(size=(100, 2)) * 0.6 + np.array([0.5, -0.2])
    w3 = rng.uniform(0.5, 1.5, 100)
    w3 = np.round(w3 / w3.sum(), 12)
    w3[-1] = 1.0 - w3[:-1].sum()
    ker3 = [random_kernel(rng, K, 4) for _ in range(100)]
    zeta3 = random_kernel(rng, K, 2)
    files["bench_mixed_2d"] = scenario("bench_mixed_2d", DYN_C3, pts3, w3, [0.3], ker3, zeta3, U2, V1, K)

    # perturbation pairs: one per channel
    base1 = files["bench_coupled_1d"]
    alt_u = [onehot(K, 3, 2).tolist()] * 40
    pert = {
        "perturb_f": (base1, {"df_I": ["0.3*sin(x0)"], "df_II": ["0.1*cos(t)"]}),
        "perturb_g": (base1, {"dg": ["0.2*tanh(y0) + 0.1"]}),
        "perturb_m0": (base1, {"dm0": [0.4]}),
        "perturb_y0": (base1, {"dy0": [0.5]}),
        "perturb_alpha": (base1, {"dalpha": [control_json(k, U1) for k in alt_u]}),
        "perturb_zeta": (files["bench_coupled_2d"], {"dzeta": control_json(onehot(K, 3, 2), V2)}),
    }
    for name, (base, p) in pert.items():
        files[name] = {**base, "name": name, "perturbation": p}

    # games
    files["game_2x2"] = game(
        "game_2x2",
        {"f_I": ["u0 - x0"], "f_II": ["0.5*v0"], "g": ["v0 - 0.5*y0 + 0.2*mean(0)"], "A": 1.0, "lipschitz": lip(1e6, 1.0, 0.0, 0.5)},
        sigma_L="y0 - 0.5*mean(0)",
        sigma_F="-(mean(0) - y0)*(mean(0) - y0)",
        n_leader=2,
        n_follower=2,
        rng=rng,
    )
    files["game_anticoordination"] = game(
        "game_anticoordination",
        {"f_I": ["u0 - x0"], "f_II": ["0"], "g": ["v0 - y0"], "A": 1.0, "lipschitz": lip(1e6, 1.0, 0.0, 1.0)},
        sigma_L="2*mean(0) - 1.5*y0",
        sigma_F="-(mean(0) - y0)*(mean(0) - y0)",
        n_leader=2,
        n_follower=2,
        rng=rng,
    )
    files["game_3x3"] = game(
        "game_3x3",
        DYN_C1,
        sigma_L="y0 - (mean(0) - 0.3)*(mean(0) - 0.3)",
        sigma_F="-(mean(0) - 0.5*y0)*(mean(0) - 0.5*y0) - 0.1*sigma_p",
        n_leader=3,
        n_follower=3,
        rng=rng,
        U=[[-1.0], [0.0], [1.0]],
    )

    out.mkdir(parents=True, exist_ok=True)
    for name, obj in files.items():
        (out / f"{name}.json").write_text(dumps(obj))
    return sorted(files)


def game(name, dyn, sigma_L, sigma_F, n_leader, n_follower, rng, U=None, K=4):
    U = U or [[0.0], [1.0]]
    V = [[0.0], [1.0]]
    n = 6
    pts = np.round(rng.normal(size=(n, 1)) * 0.5, 6)
    w = uniform_weights(n)
    leaders = [control_json(onehot(K, 2, j % 2) if j < 2 else np.full((K, 2), 0.5), V) for j in range(n_leader)]
    followers = []
    for a in range(n_follower):
        idx = a if a < len(U) else a % len(U)
        followers.append(alpha_json(pts, [onehot(K, len(U), idx)] * n, w, U, K))
    return {
        "name": name,
        "dynamics": dyn,
        "m0": measure_json(pts, w),
        "y0": [0.0],
        "T": 1.0,
        "p": 2.0,
        "grids": {"U": U, "V": V},
        "N": 256,
        "sigma_L": sigma_L,
        "sigma_F": sigma_F,
        "leader_candidates": leaders,
        "follower_candidates": followers,
        "tie_tol": 1e-9,
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    for name in build(args.out):
        print(name)
