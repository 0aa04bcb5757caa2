"""
Demo Script for the BMO Martingale Laboratory
Walks through trees, norms, solvers, the spectral radius and the quadratic counterexample at small sizes
"""

import logging

import numpy as np

from components.bmo_analytics import bmo_norm, epsilon_slice, estimate_b, reverse_holder_constant
from components.counterexample import build_scenario, moment_blowup_scan, verify_solution
from components.filtration_tree import coin_martingale, seeded_corpus
from components.inequality_harness import run_corpus, summarize
from components.linear_systems import BUNDLED_LINEAR_CASES, build_linear_case, fundamental, rhi_family
from components.montecarlo_paths import TimeGrid, bundled_spec, simulate
from components.se_bsde_solvers import build_bsde_spec, load_spec_document, solve_bsde
from components.spectral_exponent import operator_matrix, spectral_radius_tree
from config.lab_config import ExponentSettings


class LabDemo:
    """Small end-to-end tour; every step prints one or two lines"""

    def __init__(self, seed: int = 7):
        self.seed = seed
        print("BMO Martingale Laboratory Demo")
        print("=" * 50)

    def demonstrate_trees(self):
        print("\nTREES AND NORMS")
        print("-" * 30)
        m = coin_martingale(depth=4, step=0.5)
        print(f"Coin martingale, depth 4: BMO norm {bmo_norm(m).value:.4f}")
        certificate = epsilon_slice(m, 0.6)
        print(f"epsilon-slicing at 0.6: {certificate.n_slices} slices, valid {certificate.validate()}")
        corpus = seeded_corpus(20, 4, 2, self.seed)
        summary = summarize(run_corpus("fefferman", corpus, seed=self.seed))
        print(f"Fefferman over 20 trees: {summary['passed']}/{summary['count']} passed, "
              f"max ratio {summary['max_ratio']:.3f}")

    def demonstrate_solvers(self):
        print("\nSOLVERS")
        print("-" * 30)
        spec = build_bsde_spec(load_spec_document("bundled:linear-small"))
        Y, _, _, report = solve_bsde(spec)
        print(f"BSDE: converged {report.converged} over {report.n_slices} slices, residual {report.residual:.2e}")
        case = build_linear_case(BUNDLED_LINEAR_CASES["scalar-small"])
        fs = fundamental(case.tree, case.M, D=case.A)
        probes = rhi_family(case.A, case.M, np.random.default_rng(self.seed), count=5)
        print(f"Fundamental solution identity gap {fs.identity_gap():.2e}; "
              f"RHI probes passed {sum(p.passed for p in probes)}/5")

    def demonstrate_spectral(self):
        print("\nSPECTRAL RADIUS")
        print("-" * 30)
        opm = operator_matrix(coin_martingale(depth=3))
        report = spectral_radius_tree(opm)
        print(f"Tree operator dimension {opm.dimension}: nilpotent of index {report.nilpotency_index}, "
              f"r_2 = {report.radius}")

    def demonstrate_paths(self):
        print("\nPATHS")
        print("-" * 30)
        spec = bundled_spec("stopped-time-change")
        ensemble = simulate(spec, TimeGrid.with_step(0.0, 1.0 - 2.0 ** -6, 2.0 ** -9), 5_000, self.seed)
        b = estimate_b(ensemble, stop_rule=spec.stop_rule, settings=ExponentSettings(), seed=self.seed)
        print(f"b(M) bracket [{b.lo:.3f}, {b.hi:.3f}] (exit-time value {np.pi / 2:.4f})")
        brownian = simulate(bundled_spec("brownian-exponential"), TimeGrid(0.0, 1.0, 64), 5_000, self.seed)
        rh = reverse_holder_constant(brownian, 2.0)
        print(f"Reverse Hölder R_2 of exp(W - t/2): {rh.value:.3f} (closed form {np.e:.3f})")

    def demonstrate_counterexample(self):
        print("\nQUADRATIC BSDE COUNTEREXAMPLE")
        print("-" * 30)
        scenario = build_scenario(k=6, n_paths=4_000, seed=self.seed)
        solution = verify_solution(scenario)
        print(f"Stopped fraction {scenario.stopped_fraction:.3f}, RMS residual {solution.rms_residual:.3e}")
        scan = moment_blowup_scan(scenario, [0.0, 1.0, 12.0], seed=self.seed)
        print(scan.frame().to_string(index=False))

    def run(self):
        self.demonstrate_trees()
        self.demonstrate_solvers()
        self.demonstrate_spectral()
        self.demonstrate_paths()
        self.demonstrate_counterexample()
        print("\nDemo complete")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING)
    LabDemo().run()
