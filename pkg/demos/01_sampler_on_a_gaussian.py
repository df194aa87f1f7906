"""The sampler on a target with a known answer.

On U(w) = w^T A w / 2 the chain at temperature T should settle into a
Gaussian with covariance T A^-1.  We run many short chains side by side,
compare the empirical covariance to that value and to the exact
finite-step covariance, then show what T = 0 does.
"""

import numpy as np

from sghmcseg.oracle import QuadraticTarget, discrete_covariance, moment_check, run_analytic_chain

target = QuadraticTarget(np.diag([1.0, 4.0]))
rng = np.random.default_rng(0)

for temp in (0.25, 1.0):
    samples = run_analytic_chain(target, 5000, eta=0.01, mu=0.2, temperature=temp, rng=rng, chains=1000, thin=40)
    rep = moment_check(samples, target, temp, chains=1000)
    print(f"T={temp:g}: {len(samples)} samples")
    print("  empirical covariance\n", np.round(rep["covariance"], 4))
    print("  T A^-1\n", target.covariance(temp))
    print("  finite-step prediction\n", np.round(discrete_covariance(target, 0.01, 0.2, temp), 4))
    print(f"  Frobenius relative error {rep['covariance_rel_error']:.3f}  pass={rep['pass']}")

# at T = 0 the same update is plain momentum descent and ends at the mode
final = run_analytic_chain(target, 10_000, 0.01, 0.2, 0.0, rng, w0=[3.0, -2.0], burn_in=9_999)
print("T=0 end point:", final[-1])
