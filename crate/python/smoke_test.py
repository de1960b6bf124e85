"""Quick check that the extension module loads and its main entry points run.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/contact_intensity_py-*.whl
"""

import json
import math
import tempfile

import contact_intensity_py as ci


def main():
    ds = ci.Dataset.simulate("pre", 300, seed=3)
    assert ds.ages == list(range(6, 50))
    assert ds.n_rows > 0
    truth = ds.truth()
    assert truth is not None and len(truth) == 4 * 44 * 44

    with tempfile.TemporaryDirectory() as d:
        ds.write(d)
        again = ci.Dataset.load(d)
        assert again.n_rows == ds.n_rows

    model = ci.Model(ds, m1=10, m2=6)
    x = [0.01 * math.sin(i + 1) for i in range(model.dim)]
    lp, grad = model.log_posterior_grad(x)
    assert math.isfinite(lp) and len(grad) == model.dim
    assert abs(lp - model.log_posterior(x)) < 1e-9 * max(1.0, abs(lp))

    h = 1e-6
    xp = list(x)
    xp[0] += h
    xm = list(x)
    xm[0] -= h
    fd = (model.log_posterior(xp) - model.log_posterior(xm)) / (2 * h)
    assert abs(fd - grad[0]) < 1e-4 * max(1.0, abs(fd)), (fd, grad[0])

    fit = model.sample(chains=2, warmup=40, samples=40, seed=11, max_tree_depth=6)
    nu = fit.parameter("nu")
    assert len(nu) == 2 and len(nu[0]) == 40
    assert all(v > 0 for chain in nu for v in chain)
    diag = json.loads(fit.diagnostics_json())
    elpd, ppc = fit.predictive_check(seed=1)
    mae = fit.mae()
    assert math.isfinite(elpd) and 0.0 <= ppc <= 1.0 and mae >= 0.0

    assert abs(ci.nb_log_pmf(0, 1.0, 1.0) - math.log(0.5)) < 1e-12
    assert ci.r_hat([[0.0, 1.0, 0.0, 1.0], [1.0, 0.0, 1.0, 0.0]]) > 0.0
    assert ci.ess_bulk([[float(i % 7) for i in range(50)]] * 2) > 0.0

    print(f"dim={model.dim} cells={model.n_cells} max_rhat={diag['max_r_hat']:.3f} "
          f"elpd={elpd:.1f} ppc={ppc:.3f} mae={mae:.4f}")
    print("smoke test ok")


if __name__ == "__main__":
    main()
