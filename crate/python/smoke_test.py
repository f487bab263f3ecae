"""Smoke test for the mstdyn extension module.

Build and run from the repository root:

    cargo build --release -p mstdyn-py
    cp target/release/libmstdyn.so python/mstdyn.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mstdyn  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    star = mstdyn.Tree.from_edges(5, [(0, i) for i in range(1, 5)])
    obs = star.observables()
    check(star.degree == [4, 1, 1, 1, 1], "star degrees")
    check(abs(obs["mol"] - 0.8) < 1e-12, "star MOL from the hub")
    check("n0 -- n1" in star.to_dot(), "DOT export")

    panel = mstdyn.Panel.synthetic(n=15, days=120, seed=3)
    trees, records, skipped = mstdyn.analyze(panel, width=40)
    check(len(trees) == 81 and len(records) == 81 and not skipped, "rolling trees")
    check(all(len(t.edges) == 14 for t in trees), "each tree has n - 1 edges")

    b = {k: 0.3 / k for k in range(1, 100)}
    kernel = mstdyn.Kernel.theoretical(b, alpha_bar=3.07, n=100)
    worst = max(abs(r) for r in kernel.detailed_balance_residuals(3.07).values())
    check(worst < 1e-12, "detailed balance of the theoretical kernel")
    counts = kernel.simulate(steps=20000, seed=1)
    check(counts == kernel.simulate(steps=20000, seed=1), "seeded ladder run is reproducible")
    again = mstdyn.Kernel.from_json(kernel.to_json())
    check(again.p(3, 1) == kernel.p(3, 1), "kernel JSON round trip")

    y = mstdyn.lambda_series(1024, seed=0, noise=0.0)
    fit = mstdyn.fit_lambda_peak(y)
    check(abs(fit["best"]["t_lambda"] - 544) <= 1, "lambda peak location")

    y = mstdyn.nucleation_series(544, seed=0, noise=0.0)
    fit = mstdyn.fit_nucleation(y)
    check(abs(fit["z"] - 2.0) < 0.05, "nucleation exponent")

    check(mstdyn.validate_config("")["width_td"] == 400, "config defaults")
    try:
        mstdyn.validate_config("width_td = 0")
    except mstdyn.ConfigError as e:
        check("width_td" in str(e), "config error names the key")
    else:
        raise SystemExit("FAIL: width 0 accepted")

    with tempfile.TemporaryDirectory() as d:
        prices = os.path.join(d, "prices.csv")
        panel.write_prices(prices)
        reloaded = mstdyn.Panel.from_csv(prices)
        check(reloaded.tickers == panel.tickers, "price CSV round trip")
        manifest = mstdyn.run_pipeline(f"input = {prices}\noutput_dir = {d}/out\nwidth_td = 40\n")
        check(manifest["complete"] and manifest["frames_total"] == 81, "pipeline manifest")

    print("all checks passed")


if __name__ == "__main__":
    main()
