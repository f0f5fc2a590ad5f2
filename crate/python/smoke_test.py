"""Smoke test for the relperf extension module.

Build first with `maturin develop -m crates/python/Cargo.toml --features extension-module`
(or `pip install --no-build-isolation ./crates/python`), then run `python python/smoke_test.py`.
"""

import math

import relperf


def main():
    grid = relperf.TimeGrid(1.0, 4)
    agent = relperf.AgentCoeffs.scalar(1.0, 1.0, 0.2, 0.5, 1.0)

    # complete graph on three agents: everyone invests 0.1
    g = relperf.InteractionGraph.complete(3)
    w = g.weights()
    eq = relperf.solve_finite(w, [agent], grid)
    for per_agent in eq.pi:
        for step in per_agent:
            assert abs(step[0] - 0.1) < 1e-8, step
    p = relperf.indifference_finite(eq, [agent], w, grid)
    assert all(abs(x - 1.02) < 1e-8 for x in p), p

    value, exact = relperf.cut_norm([[0.5]], [[0.3]])
    assert exact and abs(value - 0.2) < 1e-15

    sampled = relperf.sample_interaction_graph({"kernel": "product"}, 12, 1.0, 42)
    assert sampled.n == 12
    again = relperf.sample_interaction_graph({"kernel": "product"}, 12, 1.0, 42)
    assert sampled.edges() == again.edges()

    geq = relperf.solve_graphon({"kernel": "constant", "p": 0.5}, 16, [agent], grid)
    pg = relperf.indifference_graphon(geq, {"kernel": "constant", "p": 0.5}, [agent], grid)
    assert max(pg) - min(pg) < 1e-12

    spec = agent.to_dict()
    assert relperf.AgentCoeffs(spec).to_dict() == spec

    report = relperf.run_chaos({
        "graphon": {"kernel": "constant", "p": 0.5},
        "n_schedule": [4, 8],
        "beta_rule": {"rule": "constant", "beta": 1.0},
        "reps": 2,
        "seed": 1,
        "coeffs": spec,
        "tgrid": {"horizon": 1.0, "steps": 4},
        "labels": 16,
        "xi_draws": 10,
    })
    assert len(report["csv"].strip().splitlines()) == 1 + 2 * 2 * 6
    assert all(math.isfinite(r["strategy_error"]) for r in report["per_n"])

    try:
        relperf.AgentCoeffs({"sigma": [1.0]})
    except ValueError as e:
        assert "missing field" in str(e)
    else:
        raise AssertionError("incomplete coefficients were accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
