"""Smoke test for the fedprice_py extension.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/py
"""

import math

import fedprice_py as fp

POPULATION = """
[constants]
alpha = 2.0
beta = 0.0
rounds = 10
local_steps = 5
q_floor = 0.01

[[client]]
d = 100.0
G = 2.0
c = 1.0
v = 0.5
q_max = 1.0

[[client]]
d = 300.0
G = 1.0
c = 3.0
v = 0.0
q_max = 1.0

[[client]]
d = 50.0
G = 4.0
c = 0.5
v = 40.0
q_max = 1.0
"""


def main():
    # Full participation leaves only beta / R, which is zero here.
    assert fp.gap_bound(POPULATION, [1.0, 1.0, 1.0]) == 0.0

    # No intrinsic value: q = P / (2c).
    assert abs(fp.best_response(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1) - 0.5) < 1e-12

    budget = 1.5
    results = {s: fp.solve(POPULATION, budget, s) for s in ("optimal", "uniform", "weighted")}
    for scheme, r in results.items():
        assert len(r["q"]) == 3 and len(r["prices"]) == 3, scheme
        assert abs(r["spend"] - budget) <= 1e-6 * max(1.0, budget), (scheme, r["spend"])
        assert all(0.0 < q <= 1.0 for q in r["q"]), (scheme, r["q"])

    opt = results["optimal"]
    assert opt["lambda_star"] is not None and opt["v_threshold"] is not None
    for scheme in ("uniform", "weighted"):
        other = results[scheme]["bound"]
        assert other is None or opt["bound"] <= other * (1 + 1e-9), (scheme, opt["bound"], other)

    # Clients valuing the model above the threshold pay the server.
    for q, price, v in zip(opt["q"], opt["prices"], (0.5, 0.0, 40.0)):
        if 0.01 < q < 1.0 and not math.isclose(v, opt["v_threshold"]):
            assert (price < 0) == (v > opt["v_threshold"]), (price, v, opt["v_threshold"])

    try:
        fp.solve(POPULATION, budget, "cheapest")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scheme accepted")

    print("fedprice_py smoke test passed:", {s: round(r["bound"], 6) for s, r in results.items()})


if __name__ == "__main__":
    main()
