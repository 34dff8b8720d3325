"""Quick check of the Python bindings. Build first:

    pip install --no-build-isolation ./crates/tvvi-py
"""

import json
import tempfile

import tvvi


def close(a, b, tol=1e-8):
    return abs(a - b) <= tol


def main():
    # soft threshold: y = (u - 1) / a above the kink
    p = tvvi.Problem.scalar_family(2.0, 1, 3.0)
    s = tvvi.solve(p)
    assert close(s.y[0], 1.0), s.y
    assert s.sets == "I"
    assert close(tvvi.solve(p, solver="ssn").y[0], 1.0, 5e-3)

    # at the kink the two one-sided derivatives differ
    k = tvvi.Problem.scalar_family(1.0, 1, 1.0)
    sk = tvvi.make_solution(k, [0.0], [[1.0]])
    assert sk.sets == "B"
    assert close(tvvi.directional_derivative(k, sk, [1.0])[0], 1.0)
    assert close(tvvi.directional_derivative(k, sk, [-1.0])[0], 0.0)
    assert close(tvvi.bouligand_element(k, sk, [1.0], b1_mask=1)[0], 1.0)
    assert close(tvvi.bouligand_element(k, sk, [1.0], b1_mask=0)[0], 0.0)
    diff, r_bar = tvvi.frechet_check(k, sk)
    assert not diff and close(r_bar, 1.0, 1e-6)

    psi, w = tvvi.psi_measure([[1.0, 0.0], [0.0, 1.0]])
    assert close(psi, 2 ** -0.5) and len(w) == 2

    out = tvvi.optimize(tvvi.Problem.scalar_family(1.0, 1, 0.0), [1.0], 0.01, [10.0],
                        lower_solver=json.dumps({"kind": "pdhg"}))
    assert close(out["u"][0], 2.0 / 1.01, 1e-4), out["u"]
    assert all(b <= a for a, b in zip(out["f_history"], out["f_history"][1:]))

    g = tvvi.Problem.bingham(9, 10.0)
    assert (g.n, g.m, g.d) == (64, 64, 2)
    with tempfile.TemporaryDirectory() as d:
        back = tvvi.Problem.load(g.save(d))
        assert back.u == g.u

    run = tvvi.bingham_experiment(9, 5e-3)
    assert run["final_f"] < run["initial_f"]
    assert len(run["u"]) == run["side"] ** 2

    try:
        tvvi.solve(p, solver="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad solver name accepted")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
