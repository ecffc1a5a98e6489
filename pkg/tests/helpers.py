import numpy as np

from zslmetric.model import Model, TripletBatch


def random_model(rng, d, p, m, tau=None):
    return Model(
        w_x=rng.normal(size=(d, p)) / np.sqrt(d),
        b_x=rng.normal(scale=0.3, size=p),
        w_a=rng.normal(size=(p, m)) / np.sqrt(p),
        tau=float(rng.uniform(0.5, 2.0)) if tau is None else tau,
    )


def random_batch(rng, n, d, p):
    return TripletBatch(rng.normal(size=(n, d)), rng.uniform(size=(n, p)),
                        rng.choice([-1, 1], size=n))


def differentiable_instance(rng, d=7, p=5, m=3, n=20, min_margin=1e-3, max_tries=1000):
    """Draw (model, batch) until every kink is at least ``min_margin`` away."""
    from zslmetric.objective import kink_margins

    for _ in range(max_tries):
        model = random_model(rng, d, p, m)
        batch = random_batch(rng, n, d, p)
        relu_gap, hinge_gap = kink_margins(batch, model)
        if relu_gap > min_margin and hinge_gap > min_margin:
            return model, batch
    raise RuntimeError("could not draw a differentiable instance")


def relative_error(analytic, numeric, loss):
    """Max elementwise relative error; the denominator is floored at
    ``1e-5 * (1 + |loss|)`` so exactly-zero gradient entries compare by
    absolute error on the scale of the loss."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    floor = 1e-5 * (1.0 + abs(loss))
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den))


# "criterion N: PASS/FAIL ..." lines, printed in the terminal summary
ACCEPTANCE_LINES = []
